//! The discrete-event runner.
//!
//! Time advances in ticks. Within a tick, scheduled events fire first, then
//! every live node steps once in index order with the messages that arrive
//! at that tick. Sends are delayed by at least one tick, so the order in
//! which nodes step never changes what they see.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rapid_core::codec::{self, Envelope};
use rapid_core::engine::{EngineOptions, Mode, NodeRuntime};
use rapid_core::hash::{mix64, Fnv1a, SplitMix64};
use rapid_core::message::{Inbound, Message, MessageKind, Outbound, Target};
use rapid_core::model::{Configuration, ConfigurationId, CutProposal, Endpoint, Member, NodeId};

use crate::report::{NodeSummary, Role, RunReport, Transition, REPORT_SCHEMA_VERSION};
use crate::scenario::{Event, ModeSpec, Scenario};
use crate::SimError;

/// Deterministic id for node `index` of a run seeded with `seed`.
pub fn sim_node_id(seed: u64, index: usize) -> NodeId {
    let mut g = SplitMix64::new(seed ^ mix64(index as u64 + 1));
    NodeId(((g.next_u64() as u128) << 64) | g.next_u64() as u128)
}

pub fn sim_endpoint(index: usize) -> Endpoint {
    Endpoint::new(
        format!("10.{}.{}.{}", (index >> 16) & 0xff, (index >> 8) & 0xff, index & 0xff),
        7000,
    )
    .expect("valid endpoint")
}

struct SimNode {
    rt: Option<NodeRuntime>,
    role: Role,
    member: Member,
    crashed: bool,
    faulty: bool,
    ingress: f64,
    egress: f64,
    sizes: Vec<usize>,
    configs: Vec<ConfigurationId>,
    installed: BTreeSet<ConfigurationId>,
    monitoring_sent: u64,
    member_ticks: u64,
}

#[derive(Default)]
struct TransitionInfo {
    to: ConfigurationId,
    size: usize,
    removals: usize,
    joins: usize,
    tick: u64,
    digest: u64,
}

/// Uniform draw in [0, 1) from a SplitMix64 stream.
fn unit(g: &mut SplitMix64) -> f64 {
    (g.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub struct Simulation {
    sc: Scenario,
    now: u64,
    nodes: Vec<SimNode>,
    by_id: HashMap<NodeId, usize>,
    by_addr: HashMap<Endpoint, usize>,
    queue: BTreeMap<u64, Vec<(usize, Inbound)>>,
    links: HashMap<(usize, usize), SplitMix64>,
    partition: Option<(u64, Option<u64>, HashMap<usize, usize>)>,
    transitions: BTreeMap<ConfigurationId, TransitionInfo>,
    proposals: BTreeMap<ConfigurationId, BTreeMap<u64, usize>>,
    sent: BTreeMap<MessageKind, u64>,
    dropped: u64,
    max_monitoring: u64,
    timeseries: Vec<(u64, usize, usize)>,
    last_change: Option<u64>,
    wire_check: bool,
    wire_error: Option<String>,
}

impl Simulation {
    pub fn new(sc: Scenario) -> Result<Self, SimError> {
        sc.validate()?;
        let mut sim = Simulation {
            now: 0,
            nodes: Vec::new(),
            by_id: HashMap::new(),
            by_addr: HashMap::new(),
            queue: BTreeMap::new(),
            links: HashMap::new(),
            partition: None,
            transitions: BTreeMap::new(),
            proposals: BTreeMap::new(),
            sent: BTreeMap::new(),
            dropped: 0,
            max_monitoring: 0,
            timeseries: Vec::new(),
            last_change: None,
            wire_check: false,
            wire_error: None,
            sc,
        };
        let members: Vec<Member> = (0..sim.sc.n)
            .map(|i| Member::new(sim_node_id(sim.sc.seed, i), sim_endpoint(i)))
            .collect();
        let config = Arc::new(
            Configuration::bootstrap(members.clone(), sim.sc.params).map_err(|e| SimError::Invalid(e.to_string()))?,
        );
        let aux_count = match sim.sc.mode {
            ModeSpec::Decentralized => 0,
            ModeSpec::Centralized { aux } => aux,
        };
        // Auxiliary nodes get indices after every possible joiner.
        let joiners: usize = sim
            .sc
            .events
            .iter()
            .map(|e| match e {
                Event::JoinWave { count, .. } => *count,
                _ => 0,
            })
            .sum();
        let aux: Vec<Member> = (0..aux_count)
            .map(|j| {
                let i = sim.sc.n + joiners + j;
                Member::new(sim_node_id(sim.sc.seed, i), sim_endpoint(i))
            })
            .collect();
        for m in &members {
            let mode = if aux_count > 0 {
                Mode::CentralizedMember
            } else {
                Mode::Decentralized
            };
            let rt = NodeRuntime::bootstrap(m.clone(), config.clone(), sim.options(mode, &aux), 0);
            sim.add_node(m.clone(), Some(rt), Role::Member);
        }
        // Reserve joiner slots so indices are stable.
        for j in 0..joiners {
            let i = sim.sc.n + j;
            let m = Member::new(sim_node_id(sim.sc.seed, i), sim_endpoint(i));
            sim.add_node(m, None, Role::Joiner);
        }
        for a in &aux {
            let rt = NodeRuntime::bootstrap(a.clone(), config.clone(), sim.options(Mode::CentralizedAux, &aux), 0);
            sim.add_node(a.clone(), Some(rt), Role::Aux);
        }
        Ok(sim)
    }

    fn options(&self, mode: Mode, aux: &[Member]) -> EngineOptions {
        EngineOptions {
            mode,
            aux: aux.to_vec(),
            implicit_local_only: self.sc.implicit_local_only,
            fanout: self.sc.fanout,
            seed: self.sc.seed,
            ..EngineOptions::default()
        }
    }

    fn add_node(&mut self, member: Member, rt: Option<NodeRuntime>, role: Role) {
        let i = self.nodes.len();
        self.by_id.insert(member.id, i);
        self.by_addr.insert(member.endpoint.clone(), i);
        self.nodes.push(SimNode {
            rt,
            role,
            member,
            crashed: false,
            faulty: false,
            ingress: 0.0,
            egress: 0.0,
            sizes: Vec::new(),
            configs: Vec::new(),
            installed: BTreeSet::new(),
            monitoring_sent: 0,
            member_ticks: 0,
        });
    }

    fn link(&mut self, src: usize, dst: usize) -> &mut SplitMix64 {
        let seed = self.sc.seed;
        self.links.entry((src, dst)).or_insert_with(|| {
            let mut h = Fnv1a::new();
            h.write_u64(seed).write_u64(src as u64).write_u64(dst as u64);
            SplitMix64::new(h.finish())
        })
    }

    fn apply_events(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let mut spawned = self
            .nodes
            .iter()
            .filter(|n| n.role == Role::Joiner && n.rt.is_some())
            .count();
        for e in self.sc.events.clone() {
            match e {
                Event::Crash { tick, nodes } if tick == now => {
                    for i in nodes {
                        self.nodes[i].crashed = true;
                    }
                }
                Event::JoinWave { tick, count, seed } if tick == now => {
                    let seed_ep = self.nodes[seed].member.endpoint.clone();
                    for _ in 0..count {
                        let i = self.sc.n + spawned;
                        spawned += 1;
                        let m = self.nodes[i].member.clone();
                        let opts = self.options(Mode::Decentralized, &[]);
                        self.nodes[i].rt = Some(NodeRuntime::joining(m, seed_ep.clone(), opts));
                    }
                }
                Event::Link {
                    tick,
                    until,
                    nodes,
                    ingress,
                    egress,
                } => {
                    for i in nodes {
                        if tick == now {
                            self.nodes[i].faulty = true;
                            self.nodes[i].ingress = ingress;
                            self.nodes[i].egress = egress;
                        }
                        if until == Some(now) {
                            self.nodes[i].ingress = 0.0;
                            self.nodes[i].egress = 0.0;
                        }
                    }
                }
                Event::FlipFlop {
                    tick,
                    until,
                    nodes,
                    period,
                    drop,
                } => {
                    let active = now >= tick && until.is_none_or(|u| now < u);
                    let blackout = active && ((now - tick) / period).is_multiple_of(2);
                    for i in nodes {
                        if now >= tick {
                            self.nodes[i].faulty = true;
                        }
                        if active || until == Some(now) {
                            self.nodes[i].ingress = if blackout { drop } else { 0.0 };
                        }
                    }
                }
                Event::Partition { tick, until, groups } if tick == now => {
                    let mut g = HashMap::new();
                    for (gi, grp) in groups.iter().enumerate() {
                        for i in grp {
                            g.insert(*i, gi + 1);
                        }
                    }
                    self.partition = Some((tick, until, g));
                }
                Event::Leave { tick, node } if tick == now => {
                    if let Some(rt) = self.nodes[node].rt.as_mut() {
                        let out = rt.leave(now);
                        self.dispatch(node, out);
                    }
                }
                _ => {}
            }
        }
        if let Some((_, Some(until), _)) = &self.partition {
            if *until <= now {
                self.partition = None;
            }
        }
        Ok(())
    }

    fn partitioned(&self, a: usize, b: usize) -> bool {
        match &self.partition {
            Some((_, _, g)) => g.get(&a).copied().unwrap_or(0) != g.get(&b).copied().unwrap_or(0),
            None => false,
        }
    }

    fn dispatch(&mut self, src: usize, out: Vec<Outbound>) {
        let from = self.nodes[src].member.id;
        let mut monitoring = 0u64;
        for o in out {
            let kind = o.msg.kind();
            *self.sent.entry(kind).or_default() += 1;
            if matches!(kind, MessageKind::Probe | MessageKind::ProbeAck) {
                monitoring += 1;
            }
            let dst = match &o.to {
                Target::Node(id) => self.by_id.get(id).copied(),
                Target::Addr(ep) => self.by_addr.get(ep).copied(),
            };
            let Some(dst) = dst else {
                self.dropped += 1;
                continue;
            };
            let (egress, ingress) = (self.nodes[src].egress, self.nodes[dst].ingress);
            let (dmin, dmax) = (self.sc.link.delay_min, self.sc.link.delay_max);
            let cut_off = self.partitioned(src, dst);
            let g = self.link(src, dst);
            let lost_out = unit(g) < egress;
            let lost_in = unit(g) < ingress;
            let delay = dmin + g.next_u64() % (dmax - dmin + 1);
            if lost_out || lost_in || cut_off {
                self.dropped += 1;
                continue;
            }
            let msg = if self.wire_check {
                self.through_wire(src, o.msg)
            } else {
                o.msg
            };
            self.queue
                .entry(self.now + delay)
                .or_default()
                .push((dst, Inbound { from, msg }));
        }
        self.max_monitoring = self.max_monitoring.max(monitoring);
        self.nodes[src].monitoring_sent += monitoring;
    }

    fn collect(&mut self, i: usize) -> Result<(), SimError> {
        let now = self.now;
        let Some(rt) = self.nodes[i].rt.as_mut() else {
            return Ok(());
        };
        let events = rt.drain_events();
        let proposals = rt.drain_proposals();
        for p in proposals {
            *self
                .proposals
                .entry(p.config_id)
                .or_default()
                .entry(p.digest().0)
                .or_default() += 1;
        }
        for ev in events {
            let cfg = &ev.configuration;
            let node = &mut self.nodes[i];
            if !node.installed.insert(cfg.id) {
                return Err(SimError::Invariant(format!(
                    "node {i} received the view-change callback twice for configuration {}",
                    cfg.id
                )));
            }
            node.configs.push(cfg.id);
            node.sizes.push(cfg.len());
            self.timeseries.push((now, i, cfg.len()));
            self.last_change = Some(now);
            if let (Some(prev), Some(cut)) = (ev.previous, &ev.cut) {
                self.record_transition(i, prev, cfg, cut)?;
            }
        }
        Ok(())
    }

    fn record_transition(
        &mut self,
        node: usize,
        prev: ConfigurationId,
        cfg: &Configuration,
        cut: &CutProposal,
    ) -> Result<(), SimError> {
        let digest = cut.digest().0;
        match self.transitions.get(&prev) {
            Some(t) if t.to != cfg.id || t.digest != digest => Err(SimError::Invariant(format!(
                "agreement violated: node {node} moved {prev} -> {} but another node moved {prev} -> {}",
                cfg.id, t.to
            ))),
            Some(_) => Ok(()),
            None => {
                self.transitions.insert(
                    prev,
                    TransitionInfo {
                        to: cfg.id,
                        size: cfg.len(),
                        removals: cut.removals.len(),
                        joins: cut.joins.len(),
                        tick: self.now,
                        digest,
                    },
                );
                Ok(())
            }
        }
    }

    /// Passes every delivered message through the wire encoding, delivering
    /// the decoded copy. Slower; a message that does not survive the round
    /// trip aborts the run.
    pub fn with_wire_check(mut self) -> Self {
        self.wire_check = true;
        self
    }

    fn through_wire(&mut self, src: usize, msg: Arc<Message>) -> Arc<Message> {
        let m = &self.nodes[src].member;
        let env = Envelope::new(m.id, m.endpoint.clone(), (*msg).clone());
        match codec::encode(&env).and_then(|b| codec::decode(&b)) {
            Ok(back) if back == env => Arc::new(back.msg),
            Ok(_) => {
                self.wire_error
                    .get_or_insert_with(|| format!("{:?} changed on the wire", msg.kind()));
                msg
            }
            Err(e) => {
                self.wire_error
                    .get_or_insert_with(|| format!("{:?} failed the wire round trip: {e}", msg.kind()));
                msg
            }
        }
    }

    /// Runs one tick.
    pub fn tick(&mut self) -> Result<(), SimError> {
        self.apply_events()?;
        let mut inboxes: Vec<Vec<Inbound>> = vec![Vec::new(); self.nodes.len()];
        if let Some(batch) = self.queue.remove(&self.now) {
            for (dst, m) in batch {
                inboxes[dst].push(m);
            }
        }
        for (i, inbox) in inboxes.into_iter().enumerate() {
            if self.nodes[i].crashed {
                self.dropped += inbox.len() as u64;
                continue;
            }
            let now = self.now;
            let Some(rt) = self.nodes[i].rt.as_mut() else { continue };
            let out = rt.step(now, inbox);
            if rt.is_active() && rt.configuration().is_some() {
                self.nodes[i].member_ticks += 1;
            }
            self.collect(i)?;
            self.dispatch(i, out);
        }
        if let Some(e) = self.wire_error.take() {
            return Err(SimError::Invariant(e));
        }
        self.now += 1;
        Ok(())
    }

    pub fn run(mut self) -> Result<RunReport, SimError> {
        while self.now <= self.sc.duration {
            self.tick()?;
        }
        Ok(self.report())
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn runtime(&self, i: usize) -> Option<&NodeRuntime> {
        self.nodes.get(i).and_then(|n| n.rt.as_ref())
    }

    fn report(&self) -> RunReport {
        // The chain of decided transitions from the initial configuration.
        let mut transitions = Vec::new();
        for (from, t) in &self.transitions {
            let by_digest = self.proposals.get(from);
            let distinct = by_digest.map_or(0, |m| m.len());
            let dissent = by_digest.map_or(0, |m| m.iter().filter(|(d, _)| **d != t.digest).map(|(_, c)| *c).sum());
            transitions.push(Transition {
                from: *from,
                to: t.to,
                size: t.size,
                removals: t.removals,
                joins: t.joins,
                tick: t.tick,
                distinct_proposals: distinct,
                dissenting_nodes: dissent,
            });
        }
        transitions.sort_by_key(|t| (t.tick, t.from));
        let conflicts = self.proposals.values().filter(|m| m.len() > 1).count();
        let mut nodes = Vec::new();
        let mut totals = (0u64, 0u64, 0u64, 0u64);
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(rt) = &n.rt {
                let c = rt.counters();
                totals.0 += c.classic_rounds + rt.consensus().map_or(0, |x| x.paxos().rounds_started);
                totals.1 += c.alerts_raised;
                totals.2 += c.implicit_alerts;
                totals.3 += c.reinforcements;
            } else {
                continue;
            }
            let rt = n.rt.as_ref().expect("spawned");
            let in_final =
                rt.configuration().is_some_and(|c| c.contains(n.member.id)) && rt.departed_at().is_none() && !n.crashed;
            nodes.push(NodeSummary {
                node: i,
                role: n.role,
                crashed: n.crashed,
                faulty: n.faulty,
                departed_at: rt.departed_at(),
                sizes: n.sizes.clone(),
                configs: n.configs.clone(),
                in_final_view: in_final,
            });
        }
        let mean_monitoring = self
            .nodes
            .iter()
            .filter(|n| n.member_ticks > 0)
            .map(|n| n.monitoring_sent as f64 / n.member_ticks as f64)
            .fold(0.0, f64::max);
        let unique: BTreeSet<usize> = self.nodes.iter().flat_map(|n| n.sizes.iter().copied()).collect();
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            duration: self.sc.duration,
            nodes,
            transitions,
            unique_sizes: unique.into_iter().collect(),
            conflicts,
            classic_rounds: totals.0,
            messages_sent: self.sent.iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect(),
            messages_dropped: self.dropped,
            max_monitoring_per_tick: self.max_monitoring,
            mean_monitoring_per_tick: mean_monitoring,
            alerts_raised: totals.1,
            implicit_alerts: totals.2,
            reinforcements: totals.3,
            last_change_tick: self.last_change,
            timeseries: self.timeseries.clone(),
        }
    }
}

/// Runs a scenario to completion.
pub fn run(sc: &Scenario) -> Result<RunReport, SimError> {
    Simulation::new(sc.clone())?.run()
}
