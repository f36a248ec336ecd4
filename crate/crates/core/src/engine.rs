//! Per-node protocol runtime.
//!
//! [`NodeRuntime::step`] is a pure transition `(now, inbox) -> outbox`: it
//! never reads a clock or touches the network, so the same code runs under
//! the simulator and the loopback transport.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{ConsensusMsg, Dest, FastPaxos, Outgoing};
use crate::cut::{CutDetectionState, SubjectKey};
use crate::hash::{mix64, Fnv1a};
use crate::message::{Inbound, Message, Outbound, Target};
use crate::model::{
    Alert, Configuration, ConfigurationId, CutProposal, Endpoint, Member, NodeId, ProtocolParams, ViewChangeEvent,
};
use crate::monitor::{DefaultProbeDetector, EdgeMonitor, Verdict};
use crate::topology::KRingTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every member runs cut detection and consensus.
    Decentralized,
    /// A monitored member that reports alerts to the auxiliary ensemble and
    /// learns view changes from it.
    CentralizedMember,
    /// A member of the auxiliary ensemble: runs cut detection on reported
    /// alerts and consensus among the ensemble only.
    CentralizedAux,
}

pub type MonitorFactory = fn(&ProtocolParams) -> Box<dyn EdgeMonitor>;

fn default_monitor(p: &ProtocolParams) -> Box<dyn EdgeMonitor> {
    Box::new(DefaultProbeDetector::from_params(p))
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub mode: Mode,
    /// The auxiliary ensemble in centralized mode.
    pub aux: Vec<Member>,
    /// Apply implicit alerts locally without disseminating them.
    pub implicit_local_only: bool,
    /// Gossip fan-out; `None` means `ceil(log2 n) + 2`.
    pub fanout: Option<usize>,
    /// Ticks between unconditional pushes of the local vote aggregate.
    pub vote_push_interval: u64,
    /// Ticks a joiner waits for progress before starting over.
    pub join_timeout: u64,
    /// Ticks between configuration probes of the ensemble (centralized members).
    pub sync_interval: u64,
    /// Joins are held back until a configuration would reach this size.
    pub bootstrap_min: usize,
    /// Alert batches are flushed early once this many alerts are queued.
    pub max_batch: usize,
    pub seed: u64,
    pub monitor: MonitorFactory,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            mode: Mode::Decentralized,
            aux: Vec::new(),
            implicit_local_only: false,
            fanout: None,
            vote_push_interval: 4,
            join_timeout: 40,
            sync_interval: 5,
            bootstrap_min: 3,
            max_batch: 64,
            seed: 0,
            monitor: default_monitor,
        }
    }
}

/// `ceil(log2 n) + 2`, capped at the number of peers.
pub fn gossip_fanout(n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let log2 = usize::BITS - (n - 1).leading_zeros();
    (log2 as usize + 2).min(n - 1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineCounters {
    pub alerts_raised: u64,
    pub implicit_alerts: u64,
    pub reinforcements: u64,
    pub proposals: u64,
    pub decisions: u64,
    pub classic_rounds: u64,
    pub catchups_applied: u64,
    pub join_requests: u64,
    pub join_retries: u64,
    pub stale_messages: u64,
    pub buffered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Status {
    Joining {
        seed: Endpoint,
        deadline: u64,
        last_request: Option<u64>,
    },
    Active,
    Departed,
}

#[derive(Debug)]
struct Monitor {
    detector: Box<dyn EdgeMonitor>,
    /// Outstanding probes: sequence number to send tick.
    pending: BTreeMap<u64, u64>,
    alerted: bool,
}

#[derive(Debug)]
struct View {
    config: Arc<Configuration>,
    cut: CutDetectionState,
    consensus: Option<FastPaxos>,
    voters: Arc<[NodeId]>,
    /// Distinct subjects (self excluded) with the rings this node observes them on.
    subjects: Vec<(NodeId, Vec<usize>)>,
    /// Distinct observers, for leave notices.
    observers: Vec<NodeId>,
    monitors: BTreeMap<NodeId, Monitor>,
    outbox: Vec<Alert>,
    last_flush: u64,
    seen: HashSet<u64>,
    pending_joiners: BTreeMap<NodeId, Member>,
    votes_dirty: bool,
    last_vote_push: u64,
    next_probe: u64,
}

const HISTORY_LIMIT: usize = 256;
const FUTURE_LIMIT: usize = 8192;
const FUTURE_TTL: u64 = 100;

/// One process of the membership service.
#[derive(Debug)]
pub struct NodeRuntime {
    me: Member,
    opts: EngineOptions,
    rng: ChaCha8Rng,
    status: Status,
    view: Option<View>,
    /// Decided cuts in order; entry `(c, cut)` took configuration `c` to the next.
    history: VecDeque<(ConfigurationId, CutProposal)>,
    future: Vec<(u64, Inbound)>,
    events: Vec<ViewChangeEvent>,
    proposals: Vec<CutProposal>,
    local: VecDeque<Inbound>,
    out: Vec<Outbound>,
    counters: EngineCounters,
    last_sync_request: Option<u64>,
    catchup_sent: HashMap<NodeId, u64>,
    probe_seq: u64,
    gossip_seq: u64,
    departed_at: Option<u64>,
}

impl NodeRuntime {
    fn new(me: Member, opts: EngineOptions, status: Status) -> Self {
        let mut h = Fnv1a::new();
        h.write_u64(opts.seed).write_u128(me.id.0);
        NodeRuntime {
            rng: ChaCha8Rng::seed_from_u64(h.finish()),
            me,
            opts,
            status,
            view: None,
            history: VecDeque::new(),
            future: Vec::new(),
            events: Vec::new(),
            proposals: Vec::new(),
            local: VecDeque::new(),
            out: Vec::new(),
            counters: EngineCounters::default(),
            last_sync_request: None,
            catchup_sent: HashMap::new(),
            probe_seq: 0,
            gossip_seq: 0,
            departed_at: None,
        }
    }

    /// A process that starts inside `config` (or, as an auxiliary node,
    /// manages it). Emits the initial view as its first event.
    pub fn bootstrap(me: Member, config: Arc<Configuration>, opts: EngineOptions, now: u64) -> Self {
        assert!(
            opts.mode == Mode::CentralizedAux || config.contains(me.id),
            "bootstrap member must belong to the configuration"
        );
        let mut rt = Self::new(me, opts, Status::Active);
        rt.enter_view(config, None, None, now);
        rt
    }

    /// A process that will join through `seed` on its first step.
    pub fn joining(me: Member, seed: Endpoint, opts: EngineOptions) -> Self {
        Self::new(
            me,
            opts,
            Status::Joining {
                seed,
                deadline: 0,
                last_request: None,
            },
        )
    }

    pub fn id(&self) -> NodeId {
        self.me.id
    }

    pub fn member(&self) -> &Member {
        &self.me
    }

    pub fn mode(&self) -> Mode {
        self.opts.mode
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    pub fn configuration(&self) -> Option<&Arc<Configuration>> {
        self.view.as_ref().map(|v| &v.config)
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn is_joining(&self) -> bool {
        matches!(self.status, Status::Joining { .. })
    }

    pub fn departed_at(&self) -> Option<u64> {
        self.departed_at
    }

    pub fn counters(&self) -> EngineCounters {
        self.counters
    }

    pub fn cut_state(&self) -> Option<&CutDetectionState> {
        self.view.as_ref().map(|v| &v.cut)
    }

    pub fn consensus(&self) -> Option<&FastPaxos> {
        self.view.as_ref().and_then(|v| v.consensus.as_ref())
    }

    /// View changes since the last drain, oldest first.
    pub fn drain_events(&mut self) -> Vec<ViewChangeEvent> {
        std::mem::take(&mut self.events)
    }

    /// Cut proposals this node fed into consensus since the last drain.
    pub fn drain_proposals(&mut self) -> Vec<CutProposal> {
        std::mem::take(&mut self.proposals)
    }

    /// Voluntary departure: asks this node's observers to report it, then
    /// stops participating.
    pub fn leave(&mut self, now: u64) -> Vec<Outbound> {
        if let Some(v) = &self.view {
            let msg = Arc::new(Message::Leave { config_id: v.config.id });
            for o in v.observers.clone() {
                self.send(o, msg.clone());
            }
        }
        self.depart(now);
        std::mem::take(&mut self.out)
    }

    /// Advances the runtime to logical time `now`, handling `inbox` first.
    pub fn step(&mut self, now: u64, inbox: Vec<Inbound>) -> Vec<Outbound> {
        if self.status == Status::Departed {
            return Vec::new();
        }
        self.local.extend(inbox);
        self.drain_local(now);
        self.on_tick(now);
        self.drain_local(now);
        std::mem::take(&mut self.out)
    }

    fn drain_local(&mut self, now: u64) {
        while let Some(m) = self.local.pop_front() {
            if self.status == Status::Departed {
                self.local.clear();
                return;
            }
            self.handle(now, m);
            self.check_decision(now);
        }
    }

    fn send(&mut self, to: NodeId, msg: Arc<Message>) {
        if to == self.me.id {
            self.local.push_back(Inbound { from: to, msg });
        } else {
            self.out.push(Outbound {
                to: Target::Node(to),
                msg,
            });
        }
    }

    fn send_addr(&mut self, to: &Endpoint, msg: Message) {
        self.out.push(Outbound {
            to: Target::Addr(to.clone()),
            msg: Arc::new(msg),
        });
    }

    fn fanout(&self, n: usize) -> usize {
        self.opts.fanout.unwrap_or_else(|| gossip_fanout(n))
    }

    /// Up to `k` distinct random peers from `pool`, excluding self and `skip`.
    fn pick_peers(&mut self, pool: &[NodeId], k: usize, skip: Option<NodeId>) -> Vec<NodeId> {
        let candidates: Vec<NodeId> = pool
            .iter()
            .copied()
            .filter(|id| *id != self.me.id && Some(*id) != skip)
            .collect();
        let k = k.min(candidates.len());
        sample(&mut self.rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    }

    fn current_id(&self) -> Option<ConfigurationId> {
        self.view.as_ref().map(|v| v.config.id)
    }

    fn in_history(&self, id: ConfigurationId) -> bool {
        self.history.iter().any(|(c, _)| *c == id)
    }

    fn depart(&mut self, now: u64) {
        self.status = Status::Departed;
        self.departed_at = Some(now);
        self.local.clear();
        self.future.clear();
    }

    // ---- view installation ----

    fn enter_view(
        &mut self,
        config: Arc<Configuration>,
        previous: Option<ConfigurationId>,
        cut: Option<CutProposal>,
        now: u64,
    ) {
        let topology = Arc::new(KRingTopology::build(&config));
        let old = self.view.take();
        let mode = self.opts.mode;
        let voters: Arc<[NodeId]> = match mode {
            Mode::Decentralized => config.node_ids().into(),
            Mode::CentralizedAux | Mode::CentralizedMember => {
                let mut ids: Vec<NodeId> = self.opts.aux.iter().map(|m| m.id).collect();
                ids.sort();
                ids.into()
            }
        };
        let consensus = match mode {
            Mode::CentralizedMember => None,
            _ => Some(FastPaxos::new(
                self.me.id,
                config.clone(),
                voters.clone(),
                config.params.fast_round_timeout,
            )),
        };
        let mut subjects: Vec<(NodeId, Vec<usize>)> = Vec::new();
        let mut observers: Vec<NodeId> = Vec::new();
        if mode != Mode::CentralizedAux {
            let subs = topology.subjects_of(self.me.id).unwrap_or_default();
            let mut grouped: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
            for (ring, s) in subs.into_iter().enumerate() {
                if s != self.me.id {
                    grouped.entry(s).or_default().push(ring);
                }
            }
            subjects = grouped.into_iter().collect();
            observers = topology.observers_of(self.me.id).unwrap_or_default();
            observers.sort();
            observers.dedup();
            observers.retain(|o| *o != self.me.id);
        }
        let mut old_monitors = BTreeMap::new();
        let mut old_joiners = BTreeMap::new();
        if let Some(v) = old {
            old_monitors = v.monitors;
            old_joiners = v.pending_joiners;
            if let Some(c) = &v.consensus {
                self.counters.classic_rounds += c.paxos().rounds_started;
            }
        }
        let params = config.params;
        let mut monitors = BTreeMap::new();
        for (s, _) in &subjects {
            let m = match old_monitors.remove(s) {
                Some(mut m) => {
                    m.alerted = false;
                    m
                }
                None => Monitor {
                    detector: (self.opts.monitor)(&params),
                    pending: BTreeMap::new(),
                    alerted: false,
                },
            };
            monitors.insert(*s, m);
        }
        let view = View {
            cut: CutDetectionState::new(config.clone(), topology),
            config: config.clone(),
            consensus,
            voters,
            subjects,
            observers,
            monitors,
            outbox: Vec::new(),
            last_flush: now,
            seen: HashSet::new(),
            pending_joiners: BTreeMap::new(),
            votes_dirty: false,
            last_vote_push: now,
            next_probe: now,
        };
        self.view = Some(view);
        // Joiners whose intent this node relayed learn the outcome from us.
        for (id, m) in old_joiners {
            let msg = if config.contains(id) {
                Message::ViewInstall {
                    configuration: config.clone(),
                }
            } else {
                Message::JoinRetry { config_id: config.id }
            };
            self.send_addr(&m.endpoint, msg);
        }
        self.events.push(ViewChangeEvent {
            previous,
            configuration: config.clone(),
            cut,
        });
        // Replay messages that arrived ahead of this configuration.
        let (ready, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.future)
            .into_iter()
            .filter(|(t, _)| now.saturating_sub(*t) <= FUTURE_TTL)
            .partition(|(_, m)| message_config(&m.msg) == Some(config.id));
        self.future = keep;
        self.local.extend(ready.into_iter().map(|(_, m)| m));
    }

    /// Moves to the successor configuration produced by `cut`.
    fn apply_decided(&mut self, cut: CutProposal, now: u64) {
        let Some(v) = &self.view else { return };
        if cut.config_id != v.config.id {
            return;
        }
        let next = match v.config.apply_cut(&cut) {
            Ok(c) => Arc::new(c),
            Err(e) => {
                log::error!("decided cut does not apply: {e}");
                return;
            }
        };
        let prev = v.config.id;
        self.history.push_back((prev, cut.clone()));
        if self.history.len() > HISTORY_LIMIT {
            self.history.pop_front();
        }
        if self.opts.mode == Mode::CentralizedAux {
            // Notify every member of the old configuration, removed ones included.
            let msg = Arc::new(Message::Catchup {
                chain: vec![cut.clone()],
            });
            for id in v.config.node_ids() {
                self.send(id, msg.clone());
            }
        }
        if self.opts.mode != Mode::CentralizedAux && !next.contains(self.me.id) {
            if let Some(old) = self.view.take() {
                if let Some(c) = &old.consensus {
                    self.counters.classic_rounds += c.paxos().rounds_started;
                }
            }
            self.depart(now);
            return;
        }
        self.enter_view(next, Some(prev), Some(cut), now);
    }

    fn check_decision(&mut self, now: u64) {
        let decided = self
            .view
            .as_mut()
            .and_then(|v| v.consensus.as_mut())
            .and_then(|c| c.take_decision());
        if let Some(cut) = decided {
            self.counters.decisions += 1;
            self.apply_decided(cut, now);
        }
    }

    // ---- configuration comparison and catch-up ----

    /// Reacts to a peer naming configuration `theirs`.
    fn compare_config(&mut self, from: NodeId, theirs: ConfigurationId, now: u64) {
        let Some(mine) = self.current_id() else { return };
        if theirs == mine || from == self.me.id {
            return;
        }
        if self.in_history(theirs) {
            self.send_catchup(from, theirs, now);
        } else {
            self.request_sync(from, now);
        }
    }

    fn send_catchup(&mut self, to: NodeId, from_config: ConfigurationId, now: u64) {
        if self.catchup_sent.get(&to).is_some_and(|t| now < t + 3) {
            return;
        }
        let Some(start) = self.history.iter().position(|(c, _)| *c == from_config) else {
            return;
        };
        self.catchup_sent.insert(to, now);
        let chain: Vec<CutProposal> = self
            .history
            .iter()
            .skip(start)
            .take(64)
            .map(|(_, c)| c.clone())
            .collect();
        self.send(to, Arc::new(Message::Catchup { chain }));
    }

    fn request_sync(&mut self, to: NodeId, now: u64) {
        if self.last_sync_request.is_some_and(|t| t >= now) {
            return;
        }
        let Some(mine) = self.current_id() else { return };
        self.last_sync_request = Some(now);
        self.send(to, Arc::new(Message::SyncRequest { config_id: mine }));
    }

    fn buffer_future(&mut self, now: u64, from: NodeId, msg: Arc<Message>) {
        if self.future.len() >= FUTURE_LIMIT {
            self.future.remove(0);
        }
        self.counters.buffered += 1;
        self.future.push((now, Inbound { from, msg }));
    }

    /// Routes a message stamped with `theirs`. Returns true if it belongs to
    /// the current configuration and should be processed now.
    fn admit(&mut self, now: u64, from: NodeId, theirs: ConfigurationId, msg: &Arc<Message>) -> bool {
        let Some(mine) = self.current_id() else { return false };
        if theirs == mine {
            return true;
        }
        if self.in_history(theirs) {
            self.counters.stale_messages += 1;
            self.send_catchup(from, theirs, now);
        } else {
            self.buffer_future(now, from, msg.clone());
            self.request_sync(from, now);
        }
        false
    }

    // ---- message handling ----

    fn handle(&mut self, now: u64, inbound: Inbound) {
        let Inbound { from, msg } = inbound;
        match &*msg {
            Message::Probe { config_id, seq } => {
                let reply = self.current_id().unwrap_or(*config_id);
                self.send(
                    from,
                    Arc::new(Message::ProbeAck {
                        config_id: reply,
                        seq: *seq,
                    }),
                );
                self.compare_config(from, *config_id, now);
            }
            Message::ProbeAck { config_id, seq } => {
                if let Some(v) = self.view.as_mut() {
                    if let Some(m) = v.monitors.get_mut(&from) {
                        if m.pending.remove(seq).is_some() {
                            m.detector.record(true);
                        }
                    }
                }
                self.compare_config(from, *config_id, now);
            }
            Message::Alerts { id, config_id, alerts } => {
                if self.opts.mode != Mode::Decentralized || !self.admit(now, from, *config_id, &msg) {
                    return;
                }
                let v = self.view.as_mut().expect("admitted");
                if !v.seen.insert(*id) {
                    return;
                }
                for a in alerts {
                    if let Err(e) = v.cut.record(a, now) {
                        log::debug!("alert rejected: {e}");
                    }
                }
                let pool = v.config.node_ids();
                let k = self.fanout(pool.len());
                for p in self.pick_peers(&pool, k, Some(from)) {
                    self.send(p, msg.clone());
                }
            }
            Message::AlertReport { config_id, alerts } => {
                if self.opts.mode != Mode::CentralizedAux || !self.admit(now, from, *config_id, &msg) {
                    return;
                }
                let v = self.view.as_mut().expect("admitted");
                for a in alerts {
                    if let Err(e) = v.cut.record(a, now) {
                        log::debug!("alert rejected: {e}");
                    }
                }
            }
            Message::Consensus(cm) => {
                if self.opts.mode == Mode::CentralizedMember || !self.admit(now, from, cm.config_id(), &msg) {
                    return;
                }
                let v = self.view.as_mut().expect("admitted");
                let Some(c) = v.consensus.as_mut() else { return };
                let before = c.votes().voted().count();
                match c.handle(from, cm, now) {
                    Ok(out) => {
                        if c.votes().voted().count() != before {
                            v.votes_dirty = true;
                        }
                        self.route(out);
                    }
                    Err(e) => log::debug!("consensus message rejected: {e}"),
                }
            }
            Message::JoinRequest { joiner } => self.on_join_request(joiner),
            Message::JoinProceed { config_id, observers } => self.on_join_proceed(now, *config_id, observers),
            Message::JoinRetry { .. } => {
                if let Status::Joining {
                    seed,
                    deadline,
                    last_request,
                } = &mut self.status
                {
                    if last_request.is_some_and(|t| t >= now) {
                        return;
                    }
                    *last_request = Some(now);
                    *deadline = now + self.opts.join_timeout;
                    let seed = seed.clone();
                    self.counters.join_retries += 1;
                    self.send_addr(
                        &seed,
                        Message::JoinRequest {
                            joiner: self.me.clone(),
                        },
                    );
                }
            }
            Message::JoinIntent {
                joiner,
                config_id,
                rings,
            } => self.on_join_intent(now, from, &msg, joiner, *config_id, rings),
            Message::ViewInstall { configuration } => {
                if self.is_joining() && configuration.contains(self.me.id) {
                    self.status = Status::Active;
                    self.enter_view(configuration.clone(), None, None, now);
                }
            }
            Message::SyncRequest { config_id } => self.compare_config(from, *config_id, now),
            Message::Catchup { chain } => {
                for cut in chain {
                    if self.status != Status::Active {
                        break;
                    }
                    if Some(cut.config_id) == self.current_id() {
                        self.counters.catchups_applied += 1;
                        self.apply_decided(cut.clone(), now);
                    }
                }
            }
            Message::Leave { config_id } => {
                if !self.admit(now, from, *config_id, &msg) {
                    return;
                }
                self.raise_alerts(from, now);
            }
        }
    }

    fn on_join_request(&mut self, joiner: &Member) {
        if self.opts.mode != Mode::Decentralized || self.status != Status::Active {
            return;
        }
        let Some(v) = &self.view else { return };
        let cfg = v.config.clone();
        if cfg.contains(joiner.id) {
            self.send_addr(&joiner.endpoint, Message::ViewInstall { configuration: cfg });
            return;
        }
        if cfg.has_endpoint(&joiner.endpoint) || joiner.endpoint.validate().is_err() {
            self.send_addr(&joiner.endpoint, Message::JoinRetry { config_id: cfg.id });
            return;
        }
        let observers = crate::topology::temporary_observers(&cfg, joiner.id)
            .into_iter()
            .map(|id| {
                let ep = cfg.member(id).expect("observers are members").endpoint.clone();
                (id, ep)
            })
            .collect();
        self.send_addr(
            &joiner.endpoint,
            Message::JoinProceed {
                config_id: cfg.id,
                observers,
            },
        );
    }

    fn on_join_proceed(&mut self, now: u64, config_id: ConfigurationId, observers: &[(NodeId, Endpoint)]) {
        let Status::Joining { deadline, .. } = &mut self.status else {
            return;
        };
        *deadline = now + self.opts.join_timeout;
        let mut grouped: BTreeMap<NodeId, (Endpoint, Vec<usize>)> = BTreeMap::new();
        for (ring, (id, ep)) in observers.iter().enumerate() {
            grouped
                .entry(*id)
                .or_insert_with(|| (ep.clone(), Vec::new()))
                .1
                .push(ring);
        }
        for (_, (ep, rings)) in grouped {
            self.send_addr(
                &ep,
                Message::JoinIntent {
                    joiner: self.me.clone(),
                    config_id,
                    rings,
                },
            );
        }
    }

    fn on_join_intent(
        &mut self,
        now: u64,
        from: NodeId,
        msg: &Arc<Message>,
        joiner: &Member,
        config_id: ConfigurationId,
        rings: &[usize],
    ) {
        if self.opts.mode != Mode::Decentralized || self.status != Status::Active {
            return;
        }
        let Some(mine) = self.current_id() else { return };
        if config_id != mine {
            let cfg = self.view.as_ref().expect("active").config.clone();
            if cfg.contains(joiner.id) {
                self.send_addr(&joiner.endpoint, Message::ViewInstall { configuration: cfg });
            } else if self.in_history(config_id) {
                self.send_addr(&joiner.endpoint, Message::JoinRetry { config_id: mine });
            } else {
                self.buffer_future(now, from, msg.clone());
            }
            return;
        }
        let me = self.me.id;
        let v = self.view.as_mut().expect("active");
        if v.pending_joiners.contains_key(&joiner.id) {
            return;
        }
        let key = SubjectKey::Joiner(joiner.id, joiner.endpoint.clone());
        let observers = v.cut.observers_of(&key);
        let mut raised = Vec::new();
        for r in rings {
            if observers.get(*r) == Some(&me) {
                raised.push(Alert::join(me, joiner.clone(), mine, *r));
            }
        }
        if raised.is_empty() {
            return;
        }
        if let Err(e) = raised[0].validate_against(&v.config) {
            log::debug!("join refused: {e}");
            let ep = joiner.endpoint.clone();
            self.send_addr(&ep, Message::JoinRetry { config_id: mine });
            return;
        }
        v.pending_joiners.insert(joiner.id, joiner.clone());
        self.counters.alerts_raised += raised.len() as u64;
        self.queue_alerts(raised, now);
    }

    /// Records this node's own alerts locally (where it runs cut detection)
    /// and queues them for dissemination.
    fn queue_alerts(&mut self, alerts: Vec<Alert>, now: u64) {
        let mode = self.opts.mode;
        let Some(v) = self.view.as_mut() else { return };
        for a in alerts {
            if mode == Mode::Decentralized {
                if let Err(e) = v.cut.record(&a, now) {
                    log::debug!("own alert rejected: {e}");
                    continue;
                }
            }
            v.outbox.push(a);
        }
    }

    /// Irrevocable REMOVE alerts about `subject` on every ring this node
    /// observes it, at most once per configuration.
    fn raise_alerts(&mut self, subject: NodeId, now: u64) {
        let me = self.me.id;
        let Some(v) = self.view.as_mut() else { return };
        let Some(m) = v.monitors.get_mut(&subject) else { return };
        if m.alerted {
            return;
        }
        m.alerted = true;
        let rings = v
            .subjects
            .iter()
            .find(|(s, _)| *s == subject)
            .map(|(_, r)| r.clone())
            .unwrap_or_default();
        let cid = v.config.id;
        let alerts: Vec<Alert> = rings.into_iter().map(|r| Alert::remove(me, subject, cid, r)).collect();
        self.counters.alerts_raised += alerts.len() as u64;
        self.queue_alerts(alerts, now);
    }

    fn route(&mut self, out: Outgoing) {
        let Some(v) = self.view.as_mut() else { return };
        let mut sends = Vec::new();
        for (dest, m) in out {
            match (dest, m) {
                (Dest::AllVoters, ConsensusMsg::FastVote(_)) => v.votes_dirty = true,
                (Dest::AllVoters, m) => {
                    let msg = Arc::new(Message::Consensus(m));
                    for id in v.voters.iter() {
                        sends.push((*id, msg.clone()));
                    }
                }
                (Dest::Voter(id), m) => sends.push((id, Arc::new(Message::Consensus(m)))),
            }
        }
        for (to, msg) in sends {
            self.send(to, msg);
        }
    }

    // ---- timers ----

    fn on_tick(&mut self, now: u64) {
        if let Status::Joining {
            seed,
            deadline,
            last_request,
        } = &mut self.status
        {
            if now >= *deadline {
                *deadline = now + self.opts.join_timeout;
                *last_request = Some(now);
                let seed = seed.clone();
                self.counters.join_requests += 1;
                self.send_addr(
                    &seed,
                    Message::JoinRequest {
                        joiner: self.me.clone(),
                    },
                );
            }
            return;
        }
        if self.status != Status::Active || self.view.is_none() {
            return;
        }
        let mode = self.opts.mode;
        if mode != Mode::CentralizedAux {
            self.run_probes(now);
        }
        if mode == Mode::Decentralized {
            let me = self.me.id;
            let v = self.view.as_mut().expect("active");
            let echoes = v.cut.reinforce(me, now);
            if !echoes.is_empty() {
                self.counters.reinforcements += echoes.len() as u64;
                self.queue_alerts(echoes, now);
            }
        }
        if mode != Mode::CentralizedMember {
            let v = self.view.as_mut().expect("active");
            let implicit = v.cut.apply_implicit_alerts(now);
            self.counters.implicit_alerts += implicit.len() as u64;
            if mode == Mode::Decentralized && !self.opts.implicit_local_only {
                v.outbox.extend(implicit);
            }
        }
        self.flush_alerts(now);
        self.maybe_propose(now);
        self.consensus_timers(now);
        if mode == Mode::CentralizedMember {
            self.sync_with_ensemble(now);
        }
        self.check_decision(now);
    }

    fn run_probes(&mut self, now: u64) {
        let v = self.view.as_mut().expect("active");
        let params = v.config.params;
        let mut faulty = Vec::new();
        for (s, m) in v.monitors.iter_mut() {
            let expired: Vec<u64> = m
                .pending
                .iter()
                .filter(|(_, sent)| now >= *sent + params.probe_timeout)
                .map(|(seq, _)| *seq)
                .collect();
            for seq in expired {
                m.pending.remove(&seq);
                m.detector.record(false);
            }
            if !m.alerted && m.detector.verdict() == Verdict::Faulty {
                faulty.push(*s);
            }
        }
        let mut probes = Vec::new();
        if now >= v.next_probe {
            v.next_probe = now + params.probe_interval;
            let cid = v.config.id;
            for (s, m) in v.monitors.iter_mut() {
                self.probe_seq += 1;
                m.pending.insert(self.probe_seq, now);
                probes.push((
                    *s,
                    Arc::new(Message::Probe {
                        config_id: cid,
                        seq: self.probe_seq,
                    }),
                ));
            }
        }
        for (s, msg) in probes {
            self.send(s, msg);
        }
        for s in faulty {
            self.raise_alerts(s, now);
        }
    }

    fn flush_alerts(&mut self, now: u64) {
        let mode = self.opts.mode;
        let v = self.view.as_mut().expect("active");
        if v.outbox.is_empty() {
            return;
        }
        let window = v.config.params.batching_window;
        if now < v.last_flush + window && v.outbox.len() < self.opts.max_batch {
            return;
        }
        v.last_flush = now;
        let alerts = std::mem::take(&mut v.outbox);
        let cid = v.config.id;
        match mode {
            Mode::Decentralized => {
                self.gossip_seq += 1;
                let id = mix64(self.me.id.0 as u64 ^ (self.me.id.0 >> 64) as u64 ^ mix64(self.gossip_seq));
                v.seen.insert(id);
                let pool = v.config.node_ids();
                let msg = Arc::new(Message::Alerts {
                    id,
                    config_id: cid,
                    alerts,
                });
                let k = self.fanout(pool.len());
                for p in self.pick_peers(&pool, k, None) {
                    self.send(p, msg.clone());
                }
            }
            Mode::CentralizedMember => {
                let msg = Arc::new(Message::AlertReport { config_id: cid, alerts });
                let aux: Vec<NodeId> = self.opts.aux.iter().map(|m| m.id).collect();
                for a in aux {
                    self.send(a, msg.clone());
                }
            }
            Mode::CentralizedAux => {}
        }
    }

    fn maybe_propose(&mut self, now: u64) {
        if self.opts.mode == Mode::CentralizedMember {
            return;
        }
        let bootstrap_min = self.opts.bootstrap_min;
        let v = self.view.as_mut().expect("active");
        if v.cut.has_proposed() {
            return;
        }
        let Some(candidate) = v.cut.stable_cut() else { return };
        let size = v.config.len();
        if self.opts.mode == Mode::Decentralized
            && size < bootstrap_min
            && candidate.removals.is_empty()
            && size + candidate.joins.len() < bootstrap_min
        {
            // Hold joins until a Paxos-capable cluster can form.
            return;
        }
        let Some(p) = v.cut.evaluate() else { return };
        self.counters.proposals += 1;
        self.proposals.push(p.clone());
        let Some(c) = v.consensus.as_mut() else { return };
        match c.propose(p, now) {
            Ok(out) => self.route(out),
            Err(e) => log::debug!("proposal not voted: {e}"),
        }
    }

    fn consensus_timers(&mut self, now: u64) {
        let mode = self.opts.mode;
        let v = self.view.as_mut().expect("active");
        let Some(c) = v.consensus.as_mut() else { return };
        let out = c.tick(now);
        let undecided = c.decided().is_none();
        let snapshot = c.votes().snapshot();
        self.route(out);
        let push_interval = self.opts.vote_push_interval;
        let v = self.view.as_mut().expect("active");
        if !undecided || snapshot.is_empty() {
            return;
        }
        if !v.votes_dirty && now < v.last_vote_push + push_interval {
            return;
        }
        v.votes_dirty = false;
        v.last_vote_push = now;
        let voters = v.voters.clone();
        let targets = match mode {
            Mode::CentralizedAux => voters.iter().copied().filter(|id| *id != self.me.id).collect(),
            _ => {
                let k = self.fanout(voters.len());
                self.pick_peers(&voters, k, None)
            }
        };
        let msgs: Vec<Arc<Message>> = snapshot
            .into_iter()
            .map(|fv| Arc::new(Message::Consensus(ConsensusMsg::FastVote(fv))))
            .collect();
        for t in targets {
            for m in &msgs {
                self.send(t, m.clone());
            }
        }
    }

    fn sync_with_ensemble(&mut self, now: u64) {
        if self.opts.aux.is_empty() || !now.is_multiple_of(self.opts.sync_interval) {
            return;
        }
        let i = self.rng.gen_range(0..self.opts.aux.len());
        let to = self.opts.aux[i].id;
        let mine = self.current_id().expect("active");
        self.send(to, Arc::new(Message::SyncRequest { config_id: mine }));
    }
}

/// Configuration a message must be processed in, if it is bound to one.
fn message_config(m: &Message) -> Option<ConfigurationId> {
    match m {
        Message::Alerts { config_id, .. }
        | Message::AlertReport { config_id, .. }
        | Message::JoinIntent { config_id, .. }
        | Message::Leave { config_id } => Some(*config_id),
        Message::Consensus(c) => Some(c.config_id()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fanout_formula() {
        assert_eq!(gossip_fanout(1), 0);
        assert_eq!(gossip_fanout(2), 1);
        assert_eq!(gossip_fanout(4), 3);
        assert_eq!(gossip_fanout(100), 9);
        assert_eq!(gossip_fanout(128), 9);
        assert_eq!(gossip_fanout(129), 10);
        assert_eq!(gossip_fanout(1000), 12);
    }
}
