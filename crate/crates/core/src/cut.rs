//! Multi-process cut detection.
//!
//! Each process tallies irrevocable alerts per subject and only proposes a
//! view change once at least one subject is in stable report mode and none is
//! unstable. The proposal then carries every stable subject at once.
//!
//! Reports are recorded per `(subject, ring)`: on every ring a subject has
//! exactly one observer, so this equals counting distinct observer edges and
//! keeps small clusters (where one process fills several rings) detectable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::AlertRejected;
use crate::model::{
    Alert, AlertKind, AlertSubject, Configuration, ConfigurationId, CutProposal, Endpoint, Member, NodeId,
    ProtocolParams,
};
use crate::topology::{temporary_observers, KRingTopology};

/// Tally key. Joiners are keyed by id and endpoint so separate join attempts
/// never share a tally.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKey {
    Member(NodeId),
    Joiner(NodeId, Endpoint),
}

impl SubjectKey {
    pub fn of(subject: &AlertSubject) -> Self {
        match subject {
            AlertSubject::Member(id) => SubjectKey::Member(*id),
            AlertSubject::Joiner(m) => SubjectKey::Joiner(m.id, m.endpoint.clone()),
        }
    }

    pub fn node_id(&self) -> NodeId {
        match self {
            SubjectKey::Member(id) | SubjectKey::Joiner(id, _) => *id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportMode {
    Noise,
    Unstable,
    Stable,
}

#[derive(Debug, Clone)]
struct Tally {
    /// Bit `r` set once the ring-`r` observer reported.
    rings: u64,
    joiner: Option<Member>,
    first_unstable: Option<u64>,
}

impl Tally {
    fn count(&self) -> usize {
        self.rings.count_ones() as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutCounters {
    pub ingested: u64,
    pub duplicates: u64,
    pub stale: u64,
    pub rejected: u64,
    pub implicit: u64,
}

/// Structured trace of detector activity, drained by metrics consumers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CutTrace {
    AlertIngested {
        tick: u64,
        subject: NodeId,
        ring: usize,
        tally: usize,
    },
    ModeChanged {
        tick: u64,
        subject: NodeId,
        from: ReportMode,
        to: ReportMode,
    },
    ProposalEmitted {
        tick: u64,
        removals: usize,
        joins: usize,
    },
}

#[derive(Debug, Clone)]
pub struct CutDetectionState {
    config: Arc<Configuration>,
    topology: Arc<KRingTopology>,
    params: ProtocolParams,
    tallies: BTreeMap<SubjectKey, Tally>,
    unstable: usize,
    stable: BTreeSet<SubjectKey>,
    proposed: bool,
    temp_observers: HashMap<NodeId, Vec<NodeId>>,
    counters: CutCounters,
    trace: Option<Vec<CutTrace>>,
    now: u64,
    /// Some report mode changed since the implicit-alert fixpoint was last computed.
    modes_dirty: bool,
}

impl CutDetectionState {
    pub fn new(config: Arc<Configuration>, topology: Arc<KRingTopology>) -> Self {
        debug_assert_eq!(config.id, topology.config_id);
        CutDetectionState {
            params: config.params,
            config,
            topology,
            tallies: BTreeMap::new(),
            unstable: 0,
            stable: BTreeSet::new(),
            proposed: false,
            temp_observers: HashMap::new(),
            counters: CutCounters::default(),
            trace: None,
            now: 0,
            modes_dirty: false,
        }
    }

    /// Starts recording [`CutTrace`] events.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn config_id(&self) -> ConfigurationId {
        self.config.id
    }

    pub fn configuration(&self) -> &Arc<Configuration> {
        &self.config
    }

    pub fn counters(&self) -> CutCounters {
        self.counters
    }

    pub fn has_proposed(&self) -> bool {
        self.proposed
    }

    pub fn drain_trace(&mut self) -> Vec<CutTrace> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Clears every tally and timer for a newly installed configuration.
    pub fn reset(&mut self, config: Arc<Configuration>, topology: Arc<KRingTopology>) {
        let traced = self.trace.is_some();
        *self = CutDetectionState::new(config, topology);
        if traced {
            self.trace = Some(Vec::new());
        }
    }

    pub fn tally(&self, key: &SubjectKey) -> usize {
        self.tallies.get(key).map_or(0, Tally::count)
    }

    pub fn mode_of(&self, key: &SubjectKey) -> ReportMode {
        self.classify(self.tally(key))
    }

    fn classify(&self, tally: usize) -> ReportMode {
        if tally >= self.params.h {
            ReportMode::Stable
        } else if tally >= self.params.l {
            ReportMode::Unstable
        } else {
            ReportMode::Noise
        }
    }

    /// Subjects currently in unstable report mode.
    pub fn unstable_subjects(&self) -> Vec<SubjectKey> {
        self.tallies
            .iter()
            .filter(|(_, t)| self.classify(t.count()) == ReportMode::Unstable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn stable_subjects(&self) -> &BTreeSet<SubjectKey> {
        &self.stable
    }

    /// Whether `observer` sent (or had applied) the ring-`ring` report about `key`.
    pub fn has_report(&self, key: &SubjectKey, ring: usize) -> bool {
        self.tallies.get(key).is_some_and(|t| t.rings & (1u64 << ring) != 0)
    }

    fn joiner_observers(&mut self, joiner: NodeId) -> &[NodeId] {
        let cfg = &self.config;
        self.temp_observers
            .entry(joiner)
            .or_insert_with(|| temporary_observers(cfg, joiner))
    }

    /// Observers of a subject, indexed by ring.
    pub fn observers_of(&mut self, key: &SubjectKey) -> Vec<NodeId> {
        match key {
            SubjectKey::Member(id) => self.topology.observers_of(*id).unwrap_or_default(),
            SubjectKey::Joiner(id, _) => self.joiner_observers(*id).to_vec(),
        }
    }

    fn check(&mut self, alert: &Alert) -> Result<(), AlertRejected> {
        if alert.config_id != self.config.id {
            self.counters.stale += 1;
            return Err(AlertRejected::Stale {
                current: self.config.id,
                got: alert.config_id,
            });
        }
        if let Err(e) = alert.validate_against(&self.config) {
            self.counters.rejected += 1;
            return Err(e.into());
        }
        let subject = alert.subject.node_id();
        let designated = match alert.kind {
            AlertKind::Remove => self.topology.is_observer(alert.observer, subject, alert.ring_index),
            AlertKind::Join => self.joiner_observers(subject)[alert.ring_index] == alert.observer,
        };
        if !designated {
            self.counters.rejected += 1;
            return Err(AlertRejected::NotAnObserver {
                observer: alert.observer,
                subject,
                ring: alert.ring_index,
            });
        }
        Ok(())
    }

    /// Records one alert without evaluating the aggregation rule.
    /// Returns whether the report was new.
    pub fn record(&mut self, alert: &Alert, now: u64) -> Result<bool, AlertRejected> {
        self.check(alert)?;
        self.now = self.now.max(now);
        let key = SubjectKey::of(&alert.subject);
        let (l, h) = (self.params.l, self.params.h);
        let classify = |t: usize| {
            if t >= h {
                ReportMode::Stable
            } else if t >= l {
                ReportMode::Unstable
            } else {
                ReportMode::Noise
            }
        };
        let entry = self.tallies.entry(key.clone()).or_insert_with(|| Tally {
            rings: 0,
            joiner: match &alert.subject {
                AlertSubject::Joiner(m) => Some(m.clone()),
                AlertSubject::Member(_) => None,
            },
            first_unstable: None,
        });
        let bit = 1u64 << alert.ring_index;
        if entry.rings & bit != 0 {
            self.counters.duplicates += 1;
            return Ok(false);
        }
        let before = classify(entry.count());
        entry.rings |= bit;
        let count = entry.count();
        let after = classify(count);
        if after == ReportMode::Unstable && entry.first_unstable.is_none() {
            entry.first_unstable = Some(now);
        }
        self.counters.ingested += 1;
        if before != after {
            self.modes_dirty = true;
            if before == ReportMode::Unstable {
                self.unstable -= 1;
            }
            match after {
                ReportMode::Unstable => self.unstable += 1,
                ReportMode::Stable => {
                    self.stable.insert(key.clone());
                }
                ReportMode::Noise => unreachable!("tallies never decrease"),
            }
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(CutTrace::AlertIngested {
                tick: now,
                subject: key.node_id(),
                ring: alert.ring_index,
                tally: count,
            });
            if before != after {
                trace.push(CutTrace::ModeChanged {
                    tick: now,
                    subject: key.node_id(),
                    from: before,
                    to: after,
                });
            }
        }
        Ok(true)
    }

    /// Ingests one alert and evaluates the aggregation rule.
    pub fn ingest(&mut self, alert: &Alert, now: u64) -> Result<Option<CutProposal>, AlertRejected> {
        self.record(alert, now)?;
        Ok(self.evaluate())
    }

    /// Ingests a batch, evaluating the aggregation rule once at the end.
    /// Rejected alerts are counted and skipped.
    pub fn ingest_batch<'a>(&mut self, alerts: impl IntoIterator<Item = &'a Alert>, now: u64) -> Option<CutProposal> {
        for a in alerts {
            if let Err(e) = self.record(a, now) {
                log::debug!("dropping alert: {e}");
            }
        }
        self.evaluate()
    }

    /// The cut the aggregation rule currently allows, without consuming the
    /// one-proposal-per-configuration budget.
    pub fn stable_cut(&self) -> Option<CutProposal> {
        if self.stable.is_empty() || self.unstable > 0 {
            return None;
        }
        let mut cut = CutProposal::new(self.config.id);
        let mut joiner_endpoints = BTreeSet::new();
        for key in &self.stable {
            match key {
                SubjectKey::Member(id) => {
                    cut.removals.insert(*id);
                }
                SubjectKey::Joiner(_, ep) => {
                    // Two join attempts from one endpoint cannot both be
                    // admitted; keys are ordered so the lowest id wins.
                    if joiner_endpoints.insert(ep.clone()) {
                        let m = self.tallies[key]
                            .joiner
                            .clone()
                            .expect("joiner tallies carry the member");
                        cut.joins.insert(m);
                    }
                }
            }
        }
        Some(cut)
    }

    /// Applies the aggregation rule: emits the cut of all stable subjects once
    /// some subject is stable and none is unstable. At most once per
    /// configuration.
    pub fn evaluate(&mut self) -> Option<CutProposal> {
        if self.proposed {
            return None;
        }
        let cut = self.stable_cut()?;
        self.proposed = true;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(CutTrace::ProposalEmitted {
                tick: self.now,
                removals: cut.removals.len(),
                joins: cut.joins.len(),
            });
        }
        Some(cut)
    }

    fn synthesize(&self, key: &SubjectKey, observer: NodeId, ring: usize) -> Alert {
        let subject = match key {
            SubjectKey::Member(id) => AlertSubject::Member(*id),
            SubjectKey::Joiner(..) => AlertSubject::Joiner(
                self.tallies[key]
                    .joiner
                    .clone()
                    .expect("joiner tallies carry the member"),
            ),
        };
        let kind = match subject {
            AlertSubject::Member(_) => AlertKind::Remove,
            AlertSubject::Joiner(_) => AlertKind::Join,
        };
        Alert {
            observer,
            subject,
            kind,
            config_id: self.config.id,
            ring_index: ring,
        }
    }

    /// For every unstable subject `s` and every observer `o` of `s` that has
    /// itself reached the unstable region (tally >= L), applies the missing
    /// `o -> s` report locally. Repeats until no new implicit report applies.
    /// Returns the synthesized alerts so the caller can disseminate them.
    pub fn apply_implicit_alerts(&mut self, now: u64) -> Vec<Alert> {
        let mut out = Vec::new();
        // Reports only accumulate, so with no mode change the last fixpoint holds.
        if !self.modes_dirty {
            return out;
        }
        loop {
            let mut batch = Vec::new();
            for key in self.unstable_subjects() {
                let observers = self.observers_of(&key);
                for (ring, o) in observers.into_iter().enumerate() {
                    if self.has_report(&key, ring) {
                        continue;
                    }
                    if self.mode_of(&SubjectKey::Member(o)) >= ReportMode::Unstable {
                        batch.push(self.synthesize(&key, o, ring));
                    }
                }
            }
            if batch.is_empty() {
                break;
            }
            for a in &batch {
                if matches!(self.record(a, now), Ok(true)) {
                    self.counters.implicit += 1;
                }
            }
            out.extend(batch);
        }
        self.modes_dirty = false;
        out
    }

    /// Reinforcement: alerts `me` should echo about subjects that have been
    /// unstable for at least `reinforcement_timeout` and that `me` observes
    /// without having reported yet. Does not modify the tallies.
    pub fn reinforce(&mut self, me: NodeId, now: u64) -> Vec<Alert> {
        let timeout = self.params.reinforcement_timeout;
        let lingering: Vec<SubjectKey> = self
            .tallies
            .iter()
            .filter(|(_, t)| {
                self.classify(t.count()) == ReportMode::Unstable
                    && t.first_unstable
                        .is_some_and(|since| now.saturating_sub(since) >= timeout)
            })
            .map(|(k, _)| k.clone())
            .collect();
        let mut out = Vec::new();
        for key in lingering {
            for (ring, o) in self.observers_of(&key).into_iter().enumerate() {
                if o == me && !self.has_report(&key, ring) {
                    out.push(self.synthesize(&key, me, ring));
                }
            }
        }
        out
    }
}
