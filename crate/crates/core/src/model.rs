//! Domain types shared by every protocol layer: endpoints, identifiers,
//! configurations, alerts and cut proposals.
//!
//! Every type here is an immutable value. Canonical serialization goes through
//! serde; field names and encodings are pinned in `docs/schema.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ModelError;
use crate::hash::Fnv1a;

/// A process' listen address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self, ModelError> {
        let ep = Endpoint {
            host: host.into(),
            port,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.host.is_empty() {
            return Err(ModelError::InvalidEndpoint("empty host".into()));
        }
        if self.port == 0 {
            return Err(ModelError::InvalidEndpoint(format!("port 0 for host {}", self.host)));
        }
        Ok(())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| ModelError::InvalidEndpoint(format!("missing port in {s:?}")))?;
        let port = port
            .parse::<u16>()
            .map_err(|e| ModelError::InvalidEndpoint(format!("{s:?}: {e}")))?;
        Endpoint::new(host, port)
    }
}

/// Logical identity of one join attempt. A process that rejoins gets a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u128);

impl NodeId {
    /// Draws an id from a caller-provided generator (seeded in simulation).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        NodeId(rng.gen())
    }

    /// Draws an id from the system UUID source.
    pub fn fresh() -> Self {
        NodeId(uuid::Uuid::new_v4().as_u128())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 {
            return Err(ModelError::Decode(format!("node id must be 32 hex digits: {s:?}")));
        }
        u128::from_str_radix(s, 16)
            .map(NodeId)
            .map_err(|e| ModelError::Decode(format!("node id {s:?}: {e}")))
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Member {
    pub id: NodeId,
    pub endpoint: Endpoint,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Member {
    pub fn new(id: NodeId, endpoint: Endpoint) -> Self {
        Member {
            id,
            endpoint,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ConfigurationId(pub u64);

impl ConfigurationId {
    /// Predecessor of every bootstrap configuration.
    pub const GENESIS: ConfigurationId = ConfigurationId(0);
}

impl fmt::Display for ConfigurationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for ConfigurationId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 {
            return Err(ModelError::Decode(format!(
                "configuration id must be 16 hex digits: {s:?}"
            )));
        }
        u64::from_str_radix(s, 16)
            .map(ConfigurationId)
            .map_err(|e| ModelError::Decode(format!("configuration id {s:?}: {e}")))
    }
}

impl Serialize for ConfigurationId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConfigurationId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Derives the identifier of a configuration from its predecessor and its
/// member ids. `members` must be strictly ascending.
pub fn derive_config_id(prev: ConfigurationId, members: &[NodeId]) -> Result<ConfigurationId, ModelError> {
    if members.is_empty() {
        return Err(ModelError::EmptyMembership);
    }
    if members.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::Unsorted);
    }
    let mut h = Fnv1a::new();
    h.write_u64(prev.0);
    for id in members {
        h.write_u128(id.0);
    }
    Ok(ConfigurationId(h.finish()))
}

/// Exact fraction, used for the probe-failure threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u32,
    pub den: u32,
}

impl Fraction {
    pub const fn new(num: u32, den: u32) -> Self {
        Fraction { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// `count / total >= self`, evaluated without rounding.
    pub fn reached_by(&self, count: usize, total: usize) -> bool {
        (count as u128) * u128::from(self.den) >= (total as u128) * u128::from(self.num)
    }
}

/// Upper bound on K; per-subject report sets are 64-bit masks over rings.
pub const MAX_RINGS: usize = 64;

/// Protocol parameters. All durations are logical ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Rings, i.e. observers per subject.
    pub k: usize,
    /// High watermark.
    pub h: usize,
    /// Low watermark.
    pub l: usize,
    pub reinforcement_timeout: u64,
    pub fast_round_timeout: u64,
    pub batching_window: u64,
    pub consecutive_probe_window: usize,
    pub probe_failure_fraction: Fraction,
    #[serde(default = "default_probe_interval")]
    pub probe_interval: u64,
    #[serde(default = "default_probe_timeout")]
    pub probe_timeout: u64,
}

fn default_probe_interval() -> u64 {
    1
}

fn default_probe_timeout() -> u64 {
    5
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            k: 10,
            h: 9,
            l: 3,
            reinforcement_timeout: 10,
            fast_round_timeout: 20,
            batching_window: 1,
            consecutive_probe_window: 10,
            probe_failure_fraction: Fraction::new(2, 5),
            probe_interval: default_probe_interval(),
            probe_timeout: default_probe_timeout(),
        }
    }
}

impl ProtocolParams {
    pub fn with_watermarks(k: usize, h: usize, l: usize) -> Self {
        ProtocolParams {
            k,
            h,
            l,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidParams(msg));
        if self.l < 1 {
            return bad(format!("L must be at least 1 (L={})", self.l));
        }
        if self.l > self.h {
            return bad(format!("1 <= L <= H <= K violated: L={} > H={}", self.l, self.h));
        }
        if self.h > self.k {
            return bad(format!("1 <= L <= H <= K violated: H={} > K={}", self.h, self.k));
        }
        if self.k > MAX_RINGS {
            return bad(format!("K={} exceeds the supported maximum of {MAX_RINGS}", self.k));
        }
        for (name, v) in [
            ("reinforcement_timeout", self.reinforcement_timeout),
            ("fast_round_timeout", self.fast_round_timeout),
            ("batching_window", self.batching_window),
            ("probe_interval", self.probe_interval),
            ("probe_timeout", self.probe_timeout),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.consecutive_probe_window == 0 {
            return bad("consecutive_probe_window must be positive".into());
        }
        let f = self.probe_failure_fraction;
        if f.den == 0 || f.num == 0 || f.num > f.den {
            return bad(format!(
                "probe_failure_fraction must lie in (0, 1], got {}/{}",
                f.num, f.den
            ));
        }
        Ok(())
    }
}

/// An identified membership set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: ConfigurationId,
    pub members: Vec<Member>,
    pub params: ProtocolParams,
}

impl Configuration {
    /// Builds the first configuration of a cluster.
    pub fn bootstrap(members: Vec<Member>, params: ProtocolParams) -> Result<Self, ModelError> {
        Self::from_members(ConfigurationId::GENESIS, members, params)
    }

    fn from_members(
        prev: ConfigurationId,
        mut members: Vec<Member>,
        params: ProtocolParams,
    ) -> Result<Self, ModelError> {
        params.validate()?;
        members.sort_by_key(|a| a.id);
        for w in members.windows(2) {
            if w[0].id == w[1].id {
                return Err(ModelError::DuplicateNodeId(w[0].id));
            }
        }
        let mut endpoints = BTreeSet::new();
        for m in &members {
            m.endpoint.validate()?;
            if !endpoints.insert(&m.endpoint) {
                return Err(ModelError::DuplicateEndpoint(m.endpoint.clone()));
            }
        }
        let ids: Vec<NodeId> = members.iter().map(|m| m.id).collect();
        let id = derive_config_id(prev, &ids)?;
        Ok(Configuration { id, members, params })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.members.iter().map(|m| m.id).collect()
    }

    /// Position of `id` in the sorted member list.
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.members.binary_search_by(|m| m.id.cmp(&id)).ok()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index_of(id).is_some()
    }

    pub fn member(&self, id: NodeId) -> Option<&Member> {
        self.index_of(id).map(|i| &self.members[i])
    }

    pub fn has_endpoint(&self, ep: &Endpoint) -> bool {
        self.members.iter().any(|m| &m.endpoint == ep)
    }

    /// Checks `cut` against this configuration without applying it.
    pub fn check_cut(&self, cut: &CutProposal) -> Result<(), ModelError> {
        if cut.config_id != self.id {
            return Err(ModelError::StaleProposal {
                expected: self.id,
                got: cut.config_id,
            });
        }
        if cut.is_empty() {
            return Err(ModelError::EmptyCut);
        }
        for id in &cut.removals {
            if !self.contains(*id) {
                return Err(ModelError::NotAMember(*id));
            }
        }
        for m in &cut.joins {
            if self.contains(m.id) {
                return Err(ModelError::AlreadyMember(m.id));
            }
        }
        Ok(())
    }

    /// Produces the successor configuration `(C \ removals) ∪ joins`.
    pub fn apply_cut(&self, cut: &CutProposal) -> Result<Configuration, ModelError> {
        self.check_cut(cut)?;
        let members: Vec<Member> = self
            .members
            .iter()
            .filter(|m| !cut.removals.contains(&m.id))
            .cloned()
            .chain(cut.joins.iter().cloned())
            .collect();
        if members.is_empty() {
            return Err(ModelError::EmptyMembership);
        }
        Self::from_members(self.id, members, self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    Remove,
    Join,
}

/// What an alert is about: an existing member (REMOVE) or a joiner (JOIN).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertSubject {
    Member(NodeId),
    Joiner(Member),
}

impl AlertSubject {
    pub fn node_id(&self) -> NodeId {
        match self {
            AlertSubject::Member(id) => *id,
            AlertSubject::Joiner(m) => m.id,
        }
    }
}

/// An irrevocable edge report from an observer about one of its subjects.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Alert {
    pub observer: NodeId,
    pub subject: AlertSubject,
    pub kind: AlertKind,
    pub config_id: ConfigurationId,
    pub ring_index: usize,
}

impl Alert {
    pub fn remove(observer: NodeId, subject: NodeId, config_id: ConfigurationId, ring: usize) -> Self {
        Alert {
            observer,
            subject: AlertSubject::Member(subject),
            kind: AlertKind::Remove,
            config_id,
            ring_index: ring,
        }
    }

    pub fn join(observer: NodeId, joiner: Member, config_id: ConfigurationId, ring: usize) -> Self {
        Alert {
            observer,
            subject: AlertSubject::Joiner(joiner),
            kind: AlertKind::Join,
            config_id,
            ring_index: ring,
        }
    }

    /// Kind and subject agree, and the subject's membership status matches
    /// the kind in `cfg`.
    pub fn validate_against(&self, cfg: &Configuration) -> Result<(), ModelError> {
        match (&self.kind, &self.subject) {
            (AlertKind::Remove, AlertSubject::Member(id)) => {
                if !cfg.contains(*id) {
                    return Err(ModelError::NotAMember(*id));
                }
            }
            (AlertKind::Join, AlertSubject::Joiner(m)) => {
                if cfg.contains(m.id) || cfg.has_endpoint(&m.endpoint) {
                    return Err(ModelError::AlreadyMember(m.id));
                }
            }
            _ => return Err(ModelError::MalformedAlert),
        }
        if self.ring_index >= cfg.params.k {
            return Err(ModelError::MalformedAlert);
        }
        Ok(())
    }
}

/// A multi-process cut: every removal and join one view change would apply.
/// Sets are ordered so equal cuts serialize identically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CutProposal {
    pub config_id: ConfigurationId,
    pub removals: BTreeSet<NodeId>,
    pub joins: BTreeSet<Member>,
}

impl CutProposal {
    pub fn new(config_id: ConfigurationId) -> Self {
        CutProposal {
            config_id,
            removals: BTreeSet::new(),
            joins: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.removals.is_empty() && self.joins.is_empty()
    }

    pub fn len(&self) -> usize {
        self.removals.len() + self.joins.len()
    }

    /// Canonical byte encoding; the input to [`CutProposal::digest`].
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("cut proposals always serialize")
    }

    /// 64-bit identity of this proposal, used to key vote bitmaps.
    pub fn digest(&self) -> ProposalHash {
        ProposalHash(crate::hash::fnv1a(&self.canonical_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProposalHash(pub u64);

impl fmt::Display for ProposalHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Delivered exactly once per configuration to the application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewChangeEvent {
    /// `None` for the first view a joiner installs.
    pub previous: Option<ConfigurationId>,
    pub configuration: Arc<Configuration>,
    pub cut: Option<CutProposal>,
}
