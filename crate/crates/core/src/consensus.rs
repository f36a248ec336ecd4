//! View-change agreement: a leaderless Fast Paxos round fed by each process'
//! cut proposal, with classic Paxos as the recovery path.
//!
//! The fast round is a vote-counting CRDT: one bitmap per distinct proposal,
//! merged by bitwise OR. A proposal backed by more than three quarters of the
//! voters is decided. If the fast round times out, or no proposal can still
//! reach the fast quorum, voters run classic Paxos with majority quorums; the
//! fast votes count as acceptances at the fast ballot.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ConsensusError;
use crate::hash::SplitMix64;
use crate::model::{Configuration, ConfigurationId, CutProposal, NodeId, ProposalHash};

/// Smallest vote count strictly larger than three quarters of `n`.
pub fn fast_quorum(n: usize) -> usize {
    3 * n / 4 + 1
}

/// Strict majority of `n`.
pub fn classic_quorum(n: usize) -> usize {
    n / 2 + 1
}

/// Minimum votes a value needs inside a recovery quorum of size `quorum` to
/// possibly have been chosen in the fast round.
pub fn recovery_threshold(n: usize, quorum: usize) -> usize {
    (quorum + fast_quorum(n)).saturating_sub(n)
}

/// The recovery coordinator's value rule over fast-round votes reported by a
/// quorum: a value is a candidate iff its votes reach
/// [`recovery_threshold`]. Returns the sole candidate if there is one.
///
/// At most one candidate exists: two would need `2 * (|Q| + F - n)` votes
/// inside `Q`, but `2F + |Q| > 2n` for `F = fast_quorum(n)` and any majority.
pub fn recovery_candidate<T: Ord + Clone>(n: usize, quorum: usize, votes: impl IntoIterator<Item = T>) -> Option<T> {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let threshold = recovery_threshold(n, quorum).max(1);
    let mut candidates = counts.into_iter().filter(|(_, c)| *c >= threshold);
    let first = candidates.next().map(|(v, _)| v);
    match candidates.next() {
        None => first,
        Some(_) => None,
    }
}

/// Fixed-length vote bitmap; bit `i` is the voter at sorted index `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoteBitmap {
    len: usize,
    words: Vec<u64>,
}

impl VoteBitmap {
    pub fn new(len: usize) -> Self {
        VoteBitmap {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|i| self.get(*i))
    }

    pub fn intersects(&self, other: &VoteBitmap) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    /// Bitwise OR. Returns whether any bit was added.
    pub fn merge(&mut self, other: &VoteBitmap) -> Result<bool, ConsensusError> {
        if other.len != self.len {
            return Err(ConsensusError::BitmapLength {
                expected: self.len,
                got: other.len,
            });
        }
        let mut changed = false;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            let merged = *a | *b;
            changed |= merged != *a;
            *a = merged;
        }
        Ok(changed)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }
}

#[derive(Serialize, Deserialize)]
struct BitmapWire {
    len: usize,
    bits: String,
}

impl Serialize for VoteBitmap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BitmapWire {
            len: self.len,
            bits: hex::encode(self.to_bytes()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VoteBitmap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let w = BitmapWire::deserialize(d)?;
        let bytes = hex::decode(&w.bits).map_err(D::Error::custom)?;
        if bytes.len() != w.len.div_ceil(8) {
            return Err(D::Error::custom("bitmap byte length does not match len"));
        }
        let mut bm = VoteBitmap::new(w.len);
        for (i, b) in bytes.iter().enumerate() {
            bm.words[i / 8] |= u64::from(*b) << (8 * (i % 8));
        }
        if (w.len..bytes.len() * 8).any(|i| bm.words[i / 64] & (1 << (i % 64)) != 0) {
            return Err(D::Error::custom("bits set beyond len"));
        }
        Ok(bm)
    }
}

/// Paxos ballot. Higher rounds win; within a round the lower node id wins,
/// so the lowest-id coordinator prevails when several time out together.
/// Round 0 is reserved for the fast round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ballot {
    pub round: u32,
    pub node: NodeId,
}

impl Ballot {
    pub const FAST: Ballot = Ballot {
        round: 0,
        node: NodeId(0),
    };

    pub fn is_fast(&self) -> bool {
        self.round == 0
    }
}

impl Ord for Ballot {
    fn cmp(&self, other: &Self) -> Ordering {
        self.round.cmp(&other.round).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Ballot {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.round, self.node)
    }
}

/// A gossiped fast-round vote aggregate for one proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FastVote {
    pub config_id: ConfigurationId,
    pub proposal: CutProposal,
    pub bitmap: VoteBitmap,
}

/// Fast-round vote aggregation for one configuration.
#[derive(Debug, Clone)]
pub struct VoteState {
    pub config_id: ConfigurationId,
    voters: Arc<[NodeId]>,
    votes: BTreeMap<ProposalHash, VoteBitmap>,
    proposals: BTreeMap<ProposalHash, CutProposal>,
    my_vote: Option<ProposalHash>,
    decided: Option<CutProposal>,
    pub fast_deadline: Option<u64>,
}

impl VoteState {
    pub fn new(config_id: ConfigurationId, voters: Arc<[NodeId]>) -> Self {
        VoteState {
            config_id,
            voters,
            votes: BTreeMap::new(),
            proposals: BTreeMap::new(),
            my_vote: None,
            decided: None,
            fast_deadline: None,
        }
    }

    pub fn n(&self) -> usize {
        self.voters.len()
    }

    pub fn voter_index(&self, id: NodeId) -> Option<usize> {
        self.voters.binary_search(&id).ok()
    }

    pub fn decided(&self) -> Option<&CutProposal> {
        self.decided.as_ref()
    }

    pub fn my_vote(&self) -> Option<ProposalHash> {
        self.my_vote
    }

    pub fn tally(&self, digest: ProposalHash) -> usize {
        self.votes.get(&digest).map_or(0, VoteBitmap::count)
    }

    /// Every aggregate this node knows, for gossip.
    pub fn snapshot(&self) -> Vec<FastVote> {
        self.votes
            .iter()
            .map(|(h, bm)| FastVote {
                config_id: self.config_id,
                proposal: self.proposals[h].clone(),
                bitmap: bm.clone(),
            })
            .collect()
    }

    /// Voters seen voting for anything.
    pub fn voted(&self) -> VoteBitmap {
        let mut all = VoteBitmap::new(self.n());
        for bm in self.votes.values() {
            all.merge(bm).expect("bitmaps share the voter count");
        }
        all
    }

    /// True once no proposal can reach the fast quorum any more.
    pub fn fast_round_blocked(&self) -> bool {
        if self.decided.is_some() || self.votes.is_empty() {
            return false;
        }
        let missing = self.n() - self.voted().count();
        let need = fast_quorum(self.n());
        self.votes.values().all(|bm| bm.count() + missing < need)
    }

    /// Casts this node's single fast-round vote.
    pub fn start_fast_round(
        &mut self,
        me: NodeId,
        proposal: CutProposal,
        now: u64,
        timeout: u64,
    ) -> Result<FastVote, ConsensusError> {
        if proposal.config_id != self.config_id {
            return Err(ConsensusError::WrongConfiguration {
                current: self.config_id,
                got: proposal.config_id,
            });
        }
        if self.my_vote.is_some() {
            return Err(ConsensusError::AlreadyVoted);
        }
        let idx = self.voter_index(me).ok_or(ConsensusError::NotAVoter(me))?;
        let digest = proposal.digest();
        self.check_digest(digest, &proposal)?;
        self.my_vote = Some(digest);
        let n = self.n();
        let bm = self.votes.entry(digest).or_insert_with(|| VoteBitmap::new(n));
        bm.set(idx);
        let vote = FastVote {
            config_id: self.config_id,
            proposal: proposal.clone(),
            bitmap: bm.clone(),
        };
        self.proposals.entry(digest).or_insert(proposal);
        self.fast_deadline = Some(self.fast_deadline.map_or(now + timeout, |d| d.min(now + timeout)));
        self.check_quorum(digest);
        Ok(vote)
    }

    fn check_digest(&self, digest: ProposalHash, proposal: &CutProposal) -> Result<(), ConsensusError> {
        match self.proposals.get(&digest) {
            Some(p) if p != proposal => Err(ConsensusError::DigestCollision(digest.0)),
            _ => Ok(()),
        }
    }

    fn check_quorum(&mut self, digest: ProposalHash) {
        if self.decided.is_none() && self.tally(digest) >= fast_quorum(self.n()) {
            self.decided = Some(self.proposals[&digest].clone());
        }
    }

    /// ORs a remote aggregate into the local one. Returns the decision if
    /// this merge completed a fast quorum.
    pub fn merge_votes(&mut self, remote: &FastVote) -> Result<Option<CutProposal>, ConsensusError> {
        if remote.config_id != self.config_id || remote.proposal.config_id != self.config_id {
            return Err(ConsensusError::WrongConfiguration {
                current: self.config_id,
                got: remote.config_id,
            });
        }
        if remote.bitmap.len() != self.n() {
            return Err(ConsensusError::BitmapLength {
                expected: self.n(),
                got: remote.bitmap.len(),
            });
        }
        let digest = remote.proposal.digest();
        self.check_digest(digest, &remote.proposal)?;
        let was_decided = self.decided.is_some();
        let n = self.n();
        self.votes
            .entry(digest)
            .or_insert_with(|| VoteBitmap::new(n))
            .merge(&remote.bitmap)?;
        self.proposals.entry(digest).or_insert_with(|| remote.proposal.clone());
        self.check_quorum(digest);
        Ok(match (&self.decided, was_decided) {
            (Some(p), false) => Some(p.clone()),
            _ => None,
        })
    }

    /// No voter appears in two bitmaps.
    pub fn single_vote_invariant(&self) -> bool {
        let bms: Vec<&VoteBitmap> = self.votes.values().collect();
        for i in 0..bms.len() {
            for j in i + 1..bms.len() {
                if bms[i].intersects(bms[j]) {
                    return false;
                }
            }
        }
        true
    }

    fn force_decide(&mut self, p: CutProposal) {
        if self.decided.is_none() {
            self.decided = Some(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PaxosPhase {
    Idle,
    Preparing,
    Accepting,
    Decided,
}

/// Classic Paxos acceptor and coordinator state.
#[derive(Debug, Clone)]
pub struct PaxosState {
    /// Ballot this node coordinates (or last coordinated).
    pub rank: Ballot,
    pub promised: Ballot,
    pub accepted: Option<(Ballot, CutProposal)>,
    pub phase: PaxosPhase,
    promises: BTreeMap<NodeId, Option<(Ballot, CutProposal)>>,
    accepts: BTreeSet<NodeId>,
    value: Option<CutProposal>,
    highest_seen: u32,
    next_retry: Option<u64>,
    pub rounds_started: u64,
}

impl Default for PaxosState {
    fn default() -> Self {
        PaxosState {
            rank: Ballot::FAST,
            promised: Ballot::FAST,
            accepted: None,
            phase: PaxosPhase::Idle,
            promises: BTreeMap::new(),
            accepts: BTreeSet::new(),
            value: None,
            highest_seen: 0,
            next_retry: None,
            rounds_started: 0,
        }
    }
}

/// Consensus wire messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConsensusMsg {
    FastVote(FastVote),
    Prepare {
        config_id: ConfigurationId,
        ballot: Ballot,
    },
    Promise {
        config_id: ConfigurationId,
        ballot: Ballot,
        accepted: Option<(Ballot, CutProposal)>,
    },
    Nack {
        config_id: ConfigurationId,
        ballot: Ballot,
        promised: Ballot,
    },
    Accept {
        config_id: ConfigurationId,
        ballot: Ballot,
        proposal: CutProposal,
    },
    Accepted {
        config_id: ConfigurationId,
        ballot: Ballot,
    },
    Learn {
        config_id: ConfigurationId,
        proposal: CutProposal,
    },
}

impl ConsensusMsg {
    pub fn config_id(&self) -> ConfigurationId {
        match self {
            ConsensusMsg::FastVote(v) => v.config_id,
            ConsensusMsg::Prepare { config_id, .. }
            | ConsensusMsg::Promise { config_id, .. }
            | ConsensusMsg::Nack { config_id, .. }
            | ConsensusMsg::Accept { config_id, .. }
            | ConsensusMsg::Accepted { config_id, .. }
            | ConsensusMsg::Learn { config_id, .. } => *config_id,
        }
    }

    pub fn is_classic(&self) -> bool {
        !matches!(self, ConsensusMsg::FastVote(_) | ConsensusMsg::Learn { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dest {
    Voter(NodeId),
    AllVoters,
}

pub type Outgoing = Vec<(Dest, ConsensusMsg)>;

/// One node's consensus instance for one configuration.
#[derive(Debug, Clone)]
pub struct FastPaxos {
    me: NodeId,
    config: Arc<Configuration>,
    votes: VoteState,
    paxos: PaxosState,
    own_proposal: Option<CutProposal>,
    timeout: u64,
    jitter: SplitMix64,
    delivered: bool,
}

impl FastPaxos {
    /// `voters` must be sorted; they are the configuration's members in the
    /// decentralized mode and the auxiliary ensemble otherwise.
    pub fn new(me: NodeId, config: Arc<Configuration>, voters: Arc<[NodeId]>, timeout: u64) -> Self {
        debug_assert!(voters.windows(2).all(|w| w[0] < w[1]));
        let seed = me.0 as u64 ^ (me.0 >> 64) as u64 ^ config.id.0;
        FastPaxos {
            me,
            votes: VoteState::new(config.id, voters),
            config,
            paxos: PaxosState::default(),
            own_proposal: None,
            timeout,
            jitter: SplitMix64::new(seed),
            delivered: false,
        }
    }

    pub fn config_id(&self) -> ConfigurationId {
        self.config.id
    }

    pub fn votes(&self) -> &VoteState {
        &self.votes
    }

    pub fn paxos(&self) -> &PaxosState {
        &self.paxos
    }

    pub fn is_voter(&self) -> bool {
        self.votes.voter_index(self.me).is_some()
    }

    pub fn decided(&self) -> Option<&CutProposal> {
        self.votes.decided()
    }

    pub fn own_proposal(&self) -> Option<&CutProposal> {
        self.own_proposal.as_ref()
    }

    fn validate(&self, p: &CutProposal) -> Result<(), ConsensusError> {
        if p.config_id != self.config.id {
            return Err(ConsensusError::WrongConfiguration {
                current: self.config.id,
                got: p.config_id,
            });
        }
        self.config.check_cut(p).map_err(|_| ConsensusError::InvalidProposal)
    }

    /// Feeds this node's cut proposal into the fast round.
    pub fn propose(&mut self, proposal: CutProposal, now: u64) -> Result<Outgoing, ConsensusError> {
        self.validate(&proposal)?;
        if self.own_proposal.is_some() {
            return Err(ConsensusError::AlreadyVoted);
        }
        self.own_proposal = Some(proposal.clone());
        if self.paxos.promised > Ballot::FAST {
            // A classic ballot already closed the fast round for this acceptor.
            return Err(ConsensusError::FastRoundClosed);
        }
        let vote = self
            .votes
            .start_fast_round(self.me, proposal.clone(), now, self.timeout)?;
        self.paxos.accepted = Some((Ballot::FAST, proposal));
        Ok(vec![(Dest::AllVoters, ConsensusMsg::FastVote(vote))])
    }

    /// Returns the decision exactly once.
    pub fn take_decision(&mut self) -> Option<CutProposal> {
        if self.delivered {
            return None;
        }
        let d = self.votes.decided()?.clone();
        self.delivered = true;
        self.paxos.phase = PaxosPhase::Decided;
        Some(d)
    }

    fn learn(&mut self, p: CutProposal) {
        self.votes.force_decide(p);
    }

    fn arm_retry(&mut self, now: u64) {
        let jitter = self.jitter.next_u64() % self.timeout.max(1);
        self.paxos.next_retry = Some(now + self.timeout + jitter);
    }

    fn start_round(&mut self, now: u64) -> Outgoing {
        let round = self
            .paxos
            .rank
            .round
            .max(self.paxos.promised.round)
            .max(self.paxos.highest_seen)
            + 1;
        self.paxos.rank = Ballot { round, node: self.me };
        self.paxos.phase = PaxosPhase::Preparing;
        self.paxos.promises.clear();
        self.paxos.accepts.clear();
        self.paxos.value = None;
        self.paxos.rounds_started += 1;
        self.arm_retry(now);
        vec![(
            Dest::AllVoters,
            ConsensusMsg::Prepare {
                config_id: self.config.id,
                ballot: self.paxos.rank,
            },
        )]
    }

    /// Timer work: opens a classic round once the fast round has timed out
    /// or can no longer succeed, and retries stalled classic rounds.
    pub fn tick(&mut self, now: u64) -> Outgoing {
        if self.votes.decided().is_some() || !self.is_voter() {
            return Vec::new();
        }
        match self.paxos.phase {
            PaxosPhase::Idle => {
                let timed_out = self.votes.fast_deadline.is_some_and(|d| now >= d);
                if timed_out || self.votes.fast_round_blocked() {
                    return self.start_round(now);
                }
            }
            PaxosPhase::Preparing | PaxosPhase::Accepting => {
                if self.paxos.next_retry.is_some_and(|t| now >= t) {
                    return self.start_round(now);
                }
            }
            PaxosPhase::Decided => {}
        }
        Vec::new()
    }

    /// Handles one consensus message from `from`.
    pub fn handle(&mut self, from: NodeId, msg: &ConsensusMsg, now: u64) -> Result<Outgoing, ConsensusError> {
        if msg.config_id() != self.config.id {
            return Err(ConsensusError::WrongConfiguration {
                current: self.config.id,
                got: msg.config_id(),
            });
        }
        let cid = self.config.id;
        if let Some(decided) = self.votes.decided().cloned() {
            // Help laggards finish instead of running more rounds.
            return Ok(match msg {
                ConsensusMsg::Learn { .. } | ConsensusMsg::Accepted { .. } | ConsensusMsg::Promise { .. } => Vec::new(),
                ConsensusMsg::FastVote(v) => {
                    let _ = self.votes.merge_votes(v);
                    Vec::new()
                }
                _ => vec![(
                    Dest::Voter(from),
                    ConsensusMsg::Learn {
                        config_id: cid,
                        proposal: decided,
                    },
                )],
            });
        }
        match msg {
            ConsensusMsg::FastVote(v) => {
                self.votes.merge_votes(v)?;
                if self.votes.fast_deadline.is_none() {
                    self.votes.fast_deadline = Some(now + self.timeout);
                }
                Ok(Vec::new())
            }
            ConsensusMsg::Learn { proposal, .. } => {
                self.validate(proposal)?;
                self.learn(proposal.clone());
                Ok(Vec::new())
            }
            ConsensusMsg::Prepare { ballot, .. } => {
                self.paxos.highest_seen = self.paxos.highest_seen.max(ballot.round);
                if *ballot > self.paxos.promised {
                    self.paxos.promised = *ballot;
                    if self.paxos.phase != PaxosPhase::Idle && *ballot > self.paxos.rank {
                        // Defer to the stronger coordinator for a while.
                        self.arm_retry(now);
                    }
                    Ok(vec![(
                        Dest::Voter(ballot.node),
                        ConsensusMsg::Promise {
                            config_id: cid,
                            ballot: *ballot,
                            accepted: self.paxos.accepted.clone(),
                        },
                    )])
                } else {
                    Ok(vec![(
                        Dest::Voter(from),
                        ConsensusMsg::Nack {
                            config_id: cid,
                            ballot: *ballot,
                            promised: self.paxos.promised,
                        },
                    )])
                }
            }
            ConsensusMsg::Promise { ballot, accepted, .. } => {
                if let Some((_, p)) = accepted {
                    self.validate(p)?;
                }
                if self.paxos.phase != PaxosPhase::Preparing || *ballot != self.paxos.rank {
                    return Ok(Vec::new());
                }
                if self.votes.voter_index(from).is_none() {
                    return Err(ConsensusError::NotAVoter(from));
                }
                self.paxos.promises.insert(from, accepted.clone());
                if self.paxos.promises.len() < classic_quorum(self.votes.n()) {
                    return Ok(Vec::new());
                }
                let Some(value) = self.choose_value() else {
                    return Ok(Vec::new());
                };
                self.paxos.phase = PaxosPhase::Accepting;
                self.paxos.value = Some(value.clone());
                Ok(vec![(
                    Dest::AllVoters,
                    ConsensusMsg::Accept {
                        config_id: cid,
                        ballot: self.paxos.rank,
                        proposal: value,
                    },
                )])
            }
            ConsensusMsg::Nack { ballot, promised, .. } => {
                self.paxos.highest_seen = self.paxos.highest_seen.max(promised.round);
                if *ballot == self.paxos.rank && self.paxos.phase != PaxosPhase::Idle {
                    self.arm_retry(now);
                }
                Ok(Vec::new())
            }
            ConsensusMsg::Accept { ballot, proposal, .. } => {
                self.validate(proposal)?;
                self.paxos.highest_seen = self.paxos.highest_seen.max(ballot.round);
                if *ballot >= self.paxos.promised {
                    self.paxos.promised = *ballot;
                    self.paxos.accepted = Some((*ballot, proposal.clone()));
                    Ok(vec![(
                        Dest::Voter(ballot.node),
                        ConsensusMsg::Accepted {
                            config_id: cid,
                            ballot: *ballot,
                        },
                    )])
                } else {
                    Ok(vec![(
                        Dest::Voter(from),
                        ConsensusMsg::Nack {
                            config_id: cid,
                            ballot: *ballot,
                            promised: self.paxos.promised,
                        },
                    )])
                }
            }
            ConsensusMsg::Accepted { ballot, .. } => {
                if self.paxos.phase != PaxosPhase::Accepting || *ballot != self.paxos.rank {
                    return Ok(Vec::new());
                }
                if self.votes.voter_index(from).is_none() {
                    return Err(ConsensusError::NotAVoter(from));
                }
                self.paxos.accepts.insert(from);
                if self.paxos.accepts.len() < classic_quorum(self.votes.n()) {
                    return Ok(Vec::new());
                }
                let value = self.paxos.value.clone().expect("accepting phase carries a value");
                self.learn(value.clone());
                Ok(vec![(
                    Dest::AllVoters,
                    ConsensusMsg::Learn {
                        config_id: cid,
                        proposal: value,
                    },
                )])
            }
        }
    }

    /// Value selection for phase 2 from the collected promises.
    fn choose_value(&self) -> Option<CutProposal> {
        let promises = &self.paxos.promises;
        let highest = promises.values().filter_map(|a| a.as_ref().map(|(b, _)| *b)).max();
        match highest {
            Some(b) if !b.is_fast() => promises
                .values()
                .filter_map(|a| a.as_ref())
                .find(|(ab, _)| *ab == b)
                .map(|(_, p)| p.clone()),
            Some(_) => {
                let fast_votes: Vec<&CutProposal> = promises
                    .values()
                    .filter_map(|a| a.as_ref())
                    .filter(|(b, _)| b.is_fast())
                    .map(|(_, p)| p)
                    .collect();
                if let Some(c) = recovery_candidate(self.votes.n(), promises.len(), fast_votes.iter().copied()) {
                    return Some(c.clone());
                }
                if let Some(own) = &self.own_proposal {
                    return Some(own.clone());
                }
                // No own proposal: back the most supported value.
                let mut counts: BTreeMap<&CutProposal, usize> = BTreeMap::new();
                for p in fast_votes {
                    *counts.entry(p).or_default() += 1;
                }
                counts
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
                    .map(|(p, _)| p.clone())
            }
            None => self.own_proposal.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Endpoint, Member, ProtocolParams};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn config(n: usize, seed: u64) -> Arc<Configuration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..n)
            .map(|i| {
                Member::new(
                    NodeId::random(&mut rng),
                    Endpoint::new("10.3.0.1", 4000 + i as u16).unwrap(),
                )
            })
            .collect();
        Arc::new(Configuration::bootstrap(members, ProtocolParams::default()).unwrap())
    }

    fn cut_removing(cfg: &Configuration, idx: &[usize]) -> CutProposal {
        let mut c = CutProposal::new(cfg.id);
        for i in idx {
            c.removals.insert(cfg.members[*i].id);
        }
        c
    }

    fn voters(cfg: &Configuration) -> Arc<[NodeId]> {
        cfg.node_ids().into()
    }

    #[test]
    fn quorum_sizes() {
        assert_eq!(fast_quorum(1), 1);
        assert_eq!(fast_quorum(4), 4);
        assert_eq!(fast_quorum(8), 7);
        assert_eq!(fast_quorum(1000), 751);
        assert_eq!(classic_quorum(4), 3);
        assert_eq!(recovery_threshold(4, 3), 3);
    }

    #[test]
    fn recovery_rule_examples() {
        // n=4, split fast votes, quorum of 3 sees {P1:2, P2:1}: no candidate.
        assert_eq!(recovery_candidate(4, 3, ["p1", "p1", "p2"]), None);
        // Quorum sees {P1:3}: P1 may have been chosen and must be proposed.
        assert_eq!(recovery_candidate(4, 3, ["p1", "p1", "p1"]), Some("p1"));
    }

    #[test]
    fn bitmap_basics_and_wire_format() {
        let mut a = VoteBitmap::new(70);
        a.set(0);
        a.set(69);
        assert_eq!(a.count(), 2);
        assert!(a.get(69) && !a.get(68) && !a.get(700));
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"len":70,"bits":"010000000000000020"}"#);
        let back: VoteBitmap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<VoteBitmap>(r#"{"len":3,"bits":"ff"}"#).is_err());
        let mut short = VoteBitmap::new(3);
        assert!(matches!(short.merge(&a), Err(ConsensusError::BitmapLength { .. })));
    }

    #[test]
    fn ballot_order() {
        let lo = NodeId(1);
        let hi = NodeId(2);
        assert!(Ballot { round: 1, node: lo } > Ballot { round: 1, node: hi });
        assert!(Ballot { round: 2, node: hi } > Ballot { round: 1, node: lo });
        assert!(Ballot { round: 1, node: hi } > Ballot::FAST);
    }

    #[test]
    fn four_identical_votes_decide() {
        let cfg = config(4, 1);
        let p = cut_removing(&cfg, &[0]);
        let ids = cfg.node_ids();
        let mut states: Vec<VoteState> = ids.iter().map(|_| VoteState::new(cfg.id, voters(&cfg))).collect();
        let votes: Vec<FastVote> = ids
            .iter()
            .zip(states.iter_mut())
            .map(|(id, s)| s.start_fast_round(*id, p.clone(), 0, 20).unwrap())
            .collect();
        let mut merged = VoteState::new(cfg.id, voters(&cfg));
        for (i, v) in votes.iter().enumerate() {
            let out = merged.merge_votes(v).unwrap();
            if i < 3 {
                assert!(out.is_none(), "popcount {} must not decide", i + 1);
            } else {
                assert_eq!(out, Some(p.clone()));
            }
        }
        assert_eq!(merged.tally(p.digest()), 4);
    }

    #[test]
    fn double_vote_is_rejected() {
        let cfg = config(4, 2);
        let mut s = VoteState::new(cfg.id, voters(&cfg));
        let me = cfg.members[0].id;
        s.start_fast_round(me, cut_removing(&cfg, &[1]), 0, 20).unwrap();
        assert_eq!(
            s.start_fast_round(me, cut_removing(&cfg, &[2]), 0, 20),
            Err(ConsensusError::AlreadyVoted)
        );
    }

    #[test]
    fn merge_is_idempotent() {
        let cfg = config(8, 3);
        let p = cut_removing(&cfg, &[0]);
        let mut a = VoteState::new(cfg.id, voters(&cfg));
        let v = a.start_fast_round(cfg.members[1].id, p, 0, 20).unwrap();
        let mut b = VoteState::new(cfg.id, voters(&cfg));
        b.merge_votes(&v).unwrap();
        let before = b.snapshot();
        b.merge_votes(&v).unwrap();
        assert_eq!(before, b.snapshot());
    }

    #[test]
    fn blocked_fast_round_is_detected() {
        let cfg = config(4, 4);
        let (p1, p2) = (cut_removing(&cfg, &[0]), cut_removing(&cfg, &[1]));
        let mut s = VoteState::new(cfg.id, voters(&cfg));
        s.start_fast_round(cfg.members[2].id, p1, 0, 20).unwrap();
        assert!(!s.fast_round_blocked());
        let mut other = VoteState::new(cfg.id, voters(&cfg));
        let v = other.start_fast_round(cfg.members[3].id, p2, 0, 20).unwrap();
        s.merge_votes(&v).unwrap();
        // n=4 needs all four votes on one proposal.
        assert!(s.fast_round_blocked());
    }

    fn arb_bitmap(len: usize) -> impl Strategy<Value = VoteBitmap> {
        proptest::collection::vec(any::<bool>(), len).prop_map(move |bits| {
            let mut bm = VoteBitmap::new(len);
            for (i, b) in bits.into_iter().enumerate() {
                if b {
                    bm.set(i);
                }
            }
            bm
        })
    }

    proptest! {
        #[test]
        fn bitmap_merge_is_a_semilattice(
            a in arb_bitmap(97), b in arb_bitmap(97), c in arb_bitmap(97)
        ) {
            let join = |x: &VoteBitmap, y: &VoteBitmap| {
                let mut z = x.clone();
                z.merge(y).unwrap();
                z
            };
            prop_assert_eq!(join(&a, &b), join(&b, &a));
            prop_assert_eq!(join(&join(&a, &b), &c), join(&a, &join(&b, &c)));
            prop_assert_eq!(join(&a, &a), a.clone());
        }

        #[test]
        fn vote_state_converges_under_any_merge_order(seed in any::<u64>()) {
            let cfg = config(9, 5);
            let props = [cut_removing(&cfg, &[0]), cut_removing(&cfg, &[1])];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let votes: Vec<FastVote> = cfg.node_ids().iter().map(|id| {
                let mut s = VoteState::new(cfg.id, voters(&cfg));
                s.start_fast_round(*id, props[rng.gen_range(0..2)].clone(), 0, 20).unwrap()
            }).collect();
            let mut orders = Vec::new();
            for _ in 0..3 {
                let mut vs = votes.clone();
                vs.shuffle(&mut rng);
                // Replay some messages to exercise idempotence.
                let extra = vs[0].clone();
                vs.push(extra);
                let mut s = VoteState::new(cfg.id, voters(&cfg));
                for v in &vs {
                    s.merge_votes(v).unwrap();
                }
                prop_assert!(s.single_vote_invariant());
                orders.push((s.snapshot(), s.decided().cloned()));
            }
            prop_assert!(orders.windows(2).all(|w| w[0] == w[1]));
        }
    }

    /// Message-level model: random delivery order, loss and duplication over
    /// a handful of nodes with conflicting initial proposals.
    fn run_model(n: usize, seed: u64, loss: f64) -> Vec<Option<CutProposal>> {
        let cfg = config(n, 100 + n as u64);
        let ids = cfg.node_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let choices: Vec<CutProposal> = (0..3).map(|i| cut_removing(&cfg, &[i % n])).collect();
        let mut nodes: Vec<FastPaxos> = ids
            .iter()
            .map(|id| FastPaxos::new(*id, cfg.clone(), voters(&cfg), 5))
            .collect();
        let mut net: VecDeque<(usize, usize, ConsensusMsg)> = VecDeque::new();
        let route = |net: &mut VecDeque<(usize, usize, ConsensusMsg)>, from: usize, out: Outgoing| {
            for (dest, m) in out {
                match dest {
                    Dest::AllVoters => {
                        for to in 0..n {
                            net.push_back((from, to, m.clone()));
                        }
                    }
                    Dest::Voter(id) => {
                        let to = ids.binary_search(&id).unwrap();
                        net.push_back((from, to, m));
                    }
                }
            }
        };
        for (i, node) in nodes.iter_mut().enumerate() {
            if rng.gen_bool(0.9) {
                let p = choices[rng.gen_range(0..choices.len())].clone();
                let out = node.propose(p, 0).unwrap();
                route(&mut net, i, out);
            }
        }
        for now in 0..400u64 {
            let mut batch: Vec<_> = net.drain(..).collect();
            batch.shuffle(&mut rng);
            for (from, to, m) in batch {
                if rng.gen_bool(loss) {
                    continue;
                }
                if rng.gen_bool(0.05) {
                    net.push_back((from, to, m.clone()));
                }
                if let Ok(out) = nodes[to].handle(ids[from], &m, now) {
                    route(&mut net, to, out);
                }
            }
            for (i, node) in nodes.iter_mut().enumerate() {
                let out = node.tick(now);
                route(&mut net, i, out);
            }
            // Aggregated vote gossip.
            for (i, node) in nodes.iter().enumerate() {
                if node.decided().is_none() {
                    for v in node.votes().snapshot() {
                        let to = rng.gen_range(0..n);
                        net.push_back((i, to, ConsensusMsg::FastVote(v)));
                    }
                }
            }
        }
        nodes.iter().map(|x| x.decided().cloned()).collect()
    }

    #[test]
    fn model_agreement_under_loss_and_reordering() {
        for seed in 0..300 {
            let n = 3 + (seed as usize % 4);
            let decisions = run_model(n, seed, 0.2);
            let distinct: BTreeSet<&CutProposal> = decisions.iter().flatten().collect();
            assert!(distinct.len() <= 1, "seed {seed}: {distinct:?}");
        }
    }

    #[test]
    fn model_liveness_without_loss() {
        for seed in 0..100 {
            let decisions = run_model(5, 1000 + seed, 0.0);
            assert!(decisions.iter().all(Option::is_some), "seed {seed}");
        }
    }

    #[test]
    fn identical_proposals_decide_without_classic_rounds() {
        let cfg = config(6, 9);
        let ids = cfg.node_ids();
        let p = cut_removing(&cfg, &[2]);
        let mut nodes: Vec<FastPaxos> = ids
            .iter()
            .map(|id| FastPaxos::new(*id, cfg.clone(), voters(&cfg), 20))
            .collect();
        let mut votes = Vec::new();
        for node in nodes.iter_mut() {
            for (_, m) in node.propose(p.clone(), 0).unwrap() {
                votes.push(m);
            }
        }
        for (i, node) in nodes.iter_mut().enumerate() {
            for m in &votes {
                node.handle(ids[i], m, 1).unwrap();
            }
            assert_eq!(node.take_decision(), Some(p.clone()));
            assert_eq!(node.take_decision(), None);
            assert_eq!(node.paxos().rounds_started, 0);
        }
    }

    #[test]
    fn higher_ballot_coordinator_wins() {
        let cfg = config(5, 10);
        let ids = cfg.node_ids();
        let (p1, p2) = (cut_removing(&cfg, &[3]), cut_removing(&cfg, &[4]));
        let mut nodes: Vec<FastPaxos> = ids
            .iter()
            .map(|id| FastPaxos::new(*id, cfg.clone(), voters(&cfg), 5))
            .collect();
        nodes[0].propose(p1.clone(), 0).unwrap();
        nodes[1].propose(p2.clone(), 0).unwrap();
        // Both time out and coordinate round 1; node 0 has the lower id.
        let prep0 = nodes[0].tick(5);
        let prep1 = nodes[1].tick(5);
        let b0 = match &prep0[0].1 {
            ConsensusMsg::Prepare { ballot, .. } => *ballot,
            _ => unreachable!(),
        };
        let b1 = match &prep1[0].1 {
            ConsensusMsg::Prepare { ballot, .. } => *ballot,
            _ => unreachable!(),
        };
        assert!(b0 > b1);
        // Acceptors see the weaker prepare first, then the stronger one.
        let mut to0 = Vec::new();
        for i in 2..5 {
            nodes[i].handle(ids[1], &prep1[0].1, 6).unwrap();
            for (_, m) in nodes[i].handle(ids[0], &prep0[0].1, 6).unwrap() {
                to0.push((ids[i], m));
            }
        }
        let mut accept = None;
        for (from, m) in to0 {
            for (_, out) in nodes[0].handle(from, &m, 7).unwrap() {
                accept = Some(out);
            }
        }
        let accept = accept.expect("coordinator reached a majority");
        // With {p1:1 (own), nothing else} there is no candidate: own value.
        match &accept {
            ConsensusMsg::Accept { proposal, .. } => assert_eq!(proposal, &p1),
            m => panic!("unexpected {m:?}"),
        }
        // The weaker coordinator's accept is refused.
        let weak_accept = ConsensusMsg::Accept {
            config_id: cfg.id,
            ballot: b1,
            proposal: p2,
        };
        let out = nodes[2].handle(ids[1], &weak_accept, 8).unwrap();
        assert!(matches!(out[0].1, ConsensusMsg::Nack { .. }));
    }

    #[test]
    fn stale_prepare_returns_promised_ballot() {
        let cfg = config(3, 11);
        let ids = cfg.node_ids();
        let mut a = FastPaxos::new(ids[0], cfg.clone(), voters(&cfg), 5);
        let strong = Ballot { round: 3, node: ids[1] };
        let weak = Ballot { round: 2, node: ids[2] };
        a.handle(
            ids[1],
            &ConsensusMsg::Prepare {
                config_id: cfg.id,
                ballot: strong,
            },
            0,
        )
        .unwrap();
        let out = a
            .handle(
                ids[2],
                &ConsensusMsg::Prepare {
                    config_id: cfg.id,
                    ballot: weak,
                },
                0,
            )
            .unwrap();
        assert_eq!(
            out,
            vec![(
                Dest::Voter(ids[2]),
                ConsensusMsg::Nack {
                    config_id: cfg.id,
                    ballot: weak,
                    promised: strong
                }
            )]
        );
        // The fast round is closed for this acceptor now.
        assert_eq!(
            a.propose(cut_removing(&cfg, &[2]), 1),
            Err(ConsensusError::FastRoundClosed)
        );
    }

    #[test]
    fn wrong_configuration_is_refused() {
        let cfg = config(3, 12);
        let ids = cfg.node_ids();
        let mut a = FastPaxos::new(ids[0], cfg.clone(), voters(&cfg), 5);
        let msg = ConsensusMsg::Prepare {
            config_id: ConfigurationId(cfg.id.0 ^ 1),
            ballot: Ballot { round: 1, node: ids[1] },
        };
        assert!(matches!(
            a.handle(ids[1], &msg, 0),
            Err(ConsensusError::WrongConfiguration { .. })
        ));
    }
}
