use thiserror::Error;

use crate::model::{ConfigurationId, Endpoint, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("membership list is empty")]
    EmptyMembership,
    #[error("member ids are not strictly ascending")]
    Unsorted,
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("duplicate endpoint {0}")]
    DuplicateEndpoint(Endpoint),
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
    #[error("stale proposal: configuration is {expected}, proposal names {got}")]
    StaleProposal {
        expected: ConfigurationId,
        got: ConfigurationId,
    },
    #[error("{0} is not a member of the configuration")]
    NotAMember(NodeId),
    #[error("{0} is already a member of the configuration")]
    AlreadyMember(NodeId),
    #[error("cut proposal has no removals and no joins")]
    EmptyCut,
    #[error("alert kind does not match its subject")]
    MalformedAlert,
    #[error("decode error: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("{0} is not a member of the topology")]
    UnknownNode(NodeId),
    #[error("spectral analysis needs at least 3 nodes, got {0}")]
    TooSmall(usize),
}

/// Why the cut detector refused an alert.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlertRejected {
    #[error("alert names configuration {got}, detector is at {current}")]
    Stale {
        current: ConfigurationId,
        got: ConfigurationId,
    },
    #[error("{observer} is not the ring-{ring} observer of {subject}")]
    NotAnObserver {
        observer: NodeId,
        subject: NodeId,
        ring: usize,
    },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("already voted in the fast round of this configuration")]
    AlreadyVoted,
    #[error("fast round closed by a promise to a classic ballot")]
    FastRoundClosed,
    #[error("message names configuration {got}, consensus is at {current}")]
    WrongConfiguration {
        current: ConfigurationId,
        got: ConfigurationId,
    },
    #[error("vote bitmap has {got} bits, expected {expected}")]
    BitmapLength { expected: usize, got: usize },
    #[error("proposal digest collision on {0:016x}")]
    DigestCollision(u64),
    #[error("{0} is not a voter in this configuration")]
    NotAVoter(crate::model::NodeId),
    #[error("proposal does not apply to this configuration")]
    InvalidProposal,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("frame of {0} bytes exceeds the frame limit")]
    FrameTooLarge(usize),
    #[error("truncated frame")]
    Truncated,
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
