//! Membership protocol engine.
//!
//! Processes watch each other over a K-ring expander overlay, aggregate
//! irrevocable edge alerts into multi-process cuts, and agree on each view
//! change with a leaderless fast path that falls back to classic Paxos.
//!
//! The node logic is a pure `step(now, inbox) -> outbox` state machine
//! ([`engine::NodeRuntime`]), driven either by a deterministic simulator or by
//! the loopback [`transport`].

pub mod codec;
pub mod consensus;
pub mod cut;
pub mod engine;
pub mod error;
pub mod hash;
pub mod message;
pub mod model;
pub mod monitor;
pub mod topology;
pub mod transport;

pub use error::{AlertRejected, CodecError, ConsensusError, ModelError, TopologyError};
pub use model::{
    derive_config_id, Alert, AlertKind, AlertSubject, Configuration, ConfigurationId, CutProposal, Endpoint, Member,
    NodeId, ProtocolParams, ViewChangeEvent,
};
