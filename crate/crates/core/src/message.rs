//! Messages exchanged between runtimes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusMsg;
use crate::model::{Alert, Configuration, ConfigurationId, CutProposal, Endpoint, Member, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Probe {
        config_id: ConfigurationId,
        seq: u64,
    },
    ProbeAck {
        config_id: ConfigurationId,
        seq: u64,
    },
    /// A batch of alerts, forwarded epidemically. `id` suppresses duplicates.
    Alerts {
        id: u64,
        config_id: ConfigurationId,
        alerts: Vec<Alert>,
    },
    /// Alerts reported straight to the auxiliary ensemble (centralized mode).
    AlertReport {
        config_id: ConfigurationId,
        alerts: Vec<Alert>,
    },
    JoinRequest {
        joiner: Member,
    },
    /// Reply from the seed: who the joiner's temporary observers are.
    JoinProceed {
        config_id: ConfigurationId,
        observers: Vec<(NodeId, Endpoint)>,
    },
    /// The joiner's configuration is gone or the request cannot be served
    /// now; start over.
    JoinRetry {
        config_id: ConfigurationId,
    },
    /// Joiner to a temporary observer: raise JOIN alerts on these rings.
    JoinIntent {
        joiner: Member,
        config_id: ConfigurationId,
        rings: Vec<usize>,
    },
    /// A configuration handed to a process outside it (a joiner, or a member
    /// in centralized mode).
    ViewInstall {
        configuration: Arc<Configuration>,
    },
    /// "I am at `config_id`; send me what I missed."
    SyncRequest {
        config_id: ConfigurationId,
    },
    /// Decided cuts, in order, starting at the requester's configuration.
    Catchup {
        chain: Vec<CutProposal>,
    },
    /// The sender is leaving and asks its observers to report it.
    Leave {
        config_id: ConfigurationId,
    },
    /// Carries its own `type` tag (`FAST_VOTE`, `PREPARE`, ...).
    #[serde(untagged)]
    Consensus(ConsensusMsg),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Probe { .. } => MessageKind::Probe,
            Message::ProbeAck { .. } => MessageKind::ProbeAck,
            Message::Alerts { .. } | Message::AlertReport { .. } => MessageKind::Alert,
            Message::Consensus(ConsensusMsg::FastVote(_)) => MessageKind::Vote,
            Message::Consensus(ConsensusMsg::Learn { .. }) => MessageKind::Learn,
            Message::Consensus(_) => MessageKind::Classic,
            Message::JoinRequest { .. }
            | Message::JoinProceed { .. }
            | Message::JoinRetry { .. }
            | Message::JoinIntent { .. } => MessageKind::Join,
            Message::ViewInstall { .. } | Message::SyncRequest { .. } | Message::Catchup { .. } => MessageKind::Sync,
            Message::Leave { .. } => MessageKind::Leave,
        }
    }
}

/// Coarse message classes for counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Probe,
    ProbeAck,
    Alert,
    Vote,
    Classic,
    Learn,
    Join,
    Sync,
    Leave,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::Probe,
        MessageKind::ProbeAck,
        MessageKind::Alert,
        MessageKind::Vote,
        MessageKind::Classic,
        MessageKind::Learn,
        MessageKind::Join,
        MessageKind::Sync,
        MessageKind::Leave,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::Probe => "probe",
            MessageKind::ProbeAck => "probe_ack",
            MessageKind::Alert => "alert",
            MessageKind::Vote => "vote",
            MessageKind::Classic => "classic",
            MessageKind::Learn => "learn",
            MessageKind::Join => "join",
            MessageKind::Sync => "sync",
            MessageKind::Leave => "leave",
        }
    }
}

/// Where an outbound message goes. Members are addressed by id; processes
/// outside the configuration (seeds, joiners) by endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Node(NodeId),
    Addr(Endpoint),
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub to: Target,
    pub msg: Arc<Message>,
}

#[derive(Debug, Clone)]
pub struct Inbound {
    pub from: NodeId,
    pub msg: Arc<Message>,
}
