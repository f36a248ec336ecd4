//! Wire encoding: a 4-byte big-endian length prefix followed by the JSON form
//! of an [`Envelope`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::CodecError;
use crate::message::Message;
use crate::model::{Endpoint, NodeId};

/// Current schema version, carried in every envelope.
pub const SCHEMA_VERSION: u32 = 1;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 4 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub from: NodeId,
    pub from_addr: Endpoint,
    pub msg: Message,
}

impl Envelope {
    pub fn new(from: NodeId, from_addr: Endpoint, msg: Message) -> Self {
        Envelope {
            v: SCHEMA_VERSION,
            from,
            from_addr,
            msg,
        }
    }
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>, CodecError> {
    let body = serde_json::to_vec(env)?;
    if body.len() > MAX_FRAME {
        return Err(CodecError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes exactly one frame occupying all of `buf`.
pub fn decode(buf: &[u8]) -> Result<Envelope, CodecError> {
    if buf.len() < 4 {
        return Err(CodecError::Truncated);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME {
        return Err(CodecError::FrameTooLarge(len));
    }
    if buf.len() != 4 + len {
        return Err(CodecError::Truncated);
    }
    decode_body(&buf[4..])
}

fn decode_body(body: &[u8]) -> Result<Envelope, CodecError> {
    let env: Envelope = serde_json::from_slice(body)?;
    if env.v != SCHEMA_VERSION {
        return Err(CodecError::Version(env.v));
    }
    Ok(env)
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<(), CodecError> {
    w.write_all(&encode(env)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Envelope, CodecError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(CodecError::FrameTooLarge(len));
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body)?;
    decode_body(&body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConfigurationId;

    fn env() -> Envelope {
        Envelope::new(
            NodeId(7),
            Endpoint::new("127.0.0.1", 7000).unwrap(),
            Message::Probe {
                config_id: ConfigurationId(0xabc),
                seq: 3,
            },
        )
    }

    #[test]
    fn round_trip() {
        let bytes = encode(&env()).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert_eq!(decode(&bytes).unwrap(), env());
        let mut cursor = std::io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cursor).unwrap(), env());
    }

    #[test]
    fn exact_encoding() {
        let body = &encode(&env()).unwrap()[4..];
        assert_eq!(
            std::str::from_utf8(body).unwrap(),
            r#"{"v":1,"from":"00000000000000000000000000000007","from_addr":{"host":"127.0.0.1","port":7000},"msg":{"type":"PROBE","config_id":"0000000000000abc","seq":3}}"#
        );
    }

    fn every_message() -> Vec<Message> {
        use crate::consensus::{Ballot, ConsensusMsg, FastVote, VoteBitmap};
        use crate::model::{Alert, Configuration, CutProposal, Member, ProtocolParams};
        let cid = ConfigurationId(9);
        let ep = |p| Endpoint::new("127.0.0.1", p).unwrap();
        let joiner = Member::new(NodeId(3), ep(7003)).with_metadata("zone", "a");
        let cfg = Configuration::bootstrap(
            vec![Member::new(NodeId(1), ep(7001)), Member::new(NodeId(2), ep(7002))],
            ProtocolParams::default(),
        )
        .unwrap();
        let mut cut = CutProposal::new(cid);
        cut.removals.insert(NodeId(2));
        cut.joins.insert(joiner.clone());
        let mut bitmap = VoteBitmap::new(5);
        bitmap.set(1);
        let ballot = Ballot {
            round: 2,
            node: NodeId(1),
        };
        let c = |m| Message::Consensus(m);
        vec![
            Message::Probe { config_id: cid, seq: 1 },
            Message::ProbeAck { config_id: cid, seq: 1 },
            Message::Alerts {
                id: 5,
                config_id: cid,
                alerts: vec![Alert::remove(NodeId(1), NodeId(2), cid, 0)],
            },
            Message::AlertReport {
                config_id: cid,
                alerts: vec![Alert::join(NodeId(1), joiner.clone(), cid, 1)],
            },
            Message::JoinRequest { joiner: joiner.clone() },
            Message::JoinProceed {
                config_id: cid,
                observers: vec![(NodeId(1), ep(7001))],
            },
            Message::JoinRetry { config_id: cid },
            Message::JoinIntent {
                joiner,
                config_id: cid,
                rings: vec![0, 2],
            },
            Message::ViewInstall {
                configuration: std::sync::Arc::new(cfg),
            },
            Message::SyncRequest { config_id: cid },
            Message::Catchup {
                chain: vec![cut.clone()],
            },
            Message::Leave { config_id: cid },
            c(ConsensusMsg::FastVote(FastVote {
                config_id: cid,
                proposal: cut.clone(),
                bitmap,
            })),
            c(ConsensusMsg::Prepare { config_id: cid, ballot }),
            c(ConsensusMsg::Promise {
                config_id: cid,
                ballot,
                accepted: Some((Ballot::FAST, cut.clone())),
            }),
            c(ConsensusMsg::Nack {
                config_id: cid,
                ballot,
                promised: ballot,
            }),
            c(ConsensusMsg::Accept {
                config_id: cid,
                ballot,
                proposal: cut.clone(),
            }),
            c(ConsensusMsg::Accepted { config_id: cid, ballot }),
            c(ConsensusMsg::Learn {
                config_id: cid,
                proposal: cut,
            }),
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for msg in every_message() {
            let e = Envelope::new(NodeId(7), Endpoint::new("127.0.0.1", 7000).unwrap(), msg);
            let bytes = encode(&e).unwrap();
            assert_eq!(decode(&bytes).unwrap(), e, "{}", String::from_utf8_lossy(&bytes[4..]));
        }
    }

    #[test]
    fn consensus_messages_use_their_own_tag() {
        let msgs = every_message();
        let body = serde_json::to_string(msgs.last().unwrap()).unwrap();
        assert!(body.starts_with(r#"{"type":"LEARN","#), "{body}");
        assert_eq!(body.matches("\"type\"").count(), 1);
    }

    #[test]
    fn rejects_bad_frames() {
        let bytes = encode(&env()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(CodecError::Truncated)));
        assert!(matches!(decode(&[0, 0]), Err(CodecError::Truncated)));
        let mut huge = bytes.clone();
        huge[..4].copy_from_slice(&(MAX_FRAME as u32 + 1).to_be_bytes());
        assert!(matches!(decode(&huge), Err(CodecError::FrameTooLarge(_))));
        let mut wrong = env();
        wrong.v = 2;
        let bytes = encode(&wrong).unwrap();
        assert!(matches!(decode(&bytes), Err(CodecError::Version(2))));
    }
}
