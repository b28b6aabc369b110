//! JSON wire messages. One message per WebSocket text frame.

use serde::{Deserialize, Serialize};
use vader_harvest::ArmId;

pub const DOF: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeleopMessage {
    JointCommand {
        arm: ArmId,
        q: [f64; DOF],
        seq: u64,
        t_client_us: u64,
    },
    #[serde(rename = "state")]
    StateUpdate {
        arm: ArmId,
        q: [f64; DOF],
        attached: bool,
        seq: u64,
        t_server_us: u64,
    },
    Takeover {
        arm: ArmId,
    },
    Release {
        arm: ArmId,
    },
    Estop,
    Ping {
        nonce: u64,
    },
    Pong {
        nonce: u64,
        t_server_us: u64,
    },
    /// Server reply to a rejected client message.
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("joint angles must be finite")]
    NonFinite,
    #[error("seq {got} does not follow {last}")]
    StaleSeq { last: u64, got: u64 },
    #[error("{0} messages are server-to-client only")]
    ServerOnly(&'static str),
}

impl TeleopMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ProtocolError> {
        let m: TeleopMessage = serde_json::from_str(s).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        match &m {
            TeleopMessage::JointCommand { q, .. } | TeleopMessage::StateUpdate { q, .. } if q.iter().any(|v| !v.is_finite()) => {
                Err(ProtocolError::NonFinite)
            }
            _ => Ok(m),
        }
    }
}

/// Per-connection check that client sequence numbers strictly increase.
#[derive(Debug, Default)]
pub struct SeqGuard {
    last: Option<u64>,
}

impl SeqGuard {
    pub fn accept(&mut self, seq: u64) -> Result<(), ProtocolError> {
        match self.last {
            Some(last) if seq <= last => Err(ProtocolError::StaleSeq { last, got: seq }),
            _ => {
                self.last = Some(seq);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format_matches_the_documented_schema() {
        let cmd = TeleopMessage::JointCommand {
            arm: ArmId::Gripper,
            q: [0.0, 0.5, 0.0, 1.0, 0.0, 1.5, 0.0],
            seq: 3,
            t_client_us: 10,
        };
        assert_eq!(
            cmd.to_json(),
            r#"{"type":"joint_command","arm":"gripper","q":[0.0,0.5,0.0,1.0,0.0,1.5,0.0],"seq":3,"t_client_us":10}"#
        );
        let state = TeleopMessage::StateUpdate {
            arm: ArmId::Cutter,
            q: [0.0; DOF],
            attached: false,
            seq: 1,
            t_server_us: 2,
        };
        assert!(state.to_json().starts_with(r#"{"type":"state","arm":"cutter""#));
        assert_eq!(TeleopMessage::Estop.to_json(), r#"{"type":"estop"}"#);
        assert_eq!(TeleopMessage::from_json(r#"{"type":"ping","nonce":7}"#).unwrap(), TeleopMessage::Ping { nonce: 7 });
        assert_eq!(
            TeleopMessage::from_json(r#"{"type":"takeover","arm":"cutter"}"#).unwrap(),
            TeleopMessage::Takeover { arm: ArmId::Cutter }
        );
        for m in [cmd, state, TeleopMessage::Release { arm: ArmId::Gripper }, TeleopMessage::Pong { nonce: 1, t_server_us: 9 }] {
            assert_eq!(TeleopMessage::from_json(&m.to_json()).unwrap(), m);
        }
    }

    #[test]
    fn bad_messages_are_rejected() {
        assert!(matches!(TeleopMessage::from_json(r#"{"type":"jump"}"#), Err(ProtocolError::Malformed(_))));
        assert!(matches!(
            TeleopMessage::from_json(r#"{"type":"joint_command","arm":"gripper","q":[0,0,0],"seq":1,"t_client_us":0}"#),
            Err(ProtocolError::Malformed(_))
        ));
        assert!(matches!(
            TeleopMessage::from_json(r#"{"type":"takeover","arm":"left"}"#),
            Err(ProtocolError::Malformed(_))
        ));
        // JSON has no NaN literal and serde_json refuses overflowing numbers, so the decoded
        // message check is the second line of defense
        assert!(matches!(
            TeleopMessage::from_json(r#"{"type":"joint_command","arm":"gripper","q":[1e999,0,0,0,0,0,0],"seq":1,"t_client_us":0}"#),
            Err(ProtocolError::Malformed(_))
        ));
    }

    #[test]
    fn seq_must_strictly_increase() {
        let mut g = SeqGuard::default();
        assert!(g.accept(0).is_ok());
        assert!(g.accept(5).is_ok());
        assert_eq!(g.accept(5), Err(ProtocolError::StaleSeq { last: 5, got: 5 }));
        assert!(g.accept(4).is_err());
        assert!(g.accept(6).is_ok());
    }
}
