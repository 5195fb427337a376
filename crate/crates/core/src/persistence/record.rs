//! Persisted record types and their canonical binary payloads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Decoder, Encoder};
use crate::stage::{AnswerValue, RecordedAnswer};

/// Opaque 128-bit participant identifier, issued on first contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u128);

impl SessionId {
    pub fn random() -> Self {
        SessionId(uuid::Uuid::new_v4().as_u128())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for SessionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 {
            return Err(format!("session id must be 32 hex digits, got {}", s.len()));
        }
        u128::from_str_radix(s, 16)
            .map(SessionId)
            .map_err(|e| format!("bad session id: {e}"))
    }
}

impl Serialize for SessionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Bit flags on a step record.
pub const FLAG_CLOCK_ANOMALY: u8 = 0b0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub session: SessionId,
    pub experiment_id: String,
    pub experiment_version: u32,
    pub seed: u64,
    pub condition: Option<u32>,
    pub server_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub session: SessionId,
    pub stage_index: u32,
    pub stage_id: String,
    pub episode: u32,
    pub step: u32,
    pub frame_id: u64,
    /// Canonical encoding of the state the action was taken in.
    #[serde(with = "hex_bytes")]
    pub pre_state: Vec<u8>,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
    pub t1: f64,
    pub t2: f64,
    pub server_ms: f64,
    pub flags: u8,
}

impl StepRecord {
    /// `t2 - t1`, or `None` when the clocks were anomalous.
    pub fn response_time_ms(&self) -> Option<f64> {
        (self.flags & FLAG_CLOCK_ANOMALY == 0).then_some(self.t2 - self.t1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session: SessionId,
    pub stage_index: u32,
    pub stage_id: String,
    pub answers: Vec<RecordedAnswer>,
    pub server_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub session: SessionId,
    pub stage_index: u32,
    pub episode: u32,
    pub role: ChatRole,
    pub text: String,
    /// Set on the fixed reply sent when the advisor missed its deadline or failed.
    pub unavailable: bool,
    pub server_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    SessionStarted(SessionStarted),
    StageContinued {
        session: SessionId,
        stage_index: u32,
        server_ms: f64,
    },
    Step(StepRecord),
    Feedback(FeedbackRecord),
    Chat(ChatRecord),
    /// Encoded session state; restore may start from the latest one.
    Snapshot {
        session: SessionId,
        state: Vec<u8>,
    },
    Idle {
        session: SessionId,
        server_ms: f64,
    },
}

const KIND_STARTED: u8 = 1;
const KIND_CONTINUED: u8 = 2;
const KIND_STEP: u8 = 3;
const KIND_FEEDBACK: u8 = 4;
const KIND_CHAT: u8 = 5;
const KIND_SNAPSHOT: u8 = 6;
const KIND_IDLE: u8 = 7;

impl Record {
    pub fn session(&self) -> SessionId {
        match self {
            Record::SessionStarted(r) => r.session,
            Record::Step(r) => r.session,
            Record::Feedback(r) => r.session,
            Record::Chat(r) => r.session,
            Record::StageContinued { session, .. }
            | Record::Snapshot { session, .. }
            | Record::Idle { session, .. } => *session,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Record::SessionStarted(_) => "session_started",
            Record::StageContinued { .. } => "stage_continued",
            Record::Step(_) => "step",
            Record::Feedback(_) => "feedback",
            Record::Chat(_) => "chat",
            Record::Snapshot { .. } => "snapshot",
            Record::Idle { .. } => "idle",
        }
    }

    /// Canonical payload: a kind byte, the session id, then kind-specific
    /// fields in declaration order.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Encoder::new();
        let session = self.session().0;
        let put_session = |w: &mut Encoder| {
            w.u64(session as u64).u64((session >> 64) as u64);
        };
        match self {
            Record::SessionStarted(r) => {
                w.u8(KIND_STARTED);
                put_session(&mut w);
                w.str(&r.experiment_id)
                    .u32(r.experiment_version)
                    .u64(r.seed);
                match r.condition {
                    Some(c) => w.u8(1).u32(c),
                    None => w.u8(0),
                };
                w.f64(r.server_ms);
            }
            Record::StageContinued {
                stage_index,
                server_ms,
                ..
            } => {
                w.u8(KIND_CONTINUED);
                put_session(&mut w);
                w.u32(*stage_index).f64(*server_ms);
            }
            Record::Step(r) => {
                w.u8(KIND_STEP);
                put_session(&mut w);
                w.u32(r.stage_index)
                    .str(&r.stage_id)
                    .u32(r.episode)
                    .u32(r.step)
                    .u64(r.frame_id)
                    .bytes(&r.pre_state)
                    .u8(r.action)
                    .f64(r.reward)
                    .bool(r.done)
                    .f64(r.t1)
                    .f64(r.t2)
                    .f64(r.server_ms)
                    .u8(r.flags);
            }
            Record::Feedback(r) => {
                w.u8(KIND_FEEDBACK);
                put_session(&mut w);
                w.u32(r.stage_index)
                    .str(&r.stage_id)
                    .u32(r.answers.len() as u32);
                for a in &r.answers {
                    w.str(&a.question_id).str(&a.prompt);
                    match &a.value {
                        AnswerValue::Number(v) => w.u8(0).f64(*v),
                        AnswerValue::Text(t) => w.u8(1).str(t),
                    };
                }
                w.f64(r.server_ms);
            }
            Record::Chat(r) => {
                w.u8(KIND_CHAT);
                put_session(&mut w);
                w.u32(r.stage_index)
                    .u32(r.episode)
                    .u8(match r.role {
                        ChatRole::User => 0,
                        ChatRole::Assistant => 1,
                    })
                    .str(&r.text)
                    .bool(r.unavailable)
                    .f64(r.server_ms);
            }
            Record::Snapshot { state, .. } => {
                w.u8(KIND_SNAPSHOT);
                put_session(&mut w);
                w.bytes(state);
            }
            Record::Idle { server_ms, .. } => {
                w.u8(KIND_IDLE);
                put_session(&mut w);
                w.f64(*server_ms);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Record, CodecError> {
        Self::decode_at(bytes, 0)
    }

    /// Decodes a payload that starts at absolute offset `base` in some larger
    /// buffer, so errors point into that buffer.
    pub fn decode_at(bytes: &[u8], base: usize) -> Result<Record, CodecError> {
        let shift = |e: CodecError| CodecError::new(e.offset + base, e.reason);
        let mut r = Decoder::new(bytes);
        let kind = r.u8().map_err(shift)?;
        let rec = decode_body(kind, &mut r).map_err(shift)?;
        r.finish().map_err(shift)?;
        Ok(rec)
    }
}

fn decode_body(kind: u8, r: &mut Decoder<'_>) -> Result<Record, CodecError> {
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let session = SessionId(lo | (hi << 64));
    Ok(match kind {
        KIND_STARTED => {
            let experiment_id = r.str()?;
            let experiment_version = r.u32()?;
            let seed = r.u64()?;
            let condition = if r.bool()? { Some(r.u32()?) } else { None };
            Record::SessionStarted(SessionStarted {
                session,
                experiment_id,
                experiment_version,
                seed,
                condition,
                server_ms: r.f64()?,
            })
        }
        KIND_CONTINUED => Record::StageContinued {
            session,
            stage_index: r.u32()?,
            server_ms: r.f64()?,
        },
        KIND_STEP => Record::Step(StepRecord {
            session,
            stage_index: r.u32()?,
            stage_id: r.str()?,
            episode: r.u32()?,
            step: r.u32()?,
            frame_id: r.u64()?,
            pre_state: r.bytes()?.to_vec(),
            action: r.u8()?,
            reward: r.f64()?,
            done: r.bool()?,
            t1: r.f64()?,
            t2: r.f64()?,
            server_ms: r.f64()?,
            flags: r.u8()?,
        }),
        KIND_FEEDBACK => {
            let stage_index = r.u32()?;
            let stage_id = r.str()?;
            let n = r.u32()? as usize;
            let mut answers = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let question_id = r.str()?;
                let prompt = r.str()?;
                let at = r.offset();
                let value = match r.u8()? {
                    0 => AnswerValue::Number(r.f64()?),
                    1 => AnswerValue::Text(r.str()?),
                    other => return Err(CodecError::new(at, format!("bad answer tag {other}"))),
                };
                answers.push(RecordedAnswer {
                    question_id,
                    prompt,
                    value,
                });
            }
            Record::Feedback(FeedbackRecord {
                session,
                stage_index,
                stage_id,
                answers,
                server_ms: r.f64()?,
            })
        }
        KIND_CHAT => {
            let stage_index = r.u32()?;
            let episode = r.u32()?;
            let at = r.offset();
            let role = match r.u8()? {
                0 => ChatRole::User,
                1 => ChatRole::Assistant,
                other => return Err(CodecError::new(at, format!("bad chat role {other}"))),
            };
            Record::Chat(ChatRecord {
                session,
                stage_index,
                episode,
                role,
                text: r.str()?,
                unavailable: r.bool()?,
                server_ms: r.f64()?,
            })
        }
        KIND_SNAPSHOT => Record::Snapshot {
            session,
            state: r.bytes()?.to_vec(),
        },
        KIND_IDLE => Record::Idle {
            session,
            server_ms: r.f64()?,
        },
        other => {
            return Err(CodecError::new(
                r.offset().saturating_sub(17),
                format!("unknown record kind {other}"),
            ))
        }
    })
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_session() -> impl Strategy<Value = SessionId> {
        any::<u128>().prop_map(SessionId)
    }

    fn arb_record() -> impl Strategy<Value = Record> {
        prop_oneof![
            (
                arb_session(),
                "[a-z]{0,8}",
                any::<u32>(),
                any::<u64>(),
                any::<Option<u32>>(),
                any::<f64>()
            )
                .prop_map(
                    |(session, experiment_id, experiment_version, seed, condition, server_ms)| {
                        Record::SessionStarted(SessionStarted {
                            session,
                            experiment_id,
                            experiment_version,
                            seed,
                            condition,
                            server_ms,
                        })
                    }
                ),
            (
                arb_session(),
                any::<u32>(),
                prop::collection::vec(any::<u8>(), 0..64),
                any::<u8>(),
                any::<f64>(),
                any::<bool>(),
                any::<(f64, f64, f64)>(),
                any::<u8>()
            )
                .prop_map(
                    |(
                        session,
                        stage_index,
                        pre_state,
                        action,
                        reward,
                        done,
                        (t1, t2, server_ms),
                        flags,
                    )| {
                        Record::Step(StepRecord {
                            session,
                            stage_index,
                            stage_id: "s".into(),
                            episode: 2,
                            step: 3,
                            frame_id: 9,
                            pre_state,
                            action,
                            reward,
                            done,
                            t1,
                            t2,
                            server_ms,
                            flags,
                        })
                    }
                ),
            (arb_session(), "[ -~]{0,20}", any::<bool>()).prop_map(
                |(session, text, unavailable)| {
                    Record::Chat(ChatRecord {
                        session,
                        stage_index: 1,
                        episode: 0,
                        role: ChatRole::Assistant,
                        text,
                        unavailable,
                        server_ms: 1.5,
                    })
                }
            ),
            (arb_session(), any::<f64>(), "[ -~]{0,10}").prop_map(|(session, v, t)| {
                Record::Feedback(FeedbackRecord {
                    session,
                    stage_index: 0,
                    stage_id: "f".into(),
                    answers: vec![
                        RecordedAnswer {
                            question_id: "a".into(),
                            prompt: "A?".into(),
                            value: AnswerValue::Number(v),
                        },
                        RecordedAnswer {
                            question_id: "b".into(),
                            prompt: "B?".into(),
                            value: AnswerValue::Text(t),
                        },
                    ],
                    server_ms: 0.0,
                })
            }),
            (arb_session(), prop::collection::vec(any::<u8>(), 0..32))
                .prop_map(|(session, state)| Record::Snapshot { session, state }),
            arb_session().prop_map(|session| Record::Idle {
                session,
                server_ms: 2.0
            }),
            arb_session().prop_map(|session| Record::StageContinued {
                session,
                stage_index: 4,
                server_ms: 2.0
            }),
        ]
    }

    proptest! {
        // Compared through bytes so NaN payloads round-trip too.
        #[test]
        fn payload_round_trip_is_canonical(rec in arb_record()) {
            let bytes = rec.encode();
            let back = Record::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn session_id_text_form() {
        let id = SessionId(0xabc);
        let s = id.to_string();
        assert_eq!(s.len(), 32);
        assert_eq!(s.parse::<SessionId>().unwrap(), id);
        assert!("xyz".parse::<SessionId>().is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected_with_offset() {
        let rec = Record::Idle {
            session: SessionId(1),
            server_ms: 0.0,
        };
        let mut bytes = rec.encode();
        let len = bytes.len();
        bytes.push(0);
        let err = Record::decode_at(&bytes, 100).unwrap_err();
        assert_eq!(err.offset, 100 + len);
    }
}
