//! Wire messages exchanged between the participant client and the server.
//!
//! Every message is a JSON object with a `type` tag and a `seq` number that
//! strictly increases per direction per connection. The `book/` chapter on
//! the wire schema lists every field.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Observation};
use crate::persistence::{ChatEntry, SessionId};
use crate::speculation::{ClientFrame, ClientSuccessor};
use crate::stage::{AnswerValue, FormSchema, StageConfig};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub seq: u64,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        protocol: u32,
        /// Experiment version the client build was made for.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        experiment_version: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<SessionId>,
        /// Last server seq the client processed on a previous connection.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        last_seq: Option<u64>,
    },
    Action {
        frame_id: u64,
        action: ActionId,
        t1: f64,
        t2: f64,
    },
    /// Dismisses the instruction screen of `stage_index`.
    StageDone {
        stage_index: u32,
    },
    FeedbackSubmit {
        stage_index: u32,
        answers: BTreeMap<String, AnswerValue>,
    },
    ChatUser {
        text: String,
    },
    /// Asks for a full resync payload.
    Resync {},
}

impl ClientMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ClientMessage::Hello { .. } => "hello",
            ClientMessage::Action { .. } => "action",
            ClientMessage::StageDone { .. } => "stage_done",
            ClientMessage::FeedbackSubmit { .. } => "feedback_submit",
            ClientMessage::ChatUser { .. } => "chat_user",
            ClientMessage::Resync {} => "resync",
        }
    }
}

/// The participant-facing part of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageView {
    Instruction {
        title: String,
        body: String,
    },
    Feedback {
        title: String,
        questions: FormSchema,
    },
    Environment {
        title: String,
        instructions: String,
        env: String,
        action_names: Vec<String>,
        max_episodes: u32,
        chat: bool,
    },
    Complete {},
}

impl StageView {
    pub fn of(stage: &StageConfig) -> Self {
        match stage {
            StageConfig::Instruction(s) => StageView::Instruction {
                title: s.title.clone(),
                body: s.body.clone(),
            },
            StageConfig::Feedback(s) => StageView::Feedback {
                title: s.title.clone(),
                questions: s.questions.clone(),
            },
            StageConfig::Environment(s) => StageView::Environment {
                title: s.title.clone(),
                instructions: s.instructions.clone(),
                env: s.env.clone(),
                action_names: s
                    .resolve_params()
                    .map(|p| p.action_names().iter().map(|n| n.to_string()).collect())
                    .unwrap_or_default(),
                max_episodes: s.max_episodes,
                chat: s.assistant.is_some(),
            },
        }
    }
}

/// An open frame as the client sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub stage_index: u32,
    pub episode: u32,
    pub step: u32,
    pub frame_id: u64,
    pub observation: Observation,
    /// One entry per action, in action order.
    pub successors: Vec<ClientSuccessor>,
}

impl FramePayload {
    pub fn new(stage_index: u32, episode: u32, step: u32, frame: ClientFrame) -> Self {
        Self {
            stage_index,
            episode,
            step,
            frame_id: frame.frame_id,
            observation: frame.observation,
            successors: frame.successors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    Session {
        session: SessionId,
        experiment_id: String,
        experiment_version: u32,
        protocol: u32,
        /// False when the session was just created.
        resumed: bool,
    },
    StageShow {
        stage_index: u32,
        stage_id: String,
        view: StageView,
    },
    EnvFrame(FramePayload),
    EnvAck {
        /// Frame the action was committed against.
        committed: u64,
        action: ActionId,
        reward: f64,
        done: bool,
        /// Next frame; absent when the stage ended.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame: Option<FramePayload>,
    },
    /// The stage at `stage_index` is finished.
    StageDone {
        stage_index: u32,
        complete: bool,
    },
    FeedbackForm {
        stage_index: u32,
        stage_id: String,
        title: String,
        questions: FormSchema,
    },
    ChatAssistant {
        text: String,
        unavailable: bool,
    },
    /// Everything needed to continue; replaces all client state.
    Resync {
        stage_index: u32,
        stage_id: String,
        episode: u32,
        complete: bool,
        view: StageView,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame: Option<FramePayload>,
        /// Chat of the current episode.
        transcript: Vec<ChatEntry>,
    },
    Error {
        code: ErrorCode,
        message: String,
        /// The server closes the connection after a fatal error.
        fatal: bool,
    },
}

impl ServerMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ServerMessage::Session { .. } => "session",
            ServerMessage::StageShow { .. } => "stage_show",
            ServerMessage::EnvFrame(_) => "env_frame",
            ServerMessage::EnvAck { .. } => "env_ack",
            ServerMessage::StageDone { .. } => "stage_done",
            ServerMessage::FeedbackForm { .. } => "feedback_form",
            ServerMessage::ChatAssistant { .. } => "chat_assistant",
            ServerMessage::Resync { .. } => "resync",
            ServerMessage::Error { .. } => "error",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            fatal: code.is_fatal(),
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    /// Client must say hello first.
    HelloRequired,
    ProtocolMismatch,
    /// The client build targets another experiment version.
    UpgradeRequired,
    /// Another connection took over this session.
    Superseded,
    IllegalAction,
    OutOfPhase,
    InvalidAnswers,
    /// Persistence is behind; retry shortly.
    Saving,
    ChatDisabled,
    ChatLimit,
    ChatBusy,
    Internal,
}

impl ErrorCode {
    pub fn is_fatal(self) -> bool {
        matches!(
            self,
            ErrorCode::Malformed
                | ErrorCode::HelloRequired
                | ErrorCode::ProtocolMismatch
                | ErrorCode::UpgradeRequired
                | ErrorCode::Superseded
        )
    }
}

pub fn encode_server(seq: u64, body: &ServerMessage) -> String {
    serde_json::to_string(&Envelope {
        seq,
        body: body.clone(),
    })
    .expect("server messages serialize")
}

pub fn decode_client(text: &str) -> Result<Envelope<ClientMessage>, serde_json::Error> {
    serde_json::from_str(text)
}
