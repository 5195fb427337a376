//! Scripted participants that speak the wire protocol.
//!
//! [`SimClient`] behaves like the browser client: it caches the latest
//! frame, "renders" the cached successor the moment it acts, sends one action
//! at a time and throws away its pending action on resync. It has no I/O;
//! [`LocalLink`] connects one to a [`Hub`] in-process, and the server crate
//! runs the same client over a websocket.

use std::collections::{BTreeMap, VecDeque};

use crate::assistant::{Consultation, ScriptedAdvisor};
use crate::env::{ActionId, Observation};
use crate::hub::{ConnId, Effects, Hub};
use crate::persistence::{ChatRole, SessionId};
use crate::protocol::{
    ClientMessage, ErrorCode, FramePayload, ServerMessage, StageView, PROTOCOL_VERSION,
};
use crate::rng::Rng;
use crate::stage::{AnswerValue, FormSchema, InputKind};

/// Chooses an action for the frame with this id and observation.
pub type Policy = Box<dyn FnMut(u64, &Observation) -> ActionId + Send>;
pub type Answerer = Box<dyn FnMut(&FormSchema) -> BTreeMap<String, AnswerValue> + Send>;

/// Action drawn from a stream keyed by `(salt, frame id)`; uniform over the
/// legal actions.
pub fn hashed_policy(salt: u64) -> Policy {
    Box::new(move |frame_id, obs| {
        let legal: Vec<u8> = (0..obs.legal.len() as u8)
            .filter(|&a| obs.legal[a as usize])
            .collect();
        let pick = Rng::new(salt)
            .split(frame_id)
            .stream()
            .below(legal.len() as u64);
        ActionId(legal[pick as usize])
    })
}

/// The first acceptable value for every question.
pub fn default_answers(form: &FormSchema) -> BTreeMap<String, AnswerValue> {
    form.questions
        .iter()
        .map(|q| {
            let v = match &q.input {
                InputKind::Likert { min, .. } => AnswerValue::Number(*min as f64),
                InputKind::Radio { options } => {
                    AnswerValue::Text(options.first().cloned().unwrap_or_default())
                }
                InputKind::FreeText { .. } => AnswerValue::Text("ok".into()),
                InputKind::Slider { min, .. } => AnswerValue::Number(*min),
            };
            (q.id.clone(), v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pending {
    pub frame_id: u64,
    pub action: ActionId,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ack {
    pub frame_id: u64,
    pub action: ActionId,
    pub reward: f64,
    pub done: bool,
}

pub struct SimClient {
    pub session: Option<SessionId>,
    /// Experiment version this client was built for.
    pub experiment_version: Option<u32>,
    seq: u64,
    last_server_seq: Option<u64>,
    frame: Option<FramePayload>,
    pending: Option<Pending>,
    policy: Policy,
    answers: Answerer,
    /// Virtual ms between rendering a frame and acting on it.
    pub think_ms: f64,
    /// Virtual monotonic clock (ms).
    pub clock_ms: f64,
    pub complete: bool,
    /// Acknowledged actions, in order.
    pub acks: Vec<Ack>,
    /// Acks whose reward or done differed from the cached successor.
    pub prediction_mismatches: u64,
    pub errors: Vec<(ErrorCode, String)>,
    pub assistant_replies: Vec<(String, bool)>,
    pub resyncs: u64,
    /// Set after a fatal error; the client stops acting.
    pub closed: bool,
}

impl SimClient {
    pub fn new(policy: Policy) -> Self {
        Self {
            session: None,
            experiment_version: None,
            seq: 0,
            last_server_seq: None,
            frame: None,
            pending: None,
            policy,
            answers: Box::new(default_answers),
            think_ms: 100.0,
            clock_ms: 0.0,
            complete: false,
            acks: Vec::new(),
            prediction_mismatches: 0,
            errors: Vec::new(),
            assistant_replies: Vec::new(),
            resyncs: 0,
            closed: false,
        }
    }

    pub fn with_answers(mut self, answers: Answerer) -> Self {
        self.answers = answers;
        self
    }

    pub fn frame(&self) -> Option<&FramePayload> {
        self.frame.as_ref()
    }

    pub fn pending(&self) -> Option<Pending> {
        self.pending
    }

    /// Next outgoing sequence number.
    pub fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    /// Opening message for a new connection.
    pub fn hello(&mut self) -> ClientMessage {
        self.closed = false;
        ClientMessage::Hello {
            protocol: PROTOCOL_VERSION,
            experiment_version: self.experiment_version,
            session: self.session,
            last_seq: self.last_server_seq,
        }
    }

    /// Message to send when a reply seems lost: the pending action again, or
    /// a resync request.
    pub fn retry(&self) -> ClientMessage {
        match (self.pending, &self.frame) {
            (Some(p), Some(f)) if f.frame_id == p.frame_id => ClientMessage::Action {
                frame_id: p.frame_id,
                action: p.action,
                t1: self.clock_ms - self.think_ms,
                t2: self.clock_ms,
            },
            _ => ClientMessage::Resync {},
        }
    }

    pub fn receive_with_seq(&mut self, seq: u64, msg: &ServerMessage) -> Vec<ClientMessage> {
        self.last_server_seq = Some(seq);
        self.receive(msg)
    }

    /// Reacts to one server message; returns messages to send.
    pub fn receive(&mut self, msg: &ServerMessage) -> Vec<ClientMessage> {
        match msg {
            ServerMessage::Session { session, .. } => {
                self.session = Some(*session);
                Vec::new()
            }
            ServerMessage::StageShow {
                stage_index, view, ..
            } => self.show(*stage_index, view),
            ServerMessage::FeedbackForm {
                stage_index,
                questions,
                ..
            } => self.show(
                *stage_index,
                &StageView::Feedback {
                    title: String::new(),
                    questions: questions.clone(),
                },
            ),
            ServerMessage::EnvFrame(f) => {
                self.frame = Some(f.clone());
                self.act()
            }
            ServerMessage::EnvAck {
                committed,
                action,
                reward,
                done,
                frame,
            } => {
                if let Some(p) = self.pending.filter(|p| p.frame_id == *committed) {
                    if p.reward.to_bits() != reward.to_bits()
                        || p.done != *done
                        || p.action != *action
                    {
                        self.prediction_mismatches += 1;
                    }
                    self.pending = None;
                    self.acks.push(Ack {
                        frame_id: *committed,
                        action: *action,
                        reward: *reward,
                        done: *done,
                    });
                }
                self.frame = frame.clone();
                self.act()
            }
            ServerMessage::StageDone { complete, .. } => {
                self.frame = None;
                self.pending = None;
                self.complete |= *complete;
                Vec::new()
            }
            ServerMessage::ChatAssistant { text, unavailable } => {
                self.assistant_replies.push((text.clone(), *unavailable));
                Vec::new()
            }
            ServerMessage::Resync {
                stage_index,
                view,
                frame,
                ..
            } => {
                self.resyncs += 1;
                self.pending = None;
                self.frame = frame.clone();
                self.show(*stage_index, view)
            }
            ServerMessage::Error {
                code,
                message,
                fatal,
            } => {
                self.errors.push((*code, message.clone()));
                if *fatal {
                    self.closed = true;
                }
                Vec::new()
            }
        }
    }

    fn show(&mut self, stage_index: u32, view: &StageView) -> Vec<ClientMessage> {
        match view {
            StageView::Instruction { .. } => {
                self.frame = None;
                vec![ClientMessage::StageDone { stage_index }]
            }
            StageView::Feedback { questions, .. } => {
                self.frame = None;
                vec![ClientMessage::FeedbackSubmit {
                    stage_index,
                    answers: (self.answers)(questions),
                }]
            }
            StageView::Environment { .. } => self.act(),
            StageView::Complete {} => {
                self.complete = true;
                self.frame = None;
                Vec::new()
            }
        }
    }

    /// Renders the policy's choice from the cache and sends it.
    fn act(&mut self) -> Vec<ClientMessage> {
        if self.pending.is_some() || self.closed {
            return Vec::new();
        }
        let Some(f) = &self.frame else {
            return Vec::new();
        };
        let t1 = self.clock_ms;
        let action = (self.policy)(f.frame_id, &f.observation);
        let Some(succ) = f.successors.get(action.index()) else {
            return Vec::new();
        };
        self.clock_ms += self.think_ms;
        self.pending = Some(Pending {
            frame_id: f.frame_id,
            action,
            reward: succ.reward,
            done: succ.done,
        });
        vec![ClientMessage::Action {
            frame_id: f.frame_id,
            action,
            t1,
            t2: self.clock_ms,
        }]
    }

    /// Sends a chat question.
    pub fn ask(&self, text: &str) -> ClientMessage {
        ClientMessage::ChatUser {
            text: text.to_string(),
        }
    }
}

/// In-process connection between a [`SimClient`] and a [`Hub`]. Chat jobs
/// are answered synchronously by the scripted advisor.
pub struct LocalLink<'h> {
    hub: &'h Hub,
    pub conn: ConnId,
    pub session: Option<SessionId>,
    server_seq: u64,
    /// Messages for this connection sent by the hub on behalf of other calls
    /// (for example a supersede notice).
    pub stray: Vec<(ConnId, ServerMessage)>,
}

impl<'h> LocalLink<'h> {
    pub fn connect(hub: &'h Hub, client: &mut SimClient) -> (Self, VecDeque<ClientMessage>) {
        let conn = hub.next_conn_id();
        let hello = client.hello();
        let _ = client.next_seq();
        let (session, fx) = hub.hello(conn, &hello);
        let mut link = LocalLink {
            hub,
            conn,
            session,
            server_seq: 0,
            stray: Vec::new(),
        };
        let out = link.deliver(client, fx);
        (link, out)
    }

    fn deliver(&mut self, client: &mut SimClient, fx: Effects) -> VecDeque<ClientMessage> {
        let mut out = VecDeque::new();
        for o in fx.out {
            if o.conn != self.conn {
                self.stray.push((o.conn, o.message));
                continue;
            }
            let seq = self.server_seq;
            self.server_seq += 1;
            out.extend(client.receive_with_seq(seq, &o.message));
        }
        if let Some(job) = fx.chat {
            let question = job
                .transcript
                .iter()
                .rev()
                .find(|m| m.role == ChatRole::User)
                .map(|m| m.text.clone())
                .unwrap_or_default();
            let reply = Consultation {
                text: ScriptedAdvisor::reply(&job.description, &question),
                unavailable: false,
                failure: None,
            };
            let fx = self.hub.chat_reply(&job, reply);
            out.extend(self.deliver(client, fx));
        }
        out
    }

    /// Sends one message and returns the client's reactions.
    pub fn send(&mut self, client: &mut SimClient, msg: &ClientMessage) -> VecDeque<ClientMessage> {
        let Some(session) = self.session else {
            return VecDeque::new();
        };
        let _ = client.next_seq();
        let fx = self.hub.handle(self.conn, session, msg);
        self.deliver(client, fx)
    }

    /// Exchanges messages until the client has nothing more to say or
    /// `limit` messages were sent. Unsent messages stay in `queue`. Returns
    /// the number sent.
    pub fn pump(
        &mut self,
        client: &mut SimClient,
        queue: &mut VecDeque<ClientMessage>,
        limit: usize,
    ) -> usize {
        let mut sent = 0;
        while sent < limit && !client.closed {
            let Some(msg) = queue.pop_front() else { break };
            sent += 1;
            let more = self.send(client, &msg);
            queue.extend(more);
        }
        sent
    }

    pub fn close(self) {
        if let Some(s) = self.session {
            self.hub.disconnect(self.conn, s);
        }
    }
}
