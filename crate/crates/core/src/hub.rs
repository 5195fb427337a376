//! Session hub: the server's protocol logic without any I/O.
//!
//! A transport feeds it decoded client messages and routes the returned
//! [`Outbound`] messages to connections. Each session sits behind its own
//! mutex, so messages for one session are handled one at a time while
//! different sessions proceed in parallel. Every accepted interaction is
//! enqueued for saving before the session state changes; the in-memory state
//! is always the fold of what was enqueued.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::assistant::{
    describe_state, AssistantConfig, ChatMessage, Consultation, StateDescription,
};
use crate::env;
use crate::persistence::{
    restore_session, session_records, ChatRecord, ChatRole, FeedbackRecord, FoldError, Record,
    SaveAck, SaveError, SaveQueue, SessionId, SessionStarted, SessionState, StepRecord,
    FLAG_CLOCK_ANOMALY,
};
use crate::protocol::{
    ClientMessage, ErrorCode, FramePayload, ServerMessage, StageView, PROTOCOL_VERSION,
};
use crate::rng::Rng;
use crate::speculation::{commit_action, open_frame, response_time, ActionEvent, SpeculativeFrame};
use crate::stage::{submit_feedback, AnswerValue, Experiment, Phase, StageConfig, StageError};

pub type ConnId = u64;

/// Where accepted records go.
pub trait RecordQueue: Send + Sync {
    fn enqueue(&self, record: Record) -> Result<SaveAck, SaveError>;
}

impl RecordQueue for SaveQueue {
    fn enqueue(&self, record: Record) -> Result<SaveAck, SaveError> {
        SaveQueue::enqueue(self, record)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub conn: ConnId,
    pub message: ServerMessage,
    /// Close the connection after sending.
    pub close: bool,
}

/// An advisor call to run off the session's command path. Feed the result
/// back through [`Hub::chat_reply`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChatJob {
    pub session: SessionId,
    pub stage_index: u32,
    pub episode: u32,
    pub config: AssistantConfig,
    pub description: StateDescription,
    pub transcript: Vec<ChatMessage>,
}

#[derive(Debug, Default, PartialEq)]
pub struct Effects {
    pub out: Vec<Outbound>,
    pub chat: Option<ChatJob>,
}

impl Effects {
    fn to(conn: ConnId, messages: Vec<ServerMessage>) -> Self {
        Effects {
            out: messages
                .into_iter()
                .map(|message| Outbound {
                    close: matches!(message, ServerMessage::Error { fatal: true, .. }),
                    conn,
                    message,
                })
                .collect(),
            chat: None,
        }
    }

    pub fn messages_for(&self, conn: ConnId) -> impl Iterator<Item = &ServerMessage> {
        self.out
            .iter()
            .filter(move |o| o.conn == conn)
            .map(|o| &o.message)
    }
}

type IdSource = Box<dyn FnMut() -> SessionId + Send>;
type Clock = Box<dyn Fn() -> f64 + Send + Sync>;

pub struct HubOptions {
    /// Issues ids for new sessions.
    pub ids: IdSource,
    /// Wall clock in ms, used for server receipt times.
    pub clock: Clock,
}

impl Default for HubOptions {
    fn default() -> Self {
        Self {
            ids: Box::new(SessionId::random),
            clock: Box::new(wall_ms),
        }
    }
}

pub fn wall_ms() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64() * 1e3)
        .unwrap_or(0.0)
}

/// Session seed derived from the session id.
pub fn session_seed(id: SessionId) -> u64 {
    Rng::new(id.0 as u64).split((id.0 >> 64) as u64).key()
}

struct Live {
    state: SessionState,
    frame: Option<SpeculativeFrame>,
    conn: Option<ConnId>,
    chat_in_flight: bool,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RestoreReport {
    pub restored: usize,
    /// Sessions that could not be rebuilt at all.
    pub failed: Vec<(SessionId, String)>,
    /// Sessions rebuilt up to a bad record, with its index.
    pub truncated: Vec<(SessionId, usize, FoldError)>,
}

pub struct Hub {
    experiment: Arc<Experiment>,
    queue: Arc<dyn RecordQueue>,
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<Live>>>>,
    ids: Mutex<IdSource>,
    clock: Clock,
    next_conn: AtomicU64,
}

impl Hub {
    pub fn new(
        experiment: Arc<Experiment>,
        queue: Arc<dyn RecordQueue>,
        options: HubOptions,
    ) -> Self {
        Hub {
            experiment,
            queue,
            sessions: RwLock::new(HashMap::new()),
            ids: Mutex::new(options.ids),
            clock: options.clock,
            next_conn: AtomicU64::new(1),
        }
    }

    /// Rebuilds every session of this experiment found in `records`.
    pub fn restore(
        experiment: Arc<Experiment>,
        queue: Arc<dyn RecordQueue>,
        options: HubOptions,
        records: &[Record],
    ) -> (Self, RestoreReport) {
        let hub = Hub::new(experiment, queue, options);
        let mut report = RestoreReport::default();
        let mut ids = Vec::new();
        for r in records {
            if let Record::SessionStarted(s) = r {
                if s.experiment_id == hub.experiment.id() && !ids.contains(&s.session) {
                    ids.push(s.session);
                }
            }
        }
        let mut map = hub.sessions.write();
        for id in ids {
            let own = session_records(records, id);
            match restore_session(&hub.experiment, &own) {
                Ok(restored) => {
                    if let Some((index, err)) = restored.corruption {
                        tracing::error!(session = %id, index, error = %err, "session restored up to an inconsistent record");
                        // Later restores start from here instead of stopping at the bad record.
                        let _ = hub.queue.enqueue(Record::Snapshot {
                            session: id,
                            state: restored.state.encode(),
                        });
                        report.truncated.push((id, index, err));
                    }
                    map.insert(
                        id,
                        Arc::new(Mutex::new(Live {
                            state: restored.state,
                            frame: None,
                            conn: None,
                            chat_in_flight: false,
                        })),
                    );
                    report.restored += 1;
                }
                Err(e) => {
                    tracing::error!(session = %id, error = %e, "session could not be restored");
                    report.failed.push((id, e.to_string()));
                }
            }
        }
        drop(map);
        (hub, report)
    }

    pub fn experiment(&self) -> &Experiment {
        &self.experiment
    }

    pub fn next_conn_id(&self) -> ConnId {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        let mut v: Vec<_> = self.sessions.read().keys().copied().collect();
        v.sort();
        v
    }

    pub fn state(&self, session: SessionId) -> Option<SessionState> {
        self.live(session).map(|l| l.lock().state.clone())
    }

    /// Id of the session's open frame, if it is in an environment stage.
    pub fn frame_id(&self, session: SessionId) -> Option<u64> {
        let live = self.live(session)?;
        let mut l = live.lock();
        self.ensure_frame(&mut l);
        l.frame.as_ref().map(|f| f.frame_id)
    }

    fn live(&self, session: SessionId) -> Option<Arc<Mutex<Live>>> {
        self.sessions.read().get(&session).cloned()
    }

    /// First message on a connection. Returns the session the connection is
    /// now bound to.
    pub fn hello(&self, conn: ConnId, msg: &ClientMessage) -> (Option<SessionId>, Effects) {
        let ClientMessage::Hello {
            protocol,
            experiment_version,
            session,
            ..
        } = msg
        else {
            let e = ServerMessage::error(
                ErrorCode::HelloRequired,
                format!("expected hello, got {}", msg.type_name()),
            );
            return (None, Effects::to(conn, vec![e]));
        };
        if *protocol != PROTOCOL_VERSION {
            let e = ServerMessage::error(
                ErrorCode::ProtocolMismatch,
                format!("server speaks protocol {PROTOCOL_VERSION}, client sent {protocol}"),
            );
            return (None, Effects::to(conn, vec![e]));
        }
        if let Some(v) = experiment_version {
            if *v != self.experiment.version() {
                let e = ServerMessage::error(
                    ErrorCode::UpgradeRequired,
                    format!("client is built for experiment version {v}, server runs {}; reload the page", self.experiment.version()),
                );
                return (None, Effects::to(conn, vec![e]));
            }
        }
        if let Some(live) = session.and_then(|id| self.live(id)) {
            let id = session.unwrap();
            let mut l = live.lock();
            let mut fx = Effects::default();
            if let Some(old) = l.conn.replace(conn) {
                if old != conn {
                    fx.out.push(Outbound {
                        conn: old,
                        message: ServerMessage::error(
                            ErrorCode::Superseded,
                            "session opened in another connection",
                        ),
                        close: true,
                    });
                }
            }
            self.ensure_frame(&mut l);
            let mut replies = vec![self.session_message(&l.state, true)];
            replies.push(self.resync(&l));
            fx.out.extend(Effects::to(conn, replies).out);
            return (Some(id), fx);
        }
        self.create_session(conn)
    }

    fn create_session(&self, conn: ConnId) -> (Option<SessionId>, Effects) {
        let id = loop {
            let id = (self.ids.lock())();
            if self.live(id).is_none() {
                break id;
            }
        };
        let seed = session_seed(id);
        let started = SessionStarted {
            session: id,
            experiment_id: self.experiment.id().to_string(),
            experiment_version: self.experiment.version(),
            seed,
            condition: self.experiment.assign_condition(seed),
            server_ms: (self.clock)(),
        };
        let state =
            SessionState::begin(&self.experiment, &started).expect("started from this experiment");
        if let Err(e) = self.queue.enqueue(Record::SessionStarted(started)) {
            return (None, Effects::to(conn, vec![saving_error(e)]));
        }
        let mut live = Live {
            state,
            frame: None,
            conn: Some(conn),
            chat_in_flight: false,
        };
        self.ensure_frame(&mut live);
        let mut replies = vec![self.session_message(&live.state, false)];
        replies.extend(self.stage_messages(&live));
        self.sessions.write().insert(id, Arc::new(Mutex::new(live)));
        tracing::info!(session = %id, "session created");
        (Some(id), Effects::to(conn, replies))
    }

    /// Handles one message from a connection bound to `session`.
    pub fn handle(&self, conn: ConnId, session: SessionId, msg: &ClientMessage) -> Effects {
        let Some(live) = self.live(session) else {
            return Effects::to(
                conn,
                vec![ServerMessage::error(ErrorCode::Internal, "unknown session")],
            );
        };
        let mut l = live.lock();
        if l.conn != Some(conn) {
            return Effects::to(
                conn,
                vec![ServerMessage::error(
                    ErrorCode::Superseded,
                    "session opened in another connection",
                )],
            );
        }
        self.ensure_frame(&mut l);
        let fx = match msg {
            ClientMessage::Hello { .. } => Effects::to(
                conn,
                vec![ServerMessage::error(
                    ErrorCode::Malformed,
                    "hello sent twice on one connection",
                )],
            ),
            ClientMessage::Resync {} => Effects::to(conn, vec![self.resync(&l)]),
            ClientMessage::Action {
                frame_id,
                action,
                t1,
                t2,
            } => Effects::to(
                conn,
                self.on_action(
                    &mut l,
                    ActionEvent {
                        frame_id: *frame_id,
                        action: *action,
                        t1: *t1,
                        t2: *t2,
                    },
                ),
            ),
            ClientMessage::StageDone { stage_index } => {
                Effects::to(conn, self.on_continue(&mut l, *stage_index))
            }
            ClientMessage::FeedbackSubmit {
                stage_index,
                answers,
            } => Effects::to(conn, self.on_feedback(&mut l, *stage_index, answers)),
            ClientMessage::ChatUser { text } => {
                let (replies, job) = self.on_chat(&mut l, text);
                let mut fx = Effects::to(conn, replies);
                fx.chat = job;
                fx
            }
        };
        self.ensure_frame(&mut l);
        if fx.out.iter().any(|o| o.close) {
            l.conn = None;
        }
        fx
    }

    /// Detaches a closed connection. The session stays resumable.
    pub fn disconnect(&self, conn: ConnId, session: SessionId) {
        if let Some(live) = self.live(session) {
            let mut l = live.lock();
            if l.conn == Some(conn) {
                l.conn = None;
            }
        }
    }

    /// Records that the participant went quiet and detaches the connection.
    pub fn mark_idle(&self, session: SessionId) {
        let Some(live) = self.live(session) else {
            return;
        };
        let mut l = live.lock();
        l.conn = None;
        if l.state.idle {
            return;
        }
        let rec = Record::Idle {
            session,
            server_ms: (self.clock)(),
        };
        if self.persist(&mut l, rec).is_err() {
            tracing::warn!(%session, "idle marker not saved: queue full");
        }
    }

    /// Delivers an advisor reply and records it in the transcript.
    pub fn chat_reply(&self, job: &ChatJob, reply: Consultation) -> Effects {
        let Some(live) = self.live(job.session) else {
            return Effects::default();
        };
        let mut l = live.lock();
        l.chat_in_flight = false;
        let rec = Record::Chat(ChatRecord {
            session: job.session,
            stage_index: job.stage_index,
            episode: job.episode,
            role: ChatRole::Assistant,
            text: reply.text.clone(),
            unavailable: reply.unavailable,
            server_ms: (self.clock)(),
        });
        if let Err(e) = self.persist(&mut l, rec) {
            tracing::error!(session = %job.session, error = %e, "assistant reply not saved");
        }
        match l.conn {
            Some(conn) => Effects::to(
                conn,
                vec![ServerMessage::ChatAssistant {
                    text: reply.text,
                    unavailable: reply.unavailable,
                }],
            ),
            None => Effects::default(),
        }
    }

    fn now(&self) -> f64 {
        (self.clock)()
    }

    /// Enqueues then folds a non-step record.
    fn persist(&self, l: &mut Live, rec: Record) -> Result<(), SaveError> {
        let mut next = l.state.clone();
        next.apply(&self.experiment, &rec).unwrap_or_else(|e| {
            panic!("hub built an inconsistent {} record: {e}", rec.kind_name())
        });
        self.queue.enqueue(rec)?;
        l.state = next;
        self.maybe_snapshot(l);
        Ok(())
    }

    fn maybe_snapshot(&self, l: &Live) {
        if l.state.snapshot_due() {
            let snap = Record::Snapshot {
                session: l.state.session,
                state: l.state.encode(),
            };
            if self.queue.enqueue(snap).is_err() {
                tracing::debug!(session = %l.state.session, "snapshot skipped: queue full");
            }
        }
    }

    fn ensure_frame(&self, l: &mut Live) {
        let want = l.state.env.is_some();
        let fresh = l
            .frame
            .as_ref()
            .is_some_and(|f| f.frame_id == l.state.frame_id);
        if !want {
            l.frame = None;
        } else if !fresh {
            let params = l
                .state
                .env_params(&self.experiment)
                .expect("env stage has params");
            let env = l.state.env.as_ref().expect("checked");
            l.frame = Some(
                open_frame(l.state.frame_id, params, env, self.now())
                    .expect("open episodes are not done"),
            );
        }
    }

    fn frame_payload(&self, l: &Live) -> Option<FramePayload> {
        let f = l.frame.as_ref()?;
        Some(FramePayload::new(
            l.state.progress.stage_index,
            l.state.progress.episode_index,
            f.state.step,
            f.client_view(),
        ))
    }

    fn session_message(&self, state: &SessionState, resumed: bool) -> ServerMessage {
        ServerMessage::Session {
            session: state.session,
            experiment_id: self.experiment.id().to_string(),
            experiment_version: self.experiment.version(),
            protocol: PROTOCOL_VERSION,
            resumed,
        }
    }

    fn view(&self, state: &SessionState) -> (String, StageView) {
        if state.progress.is_complete() {
            return (String::new(), StageView::Complete {});
        }
        let stage = state
            .current_stage(&self.experiment)
            .expect("stage index in range");
        (stage.id().to_string(), StageView::of(stage))
    }

    /// What a client needs on entering the current stage.
    fn stage_messages(&self, l: &Live) -> Vec<ServerMessage> {
        let stage_index = l.state.progress.stage_index;
        let (stage_id, view) = self.view(&l.state);
        let mut out = match view {
            StageView::Feedback { title, questions } => vec![ServerMessage::FeedbackForm {
                stage_index,
                stage_id,
                title,
                questions,
            }],
            view => vec![ServerMessage::StageShow {
                stage_index,
                stage_id,
                view,
            }],
        };
        out.extend(self.frame_payload(l).map(ServerMessage::EnvFrame));
        out
    }

    fn resync(&self, l: &Live) -> ServerMessage {
        let (stage_id, view) = self.view(&l.state);
        ServerMessage::Resync {
            stage_index: l.state.progress.stage_index,
            stage_id,
            episode: l.state.progress.episode_index,
            complete: l.state.progress.is_complete(),
            view,
            frame: self.frame_payload(l),
            transcript: l.state.episode_transcript().cloned().collect(),
        }
    }

    fn on_action(&self, l: &mut Live, event: ActionEvent) -> Vec<ServerMessage> {
        let Some(frame) = l.frame.as_ref() else {
            return vec![self.resync(l)];
        };
        if event.frame_id != frame.frame_id {
            return vec![self.resync(l)];
        }
        let count = frame.successors.len();
        if event.action.index() >= count {
            let mut out = vec![ServerMessage::error(
                ErrorCode::IllegalAction,
                format!(
                    "action {} outside action set of size {count}",
                    event.action.0
                ),
            )];
            out.extend(self.frame_payload(l).map(ServerMessage::EnvFrame));
            return out;
        }
        let (_, result) = commit_action(frame, &event).expect("frame id and action checked");
        let anomaly = response_time(&event).is_err();
        let p = l.state.progress;
        let rec = StepRecord {
            session: l.state.session,
            stage_index: p.stage_index,
            stage_id: l
                .state
                .current_stage(&self.experiment)
                .map(|s| s.id().to_string())
                .unwrap_or_default(),
            episode: p.episode_index,
            step: frame.state.step,
            frame_id: frame.frame_id,
            pre_state: env::encode_state(&frame.state),
            action: event.action.0,
            reward: result.reward,
            done: result.done,
            t1: event.t1,
            t2: event.t2,
            server_ms: self.now(),
            flags: if anomaly { FLAG_CLOCK_ANOMALY } else { 0 },
        };
        if anomaly {
            tracing::warn!(session = %l.state.session, t1 = event.t1, t2 = event.t2, "clock anomaly");
        }
        let mut next = l.state.clone();
        next.apply_step(&self.experiment, &rec, Some(result.clone()))
            .unwrap_or_else(|e| panic!("hub built an inconsistent step record: {e}"));
        if let Err(e) = self.queue.enqueue(Record::Step(rec)) {
            return vec![saving_error(e)];
        }
        l.state = next;
        self.maybe_snapshot(l);
        self.ensure_frame(l);

        let same_stage =
            l.state.progress.stage_index == p.stage_index && !l.state.progress.is_complete();
        let mut out = vec![ServerMessage::EnvAck {
            committed: event.frame_id,
            action: event.action,
            reward: result.reward,
            done: result.done,
            frame: if same_stage {
                self.frame_payload(l)
            } else {
                None
            },
        }];
        if !same_stage {
            out.push(ServerMessage::StageDone {
                stage_index: p.stage_index,
                complete: l.state.progress.is_complete(),
            });
            out.extend(self.stage_messages(l));
        }
        out
    }

    fn on_continue(&self, l: &mut Live, stage_index: u32) -> Vec<ServerMessage> {
        let current = l.state.progress;
        let is_instruction = matches!(
            l.state.current_stage(&self.experiment),
            Some(StageConfig::Instruction(_))
        );
        if stage_index != current.stage_index || current.phase != Phase::Showing || !is_instruction
        {
            return vec![self.resync(l)];
        }
        let rec = Record::StageContinued {
            session: l.state.session,
            stage_index,
            server_ms: self.now(),
        };
        if let Err(e) = self.persist(l, rec) {
            return vec![saving_error(e)];
        }
        self.ensure_frame(l);
        let mut out = vec![ServerMessage::StageDone {
            stage_index,
            complete: l.state.progress.is_complete(),
        }];
        out.extend(self.stage_messages(l));
        out
    }

    fn on_feedback(
        &self,
        l: &mut Live,
        stage_index: u32,
        answers: &BTreeMap<String, AnswerValue>,
    ) -> Vec<ServerMessage> {
        let current = l.state.progress;
        if stage_index != current.stage_index {
            return vec![self.resync(l)];
        }
        let stages = l.state.stages(&self.experiment);
        let recorded = match submit_feedback(stages, current, answers) {
            Ok((_, recorded)) => recorded,
            Err(StageError::InvalidAnswers(problems)) => {
                let detail = problems
                    .iter()
                    .map(|p| format!("{}: {}", p.question_id, p.reason))
                    .collect::<Vec<_>>()
                    .join("; ");
                return vec![ServerMessage::error(ErrorCode::InvalidAnswers, detail)];
            }
            Err(_) => return vec![self.resync(l)],
        };
        let rec = Record::Feedback(FeedbackRecord {
            session: l.state.session,
            stage_index,
            stage_id: l
                .state
                .current_stage(&self.experiment)
                .map(|s| s.id().to_string())
                .unwrap_or_default(),
            answers: recorded,
            server_ms: self.now(),
        });
        if let Err(e) = self.persist(l, rec) {
            return vec![saving_error(e)];
        }
        self.ensure_frame(l);
        let mut out = vec![ServerMessage::StageDone {
            stage_index,
            complete: l.state.progress.is_complete(),
        }];
        out.extend(self.stage_messages(l));
        out
    }

    fn on_chat(&self, l: &mut Live, text: &str) -> (Vec<ServerMessage>, Option<ChatJob>) {
        let config = match (
            l.state.progress.phase,
            l.state.current_stage(&self.experiment),
        ) {
            (Phase::Interacting, Some(StageConfig::Environment(e))) => e.assistant.clone(),
            _ => None,
        };
        let Some(config) = config else {
            return (
                vec![ServerMessage::error(
                    ErrorCode::ChatDisabled,
                    "no assistant in this stage",
                )],
                None,
            );
        };
        if l.chat_in_flight {
            return (
                vec![ServerMessage::error(
                    ErrorCode::ChatBusy,
                    "wait for the assistant's reply",
                )],
                None,
            );
        }
        let asked = l
            .state
            .episode_transcript()
            .filter(|c| c.role == ChatRole::User)
            .count();
        if asked as u32 >= config.max_exchanges {
            return (
                vec![ServerMessage::error(
                    ErrorCode::ChatLimit,
                    format!(
                        "limit of {} questions per episode reached",
                        config.max_exchanges
                    ),
                )],
                None,
            );
        }
        let p = l.state.progress;
        let rec = Record::Chat(ChatRecord {
            session: l.state.session,
            stage_index: p.stage_index,
            episode: p.episode_index,
            role: ChatRole::User,
            text: text.to_string(),
            unavailable: false,
            server_ms: self.now(),
        });
        if let Err(e) = self.persist(l, rec) {
            return (vec![saving_error(e)], None);
        }
        let params = l.state.env_params(&self.experiment).expect("interacting");
        let env = l.state.env.as_ref().expect("interacting");
        let description = describe_state(env, params, config.visibility).expect("matching kinds");
        let transcript = l
            .state
            .episode_transcript()
            .map(|c| ChatMessage {
                role: c.role,
                text: c.text.clone(),
            })
            .collect();
        l.chat_in_flight = true;
        let job = ChatJob {
            session: l.state.session,
            stage_index: p.stage_index,
            episode: p.episode_index,
            config,
            description,
            transcript,
        };
        (Vec::new(), Some(job))
    }
}

fn saving_error(e: SaveError) -> ServerMessage {
    ServerMessage::error(ErrorCode::Saving, format!("{e}; retry shortly"))
}
