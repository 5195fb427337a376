//! Session state as a fold over persisted records.
//!
//! The live server and restore share [`SessionState::apply`], so a session
//! rebuilt from its log is the session that was running. Step records are
//! re-simulated on replay and checked against what was logged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::record::{ChatRecord, ChatRole, Record, SessionId, SessionStarted, StepRecord};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::env::{self, ActionId, EnvParams, EnvState, StepResult};
use crate::rng::Rng;
use crate::stage::{
    advance, AnswerValue, Experiment, Phase, RecordedAnswer, StageConfig, StageEvent, StageProgress,
};

/// A snapshot is logged after every this many records of a session.
pub const SNAPSHOT_EVERY: u64 = 50;

/// Episode branch for `(seed, stage, episode)`. Step branches split from it.
pub fn episode_rng(seed: u64, stage: u32, episode: u32) -> Rng {
    Rng::new(seed).split(stage as u64).split(episode as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub stage_index: u32,
    pub stage_id: String,
    pub answers: Vec<RecordedAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEntry {
    pub stage_index: u32,
    pub episode: u32,
    pub role: ChatRole,
    pub text: String,
    pub unavailable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session: SessionId,
    pub experiment_id: String,
    pub experiment_version: u32,
    pub seed: u64,
    pub condition: Option<u32>,
    pub progress: StageProgress,
    /// Present while an environment stage is running.
    pub env: Option<EnvState>,
    /// Id of the open frame; equals the number of steps committed so far.
    pub frame_id: u64,
    pub episode_return: f64,
    pub answers: Vec<FeedbackEntry>,
    pub transcript: Vec<ChatEntry>,
    /// Non-snapshot records folded so far.
    pub records: u64,
    pub idle: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} record rejected: {reason}")]
pub struct FoldError {
    pub kind: &'static str,
    pub reason: String,
}

fn reject(rec: &Record, reason: impl Into<String>) -> FoldError {
    FoldError {
        kind: rec.kind_name(),
        reason: reason.into(),
    }
}

impl SessionState {
    pub fn begin(exp: &Experiment, started: &SessionStarted) -> Result<Self, FoldError> {
        let rec = Record::SessionStarted(started.clone());
        if started.experiment_id != exp.id() {
            return Err(reject(
                &rec,
                format!(
                    "experiment `{}` is not `{}`",
                    started.experiment_id,
                    exp.id()
                ),
            ));
        }
        if started.experiment_version != exp.version() {
            return Err(reject(
                &rec,
                format!(
                    "experiment version {} is not {}",
                    started.experiment_version,
                    exp.version()
                ),
            ));
        }
        if let Some(c) = started.condition {
            if c as usize >= exp.definition().conditions.len() {
                return Err(reject(&rec, format!("no condition {c}")));
            }
        }
        let stages = exp.stages(started.condition);
        let mut s = SessionState {
            session: started.session,
            experiment_id: started.experiment_id.clone(),
            experiment_version: started.experiment_version,
            seed: started.seed,
            condition: started.condition,
            progress: StageProgress::start(stages),
            env: None,
            frame_id: 0,
            episode_return: 0.0,
            answers: Vec::new(),
            transcript: Vec::new(),
            records: 1,
            idle: false,
        };
        s.enter_current(exp);
        Ok(s)
    }

    pub fn stages<'a>(&self, exp: &'a Experiment) -> &'a [StageConfig] {
        exp.stages(self.condition)
    }

    pub fn current_stage<'a>(&self, exp: &'a Experiment) -> Option<&'a StageConfig> {
        self.stages(exp).get(self.progress.stage_index as usize)
    }

    pub fn env_params<'a>(&self, exp: &'a Experiment) -> Option<&'a EnvParams> {
        match self.progress.phase {
            Phase::Interacting => exp.env_params(self.condition, self.progress.stage_index),
            _ => None,
        }
    }

    /// Chat messages from the current stage and episode.
    pub fn episode_transcript(&self) -> impl Iterator<Item = &ChatEntry> {
        let (stage, episode) = (self.progress.stage_index, self.progress.episode_index);
        self.transcript
            .iter()
            .filter(move |c| c.stage_index == stage && c.episode == episode)
    }

    fn enter_current(&mut self, exp: &Experiment) {
        self.episode_return = 0.0;
        self.env = self.env_params(exp).map(|params| {
            let rng = episode_rng(
                self.seed,
                self.progress.stage_index,
                self.progress.episode_index,
            );
            env::reset(params, &rng).expect("validated params").0
        });
    }

    /// Whether a snapshot is due after the last applied record.
    pub fn snapshot_due(&self) -> bool {
        self.records.is_multiple_of(SNAPSHOT_EVERY)
    }

    /// Folds one record, re-simulating steps. On error the state is unchanged.
    pub fn apply(&mut self, exp: &Experiment, rec: &Record) -> Result<(), FoldError> {
        match rec {
            Record::Step(s) => return self.apply_step(exp, s, None),
            Record::Snapshot { session, state } => {
                let snap = SessionState::decode(state)
                    .map_err(|e| reject(rec, format!("snapshot does not decode: {e}")))?;
                if snap.session != *session || snap.session != self.session {
                    return Err(reject(rec, "snapshot belongs to another session"));
                }
                *self = snap;
                return Ok(());
            }
            _ => {}
        }
        let mut next = self.clone();
        next.apply_other(exp, rec)?;
        next.records += 1;
        *self = next;
        Ok(())
    }

    fn apply_other(&mut self, exp: &Experiment, rec: &Record) -> Result<(), FoldError> {
        if rec.session() != self.session {
            return Err(reject(rec, "record belongs to another session"));
        }
        let stages = exp.stages(self.condition);
        match rec {
            Record::SessionStarted(_) => return Err(reject(rec, "session already started")),
            Record::StageContinued { stage_index, .. } => {
                if *stage_index != self.progress.stage_index {
                    return Err(reject(
                        rec,
                        format!(
                            "stage {stage_index} is not current stage {}",
                            self.progress.stage_index
                        ),
                    ));
                }
                if !matches!(self.current_stage(exp), Some(StageConfig::Instruction(_))) {
                    return Err(reject(rec, "current stage is not an instruction stage"));
                }
                self.progress = advance(stages, self.progress, StageEvent::Continue)
                    .map_err(|e| reject(rec, e.to_string()))?;
                self.enter_current(exp);
            }
            Record::Feedback(f) => {
                if f.stage_index != self.progress.stage_index {
                    return Err(reject(
                        rec,
                        format!(
                            "stage {} is not current stage {}",
                            f.stage_index, self.progress.stage_index
                        ),
                    ));
                }
                match self.current_stage(exp) {
                    Some(StageConfig::Feedback(st)) if st.id == f.stage_id => {}
                    _ => {
                        return Err(reject(
                            rec,
                            format!("current stage is not feedback stage `{}`", f.stage_id),
                        ))
                    }
                }
                self.progress = advance(stages, self.progress, StageEvent::FeedbackSubmitted)
                    .map_err(|e| reject(rec, e.to_string()))?;
                self.answers.push(FeedbackEntry {
                    stage_index: f.stage_index,
                    stage_id: f.stage_id.clone(),
                    answers: f.answers.clone(),
                });
                self.enter_current(exp);
            }
            Record::Chat(c) => {
                self.transcript.push(chat_entry(c));
                self.idle = false;
            }
            Record::Idle { .. } => {
                self.idle = true;
                return Ok(());
            }
            Record::Step(_) | Record::Snapshot { .. } => unreachable!("handled by apply"),
        }
        self.idle = false;
        Ok(())
    }

    /// Folds a step record. `live` is the transition the server already
    /// computed; without it the step is re-simulated and must agree with the
    /// record.
    pub fn apply_step(
        &mut self,
        exp: &Experiment,
        rec: &StepRecord,
        live: Option<StepResult>,
    ) -> Result<(), FoldError> {
        let wrapped = || Record::Step(rec.clone());
        let fail = |reason: String| reject(&wrapped(), reason);
        if rec.session != self.session {
            return Err(fail("record belongs to another session".into()));
        }
        let p = self.progress;
        if p.phase != Phase::Interacting
            || rec.stage_index != p.stage_index
            || rec.episode != p.episode_index
        {
            return Err(fail(format!(
                "step for stage {} episode {} but session is at stage {} episode {} ({:?})",
                rec.stage_index, rec.episode, p.stage_index, p.episode_index, p.phase
            )));
        }
        let stage_id = self.current_stage(exp).map(|s| s.id()).unwrap_or("");
        if rec.stage_id != stage_id {
            return Err(fail(format!(
                "stage id `{}` is not `{stage_id}`",
                rec.stage_id
            )));
        }
        let params = self
            .env_params(exp)
            .ok_or_else(|| fail("no environment".into()))?;
        let state = self
            .env
            .as_ref()
            .ok_or_else(|| fail("no environment state".into()))?;
        if rec.step != state.step {
            return Err(fail(format!(
                "step index {} is not {}",
                rec.step, state.step
            )));
        }
        if rec.frame_id != self.frame_id {
            return Err(fail(format!(
                "frame {} is not {}",
                rec.frame_id, self.frame_id
            )));
        }
        if rec.pre_state != env::encode_state(state) {
            return Err(fail("pre-step state differs from session state".into()));
        }
        let result = match live {
            Some(r) => r,
            None => env::step(state, ActionId(rec.action), params, &env::step_rng(state))
                .map_err(|e| fail(e.to_string()))?,
        };
        if result.reward.to_bits() != rec.reward.to_bits() || result.done != rec.done {
            return Err(fail(format!(
                "replay gives reward {} done {}, log says reward {} done {}",
                result.reward, result.done, rec.reward, rec.done
            )));
        }
        self.frame_id += 1;
        self.records += 1;
        self.idle = false;
        self.episode_return += result.reward;
        if result.done {
            let ended = StageEvent::EpisodeEnded {
                episode_return: self.episode_return,
            };
            self.progress =
                advance(self.stages(exp), self.progress, ended).expect("interacting phase");
            self.enter_current(exp);
        } else {
            self.env = Some(result.state);
        }
        Ok(())
    }
}

fn chat_entry(c: &ChatRecord) -> ChatEntry {
    ChatEntry {
        stage_index: c.stage_index,
        episode: c.episode,
        role: c.role,
        text: c.text.clone(),
        unavailable: c.unavailable,
    }
}

const SNAPSHOT_VERSION: u8 = 1;

impl SessionState {
    /// Canonical snapshot encoding (field-tagged, like the state codec).
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_version(SNAPSHOT_VERSION);
        e.field(1, |w| {
            w.u64(self.session.0 as u64)
                .u64((self.session.0 >> 64) as u64);
        });
        e.field(2, |w| {
            w.str(&self.experiment_id).u32(self.experiment_version);
        });
        e.field(3, |w| {
            w.u64(self.seed);
            match self.condition {
                Some(c) => w.u8(1).u32(c),
                None => w.u8(0),
            };
        });
        e.field(4, |w| {
            let p = &self.progress;
            w.u32(p.stage_index)
                .u32(p.episode_index)
                .u32(p.successes)
                .u8(match p.phase {
                    Phase::Showing => 0,
                    Phase::Interacting => 1,
                    Phase::Complete => 2,
                });
        });
        e.field(5, |w| match &self.env {
            Some(s) => {
                w.u8(1).bytes(&env::encode_state(s));
            }
            None => {
                w.u8(0);
            }
        });
        e.field(6, |w| {
            w.u64(self.frame_id)
                .f64(self.episode_return)
                .u64(self.records)
                .bool(self.idle);
        });
        e.field(7, |w| {
            w.u32(self.answers.len() as u32);
            for f in &self.answers {
                w.u32(f.stage_index)
                    .str(&f.stage_id)
                    .u32(f.answers.len() as u32);
                for a in &f.answers {
                    w.str(&a.question_id).str(&a.prompt);
                    match &a.value {
                        AnswerValue::Number(v) => w.u8(0).f64(*v),
                        AnswerValue::Text(t) => w.u8(1).str(t),
                    };
                }
            }
        });
        e.field(8, |w| {
            w.u32(self.transcript.len() as u32);
            for c in &self.transcript {
                w.u32(c.stage_index)
                    .u32(c.episode)
                    .bool(c.role == ChatRole::Assistant)
                    .str(&c.text)
                    .bool(c.unavailable);
            }
        });
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(bytes);
        d.version(SNAPSHOT_VERSION)?;
        let mut f = d.field(1)?;
        let session = SessionId(f.u64()? as u128 | ((f.u64()? as u128) << 64));
        f.finish()?;
        let mut f = d.field(2)?;
        let experiment_id = f.str()?;
        let experiment_version = f.u32()?;
        f.finish()?;
        let mut f = d.field(3)?;
        let seed = f.u64()?;
        let condition = if f.bool()? { Some(f.u32()?) } else { None };
        f.finish()?;
        let mut f = d.field(4)?;
        let (stage_index, episode_index, successes) = (f.u32()?, f.u32()?, f.u32()?);
        let at = f.offset();
        let phase = match f.u8()? {
            0 => Phase::Showing,
            1 => Phase::Interacting,
            2 => Phase::Complete,
            other => return Err(CodecError::new(at, format!("bad phase {other}"))),
        };
        f.finish()?;
        let mut f = d.field(5)?;
        let env = if f.bool()? {
            let at = f.offset() + 4;
            let raw = f.bytes()?;
            Some(env::decode_state(raw).map_err(|e| CodecError::new(at + e.offset, e.reason))?)
        } else {
            None
        };
        f.finish()?;
        let mut f = d.field(6)?;
        let (frame_id, episode_return, records, idle) = (f.u64()?, f.f64()?, f.u64()?, f.bool()?);
        f.finish()?;
        let mut f = d.field(7)?;
        let n = f.u32()?;
        let mut answers = Vec::new();
        for _ in 0..n {
            let stage_index = f.u32()?;
            let stage_id = f.str()?;
            let m = f.u32()?;
            let mut list = Vec::new();
            for _ in 0..m {
                let question_id = f.str()?;
                let prompt = f.str()?;
                let at = f.offset();
                let value = match f.u8()? {
                    0 => AnswerValue::Number(f.f64()?),
                    1 => AnswerValue::Text(f.str()?),
                    other => return Err(CodecError::new(at, format!("bad answer tag {other}"))),
                };
                list.push(RecordedAnswer {
                    question_id,
                    prompt,
                    value,
                });
            }
            answers.push(FeedbackEntry {
                stage_index,
                stage_id,
                answers: list,
            });
        }
        f.finish()?;
        let mut f = d.field(8)?;
        let n = f.u32()?;
        let mut transcript = Vec::new();
        for _ in 0..n {
            transcript.push(ChatEntry {
                stage_index: f.u32()?,
                episode: f.u32()?,
                role: if f.bool()? {
                    ChatRole::Assistant
                } else {
                    ChatRole::User
                },
                text: f.str()?,
                unavailable: f.bool()?,
            });
        }
        f.finish()?;
        d.finish()?;
        Ok(SessionState {
            session,
            experiment_id,
            experiment_version,
            seed,
            condition,
            progress: StageProgress {
                stage_index,
                episode_index,
                successes,
                phase,
            },
            env,
            frame_id,
            episode_return,
            answers,
            transcript,
            records,
            idle,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RestoreError {
    #[error("no records for session")]
    Unknown,
    #[error("first record of the session is `{0}`, not session_started")]
    NotStarted(&'static str),
    #[error(transparent)]
    Start(FoldError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Restored {
    pub state: SessionState,
    /// Records consumed, counting from the start of the input.
    pub applied: usize,
    /// Set when folding stopped early; `state` is the consistent prefix.
    pub corruption: Option<(usize, FoldError)>,
}

/// Rebuilds a session from its records (log order), starting from the latest
/// decodable snapshot.
pub fn restore_session(exp: &Experiment, records: &[Record]) -> Result<Restored, RestoreError> {
    let start = records.iter().rposition(|r| match r {
        Record::Snapshot { state, .. } => SessionState::decode(state).is_ok(),
        _ => false,
    });
    let Some(i) = start else {
        return replay_session(exp, records);
    };
    let Record::Snapshot { state, .. } = &records[i] else {
        unreachable!()
    };
    let mut s = SessionState::decode(state).expect("checked");
    fold_from(exp, &mut s, records, i + 1).map(|(applied, corruption)| Restored {
        state: s,
        applied,
        corruption,
    })
}

/// Rebuilds a session by folding every record, ignoring snapshots.
pub fn replay_session(exp: &Experiment, records: &[Record]) -> Result<Restored, RestoreError> {
    let first = records.first().ok_or(RestoreError::Unknown)?;
    let Record::SessionStarted(started) = first else {
        return Err(RestoreError::NotStarted(first.kind_name()));
    };
    let mut s = SessionState::begin(exp, started).map_err(RestoreError::Start)?;
    let (applied, corruption) = fold_from(exp, &mut s, records, 1)?;
    Ok(Restored {
        state: s,
        applied,
        corruption,
    })
}

type FoldOutcome = (usize, Option<(usize, FoldError)>);

fn fold_from(
    exp: &Experiment,
    s: &mut SessionState,
    records: &[Record],
    from: usize,
) -> Result<FoldOutcome, RestoreError> {
    for (i, rec) in records.iter().enumerate().skip(from) {
        if matches!(rec, Record::Snapshot { .. }) {
            continue;
        }
        if let Err(e) = s.apply(exp, rec) {
            return Ok((i, Some((i, e))));
        }
    }
    Ok((records.len(), None))
}

/// Records of one session, in log order.
pub fn session_records(all: &[Record], session: SessionId) -> Vec<Record> {
    all.iter()
        .filter(|r| r.session() == session)
        .cloned()
        .collect()
}
