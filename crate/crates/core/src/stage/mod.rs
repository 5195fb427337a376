//! Experiments as ordered stages, and the pure transition function that moves
//! a participant through them.

pub mod config;
pub mod form;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    validate_definition, Condition, ConfigError, EnvironmentStage, Experiment,
    ExperimentDefinition, FeedbackStage, InstructionStage, Issue, StageConfig,
};
pub use form::{AnswerProblem, AnswerValue, FormSchema, InputKind, Question, RecordedAnswer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// An instruction or feedback screen is displayed.
    Showing,
    /// An environment stage is running episodes.
    Interacting,
    /// The last stage has finished.
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageProgress {
    pub stage_index: u32,
    pub episode_index: u32,
    pub successes: u32,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageEvent {
    /// Participant dismissed an instruction screen.
    Continue,
    /// A feedback form was accepted.
    FeedbackSubmitted,
    EpisodeEnded {
        episode_return: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageError {
    #[error("event {event:?} is not valid in phase {phase:?} of a {kind} stage")]
    OutOfPhase {
        event: StageEvent,
        phase: Phase,
        kind: &'static str,
    },
    #[error("current stage is not a feedback stage")]
    NotFeedback,
    #[error("invalid answers for: {}", .0.iter().map(|p| p.question_id.as_str()).collect::<Vec<_>>().join(", "))]
    InvalidAnswers(Vec<AnswerProblem>),
}

fn phase_for(stage: &StageConfig) -> Phase {
    match stage {
        StageConfig::Environment(_) => Phase::Interacting,
        _ => Phase::Showing,
    }
}

impl StageProgress {
    pub fn start(stages: &[StageConfig]) -> Self {
        Self {
            stage_index: 0,
            episode_index: 0,
            successes: 0,
            phase: stages.first().map(phase_for).unwrap_or(Phase::Complete),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Complete
    }

    fn next_stage(self, stages: &[StageConfig]) -> Self {
        let next = self.stage_index as usize + 1;
        match stages.get(next) {
            Some(stage) => Self {
                stage_index: next as u32,
                episode_index: 0,
                successes: 0,
                phase: phase_for(stage),
            },
            None => Self {
                phase: Phase::Complete,
                ..self
            },
        }
    }
}

/// Applies one event. On error the caller keeps its current progress.
///
/// An environment stage finishes once `min_successes` episodes have met the
/// success threshold or `max_episodes` have been played. A `min_successes`
/// of zero means "play all episodes".
pub fn advance(
    stages: &[StageConfig],
    progress: StageProgress,
    event: StageEvent,
) -> Result<StageProgress, StageError> {
    let stage = stages.get(progress.stage_index as usize);
    let out_of_phase = || StageError::OutOfPhase {
        event,
        phase: progress.phase,
        kind: stage.map(|s| s.kind()).unwrap_or("missing"),
    };
    if progress.is_complete() {
        return Err(out_of_phase());
    }
    match (stage, progress.phase, event) {
        (Some(StageConfig::Instruction(_)), Phase::Showing, StageEvent::Continue)
        | (Some(StageConfig::Feedback(_)), Phase::Showing, StageEvent::FeedbackSubmitted) => {
            Ok(progress.next_stage(stages))
        }
        (
            Some(StageConfig::Environment(env)),
            Phase::Interacting,
            StageEvent::EpisodeEnded { episode_return },
        ) => {
            let episodes = progress.episode_index + 1;
            let successes = progress.successes + u32::from(episode_return >= env.success_threshold);
            let enough = env.min_successes > 0 && successes >= env.min_successes;
            if enough || episodes >= env.max_episodes {
                Ok(progress.next_stage(stages))
            } else {
                Ok(StageProgress {
                    episode_index: episodes,
                    successes,
                    ..progress
                })
            }
        }
        _ => Err(out_of_phase()),
    }
}

/// Validates answers for the current feedback stage and advances past it.
pub fn submit_feedback(
    stages: &[StageConfig],
    progress: StageProgress,
    answers: &BTreeMap<String, AnswerValue>,
) -> Result<(StageProgress, Vec<RecordedAnswer>), StageError> {
    let Some(StageConfig::Feedback(stage)) = stages.get(progress.stage_index as usize) else {
        return Err(StageError::NotFeedback);
    };
    if progress.phase != Phase::Showing {
        return Err(StageError::NotFeedback);
    }
    let recorded = stage
        .questions
        .check(answers)
        .map_err(StageError::InvalidAnswers)?;
    let next = advance(stages, progress, StageEvent::FeedbackSubmitted)?;
    Ok((next, recorded))
}
