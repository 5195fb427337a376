//! Latency hiding by precomputing every possible next step.
//!
//! After each realized transition the server opens a [`SpeculativeFrame`]:
//! the successor of the current state under every action, all computed with
//! the same action-independent per-step RNG branch. Successor states stay on
//! the server; the client receives a [`ClientFrame`] with observations,
//! rewards and done flags only, so it can render the outcome of a keypress
//! without waiting for the network. Committing an action is a table lookup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, ActionId, EnvError, EnvParams, EnvState, Observation, StepResult};

#[derive(Debug, Clone, PartialEq)]
pub struct SpeculativeFrame {
    pub frame_id: u64,
    /// State the successors were computed from.
    pub state: EnvState,
    pub observation: Observation,
    /// Indexed by action id; one entry per action in the action set.
    pub successors: Vec<StepResult>,
    pub created_ms: f64,
}

/// A participant's choice, timed on the client's monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub frame_id: u64,
    pub action: ActionId,
    /// When the frame's observation was rendered (ms).
    pub t1: f64,
    /// When the action was chosen (ms).
    pub t2: f64,
}

/// Client-bound half of a frame. Never carries successor states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFrame {
    pub frame_id: u64,
    pub observation: Observation,
    pub successors: Vec<ClientSuccessor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSuccessor {
    pub action: ActionId,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpeculationError {
    #[error("episode is finished; reset before opening a frame")]
    EpisodeBoundary,
    #[error("stale action for frame {got}, current frame is {expected}")]
    StaleAction { expected: u64, got: u64 },
    #[error("action {action} outside action set of size {count}")]
    IllegalAction { action: u8, count: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Clock anomaly: the action timestamp precedes the render timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("clock anomaly: t2 ({t2}) precedes t1 ({t1})")]
pub struct ClockAnomaly {
    pub t1: f64,
    pub t2: f64,
}

/// Computes the successor of `state` under every action.
pub fn open_frame(
    frame_id: u64,
    params: &EnvParams,
    state: &EnvState,
    created_ms: f64,
) -> Result<SpeculativeFrame, SpeculationError> {
    if state.done {
        return Err(SpeculationError::EpisodeBoundary);
    }
    let observation = env::observe(state, params)?;
    let rng = env::step_rng(state);
    let successors = (0..params.action_count())
        .map(|a| env::step(state, ActionId(a as u8), params, &rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SpeculativeFrame {
        frame_id,
        state: state.clone(),
        observation,
        successors,
        created_ms,
    })
}

impl SpeculativeFrame {
    pub fn successor(&self, action: ActionId) -> Option<&StepResult> {
        self.successors.get(action.index())
    }

    pub fn client_view(&self) -> ClientFrame {
        ClientFrame {
            frame_id: self.frame_id,
            observation: self.observation.clone(),
            successors: self
                .successors
                .iter()
                .enumerate()
                .map(|(a, s)| ClientSuccessor {
                    action: ActionId(a as u8),
                    observation: s.observation.clone(),
                    reward: s.reward,
                    done: s.done,
                })
                .collect(),
        }
    }
}

/// Selects the cached successor for the event's action. No environment code
/// runs here.
pub fn commit_action(
    frame: &SpeculativeFrame,
    event: &ActionEvent,
) -> Result<(EnvState, StepResult), SpeculationError> {
    if event.frame_id != frame.frame_id {
        return Err(SpeculationError::StaleAction {
            expected: frame.frame_id,
            got: event.frame_id,
        });
    }
    let result = frame
        .successor(event.action)
        .ok_or(SpeculationError::IllegalAction {
            action: event.action.0,
            count: frame.successors.len(),
        })?
        .clone();
    Ok((result.state.clone(), result))
}

/// `t2 - t1` in milliseconds.
pub fn response_time(event: &ActionEvent) -> Result<f64, ClockAnomaly> {
    let (t1, t2) = (event.t1, event.t2);
    if t2 < t1 || !t1.is_finite() || !t2.is_finite() {
        return Err(ClockAnomaly { t1, t2 });
    }
    Ok(t2 - t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::gridnav::{GridNavParams, UP};
    use crate::rng::Rng;

    fn setup() -> (EnvParams, EnvState) {
        let p = EnvParams::GridNav(GridNavParams::open(5, 5, (2, 2), (0, 4)));
        let (s, _) = env::reset(&p, &Rng::new(4).split(0).split(0)).unwrap();
        (p, s)
    }

    fn event(frame_id: u64, action: u8) -> ActionEvent {
        ActionEvent {
            frame_id,
            action: ActionId(action),
            t1: 0.0,
            t2: 1.0,
        }
    }

    #[test]
    fn one_successor_per_action() {
        let (p, s) = setup();
        let f = open_frame(0, &p, &s, 0.0).unwrap();
        assert_eq!(f.successors.len(), 5);
        let rng = env::step_rng(&s);
        for a in 0..5u8 {
            let direct = env::step(&s, ActionId(a), &p, &rng).unwrap();
            assert_eq!(f.successors[a as usize], direct);
        }
    }

    #[test]
    fn commit_returns_cached_entry() {
        let (p, s) = setup();
        let f = open_frame(3, &p, &s, 0.0).unwrap();
        let (next, result) = commit_action(&f, &event(3, UP.0)).unwrap();
        assert_eq!(&result, f.successor(UP).unwrap());
        assert_eq!(next, result.state);
    }

    #[test]
    fn stale_and_illegal_actions_are_rejected() {
        let (p, s) = setup();
        let f = open_frame(7, &p, &s, 0.0).unwrap();
        assert_eq!(
            commit_action(&f, &event(6, 0)).unwrap_err(),
            SpeculationError::StaleAction {
                expected: 7,
                got: 6
            }
        );
        assert!(matches!(
            commit_action(&f, &event(7, 9)),
            Err(SpeculationError::IllegalAction { action: 9, .. })
        ));
    }

    #[test]
    fn done_state_cannot_open_a_frame() {
        let (p, mut s) = setup();
        s.done = true;
        assert_eq!(
            open_frame(0, &p, &s, 0.0).unwrap_err(),
            SpeculationError::EpisodeBoundary
        );
    }

    #[test]
    fn client_view_omits_states() {
        let (p, s) = setup();
        let view = open_frame(0, &p, &s, 0.0).unwrap().client_view();
        let json = serde_json::to_value(&view).unwrap();
        let succ = &json["successors"][0];
        assert!(succ.get("state").is_none());
        assert!(succ.get("observation").is_some());
    }

    #[test]
    fn response_times() {
        let mut e = event(0, 0);
        e.t1 = 1000.0;
        e.t2 = 1350.5;
        assert_eq!(response_time(&e).unwrap(), 350.5);
        e.t2 = 1000.0;
        assert_eq!(response_time(&e).unwrap(), 0.0);
        e.t2 = 999.0;
        assert!(response_time(&e).is_err());
    }
}
