//! Pure-functional contextual-MDP environments.
//!
//! An environment is a set of functions over values: `reset` samples an
//! initial state for a context (the [`EnvParams`]), `step` samples a successor.
//! Nothing here holds mutable state, so any number of participants can share
//! one environment definition while each owns an isolated [`EnvState`].
//!
//! Per-step randomness is passed in explicitly as an [`Rng`]. The session
//! layer derives it from `(session seed, stage, episode, step)` and never from
//! the chosen action, which is what lets every action's successor be
//! precomputed under one stream.

pub mod gridnav;
pub mod twocooks;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::rng::{Rng, RngStream};

pub use gridnav::{GridNav, GridNavParams, GridWorld, StartSpec};
pub use twocooks::{Kitchen, TwoCooks, TwoCooksParams};

/// Grid coordinate as `(row, col)`, row 0 at the top.
pub type Cell = (u16, u16);

/// Index into an environment's action set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u8);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileGrid {
    pub height: u16,
    pub width: u16,
    /// Row-major tile ids.
    pub tiles: Vec<u8>,
}

impl TileGrid {
    pub fn filled(height: u16, width: u16, tile: u8) -> Self {
        Self {
            height,
            width,
            tiles: vec![tile; height as usize * width as usize],
        }
    }

    pub fn get(&self, (r, c): Cell) -> u8 {
        self.tiles[r as usize * self.width as usize + c as usize]
    }

    pub fn set(&mut self, (r, c): Cell, tile: u8) {
        self.tiles[r as usize * self.width as usize + c as usize] = tile;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grid: TileGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Advisory: one flag per action in the environment's action set.
    pub legal: Vec<bool>,
}

/// Environment-specific world value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum World {
    GridNav(GridWorld),
    TwoCooks(Kitchen),
}

/// Full environment state: world, the episode's RNG branch, and bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub world: World,
    pub rng: Rng,
    pub step: u32,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Context for one environment, tagged by kind id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvParams {
    #[serde(rename = "gridnav")]
    GridNav(GridNavParams),
    #[serde(rename = "twocooks")]
    TwoCooks(TwoCooksParams),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment parameter `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("step called on a finished episode; reset first")]
    EpisodeDone,
    #[error("action {action} outside action set of size {count}")]
    ActionOutOfRange { action: u8, count: usize },
    #[error("state does not belong to this environment kind")]
    KindMismatch,
    #[error("{0} is only defined for two-agent environments")]
    NotMultiAgent(&'static str),
    #[error("unknown environment kind `{0}`")]
    UnknownKind(String),
}

impl EnvError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        EnvError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Contract implemented by each built-in environment.
///
/// Implementations only describe the dynamics; step counting, episode
/// termination bookkeeping, and kind dispatch are handled by [`reset`] and
/// [`step`].
pub trait Environment {
    const KIND: &'static str;
    type Params;
    type World: Clone;

    fn action_count(params: &Self::Params) -> usize;
    fn validate(params: &Self::Params) -> Result<(), EnvError>;
    /// Samples an initial world (the context's initial-state distribution).
    fn initial(params: &Self::Params, rng: &mut RngStream) -> Self::World;
    /// Samples a successor world, returning it with the reward and whether
    /// the episode terminated naturally.
    fn transition(
        world: &Self::World,
        action: ActionId,
        params: &Self::Params,
        rng: &mut RngStream,
    ) -> (Self::World, f64, bool);
    fn observe(world: &Self::World, params: &Self::Params) -> Observation;
    fn step_limit(params: &Self::Params) -> u32;
}

/// Registered environment kind ids.
pub const KINDS: [&str; 2] = [GridNav::KIND, TwoCooks::KIND];

pub fn is_registered(kind: &str) -> bool {
    KINDS.contains(&kind)
}

impl EnvParams {
    pub fn kind(&self) -> &'static str {
        match self {
            EnvParams::GridNav(_) => GridNav::KIND,
            EnvParams::TwoCooks(_) => TwoCooks::KIND,
        }
    }

    /// Builds params from a kind id and an untyped payload (as found in an
    /// experiment config).
    pub fn from_value(kind: &str, payload: &serde_json::Value) -> Result<Self, EnvError> {
        let params = match kind {
            "gridnav" => EnvParams::GridNav(
                serde_json::from_value(payload.clone())
                    .map_err(|e| EnvError::config(json_field(&e), e.to_string()))?,
            ),
            "twocooks" => EnvParams::TwoCooks(
                serde_json::from_value(payload.clone())
                    .map_err(|e| EnvError::config(json_field(&e), e.to_string()))?,
            ),
            other => return Err(EnvError::UnknownKind(other.to_string())),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvParams::GridNav(p) => GridNav::validate(p),
            EnvParams::TwoCooks(p) => TwoCooks::validate(p),
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvParams::GridNav(p) => GridNav::action_count(p),
            EnvParams::TwoCooks(p) => TwoCooks::action_count(p),
        }
    }

    pub fn step_limit(&self) -> u32 {
        match self {
            EnvParams::GridNav(p) => GridNav::step_limit(p),
            EnvParams::TwoCooks(p) => TwoCooks::step_limit(p),
        }
    }

    /// Caps the per-episode step limit (stage-level truncation).
    pub fn with_step_cap(mut self, cap: Option<u32>) -> Self {
        if let Some(cap) = cap {
            match &mut self {
                EnvParams::GridNav(p) => p.max_steps = p.max_steps.min(cap),
                EnvParams::TwoCooks(p) => p.max_steps = p.max_steps.min(cap),
            }
        }
        self
    }

    pub fn action_names(&self) -> &'static [&'static str] {
        match self {
            EnvParams::GridNav(_) => &gridnav::ACTION_NAMES,
            EnvParams::TwoCooks(_) => &twocooks::ACTION_NAMES,
        }
    }
}

fn json_field(e: &serde_json::Error) -> String {
    // serde_json reports "missing field `x`" / "unknown field `x`"
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("params").to_string()
}

fn reset_generic<E: Environment>(
    params: &E::Params,
    rng: &Rng,
) -> Result<(E::World, Observation), EnvError> {
    E::validate(params)?;
    let world = E::initial(params, &mut rng.stream());
    let obs = E::observe(&world, params);
    Ok((world, obs))
}

/// Samples an initial state. `rng` becomes the episode branch stored in the
/// state; per-step streams are split from it.
pub fn reset(params: &EnvParams, rng: &Rng) -> Result<(EnvState, Observation), EnvError> {
    let (world, obs) = match params {
        EnvParams::GridNav(p) => {
            let (w, o) = reset_generic::<GridNav>(p, rng)?;
            (World::GridNav(w), o)
        }
        EnvParams::TwoCooks(p) => {
            let (w, o) = reset_generic::<TwoCooks>(p, rng)?;
            (World::TwoCooks(w), o)
        }
    };
    Ok((
        EnvState {
            world,
            rng: rng.clone(),
            step: 0,
            done: false,
        },
        obs,
    ))
}

/// The per-step branch used for the transition out of `state`. Depends only on
/// the episode branch and the step index, never on the action.
pub fn step_rng(state: &EnvState) -> Rng {
    state.rng.split(state.step as u64)
}

fn step_generic<E: Environment>(
    world: &E::World,
    step: u32,
    action: ActionId,
    params: &E::Params,
    rng: &Rng,
) -> Result<(E::World, Observation, f64, bool), EnvError> {
    let count = E::action_count(params);
    if action.index() >= count {
        return Err(EnvError::ActionOutOfRange {
            action: action.0,
            count,
        });
    }
    let (next, reward, terminal) = E::transition(world, action, params, &mut rng.stream());
    let done = terminal || step + 1 >= E::step_limit(params);
    let obs = E::observe(&next, params);
    Ok((next, obs, reward, done))
}

/// Samples a successor state. Pure: the input state is never modified.
pub fn step(
    state: &EnvState,
    action: ActionId,
    params: &EnvParams,
    rng: &Rng,
) -> Result<StepResult, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeDone);
    }
    let (world, observation, reward, done) = match (&state.world, params) {
        (World::GridNav(w), EnvParams::GridNav(p)) => {
            let (w, o, r, d) = step_generic::<GridNav>(w, state.step, action, p, rng)?;
            (World::GridNav(w), o, r, d)
        }
        (World::TwoCooks(w), EnvParams::TwoCooks(p)) => {
            let (w, o, r, d) = step_generic::<TwoCooks>(w, state.step, action, p, rng)?;
            (World::TwoCooks(w), o, r, d)
        }
        _ => return Err(EnvError::KindMismatch),
    };
    Ok(StepResult {
        state: EnvState {
            world,
            rng: state.rng.clone(),
            step: state.step + 1,
            done,
        },
        observation,
        reward,
        done,
    })
}

/// Observation for a state.
pub fn observe(state: &EnvState, params: &EnvParams) -> Result<Observation, EnvError> {
    match (&state.world, params) {
        (World::GridNav(w), EnvParams::GridNav(p)) => Ok(GridNav::observe(w, p)),
        (World::TwoCooks(w), EnvParams::TwoCooks(p)) => Ok(TwoCooks::observe(w, p)),
        _ => Err(EnvError::KindMismatch),
    }
}

/// The embedded partner's next action. Only defined for two-agent kinds.
pub fn partner_policy(state: &EnvState, params: &EnvParams) -> Result<ActionId, EnvError> {
    match (&state.world, params) {
        (World::TwoCooks(w), EnvParams::TwoCooks(p)) => Ok(twocooks::partner_action(w, p)),
        (World::GridNav(_), EnvParams::GridNav(_)) => {
            Err(EnvError::NotMultiAgent("partner_policy"))
        }
        _ => Err(EnvError::KindMismatch),
    }
}

const STATE_CODEC_VERSION: u8 = 1;
const KIND_GRIDNAV: u8 = 1;
const KIND_TWOCOOKS: u8 = 2;

/// Canonical encoding of a state. See the state-codec chapter of the guide for
/// the byte layout.
pub fn encode_state(state: &EnvState) -> Vec<u8> {
    let mut enc = Encoder::with_version(STATE_CODEC_VERSION);
    let kind = match state.world {
        World::GridNav(_) => KIND_GRIDNAV,
        World::TwoCooks(_) => KIND_TWOCOOKS,
    };
    enc.field(1, |w| {
        w.u8(kind);
    });
    enc.field(2, |w| state.rng.encode(w));
    enc.field(3, |w| {
        w.u32(state.step);
    });
    enc.field(4, |w| {
        w.bool(state.done);
    });
    enc.field(5, |w| match &state.world {
        World::GridNav(g) => g.encode(w),
        World::TwoCooks(k) => k.encode(w),
    });
    enc.finish()
}

pub fn decode_state(bytes: &[u8]) -> Result<EnvState, CodecError> {
    let mut dec = Decoder::new(bytes);
    dec.version(STATE_CODEC_VERSION)?;
    let mut f = dec.field(1)?;
    let kind_at = f.offset();
    let kind = f.u8()?;
    f.finish()?;
    let mut f = dec.field(2)?;
    let rng = Rng::decode(&mut f)?;
    f.finish()?;
    let mut f = dec.field(3)?;
    let step = f.u32()?;
    f.finish()?;
    let mut f = dec.field(4)?;
    let done = f.bool()?;
    f.finish()?;
    let mut f = dec.field(5)?;
    let world = match kind {
        KIND_GRIDNAV => World::GridNav(GridWorld::decode(&mut f)?),
        KIND_TWOCOOKS => World::TwoCooks(Kitchen::decode(&mut f)?),
        other => {
            return Err(CodecError::new(
                kind_at,
                format!("unknown world kind {other}"),
            ))
        }
    };
    f.finish()?;
    dec.finish()?;
    Ok(EnvState {
        world,
        rng,
        step,
        done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_params() -> EnvParams {
        EnvParams::GridNav(GridNavParams::open(5, 5, (2, 2), (0, 4)))
    }

    #[test]
    fn reset_is_deterministic() {
        let p = grid_params();
        let rng = Rng::new(3).split(0).split(0);
        assert_eq!(reset(&p, &rng).unwrap(), reset(&p, &rng).unwrap());
    }

    #[test]
    fn step_on_done_state_is_rejected() {
        let p = grid_params();
        let (mut s, _) = reset(&p, &Rng::new(1)).unwrap();
        s.done = true;
        let r = step(&s, ActionId(0), &p, &step_rng(&s));
        assert_eq!(r.unwrap_err(), EnvError::EpisodeDone);
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        let p = grid_params();
        let (s, _) = reset(&p, &Rng::new(1)).unwrap();
        let r = step(&s, ActionId(5), &p, &step_rng(&s));
        assert!(matches!(
            r,
            Err(EnvError::ActionOutOfRange {
                action: 5,
                count: 5
            })
        ));
    }

    #[test]
    fn partner_policy_requires_two_agents() {
        let p = grid_params();
        let (s, _) = reset(&p, &Rng::new(1)).unwrap();
        assert!(matches!(
            partner_policy(&s, &p),
            Err(EnvError::NotMultiAgent(_))
        ));
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let (s, _) = reset(&grid_params(), &Rng::new(1)).unwrap();
        let cooks = EnvParams::TwoCooks(TwoCooksParams::default());
        assert_eq!(
            step(&s, ActionId(0), &cooks, &step_rng(&s)).unwrap_err(),
            EnvError::KindMismatch
        );
    }

    #[test]
    fn codec_distinguishes_rng_paths() {
        let p = grid_params();
        let (a, _) = reset(&p, &Rng::new(1).split(0)).unwrap();
        let (b, _) = reset(&p, &Rng::new(1).split(1)).unwrap();
        assert_eq!(a.world, b.world);
        assert_ne!(encode_state(&a), encode_state(&b));
    }

    #[test]
    fn corrupt_bytes_report_offset() {
        let p = grid_params();
        let (s, _) = reset(&p, &Rng::new(1)).unwrap();
        let mut bytes = encode_state(&s);
        // done flag body lives after version + kind field + rng field + step field
        let done_at = bytes.len() - (1 + 4 + 4) - 1;
        assert_eq!(bytes[done_at], 0);
        bytes[done_at] = 7;
        let err = decode_state(&bytes).unwrap_err();
        assert_eq!(err.offset, done_at);

        bytes[done_at] = 0;
        let err = decode_state(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.reason.contains("unexpected end"));
        assert!(decode_state(&[9]).unwrap_err().reason.contains("version"));
    }

    #[test]
    fn from_value_reports_missing_field() {
        let err = EnvParams::from_value("gridnav", &serde_json::json!({"width": 3})).unwrap_err();
        match err {
            EnvError::Config { field, .. } => assert_eq!(field, "height"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            EnvParams::from_value("gridnavv", &serde_json::json!({})),
            Err(EnvError::UnknownKind(_))
        ));
    }
}
