//! Single-agent grid navigation.
//!
//! The agent moves on a `height × width` grid with impassable walls. Moves
//! off the edge or into a wall leave the agent in place. Entering the goal
//! cell pays `goal_reward` and ends the episode. With `slip > 0` the chosen
//! action is replaced, with that probability, by a uniformly random one.

use serde::{Deserialize, Serialize};

use super::{ActionId, Cell, EnvError, Environment, Observation, TileGrid};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::rng::RngStream;

pub const ACTION_NAMES: [&str; 5] = ["up", "down", "left", "right", "stay"];

pub const UP: ActionId = ActionId(0);
pub const DOWN: ActionId = ActionId(1);
pub const LEFT: ActionId = ActionId(2);
pub const RIGHT: ActionId = ActionId(3);
pub const STAY: ActionId = ActionId(4);

pub const TILE_FLOOR: u8 = 0;
pub const TILE_WALL: u8 = 1;
pub const TILE_GOAL: u8 = 2;
pub const TILE_AGENT: u8 = 3;

/// Initial-state distribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StartSpec {
    Fixed(Cell),
    /// Uniform over cells that are neither walls nor the goal.
    UniformFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridNavParams {
    pub width: u16,
    pub height: u16,
    #[serde(default)]
    pub walls: Vec<Cell>,
    pub goal: Cell,
    pub start: StartSpec,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Probability that the executed action is replaced by a random one.
    #[serde(default)]
    pub slip: f64,
    /// When false the goal tile is not drawn in observations.
    #[serde(default = "default_true")]
    pub goal_visible: bool,
}

fn default_goal_reward() -> f64 {
    1.0
}

fn default_max_steps() -> u32 {
    100
}

fn default_true() -> bool {
    true
}

impl GridNavParams {
    /// Wall-free grid with a fixed start.
    pub fn open(width: u16, height: u16, start: Cell, goal: Cell) -> Self {
        Self {
            width,
            height,
            walls: Vec::new(),
            goal,
            start: StartSpec::Fixed(start),
            goal_reward: 1.0,
            max_steps: 100,
            slip: 0.0,
            goal_visible: true,
        }
    }

    pub fn in_bounds(&self, (r, c): Cell) -> bool {
        r < self.height && c < self.width
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls.contains(&cell)
    }

    /// Cells a uniform start may choose, row-major.
    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&cell| !self.is_wall(cell) && cell != self.goal)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridWorld {
    pub agent: Cell,
}

impl GridWorld {
    pub(crate) fn encode(&self, w: &mut Encoder) {
        w.u16(self.agent.0).u16(self.agent.1);
    }

    pub(crate) fn decode(r: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            agent: (r.u16()?, r.u16()?),
        })
    }
}

/// Cell reached by moving from `from` in direction `action`, ignoring walls.
/// Moves off the grid clamp to `from`.
pub fn target_cell(from: Cell, action: ActionId, width: u16, height: u16) -> Cell {
    let (r, c) = from;
    match action {
        UP if r > 0 => (r - 1, c),
        DOWN if r + 1 < height => (r + 1, c),
        LEFT if c > 0 => (r, c - 1),
        RIGHT if c + 1 < width => (r, c + 1),
        _ => from,
    }
}

pub struct GridNav;

impl Environment for GridNav {
    const KIND: &'static str = "gridnav";
    type Params = GridNavParams;
    type World = GridWorld;

    fn action_count(_: &GridNavParams) -> usize {
        ACTION_NAMES.len()
    }

    fn validate(p: &GridNavParams) -> Result<(), EnvError> {
        if p.width == 0 {
            return Err(EnvError::config("width", "must be positive"));
        }
        if p.height == 0 {
            return Err(EnvError::config("height", "must be positive"));
        }
        if let Some(w) = p.walls.iter().find(|w| !p.in_bounds(**w)) {
            return Err(EnvError::config(
                "walls",
                format!("wall {w:?} outside the grid"),
            ));
        }
        if !p.in_bounds(p.goal) {
            return Err(EnvError::config("goal", "outside the grid"));
        }
        if p.is_wall(p.goal) {
            return Err(EnvError::config("goal", "goal cell is a wall"));
        }
        match p.start {
            StartSpec::Fixed(cell) => {
                if !p.in_bounds(cell) {
                    return Err(EnvError::config("start", "outside the grid"));
                }
                if p.is_wall(cell) {
                    return Err(EnvError::config("start", "start cell is a wall"));
                }
            }
            StartSpec::UniformFree => {
                if p.free_cells().is_empty() {
                    return Err(EnvError::config("start", "no free cells to start from"));
                }
            }
        }
        if !(0.0..=1.0).contains(&p.slip) {
            return Err(EnvError::config("slip", "must lie in [0, 1]"));
        }
        if !p.goal_reward.is_finite() {
            return Err(EnvError::config("goal_reward", "must be finite"));
        }
        if p.max_steps == 0 {
            return Err(EnvError::config("max_steps", "must be positive"));
        }
        Ok(())
    }

    fn initial(p: &GridNavParams, rng: &mut RngStream) -> GridWorld {
        let agent = match p.start {
            StartSpec::Fixed(cell) => cell,
            StartSpec::UniformFree => {
                let free = p.free_cells();
                free[rng.below(free.len() as u64) as usize]
            }
        };
        GridWorld { agent }
    }

    fn transition(
        world: &GridWorld,
        action: ActionId,
        p: &GridNavParams,
        rng: &mut RngStream,
    ) -> (GridWorld, f64, bool) {
        // Both draws happen unconditionally so the stream layout does not
        // depend on the action.
        let slipped = rng.bernoulli(p.slip);
        let random_action = ActionId(rng.below(ACTION_NAMES.len() as u64) as u8);
        let executed = if slipped { random_action } else { action };

        let target = target_cell(world.agent, executed, p.width, p.height);
        let agent = if p.is_wall(target) {
            world.agent
        } else {
            target
        };
        let reached = agent == p.goal;
        let reward = if reached { p.goal_reward } else { 0.0 };
        (GridWorld { agent }, reward, reached)
    }

    fn observe(world: &GridWorld, p: &GridNavParams) -> Observation {
        let mut grid = TileGrid::filled(p.height, p.width, TILE_FLOOR);
        for &w in &p.walls {
            grid.set(w, TILE_WALL);
        }
        if p.goal_visible {
            grid.set(p.goal, TILE_GOAL);
        }
        grid.set(world.agent, TILE_AGENT);
        Observation {
            grid,
            text: None,
            legal: vec![true; ACTION_NAMES.len()],
        }
    }

    fn step_limit(p: &GridNavParams) -> u32 {
        p.max_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvParams, EnvState};
    use crate::rng::Rng;

    fn params() -> EnvParams {
        EnvParams::GridNav(GridNavParams::open(5, 5, (2, 2), (0, 4)))
    }

    fn state_at(cell: Cell) -> EnvState {
        EnvState {
            world: super::super::World::GridNav(GridWorld { agent: cell }),
            rng: Rng::new(0),
            step: 0,
            done: false,
        }
    }

    fn agent(s: &EnvState) -> Cell {
        match &s.world {
            super::super::World::GridNav(w) => w.agent,
            _ => unreachable!(),
        }
    }

    #[test]
    fn reset_uses_fixed_start() {
        let (s, obs) = env::reset(&params(), &Rng::new(8)).unwrap();
        assert_eq!(agent(&s), (2, 2));
        assert_eq!(s.step, 0);
        assert!(!s.done);
        assert_eq!(obs.grid.get((2, 2)), TILE_AGENT);
        assert_eq!(obs.grid.get((0, 4)), TILE_GOAL);
    }

    #[test]
    fn top_edge_clamps() {
        let s = state_at((0, 2));
        let r = env::step(&s, UP, &params(), &env::step_rng(&s)).unwrap();
        assert_eq!(agent(&r.state), (0, 2));
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
        assert_eq!(r.state.step, 1);
    }

    #[test]
    fn entering_goal_pays_and_terminates() {
        let s = state_at((0, 3));
        let r = env::step(&s, RIGHT, &params(), &env::step_rng(&s)).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.done && r.state.done);
    }

    #[test]
    fn walls_block_movement() {
        let mut p = GridNavParams::open(5, 5, (2, 2), (0, 4));
        p.walls.push((1, 2));
        let p = EnvParams::GridNav(p);
        let s = state_at((2, 2));
        let r = env::step(&s, UP, &p, &env::step_rng(&s)).unwrap();
        assert_eq!(agent(&r.state), (2, 2));
    }

    #[test]
    fn step_limit_ends_episode() {
        let mut p = GridNavParams::open(5, 5, (2, 2), (0, 4));
        p.max_steps = 2;
        let p = EnvParams::GridNav(p);
        let (s, _) = env::reset(&p, &Rng::new(0)).unwrap();
        let s1 = env::step(&s, STAY, &p, &env::step_rng(&s)).unwrap();
        assert!(!s1.done);
        let s2 = env::step(&s1.state, STAY, &p, &env::step_rng(&s1.state)).unwrap();
        assert!(s2.done);
        assert_eq!(s2.reward, 0.0);
    }

    #[test]
    fn goal_in_wall_names_field() {
        let mut p = GridNavParams::open(5, 5, (2, 2), (0, 4));
        p.walls.push((0, 4));
        match env::reset(&EnvParams::GridNav(p), &Rng::new(0)) {
            Err(EnvError::Config { field, .. }) => assert_eq!(field, "goal"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hidden_goal_is_not_drawn() {
        let mut p = GridNavParams::open(5, 5, (2, 2), (0, 4));
        p.goal_visible = false;
        let (_, obs) = env::reset(&EnvParams::GridNav(p), &Rng::new(0)).unwrap();
        assert!(!obs.grid.tiles.contains(&TILE_GOAL));
    }

    #[test]
    fn slip_draws_are_action_independent() {
        let mut p = GridNavParams::open(7, 7, (3, 3), (0, 0));
        p.slip = 1.0;
        let p = EnvParams::GridNav(p);
        let s = state_at((3, 3));
        let rng = env::step_rng(&s);
        // Full slip: every action executes the same random replacement.
        let first = agent(&env::step(&s, UP, &p, &rng).unwrap().state);
        for a in 1..5 {
            assert_eq!(
                agent(&env::step(&s, ActionId(a), &p, &rng).unwrap().state),
                first
            );
        }
    }
}
