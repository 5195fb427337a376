//! Oracles and fixtures for tests.
//!
//! The oracles here deliberately avoid the session machinery they check:
//! trajectories are produced by calling the environment functions and the
//! stage transition directly, in a plain loop.

pub mod harness;

use std::collections::VecDeque;

use serde_json::json;
use webrl_core::env::{self, ActionId, EnvParams, GridNavParams, Observation};
use webrl_core::persistence::{Record, SessionId};
use webrl_core::rng::Rng;
use webrl_core::stage::{
    advance, Experiment, ExperimentDefinition, StageConfig, StageEvent, StageProgress,
};

/// One committed step as seen by an outside observer.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub frame_id: u64,
    pub stage_index: u32,
    pub episode: u32,
    pub step: u32,
    pub pre_state: Vec<u8>,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
}

/// Sequential reference run of a whole experiment for one seed. `policy`
/// gets the global step counter and the observation. Stops after
/// `max_steps` steps.
pub fn oracle_trajectory(
    exp: &Experiment,
    seed: u64,
    condition: Option<u32>,
    policy: &mut dyn FnMut(u64, &Observation) -> ActionId,
    max_steps: usize,
) -> Vec<Step> {
    let stages = exp.stages(condition);
    let mut progress = StageProgress::start(stages);
    let mut out = Vec::new();
    while !progress.is_complete() && out.len() < max_steps {
        let event = match &stages[progress.stage_index as usize] {
            StageConfig::Instruction(_) => StageEvent::Continue,
            StageConfig::Feedback(_) => StageEvent::FeedbackSubmitted,
            StageConfig::Environment(_) => {
                let params = exp.env_params(condition, progress.stage_index).unwrap();
                let episode_rng = Rng::new(seed)
                    .split(progress.stage_index as u64)
                    .split(progress.episode_index as u64);
                let (mut state, mut obs) = env::reset(params, &episode_rng).unwrap();
                let mut ret = 0.0;
                loop {
                    if out.len() >= max_steps {
                        return out;
                    }
                    let frame_id = out.len() as u64;
                    let action = policy(frame_id, &obs);
                    let step_rng = episode_rng.split(state.step as u64);
                    let r = env::step(&state, action, params, &step_rng).unwrap();
                    out.push(Step {
                        frame_id,
                        stage_index: progress.stage_index,
                        episode: progress.episode_index,
                        step: state.step,
                        pre_state: env::encode_state(&state),
                        action: action.0,
                        reward: r.reward,
                        done: r.done,
                    });
                    ret += r.reward;
                    if r.done {
                        break;
                    }
                    state = r.state;
                    obs = r.observation;
                }
                StageEvent::EpisodeEnded {
                    episode_return: ret,
                }
            }
        };
        progress = advance(stages, progress, event).unwrap();
    }
    out
}

/// Step records of one session, in log order.
pub fn logged_steps(records: &[Record], session: SessionId) -> Vec<Step> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Step(s) if s.session == session => Some(Step {
                frame_id: s.frame_id,
                stage_index: s.stage_index,
                episode: s.episode,
                step: s.step,
                pre_state: s.pre_state.clone(),
                action: s.action,
                reward: s.reward,
                done: s.done,
            }),
            _ => None,
        })
        .collect()
}

/// Single GridNav stage: 7×7 maze, uniform start, `episodes` episodes of
/// at most `max_steps` steps, played in full.
pub fn gridnav_experiment(id: &str, episodes: u32, max_steps: u32) -> Experiment {
    let def: ExperimentDefinition = serde_json::from_value(json!({
        "experiment_id": id,
        "version": 1,
        "stages": [{
            "kind": "environment",
            "id": "maze",
            "env": "gridnav",
            "params": {
                "width": 7, "height": 7,
                "walls": [[1, 1], [1, 2], [1, 3], [3, 3], [3, 4], [3, 5], [5, 1], [5, 2]],
                "goal": [6, 6],
                "start": "uniform_free",
                "slip": 0.1,
                "max_steps": max_steps
            },
            "max_episodes": episodes,
            "min_successes": 0
        }]
    }))
    .unwrap();
    Experiment::new(def).unwrap()
}

/// Single TwoCooks stage with the default kitchen.
pub fn twocooks_experiment(id: &str, episodes: u32, max_steps: u32) -> Experiment {
    let def: ExperimentDefinition = serde_json::from_value(json!({
        "experiment_id": id,
        "version": 1,
        "stages": [{
            "kind": "environment",
            "id": "kitchen",
            "env": "twocooks",
            "params": { "layout": ["##O#P##", "#     #", "#1   2#", "#     #", "###S###"], "max_steps": max_steps },
            "max_episodes": episodes
        }]
    }))
    .unwrap();
    Experiment::new(def).unwrap()
}

/// Instruction, GridNav with a scripted assistant, likert feedback.
pub fn three_stage_experiment(id: &str) -> Experiment {
    let def: ExperimentDefinition = serde_json::from_value(json!({
        "experiment_id": id,
        "version": 3,
        "stages": [
            { "kind": "instruction", "id": "welcome", "title": "Welcome", "body": "Use the arrow keys." },
            {
                "kind": "environment", "id": "nav", "env": "gridnav",
                "params": { "width": 5, "height": 5, "goal": [0, 4], "start": { "fixed": [4, 0] }, "max_steps": 30 },
                "max_episodes": 4, "min_successes": 2,
                "assistant": { "advisor": "scripted", "deadline_ms": 500 }
            },
            {
                "kind": "feedback", "id": "survey",
                "questions": [{ "id": "helpful", "prompt": "How helpful was the AI?", "input": { "kind": "likert", "min": 1, "max": 5 } }]
            }
        ]
    }))
    .unwrap();
    Experiment::new(def).unwrap()
}

/// BFS distance from `from` to the goal, or `None` if unreachable.
pub fn bfs_distance(p: &GridNavParams, from: (u16, u16)) -> Option<u32> {
    let (h, w) = (p.height as usize, p.width as usize);
    let mut dist = vec![u32::MAX; h * w];
    let idx = |(r, c): (u16, u16)| r as usize * w + c as usize;
    let blocked = |cell: (u16, u16)| p.walls.contains(&cell);
    let mut queue = VecDeque::new();
    dist[idx(from)] = 0;
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        if cell == p.goal {
            return Some(dist[idx(cell)]);
        }
        let (r, c) = (cell.0 as i32, cell.1 as i32);
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= h as i32 || nc >= w as i32 {
                continue;
            }
            let next = (nr as u16, nc as u16);
            if blocked(next) || dist[idx(next)] != u32::MAX {
                continue;
            }
            dist[idx(next)] = dist[idx(cell)] + 1;
            queue.push_back(next);
        }
    }
    None
}

/// Random maze with a fixed start and a reachable goal. Walls are placed
/// with probability `density`; layouts with an unreachable goal are redrawn.
pub fn random_maze(seed: u64, width: u16, height: u16, density: f64) -> GridNavParams {
    let mut s = Rng::new(seed).split(0x3A2E).stream();
    loop {
        let cell = |s: &mut webrl_core::rng::RngStream| {
            (s.below(height as u64) as u16, s.below(width as u64) as u16)
        };
        let start = cell(&mut s);
        let goal = cell(&mut s);
        if start == goal {
            continue;
        }
        let mut p = GridNavParams::open(width, height, start, goal);
        for r in 0..height {
            for c in 0..width {
                if (r, c) != start && (r, c) != goal && s.bernoulli(density) {
                    p.walls.push((r, c));
                }
            }
        }
        if bfs_distance(&p, start).is_some() {
            p.max_steps = width as u32 * height as u32 * 2;
            return p;
        }
    }
}

pub fn as_params(p: GridNavParams) -> EnvParams {
    EnvParams::GridNav(p)
}
