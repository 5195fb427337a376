//! Two-agent cooking gridworld with an embedded scripted partner.
//!
//! The participant controls one cook; the second cook is driven by a
//! deterministic policy evaluated inside `step`, so from the participant's
//! point of view the partner is just part of the environment dynamics.
//!
//! Onions are taken from dispensers and dropped into pots. A pot holding
//! `pot_capacity` onions cooks for `cook_time` steps, after which an
//! empty-handed cook can take the soup and deliver it at a serving window for
//! `soup_reward`. Episodes run for exactly `max_steps` steps.
//!
//! Each step evaluates, in order: the partner's action on the pre-step
//! world, pot timers, simultaneous movement, then interactions (participant
//! first).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{ActionId, Cell, EnvError, Environment, Observation, TileGrid};
use crate::codec::{CodecError, Decoder, Encoder};
use crate::rng::RngStream;

pub const ACTION_NAMES: [&str; 6] = ["up", "down", "left", "right", "stay", "interact"];

pub const UP: ActionId = ActionId(0);
pub const DOWN: ActionId = ActionId(1);
pub const LEFT: ActionId = ActionId(2);
pub const RIGHT: ActionId = ActionId(3);
pub const STAY: ActionId = ActionId(4);
pub const INTERACT: ActionId = ActionId(5);

pub const TILE_FLOOR: u8 = 0;
pub const TILE_COUNTER: u8 = 1;
pub const TILE_DISPENSER: u8 = 2;
pub const TILE_SERVING: u8 = 3;
pub const TILE_POT_EMPTY: u8 = 4;
pub const TILE_POT_FILLING: u8 = 5;
pub const TILE_POT_COOKING: u8 = 6;
pub const TILE_POT_READY: u8 = 7;
/// Participant tile is `TILE_HUMAN + held`.
pub const TILE_HUMAN: u8 = 10;
/// Partner tile is `TILE_PARTNER + held`.
pub const TILE_PARTNER: u8 = 13;

/// The only registered partner policy.
pub const COURIER_POLICY: &str = "courier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoCooksParams {
    /// Rows of equal length. `#` counter, ` ` floor, `O` onion dispenser,
    /// `P` pot, `S` serving window, `1` participant start, `2` partner start.
    pub layout: Vec<String>,
    #[serde(default = "default_policy")]
    pub partner_policy: String,
    #[serde(default = "default_capacity")]
    pub pot_capacity: u8,
    #[serde(default = "default_cook_time")]
    pub cook_time: u16,
    #[serde(default = "default_reward")]
    pub soup_reward: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
}

fn default_policy() -> String {
    COURIER_POLICY.to_string()
}
fn default_capacity() -> u8 {
    3
}
fn default_cook_time() -> u16 {
    5
}
fn default_reward() -> f64 {
    1.0
}
fn default_max_steps() -> u32 {
    200
}

impl Default for TwoCooksParams {
    fn default() -> Self {
        Self {
            layout: ["##O#P##", "#     #", "#1   2#", "#     #", "###S###"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            partner_policy: default_policy(),
            pot_capacity: default_capacity(),
            cook_time: default_cook_time(),
            soup_reward: default_reward(),
            max_steps: default_max_steps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Station {
    Floor,
    Counter,
    Dispenser,
    Pot,
    Serving,
}

/// Parsed layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub height: u16,
    pub width: u16,
    stations: Vec<Station>,
    pub pots: Vec<Cell>,
    pub human_start: Cell,
    pub partner_start: Cell,
}

impl Layout {
    pub fn parse(rows: &[String]) -> Result<Self, EnvError> {
        let height = rows.len();
        if height == 0 {
            return Err(EnvError::config("layout", "no rows"));
        }
        let width = rows[0].chars().count();
        if width == 0 {
            return Err(EnvError::config("layout", "empty rows"));
        }
        let mut stations = Vec::with_capacity(height * width);
        let mut pots = Vec::new();
        let (mut human, mut partner) = (Vec::new(), Vec::new());
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(EnvError::config(
                    "layout",
                    format!("row {r} has a different width"),
                ));
            }
            for (c, ch) in row.chars().enumerate() {
                let cell = (r as u16, c as u16);
                stations.push(match ch {
                    '#' => Station::Counter,
                    ' ' | '.' => Station::Floor,
                    'O' => Station::Dispenser,
                    'P' => {
                        pots.push(cell);
                        Station::Pot
                    }
                    'S' => Station::Serving,
                    '1' => {
                        human.push(cell);
                        Station::Floor
                    }
                    '2' => {
                        partner.push(cell);
                        Station::Floor
                    }
                    other => {
                        return Err(EnvError::config(
                            "layout",
                            format!("unknown tile {other:?} at ({r}, {c})"),
                        ))
                    }
                });
            }
        }
        let single = |v: Vec<Cell>, what: &str| -> Result<Cell, EnvError> {
            match v.as_slice() {
                [one] => Ok(*one),
                _ => Err(EnvError::config(
                    "layout",
                    format!("need exactly one {what} start"),
                )),
            }
        };
        let layout = Layout {
            height: height as u16,
            width: width as u16,
            stations,
            pots,
            human_start: single(human, "participant ('1')")?,
            partner_start: single(partner, "partner ('2')")?,
        };
        for (station, name) in [
            (Station::Dispenser, "dispenser ('O')"),
            (Station::Pot, "pot ('P')"),
            (Station::Serving, "serving window ('S')"),
        ] {
            if !layout.stations.contains(&station) {
                return Err(EnvError::config("layout", format!("no {name}")));
            }
        }
        Ok(layout)
    }

    pub fn station(&self, (r, c): Cell) -> Station {
        self.stations[r as usize * self.width as usize + c as usize]
    }

    pub fn walkable(&self, cell: Cell) -> bool {
        self.station(cell) == Station::Floor
    }

    pub fn cells_of(&self, station: Station) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&cell| self.station(cell) == station)
            .collect()
    }

    /// Neighbour in direction `dir` (0 up, 1 down, 2 left, 3 right), if on the grid.
    pub fn neighbor(&self, (r, c): Cell, dir: u8) -> Option<Cell> {
        match dir {
            0 if r > 0 => Some((r - 1, c)),
            1 if r + 1 < self.height => Some((r + 1, c)),
            2 if c > 0 => Some((r, c - 1)),
            3 if c + 1 < self.width => Some((r, c + 1)),
            _ => None,
        }
    }

    fn pot_index(&self, cell: Cell) -> Option<usize> {
        self.pots.iter().position(|&p| p == cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Held {
    Nothing = 0,
    Onion = 1,
    Soup = 2,
}

impl Held {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Held::Nothing),
            1 => Some(Held::Onion),
            2 => Some(Held::Soup),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Held::Nothing => "nothing",
            Held::Onion => "onion",
            Held::Soup => "soup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cook {
    pub pos: Cell,
    /// 0 up, 1 down, 2 left, 3 right.
    pub facing: u8,
    pub held: Held,
}

impl Cook {
    fn encode(&self, w: &mut Encoder) {
        w.u16(self.pos.0)
            .u16(self.pos.1)
            .u8(self.facing)
            .u8(self.held as u8);
    }

    fn decode(r: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let pos = (r.u16()?, r.u16()?);
        let at = r.offset();
        let facing = r.u8()?;
        if facing > 3 {
            return Err(CodecError::new(at, format!("invalid facing {facing}")));
        }
        let at = r.offset();
        let held = r.u8()?;
        let held = Held::from_u8(held)
            .ok_or_else(|| CodecError::new(at, format!("invalid held item {held}")))?;
        Ok(Self { pos, facing, held })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Pot {
    pub onions: u8,
    /// Steps of cooking left once full.
    pub timer: u16,
    pub ready: bool,
}

impl Pot {
    fn accepting(&self, capacity: u8) -> bool {
        !self.ready && self.onions < capacity
    }

    fn cooking(&self, capacity: u8) -> bool {
        !self.ready && self.onions >= capacity
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Kitchen {
    pub human: Cook,
    pub partner: Cook,
    /// Same order as [`Layout::pots`].
    pub pots: Vec<Pot>,
    pub delivered: u32,
}

impl Kitchen {
    pub(crate) fn encode(&self, w: &mut Encoder) {
        self.human.encode(w);
        self.partner.encode(w);
        w.u32(self.pots.len() as u32);
        for pot in &self.pots {
            w.u8(pot.onions).u16(pot.timer).bool(pot.ready);
        }
        w.u32(self.delivered);
    }

    pub(crate) fn decode(r: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let human = Cook::decode(r)?;
        let partner = Cook::decode(r)?;
        let n = r.u32()? as usize;
        if n > r.remaining() / 4 {
            return Err(r.error(format!("pot count {n} exceeds input")));
        }
        let mut pots = Vec::with_capacity(n);
        for _ in 0..n {
            pots.push(Pot {
                onions: r.u8()?,
                timer: r.u16()?,
                ready: r.bool()?,
            });
        }
        let delivered = r.u32()?;
        Ok(Self {
            human,
            partner,
            pots,
            delivered,
        })
    }
}

fn layout_of(p: &TwoCooksParams) -> Layout {
    Layout::parse(&p.layout).expect("params validated before use")
}

/// Applies a move action: the cook turns to face `dir` and steps forward if the
/// cell is walkable. Returns the intended cell.
fn intended(layout: &Layout, cook: &mut Cook, action: ActionId) -> Cell {
    if action.0 > 3 {
        return cook.pos;
    }
    cook.facing = action.0;
    match layout.neighbor(cook.pos, action.0) {
        Some(cell) if layout.walkable(cell) => cell,
        _ => cook.pos,
    }
}

/// Simultaneous movement: a cook may not enter a cell the other ends up in,
/// and the two may not swap.
fn resolve_moves(h_from: Cell, mut h_to: Cell, p_from: Cell, mut p_to: Cell) -> (Cell, Cell) {
    loop {
        if h_to == p_from && p_to == h_from && h_to != h_from {
            return (h_from, p_from);
        }
        if h_to != p_to {
            return (h_to, p_to);
        }
        let h_moved = h_to != h_from;
        let p_moved = p_to != p_from;
        if h_moved {
            h_to = h_from;
        }
        if p_moved {
            p_to = p_from;
        }
    }
}

/// Returns the reward earned.
fn interact(layout: &Layout, cook: &mut Cook, pots: &mut [Pot], p: &TwoCooksParams) -> f64 {
    let Some(front) = layout.neighbor(cook.pos, cook.facing) else {
        return 0.0;
    };
    match (layout.station(front), cook.held) {
        (Station::Dispenser, Held::Nothing) => cook.held = Held::Onion,
        (Station::Pot, held) => {
            let pot = &mut pots[layout.pot_index(front).unwrap()];
            if held == Held::Onion && pot.accepting(p.pot_capacity) {
                pot.onions += 1;
                cook.held = Held::Nothing;
                if pot.onions >= p.pot_capacity {
                    pot.timer = p.cook_time;
                    pot.ready = p.cook_time == 0;
                }
            } else if held == Held::Nothing && pot.ready {
                *pot = Pot::default();
                cook.held = Held::Soup;
            }
        }
        (Station::Serving, Held::Soup) => {
            cook.held = Held::Nothing;
            return p.soup_reward;
        }
        _ => {}
    }
    0.0
}

/// Stations the courier script is heading for, or `None` to wait in place.
fn courier_targets(world: &Kitchen, layout: &Layout, p: &TwoCooksParams) -> Option<Vec<Cell>> {
    let pots_where = |pred: &dyn Fn(&Pot) -> bool| -> Vec<Cell> {
        layout
            .pots
            .iter()
            .zip(&world.pots)
            .filter(|(_, pot)| pred(pot))
            .map(|(cell, _)| *cell)
            .collect()
    };
    let targets = match world.partner.held {
        Held::Soup => layout.cells_of(Station::Serving),
        Held::Onion => pots_where(&|pot| pot.accepting(p.pot_capacity)),
        Held::Nothing => {
            let ready = pots_where(&|pot| pot.ready);
            if !ready.is_empty() {
                ready
            } else if !pots_where(&|pot| pot.accepting(p.pot_capacity)).is_empty() {
                layout.cells_of(Station::Dispenser)
            } else {
                Vec::new()
            }
        }
    };
    (!targets.is_empty()).then_some(targets)
}

/// The scripted partner ("courier"): fetch onions until pots are full, carry
/// ready soup to the serving window. Navigation is breadth-first over floor
/// cells, neighbours tried up, down, left, right; the participant's cell is
/// ignored when planning and the partner waits if it is about to walk into it.
pub fn partner_action(world: &Kitchen, p: &TwoCooksParams) -> ActionId {
    let layout = layout_of(p);
    let me = world.partner;
    let Some(targets) = courier_targets(world, &layout, p) else {
        return STAY;
    };
    if let Some(front) = layout.neighbor(me.pos, me.facing) {
        if targets.contains(&front) {
            return INTERACT;
        }
    }
    // Already adjacent but facing elsewhere: turn toward the target.
    for dir in 0..4u8 {
        if let Some(cell) = layout.neighbor(me.pos, dir) {
            if targets.contains(&cell) {
                return ActionId(dir);
            }
        }
    }
    let is_goal = |cell: Cell| {
        (0..4u8).any(|d| {
            layout
                .neighbor(cell, d)
                .is_some_and(|n| targets.contains(&n))
        })
    };
    let w = layout.width as usize;
    let idx = |(r, c): Cell| r as usize * w + c as usize;
    let mut first_step: Vec<Option<u8>> = vec![None; layout.height as usize * w];
    let mut seen = vec![false; layout.height as usize * w];
    let mut queue = VecDeque::new();
    seen[idx(me.pos)] = true;
    queue.push_back(me.pos);
    while let Some(cell) = queue.pop_front() {
        for dir in 0..4u8 {
            let Some(next) = layout.neighbor(cell, dir) else {
                continue;
            };
            if seen[idx(next)] || !layout.walkable(next) {
                continue;
            }
            seen[idx(next)] = true;
            let first = if cell == me.pos {
                dir
            } else {
                first_step[idx(cell)].unwrap()
            };
            first_step[idx(next)] = Some(first);
            if is_goal(next) {
                let step_into = layout.neighbor(me.pos, first).unwrap();
                return if step_into == world.human.pos {
                    STAY
                } else {
                    ActionId(first)
                };
            }
            queue.push_back(next);
        }
    }
    STAY
}

pub struct TwoCooks;

impl Environment for TwoCooks {
    const KIND: &'static str = "twocooks";
    type Params = TwoCooksParams;
    type World = Kitchen;

    fn action_count(_: &TwoCooksParams) -> usize {
        ACTION_NAMES.len()
    }

    fn validate(p: &TwoCooksParams) -> Result<(), EnvError> {
        Layout::parse(&p.layout)?;
        if p.partner_policy != COURIER_POLICY {
            return Err(EnvError::config(
                "partner_policy",
                format!("unknown policy `{}`", p.partner_policy),
            ));
        }
        if p.pot_capacity == 0 {
            return Err(EnvError::config("pot_capacity", "must be positive"));
        }
        if !p.soup_reward.is_finite() {
            return Err(EnvError::config("soup_reward", "must be finite"));
        }
        if p.max_steps == 0 {
            return Err(EnvError::config("max_steps", "must be positive"));
        }
        Ok(())
    }

    fn initial(p: &TwoCooksParams, _rng: &mut RngStream) -> Kitchen {
        let layout = layout_of(p);
        Kitchen {
            human: Cook {
                pos: layout.human_start,
                facing: 0,
                held: Held::Nothing,
            },
            partner: Cook {
                pos: layout.partner_start,
                facing: 0,
                held: Held::Nothing,
            },
            pots: vec![Pot::default(); layout.pots.len()],
            delivered: 0,
        }
    }

    fn transition(
        world: &Kitchen,
        action: ActionId,
        p: &TwoCooksParams,
        _rng: &mut RngStream,
    ) -> (Kitchen, f64, bool) {
        let layout = layout_of(p);
        let partner_act = partner_action(world, p);
        let mut next = world.clone();

        for pot in next.pots.iter_mut() {
            if pot.cooking(p.pot_capacity) {
                pot.timer = pot.timer.saturating_sub(1);
                if pot.timer == 0 {
                    pot.ready = true;
                }
            }
        }

        let h_to = intended(&layout, &mut next.human, action);
        let p_to = intended(&layout, &mut next.partner, partner_act);
        let (h, pt) = resolve_moves(world.human.pos, h_to, world.partner.pos, p_to);
        next.human.pos = h;
        next.partner.pos = pt;

        let mut reward = 0.0;
        if action == INTERACT {
            reward += interact(&layout, &mut next.human, &mut next.pots, p);
        }
        if partner_act == INTERACT {
            reward += interact(&layout, &mut next.partner, &mut next.pots, p);
        }
        if reward != 0.0 {
            next.delivered += (reward / p.soup_reward).round() as u32;
        }
        (next, reward, false)
    }

    fn observe(world: &Kitchen, p: &TwoCooksParams) -> Observation {
        let layout = layout_of(p);
        let mut grid = TileGrid::filled(layout.height, layout.width, TILE_FLOOR);
        for r in 0..layout.height {
            for c in 0..layout.width {
                let tile = match layout.station((r, c)) {
                    Station::Floor => TILE_FLOOR,
                    Station::Counter => TILE_COUNTER,
                    Station::Dispenser => TILE_DISPENSER,
                    Station::Serving => TILE_SERVING,
                    Station::Pot => {
                        let pot = world.pots[layout.pot_index((r, c)).unwrap()];
                        if pot.ready {
                            TILE_POT_READY
                        } else if pot.cooking(p.pot_capacity) {
                            TILE_POT_COOKING
                        } else if pot.onions > 0 {
                            TILE_POT_FILLING
                        } else {
                            TILE_POT_EMPTY
                        }
                    }
                };
                grid.set((r, c), tile);
            }
        }
        grid.set(world.human.pos, TILE_HUMAN + world.human.held as u8);
        grid.set(world.partner.pos, TILE_PARTNER + world.partner.held as u8);

        let facing_station = layout
            .neighbor(world.human.pos, world.human.facing)
            .map(|cell| layout.station(cell));
        let can_interact = matches!(
            facing_station,
            Some(Station::Dispenser | Station::Pot | Station::Serving)
        );
        let mut legal = vec![true; ACTION_NAMES.len()];
        legal[INTERACT.index()] = can_interact;
        Observation {
            grid,
            text: Some(format!(
                "Delivered: {} | Holding: {}",
                world.delivered,
                world.human.held.name()
            )),
            legal,
        }
    }

    fn step_limit(p: &TwoCooksParams) -> u32 {
        p.max_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvParams, EnvState, World};
    use crate::rng::Rng;

    fn start() -> (TwoCooksParams, Kitchen) {
        let p = TwoCooksParams::default();
        let k = TwoCooks::initial(&p, &mut RngStream::from_seed(0));
        (p, k)
    }

    #[test]
    fn partner_interacts_at_serving_window() {
        let (p, mut k) = start();
        // Serving window at (4, 3); stand above it facing down holding soup.
        k.partner = Cook {
            pos: (3, 3),
            facing: 1,
            held: Held::Soup,
        };
        assert_eq!(partner_action(&k, &p), INTERACT);
    }

    #[test]
    fn partner_turns_when_adjacent_but_facing_away() {
        let (p, mut k) = start();
        k.partner = Cook {
            pos: (3, 3),
            facing: 0,
            held: Held::Soup,
        };
        assert_eq!(partner_action(&k, &p), DOWN);
    }

    #[test]
    fn partner_waits_when_all_pots_cooking() {
        let (p, mut k) = start();
        k.pots[0] = Pot {
            onions: 3,
            timer: 4,
            ready: false,
        };
        assert_eq!(partner_action(&k, &p), STAY);
    }

    #[test]
    fn partner_policy_is_deterministic() {
        let (p, k) = start();
        assert_eq!(partner_action(&k, &p), partner_action(&k, &p));
    }

    #[test]
    fn cooks_cannot_swap_or_share_cells() {
        assert_eq!(
            resolve_moves((1, 1), (1, 2), (1, 2), (1, 1)),
            ((1, 1), (1, 2))
        );
        assert_eq!(
            resolve_moves((1, 1), (1, 2), (1, 3), (1, 2)),
            ((1, 1), (1, 3))
        );
        // Following into a vacated cell is fine.
        assert_eq!(
            resolve_moves((1, 1), (1, 2), (1, 2), (1, 3)),
            ((1, 2), (1, 3))
        );
        // Blocked by a stationary cook.
        assert_eq!(
            resolve_moves((1, 1), (1, 2), (1, 2), (1, 2)),
            ((1, 1), (1, 2))
        );
    }

    #[test]
    fn pot_fill_cook_and_serve() {
        let p = TwoCooksParams {
            pot_capacity: 1,
            cook_time: 1,
            ..TwoCooksParams::default()
        };
        let layout = Layout::parse(&p.layout).unwrap();
        let mut pots = vec![Pot::default()];
        let mut cook = Cook {
            pos: (1, 4),
            facing: 0,
            held: Held::Onion,
        };
        interact(&layout, &mut cook, &mut pots, &p);
        assert_eq!(cook.held, Held::Nothing);
        assert!(pots[0].cooking(1));
        pots[0].timer = 0;
        pots[0].ready = true;
        interact(&layout, &mut cook, &mut pots, &p);
        assert_eq!(cook.held, Held::Soup);
        assert_eq!(pots[0], Pot::default());
        cook.pos = (3, 3);
        cook.facing = 1;
        assert_eq!(interact(&layout, &mut cook, &mut pots, &p), 1.0);
    }

    #[test]
    fn interact_mask_follows_facing() {
        let (p, mut k) = start();
        let obs = TwoCooks::observe(&k, &p);
        // Participant at (2, 1) facing up toward floor.
        assert!(!obs.legal[INTERACT.index()]);
        k.human.pos = (1, 2);
        let obs = TwoCooks::observe(&k, &p);
        assert!(obs.legal[INTERACT.index()]);
    }

    #[test]
    fn layout_errors_name_the_field() {
        let p = TwoCooksParams {
            layout: vec!["#1 2#".into(), "#####".into()],
            ..TwoCooksParams::default()
        };
        match TwoCooks::validate(&p) {
            Err(EnvError::Config { field, reason }) => {
                assert_eq!(field, "layout");
                assert!(reason.contains("dispenser"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn episode_runs_to_step_limit() {
        let p = TwoCooksParams {
            max_steps: 3,
            ..TwoCooksParams::default()
        };
        let params = EnvParams::TwoCooks(p);
        let (mut s, _) = env::reset(&params, &Rng::new(0)).unwrap();
        for i in 0..3 {
            let r = env::step(&s, STAY, &params, &env::step_rng(&s)).unwrap();
            assert_eq!(r.done, i == 2);
            s = r.state;
        }
        assert!(matches!(
            s,
            EnvState {
                world: World::TwoCooks(_),
                done: true,
                ..
            }
        ));
    }
}
