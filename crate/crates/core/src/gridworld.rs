//! Walled grid world with one agent and one goal.
//!
//! Token mode flattens frames row-major into cell symbols followed by the
//! action taken from that frame. Pixel mode renders frames as RGB images and
//! runs episodes that end when the agent reaches the goal.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Wall,
    Floor,
    Agent,
    Goal,
}

impl Cell {
    pub fn token(self) -> usize {
        self as usize
    }

    pub fn from_token(t: usize) -> Option<Cell> {
        [Cell::Wall, Cell::Floor, Cell::Agent, Cell::Goal].get(t).copied()
    }

    pub fn symbol(self) -> char {
        ['W', 'F', 'A', 'G'][self as usize]
    }
}

pub const CELL_TOKENS: usize = 4;
pub const ACTIONS: usize = 4;
pub const VOCAB: usize = CELL_TOKENS + ACTIONS;
const ACTION_SYMBOLS: [char; ACTIONS] = ['n', 'e', 's', 'w'];

/// Compass moves: north, east, south, west.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    North,
    East,
    South,
    West,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::North, Action::East, Action::South, Action::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i % ACTIONS]
    }

    pub fn token(self) -> usize {
        CELL_TOKENS + self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (-1, 0),
            Action::East => (0, 1),
            Action::South => (1, 0),
            Action::West => (0, -1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridState {
    pub size: usize,
    pub agent: (usize, usize),
    pub goal: (usize, usize),
}

impl GridState {
    /// Agent and goal on distinct interior cells, uniformly.
    pub fn random(size: usize, rng: &mut impl Rng) -> Self {
        assert!(size >= 4, "grid needs at least two interior cells");
        let inner = size - 2;
        let cells = inner * inner;
        let a = rng.random_range(0..cells);
        let mut g = rng.random_range(0..cells - 1);
        if g >= a {
            g += 1;
        }
        let pos = |k: usize| (1 + k / inner, 1 + k % inner);
        GridState { size, agent: pos(a), goal: pos(g) }
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || r == self.size - 1 || c == self.size - 1
    }

    pub fn cell(&self, r: usize, c: usize) -> Cell {
        if self.is_wall(r, c) {
            Cell::Wall
        } else if (r, c) == self.agent {
            Cell::Agent
        } else if (r, c) == self.goal {
            Cell::Goal
        } else {
            Cell::Floor
        }
    }

    pub fn frame(&self) -> Vec<Cell> {
        (0..self.size * self.size).map(|k| self.cell(k / self.size, k % self.size)).collect()
    }

    /// Moves the agent unless blocked by a wall. Reaching the goal re-draws
    /// both positions; the return value reports whether that happened.
    pub fn step(&mut self, action: Action, rng: &mut impl Rng) -> bool {
        let (dr, dc) = action.delta();
        let (r, c) = ((self.agent.0 as isize + dr) as usize, (self.agent.1 as isize + dc) as usize);
        if !self.is_wall(r, c) {
            self.agent = (r, c);
        }
        if self.agent == self.goal {
            *self = GridState::random(self.size, rng);
            true
        } else {
            false
        }
    }
}

/// One frame with the action taken from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub cells: Vec<Cell>,
    pub action: Action,
}

/// Random-action trajectory of `frames` frames.
pub fn random_trajectory(size: usize, frames: usize, rng: &mut impl Rng) -> Vec<Frame> {
    let mut s = GridState::random(size, rng);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let action = Action::from_index(rng.random_range(0..ACTIONS));
        out.push(Frame { cells: s.frame(), action });
        s.step(action, rng);
    }
    out
}

pub fn tokenize(frames: &[Frame]) -> Vec<usize> {
    frames.iter().flat_map(|f| f.cells.iter().map(|c| c.token()).chain(std::iter::once(f.action.token()))).collect()
}

pub fn detokenize(tokens: &[usize], size: usize) -> Result<Vec<Frame>> {
    let lf = size * size + 1;
    if !tokens.len().is_multiple_of(lf) {
        return Err(Error::Length(format!("{} tokens is not a multiple of frame length {lf}", tokens.len())));
    }
    tokens
        .chunks(lf)
        .map(|ch| {
            let cells = ch[..lf - 1]
                .iter()
                .map(|&t| Cell::from_token(t).ok_or_else(|| Error::Length(format!("token {t} is not a cell"))))
                .collect::<Result<Vec<_>>>()?;
            let a = ch[lf - 1];
            if !(CELL_TOKENS..VOCAB).contains(&a) {
                return Err(Error::Length(format!("token {a} is not an action")));
            }
            Ok(Frame { cells, action: Action::from_index(a - CELL_TOKENS) })
        })
        .collect()
}

/// Line-per-frame text: cell symbols then the action symbol, space-separated.
pub fn dump(frames: &[Frame]) -> String {
    let mut s = String::new();
    for f in frames {
        for c in &f.cells {
            write!(s, "{} ", c.symbol()).unwrap();
        }
        writeln!(s, "{}", ACTION_SYMBOLS[f.action.index()]).unwrap();
    }
    s
}

pub fn parse_dump(text: &str) -> Result<Vec<Frame>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let (last, cells) = toks.split_last().ok_or_else(|| Error::Length("empty frame line".into()))?;
            let cells = cells
                .iter()
                .map(|t| match *t {
                    "W" => Ok(Cell::Wall),
                    "F" => Ok(Cell::Floor),
                    "A" => Ok(Cell::Agent),
                    "G" => Ok(Cell::Goal),
                    other => Err(Error::Length(format!("unknown cell symbol {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let a = ACTION_SYMBOLS
                .iter()
                .position(|s| last.len() == 1 && last.starts_with(*s))
                .ok_or_else(|| Error::Length(format!("unknown action symbol {last}")))?;
            Ok(Frame { cells, action: Action::from_index(a) })
        })
        .collect()
}

/// Structural violations of one frame: non-wall boundary cells, interior
/// walls, and the deviation from exactly one agent and one goal.
pub fn geometric_violations(cells: &[Cell], size: usize) -> usize {
    let mut bad = 0;
    let (mut agents, mut goals) = (0usize, 0usize);
    for (k, &c) in cells.iter().enumerate() {
        let (r, col) = (k / size, k % size);
        let boundary = r == 0 || col == 0 || r == size - 1 || col == size - 1;
        if boundary {
            bad += (c != Cell::Wall) as usize;
        } else {
            match c {
                Cell::Wall => bad += 1,
                Cell::Agent => agents += 1,
                Cell::Goal => goals += 1,
                Cell::Floor => {}
            }
        }
    }
    bad + agents.abs_diff(1) + goals.abs_diff(1)
}

fn agent_position(cells: &[Cell]) -> Option<usize> {
    let mut it = cells.iter().enumerate().filter(|(_, &c)| c == Cell::Agent);
    let first = it.next()?.0;
    it.next().is_none().then_some(first)
}

/// Error rates in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GridErrors {
    pub geometric: f64,
    pub logic: f64,
    pub frames: usize,
}

impl GridErrors {
    pub fn combined(&self) -> f64 {
        (self.geometric + self.logic) / 2.0
    }
}

/// `E_g` is violations per checked cell, `E_l` failed frames per frame; a
/// frame fails when its configuration is invalid or its agent position
/// differs from the truth.
pub fn grid_errors(pred: &[Vec<Cell>], truth: &[Vec<Cell>], size: usize) -> Result<GridErrors> {
    if pred.len() != truth.len() || pred.iter().chain(truth).any(|f| f.len() != size * size) {
        return Err(Error::Length(format!("{} predicted vs {} true frames of {} cells", pred.len(), truth.len(), size * size)));
    }
    if pred.is_empty() {
        return Ok(GridErrors::default());
    }
    let cells = (size * size) as f64;
    let (mut geo, mut logic) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let v = geometric_violations(p, size);
        geo += (v as f64 / cells).min(1.0);
        let valid = v == 0;
        if !valid || agent_position(p) != agent_position(t) {
            logic += 1;
        }
    }
    let n = pred.len() as f64;
    Ok(GridErrors { geometric: 100.0 * geo / n, logic: 100.0 * logic as f64 / n, frames: pred.len() })
}

pub const WALL_RGB: [u8; 3] = [0, 0, 0];
pub const FLOOR_RGB: [u8; 3] = [128, 128, 128];
pub const AGENT_RGB: [u8; 3] = [255, 0, 0];
pub const GOAL_RGB: [u8; 3] = [255, 255, 0];

fn rgb(c: Cell) -> [u8; 3] {
    match c {
        Cell::Wall => WALL_RGB,
        Cell::Floor => FLOOR_RGB,
        Cell::Agent => AGENT_RGB,
        Cell::Goal => GOAL_RGB,
    }
}

/// `size × size × 3` RGB frame.
pub fn render(state: &GridState) -> Vec<u8> {
    state.frame().into_iter().flat_map(rgb).collect()
}

/// Result of one pixel-environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Observation for the next decision (a fresh episode's first frame after an episode ends).
    pub obs: Vec<u8>,
    pub reward: f32,
    /// The goal was reached.
    pub done: bool,
    /// The time limit cut the episode.
    pub truncated: bool,
}

/// Episodic pixel grid world: +1 and termination on reaching the goal, a
/// time limit of `time_limit` steps otherwise.
#[derive(Clone, Debug)]
pub struct PixelGridEnv {
    pub state: GridState,
    pub time_limit: usize,
    pub t: usize,
}

impl PixelGridEnv {
    pub fn new(size: usize, time_limit: usize, rng: &mut impl Rng) -> Self {
        PixelGridEnv { state: GridState::random(size, rng), time_limit, t: 0 }
    }

    pub fn obs_dim(&self) -> usize {
        self.state.size * self.state.size * 3
    }

    pub fn observe(&self) -> Vec<u8> {
        render(&self.state)
    }

    pub fn step(&mut self, action: Action, rng: &mut impl Rng) -> StepResult {
        let reached = self.state.step(action, rng);
        self.t += 1;
        let truncated = !reached && self.t >= self.time_limit;
        if truncated {
            self.state = GridState::random(self.state.size, rng);
        }
        if reached || truncated {
            self.t = 0;
        }
        StepResult { obs: self.observe(), reward: if reached { 1.0 } else { 0.0 }, done: reached, truncated }
    }
}

/// Minimum number of moves from agent to goal.
pub fn shortest_path(state: &GridState) -> usize {
    state.agent.0.abs_diff(state.goal.0) + state.agent.1.abs_diff(state.goal.1)
}

/// Greedy move toward the goal (rows first).
pub fn oracle_action(state: &GridState) -> Action {
    let (a, g) = (state.agent, state.goal);
    if g.0 < a.0 {
        Action::North
    } else if g.0 > a.0 {
        Action::South
    } else if g.1 > a.1 {
        Action::East
    } else {
        Action::West
    }
}

/// Mean episodic return of a policy over `episodes` complete episodes.
pub fn mean_return(
    size: usize,
    time_limit: usize,
    episodes: usize,
    rng: &mut impl Rng,
    mut policy: impl FnMut(&PixelGridEnv, &mut dyn rand::RngCore) -> Action,
) -> f64 {
    let mut env = PixelGridEnv::new(size, time_limit, rng);
    let (mut total, mut done_eps) = (0.0, 0);
    let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(rng.random());
    while done_eps < episodes {
        let a = policy(&env, &mut rng2);
        let r = env.step(a, rng);
        total += r.reward as f64;
        if r.done || r.truncated {
            done_eps += 1;
        }
    }
    total / episodes as f64
}
