//! Point-mass mazes on the unit square.
//!
//! State is `(x, y, vx, vy)`, the action an acceleration clipped to
//! `[−1, 1]²`. Each step applies drag, integrates with `dt`, then resolves
//! collisions one axis at a time, zeroing the velocity component normal to
//! whatever was hit.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Result, RlError};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const GOAL_DIM: usize = 2;

/// Gap left between a resolved position and the face it collided with.
const CONTACT_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MazeId {
    Open,
    UMaze,
    BigMaze,
    TwoRooms,
}

impl MazeId {
    pub const ALL: [MazeId; 4] = [MazeId::Open, MazeId::UMaze, MazeId::BigMaze, MazeId::TwoRooms];

    pub fn name(self) -> &'static str {
        match self {
            MazeId::Open => "open",
            MazeId::UMaze => "u_maze",
            MazeId::BigMaze => "big_maze",
            MazeId::TwoRooms => "two_rooms",
        }
    }
}

impl fmt::Display for MazeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MazeId {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self> {
        MazeId::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| RlError::Config(format!("unknown maze '{s}' (expected open, u_maze, big_maze or two_rooms)")))
    }
}

/// Axis-aligned solid box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Grid cell, `col` from the left and `row` from the top.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Maze {
    pub id: MazeId,
    pub cols: usize,
    pub rows: usize,
    blocked: Vec<bool>,
    walls: Vec<Rect>,
    pub start: Cell,
    pub goal: Cell,
    /// Cells that define each route family; empty when the maze has one.
    pub route_vias: Vec<Vec<Cell>>,
}

const OPEN: [&str; 5] = [".....", ".....", ".....", ".....", "....."];
const U_MAZE: [&str; 5] = [".....", ".....", "####.", ".....", "....."];
const TWO_ROOMS: [&str; 5] = [".....", ".....", ".###.", ".....", "....."];
const BIG_MAZE: [&str; 8] = [
    "........",
    ".##.###.",
    ".#...#..",
    ".#.#.#.#",
    "...#....",
    ".###.##.",
    ".#......",
    ".#.####.",
];

impl Maze {
    pub fn new(id: MazeId) -> Self {
        let (layout, start, goal, route_vias): (&[&str], Cell, Cell, Vec<Vec<Cell>>) = match id {
            MazeId::Open => (&OPEN, (0, 4), (4, 0), vec![]),
            MazeId::UMaze => (&U_MAZE, (0, 4), (0, 0), vec![]),
            MazeId::TwoRooms => (&TWO_ROOMS, (2, 4), (2, 0), vec![vec![(0, 2), (0, 0)], vec![(4, 2), (4, 0)]]),
            MazeId::BigMaze => (&BIG_MAZE, (0, 7), (7, 0), vec![]),
        };
        Self::from_layout(id, layout, start, goal, route_vias)
    }

    fn from_layout(id: MazeId, layout: &[&str], start: Cell, goal: Cell, route_vias: Vec<Vec<Cell>>) -> Self {
        let rows = layout.len();
        let cols = layout[0].len();
        let blocked: Vec<bool> = layout.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        let (w, h) = (1.0 / cols as f64, 1.0 / rows as f64);
        let mut walls = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if blocked[r * cols + c] {
                    walls.push(Rect { x0: c as f64 * w, x1: (c + 1) as f64 * w, y0: 1.0 - (r + 1) as f64 * h, y1: 1.0 - r as f64 * h });
                }
            }
        }
        Self { id, cols, rows, blocked, walls, start, goal, route_vias }
    }

    pub fn walls(&self) -> &[Rect] {
        &self.walls
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (1.0 / self.cols as f64, 1.0 / self.rows as f64)
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked[cell.1 * self.cols + cell.0]
    }

    pub fn cell_center(&self, cell: Cell) -> [f64; 2] {
        let (w, h) = self.cell_size();
        [(cell.0 as f64 + 0.5) * w, 1.0 - (cell.1 as f64 + 0.5) * h]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Cell {
        let c = ((x * self.cols as f64) as usize).min(self.cols - 1);
        let r = (((1.0 - y) * self.rows as f64) as usize).min(self.rows - 1);
        (c, r)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.rows).flat_map(|r| (0..self.cols).map(move |c| (c, r))).filter(|&c| !self.is_blocked(c)).collect()
    }

    /// True when `(x, y)` lies in the unit square and outside every wall.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) && !self.walls.iter().any(|w| w.contains(x, y))
    }

    /// Shortest 4-connected path of free cells from `from` to `to`, both included.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        if self.is_blocked(from) || self.is_blocked(to) {
            return None;
        }
        let idx = |c: Cell| c.1 * self.cols + c.0;
        let mut prev: Vec<Option<Cell>> = vec![None; self.cols * self.rows];
        let mut seen = vec![false; self.cols * self.rows];
        let mut queue = VecDeque::from([from]);
        seen[idx(from)] = true;
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                let mut path = vec![to];
                let mut c = to;
                while let Some(p) = prev[idx(c)] {
                    path.push(p);
                    c = p;
                }
                path.reverse();
                return Some(path);
            }
            let (c, r) = (cur.0 as isize, cur.1 as isize);
            for (dc, dr) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nc, nr) = (c + dc, r + dr);
                if nc < 0 || nr < 0 || nc >= self.cols as isize || nr >= self.rows as isize {
                    continue;
                }
                let n = (nc as usize, nr as usize);
                if !self.is_blocked(n) && !seen[idx(n)] {
                    seen[idx(n)] = true;
                    prev[idx(n)] = Some(cur);
                    queue.push_back(n);
                }
            }
        }
        None
    }

    pub fn num_modes(&self) -> usize {
        self.route_vias.len().max(1)
    }

    /// Route family of a trajectory: the family whose first via cell was entered first.
    pub fn classify_route(&self, positions: impl IntoIterator<Item = [f64; 2]>) -> Option<usize> {
        if self.route_vias.is_empty() {
            return Some(0);
        }
        positions.into_iter().find_map(|p| {
            let here = self.cell_of(p[0], p[1]);
            self.route_vias.iter().position(|vias| vias.first() == Some(&here))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// `−‖pos − goal‖` every step.
    NegDistance,
    /// Reward-free collection.
    Zero,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::NegDistance => "neg_distance",
            RewardKind::Zero => "zero",
        }
    }
}

impl FromStr for RewardKind {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_distance" | "neg-distance" => Ok(RewardKind::NegDistance),
            "zero" | "none" => Ok(RewardKind::Zero),
            other => Err(RlError::Config(format!("unknown reward kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub dt: f64,
    pub drag: f64,
    pub horizon: usize,
    pub goal_radius: f64,
    /// Half-width of the uniform box around the start-cell center that resets draw from.
    pub start_jitter: f64,
    pub reward: RewardKind,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { dt: 0.05, drag: 0.1, horizon: 200, goal_radius: 0.05, start_jitter: 0.03, reward: RewardKind::NegDistance }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: [f64; STATE_DIM],
    pub reward: f64,
    pub done: bool,
    /// Reached the goal (as opposed to timing out).
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct PointMassEnv {
    maze: Maze,
    config: EnvConfig,
    state: [f64; STATE_DIM],
    goal: [f64; GOAL_DIM],
    t: usize,
    done: bool,
}

impl PointMassEnv {
    pub fn new(id: MazeId, config: EnvConfig) -> Self {
        let maze = Maze::new(id);
        let s = maze.cell_center(maze.start);
        let goal = maze.cell_center(maze.goal);
        Self { maze, config, state: [s[0], s[1], 0.0, 0.0], goal, t: 0, done: false }
    }

    pub fn maze(&self) -> &Maze {
        &self.maze
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> [f64; STATE_DIM] {
        self.state
    }

    pub fn goal(&self) -> [f64; GOAL_DIM] {
        self.goal
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Resets to rest at a jittered start position; the goal is the task goal.
    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> [f64; STATE_DIM] {
        let c = self.maze.cell_center(self.maze.start);
        let j = self.config.start_jitter;
        let (x, y) = if j > 0.0 { (c[0] + rng.random_range(-j..=j), c[1] + rng.random_range(-j..=j)) } else { (c[0], c[1]) };
        let goal = self.maze.cell_center(self.maze.goal);
        self.reset_to([x, y, 0.0, 0.0], goal)
    }

    pub fn reset_to(&mut self, state: [f64; STATE_DIM], goal: [f64; GOAL_DIM]) -> [f64; STATE_DIM] {
        self.state = state;
        self.goal = goal;
        self.t = 0;
        self.done = false;
        state
    }

    pub fn set_goal(&mut self, goal: [f64; GOAL_DIM]) {
        self.goal = goal;
    }

    pub fn distance_to_goal(&self) -> f64 {
        ((self.state[0] - self.goal[0]).powi(2) + (self.state[1] - self.goal[1]).powi(2)).sqrt()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(RlError::State("step called on a finished episode; reset first".into()));
        }
        if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
            return Err(RlError::Config(format!("action must be {ACTION_DIM} finite values, got {action:?}")));
        }
        self.state = transition(&self.maze, &self.config, self.state, action);
        self.t += 1;
        let dist = self.distance_to_goal();
        let success = dist <= self.config.goal_radius;
        self.done = success || self.t >= self.config.horizon;
        let reward = match self.config.reward {
            RewardKind::NegDistance => -dist,
            RewardKind::Zero => 0.0,
        };
        Ok(StepOutcome { state: self.state, reward, done: self.done, success })
    }
}

/// One deterministic step of the dynamics, usable without an env instance.
pub fn transition(maze: &Maze, config: &EnvConfig, s: [f64; STATE_DIM], action: &[f64]) -> [f64; STATE_DIM] {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let mut v = [
        ((1.0 - config.drag) * s[2] + config.dt * a[0]).clamp(-1.0, 1.0),
        ((1.0 - config.drag) * s[3] + config.dt * a[1]).clamp(-1.0, 1.0),
    ];
    let mut p = [s[0], s[1]];
    for axis in 0..2 {
        let mut next = p;
        next[axis] += config.dt * v[axis];
        if next[axis] < 0.0 {
            next[axis] = 0.0;
            v[axis] = 0.0;
        } else if next[axis] > 1.0 {
            next[axis] = 1.0;
            v[axis] = 0.0;
        }
        for w in maze.walls() {
            if w.contains(next[0], next[1]) {
                let (lo, hi) = if axis == 0 { (w.x0, w.x1) } else { (w.y0, w.y1) };
                next[axis] = if p[axis] <= lo { lo - CONTACT_GAP } else { hi + CONTACT_GAP };
                v[axis] = 0.0;
            }
        }
        p = next;
    }
    [p[0], p[1], v[0], v[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maze_names_round_trip() {
        for m in MazeId::ALL {
            assert_eq!(m.name().parse::<MazeId>().unwrap(), m);
        }
        assert!("nowhere".parse::<MazeId>().is_err());
    }

    #[test]
    fn every_maze_is_connected() {
        for id in MazeId::ALL {
            let m = Maze::new(id);
            for c in m.free_cells() {
                assert!(m.shortest_path(m.start, c).is_some(), "{id}: {c:?} unreachable");
            }
        }
    }

    #[test]
    fn two_rooms_routes_are_distinguished() {
        let m = Maze::new(MazeId::TwoRooms);
        let left = [[0.5, 0.1], [0.1, 0.5], [0.5, 0.9]];
        let right = [[0.5, 0.1], [0.9, 0.5], [0.5, 0.9]];
        assert_eq!(m.classify_route(left), Some(0));
        assert_eq!(m.classify_route(right), Some(1));
        assert_eq!(m.classify_route([[0.5, 0.1]]), None);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut env = PointMassEnv::new(MazeId::Open, EnvConfig { horizon: 1, ..EnvConfig::default() });
        env.reset(&mut rand::rng());
        assert!(env.step(&[0.0, 0.0]).unwrap().done);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(RlError::State(_))));
    }
}
