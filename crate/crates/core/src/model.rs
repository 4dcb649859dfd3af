//! Domain types shared by the environment, agents, and harness.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer grid coordinate. `x` grows to the right, `y` grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Cell) -> i64 {
        let dx = (self.x - other.x) as i64;
        let dy = (self.y - other.y) as i64;
        dx * dx + dy * dy
    }

    pub fn dist(self, other: Cell) -> f64 {
        (self.dist2(other) as f64).sqrt()
    }

    /// `true` when the squared distance is strictly below `radius²`.
    pub fn within(self, other: Cell, radius: f64) -> bool {
        (self.dist2(other) as f64) < radius * radius
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Binary occupancy grid, row-major, `1` marks a wall.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Maze {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
}

impl Maze {
    pub fn open(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![0; width * height],
        }
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.cells[self.index(c)] == 1
    }

    pub fn set_wall(&mut self, c: Cell, wall: bool) {
        let i = self.index(c);
        self.cells[i] = wall as u8;
    }

    /// In-bounds and not a wall.
    pub fn is_open(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.is_wall(c)
    }

    pub fn wall_count(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }
}

/// Agent position, maze layout, and final goal: the shared observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalState {
    pub position: Cell,
    pub maze: Arc<Maze>,
    pub final_goal: Cell,
}

impl GoalState {
    pub fn new(position: Cell, maze: Arc<Maze>, final_goal: Cell) -> Result<Self> {
        if maze.cells.len() != maze.width * maze.height || maze.cells.iter().any(|&v| v > 1) {
            return Err(Error::Layout("maze encoding must be W*H binary cells".into()));
        }
        for (what, c) in [("position", position), ("final goal", final_goal)] {
            if !maze.is_open(c) {
                return Err(Error::Layout(format!("{what} {c} is not an open cell")));
            }
        }
        Ok(Self {
            position,
            maze,
            final_goal,
        })
    }

    pub fn with_position(&self, position: Cell) -> Self {
        Self {
            position,
            maze: Arc::clone(&self.maze),
            final_goal: self.final_goal,
        }
    }
}

/// Higher-level action: any in-bounds cell, walls included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subgoal {
    pub cell: Cell,
}

impl Subgoal {
    pub fn new(cell: Cell) -> Self {
        Self { cell }
    }
}

/// Primitive actions of the point agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }

    pub fn apply(self, c: Cell) -> Cell {
        let (dx, dy) = self.delta();
        Cell::new(c.x + dx, c.y + dy)
    }
}

/// One primitive step in the lower-level replay buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowTransition {
    pub state: GoalState,
    pub subgoal: Subgoal,
    pub action: Action,
    pub reward: f64,
    pub next_state: GoalState,
    pub done: bool,
}

/// One subgoal window in the higher-level replay buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighTransition {
    pub state: GoalState,
    pub subgoal: Subgoal,
    pub env_reward: f64,
    pub next_state: GoalState,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighStep {
    pub state: GoalState,
    pub subgoal: Subgoal,
}

/// A sequence of subgoal emissions plus the state the episode ended in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighTrajectory {
    pub steps: Vec<HighStep>,
    pub end_state: GoalState,
}

impl HighTrajectory {
    pub fn final_goal(&self) -> Cell {
        self.end_state.final_goal
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Positions visited at every emission and at the end of the episode.
    pub fn positions(&self) -> impl Iterator<Item = Cell> + '_ {
        self.steps
            .iter()
            .map(|s| s.state.position)
            .chain(std::iter::once(self.end_state.position))
    }
}

/// Preference between two trajectories: `y = (1,0)`, `(0,1)` or `(0.5,0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreferenceLabel {
    First,
    Second,
    Tie,
}

impl PreferenceLabel {
    pub fn probs(self) -> (f64, f64) {
        match self {
            PreferenceLabel::First => (1.0, 0.0),
            PreferenceLabel::Second => (0.0, 1.0),
            PreferenceLabel::Tie => (0.5, 0.5),
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            PreferenceLabel::First => PreferenceLabel::Second,
            PreferenceLabel::Second => PreferenceLabel::First,
            PreferenceLabel::Tie => PreferenceLabel::Tie,
        }
    }
}

/// Two trajectories toward the same final goal plus a preference label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub tau1: HighTrajectory,
    pub tau2: HighTrajectory,
    pub label: PreferenceLabel,
}

impl TrajectoryPair {
    pub fn new(tau1: HighTrajectory, tau2: HighTrajectory, label: PreferenceLabel) -> Result<Self> {
        if tau1.final_goal() != tau2.final_goal() {
            return Err(Error::Layout("trajectories of a pair must share the final goal".into()));
        }
        Ok(Self { tau1, tau2, label })
    }

    pub fn swapped(&self) -> Self {
        Self {
            tau1: self.tau2.clone(),
            tau2: self.tau1.clone(),
            label: self.label.reversed(),
        }
    }
}

/// Primitive-action trajectory of a flat (non-hierarchical) agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatTrajectory {
    pub steps: Vec<(GoalState, Action)>,
    pub end_state: GoalState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatPair {
    pub tau1: FlatTrajectory,
    pub tau2: FlatTrajectory,
    pub label: PreferenceLabel,
}
