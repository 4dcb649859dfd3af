//! Four-room gridworld mazes with sparse goal rewards.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Action, Cell, GoalState, Maze};

const MAX_ATTEMPTS: usize = 100;

/// Parameters of a four-room maze: one vertical and one horizontal wall,
/// each split by the crossing into two segments with one gate apiece.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    /// Column of the vertical wall (W_P).
    pub wall_col: i32,
    /// Row of the horizontal wall (H_P).
    pub wall_row: i32,
    /// Gates: vertical-upper, vertical-lower, horizontal-left, horizontal-right.
    pub gates: [Cell; 4],
    pub start: Cell,
    pub goal: Cell,
}

impl MazeSpec {
    pub fn occupancy(&self) -> Maze {
        let mut maze = Maze::open(self.width, self.height);
        for y in 0..self.height as i32 {
            maze.set_wall(Cell::new(self.wall_col, y), true);
        }
        for x in 0..self.width as i32 {
            maze.set_wall(Cell::new(x, self.wall_row), true);
        }
        for g in self.gates {
            maze.set_wall(g, false);
        }
        maze
    }

    pub fn layout(&self) -> Layout {
        Layout {
            maze: Arc::new(self.occupancy()),
            start: self.start,
            goal: self.goal,
        }
    }

    /// Text grid: `#` wall, `.` open, `S` start, `G` goal.
    pub fn to_text(&self) -> String {
        self.layout().to_text()
    }

    /// Check every structural invariant, including reachability.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width as i32, self.height as i32);
        if !(1..=w - 2).contains(&self.wall_col) || !(1..=h - 2).contains(&self.wall_row) {
            return Err(Error::Layout("wall position out of range".into()));
        }
        let [up, down, left, right] = self.gates;
        let ok = up.x == self.wall_col
            && (0..self.wall_row).contains(&up.y)
            && down.x == self.wall_col
            && (self.wall_row + 1..h).contains(&down.y)
            && left.y == self.wall_row
            && (0..self.wall_col).contains(&left.x)
            && right.y == self.wall_row
            && (self.wall_col + 1..w).contains(&right.x);
        if !ok {
            return Err(Error::Layout("gate outside its wall segment".into()));
        }
        self.layout().validate()
    }
}

/// A concrete maze plus start and goal cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub maze: Arc<Maze>,
    pub start: Cell,
    pub goal: Cell,
}

impl Layout {
    /// Single-row corridor of `len` open cells from the left end to the right end.
    pub fn corridor(len: usize) -> Self {
        Self {
            maze: Arc::new(Maze::open(len, 1)),
            start: Cell::new(0, 0),
            goal: Cell::new(len as i32 - 1, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.maze.is_open(self.start) || !self.maze.is_open(self.goal) {
            return Err(Error::Layout("start and goal must be open cells".into()));
        }
        if self.start == self.goal {
            return Err(Error::Layout("start equals goal".into()));
        }
        if !reachable(&self.maze, self.start, self.goal) {
            return Err(Error::Layout("goal unreachable from start".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.maze.width + 1) * self.maze.height);
        for y in 0..self.maze.height as i32 {
            for x in 0..self.maze.width as i32 {
                let c = Cell::new(x, y);
                out.push(if c == self.start {
                    'S'
                } else if c == self.goal {
                    'G'
                } else if self.maze.is_wall(c) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 || rows.iter().any(|r| r.chars().count() != width) {
            return Err(Error::Parse("grid rows must be non-empty and equally wide".into()));
        }
        let mut maze = Maze::open(width, height);
        let (mut start, mut goal) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let c = Cell::new(x as i32, y as i32);
                match ch {
                    '#' => maze.set_wall(c, true),
                    '.' => {}
                    'S' => start = Some(c),
                    'G' => goal = Some(c),
                    other => return Err(Error::Parse(format!("unexpected grid character `{other}`"))),
                }
            }
        }
        let (start, goal) = match (start, goal) {
            (Some(s), Some(g)) => (s, g),
            _ => return Err(Error::Parse("grid needs exactly one S and one G".into())),
        };
        Ok(Self {
            maze: Arc::new(maze),
            start,
            goal,
        })
    }
}

/// Breadth-first reachability over 4-neighbour moves.
pub fn reachable(maze: &Maze, from: Cell, to: Cell) -> bool {
    bfs_distances(maze, from)[maze.index(to)].is_some()
}

/// Shortest-path step counts from `from` to every cell (None when unreachable).
pub fn bfs_distances(maze: &Maze, from: Cell) -> Vec<Option<usize>> {
    let mut dist = vec![None; maze.n_cells()];
    if !maze.is_open(from) {
        return dist;
    }
    let mut queue = VecDeque::from([from]);
    dist[maze.index(from)] = Some(0);
    while let Some(c) = queue.pop_front() {
        let d = dist[maze.index(c)].unwrap();
        for a in &Action::ALL[..4] {
            let n = a.apply(c);
            if maze.is_open(n) && dist[maze.index(n)].is_none() {
                dist[maze.index(n)] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Draw a random four-room maze. Draws whose gate ranges are empty, or whose
/// start/goal placement fails validation, are rejected and redrawn.
pub fn generate_maze(seed: u64, width: usize, height: usize, delta: f64) -> Result<MazeSpec> {
    if width < 5 || height < 5 {
        return Err(Error::Layout("mazes need W >= 5 and H >= 5".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as i32, height as i32);
    for _ in 0..MAX_ATTEMPTS {
        let wall_col = rng.gen_range(1..=w - 2);
        let wall_row = rng.gen_range(1..=h - 2);
        // Gate ranges are inclusive: (1, W_P-1), (W_P+1, W-2), and likewise for rows.
        let ranges = [(1, wall_row - 1), (wall_row + 1, h - 2), (1, wall_col - 1), (wall_col + 1, w - 2)];
        if ranges.iter().any(|&(lo, hi)| lo > hi) {
            continue;
        }
        let pick = |rng: &mut ChaCha8Rng, (lo, hi): (i32, i32)| rng.gen_range(lo..=hi);
        let gates = [
            Cell::new(wall_col, pick(&mut rng, ranges[0])),
            Cell::new(wall_col, pick(&mut rng, ranges[1])),
            Cell::new(pick(&mut rng, ranges[2]), wall_row),
            Cell::new(pick(&mut rng, ranges[3]), wall_row),
        ];
        let mut spec = MazeSpec {
            width,
            height,
            wall_col,
            wall_row,
            gates,
            start: Cell::new(0, 0),
            goal: Cell::new(0, 0),
        };
        let maze = spec.occupancy();
        let open: Vec<Cell> = (0..maze.n_cells()).map(|i| maze.cell_at(i)).filter(|&c| maze.is_open(c)).collect();
        spec.start = open[rng.gen_range(0..open.len())];
        spec.goal = open[rng.gen_range(0..open.len())];
        if spec.start.within(spec.goal, delta) {
            continue;
        }
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::MazeGeneration { attempts: MAX_ATTEMPTS })
}

/// Sparse goal indicator: 1 when the squared distance is strictly below δ².
pub fn high_reward(position: Cell, goal: Cell, delta: f64) -> f64 {
    if position.within(goal, delta) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStepResult {
    pub next_state: GoalState,
    pub env_reward: f64,
    pub done: bool,
}

/// Goal-conditioned gridworld episode.
#[derive(Debug, Clone)]
pub struct GridEnv {
    layout: Layout,
    state: GoalState,
    steps: usize,
    max_steps: usize,
    delta: f64,
    done: bool,
}

impl GridEnv {
    pub fn new(layout: Layout, max_steps: usize, delta: f64) -> Result<Self> {
        layout.validate()?;
        let state = GoalState::new(layout.start, Arc::clone(&layout.maze), layout.goal)?;
        Ok(Self {
            layout,
            state,
            steps: 0,
            max_steps,
            delta,
            done: false,
        })
    }

    pub fn reset(&mut self) -> GoalState {
        self.state = self.state.with_position(self.layout.start);
        self.steps = 0;
        self.done = false;
        self.state.clone()
    }

    pub fn state(&self) -> &GoalState {
        &self.state
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: Action) -> Result<EnvStepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let target = action.apply(self.state.position);
        if self.layout.maze.is_open(target) {
            self.state = self.state.with_position(target);
        }
        self.steps += 1;
        let env_reward = high_reward(self.state.position, self.layout.goal, self.delta);
        self.done = env_reward > 0.0 || self.steps >= self.max_steps;
        Ok(EnvStepResult {
            next_state: self.state.clone(),
            env_reward,
            done: self.done,
        })
    }
}
