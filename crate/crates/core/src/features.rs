//! Fixed observation encodings fed to the networks.

use ndarray::Array2;

use crate::model::{Cell, GoalState, Subgoal};

/// Encodes observations for grids of one size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    pub width: usize,
    pub height: usize,
}

impl Encoder {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    fn n_cells(&self) -> usize {
        self.width * self.height
    }

    fn norm(&self, c: Cell) -> (f64, f64) {
        let sx = (self.width.max(2) - 1) as f64;
        let sy = (self.height.max(2) - 1) as f64;
        (c.x as f64 / sx, c.y as f64 / sy)
    }

    fn view_width(&self) -> usize {
        2 * self.width - 1
    }

    fn view_height(&self) -> usize {
        2 * self.height - 1
    }

    /// Position, subgoal, offset to the subgoal, then two agent-centred
    /// planes large enough to cover the whole grid from any cell: occupancy
    /// (cells outside the grid read as walls) and a one-hot subgoal marker.
    pub fn lower_dim(&self) -> usize {
        6 + 2 * self.view_width() * self.view_height()
    }

    pub fn encode_lower(&self, state: &GoalState, subgoal: Subgoal, out: &mut [f64]) {
        let (px, py) = self.norm(state.position);
        let (gx, gy) = self.norm(subgoal.cell);
        out[..6].copy_from_slice(&[px, py, gx, gy, gx - px, gy - py]);
        let (vw, vh) = (self.view_width() as i32, self.view_height() as i32);
        let (ox, oy) = (self.width as i32 - 1, self.height as i32 - 1);
        for vy in 0..vh {
            for vx in 0..vw {
                let c = Cell::new(state.position.x + vx - ox, state.position.y + vy - oy);
                out[6 + (vy * vw + vx) as usize] = (!state.maze.is_open(c)) as u8 as f64;
            }
        }
        let plane = (vw * vh) as usize;
        out[6 + plane..6 + 2 * plane].fill(0.0);
        let (dx, dy) = (subgoal.cell.x - state.position.x + ox, subgoal.cell.y - state.position.y + oy);
        if (0..vw).contains(&dx) && (0..vh).contains(&dy) {
            out[6 + plane + (dy * vw + dx) as usize] = 1.0;
        }
    }

    /// One-hot position, one-hot final goal, occupancy grid, and both
    /// coordinates normalized.
    pub fn higher_dim(&self) -> usize {
        3 * self.n_cells() + 4
    }

    pub fn encode_higher(&self, state: &GoalState, out: &mut [f64]) {
        let n = self.n_cells();
        out[..2 * n].fill(0.0);
        out[state.maze.index(state.position)] = 1.0;
        out[n + state.maze.index(state.final_goal)] = 1.0;
        for (o, &m) in out[2 * n..3 * n].iter_mut().zip(&state.maze.cells) {
            *o = m as f64;
        }
        let (px, py) = self.norm(state.position);
        let (gx, gy) = self.norm(state.final_goal);
        out[3 * n..3 * n + 4].copy_from_slice(&[px, py, gx, gy]);
    }

    pub fn lower_matrix<'a>(&self, rows: impl ExactSizeIterator<Item = (&'a GoalState, Subgoal)>) -> Array2<f64> {
        let mut m = Array2::zeros((rows.len(), self.lower_dim()));
        for (mut row, (s, g)) in m.rows_mut().into_iter().zip(rows) {
            self.encode_lower(s, g, row.as_slice_mut().unwrap());
        }
        m
    }

    pub fn higher_matrix<'a>(&self, rows: impl ExactSizeIterator<Item = &'a GoalState>) -> Array2<f64> {
        let mut m = Array2::zeros((rows.len(), self.higher_dim()));
        for (mut row, s) in m.rows_mut().into_iter().zip(rows) {
            self.encode_higher(s, row.as_slice_mut().unwrap());
        }
        m
    }

    pub fn lower_row(&self, state: &GoalState, subgoal: Subgoal) -> Vec<f64> {
        let mut v = vec![0.0; self.lower_dim()];
        self.encode_lower(state, subgoal, &mut v);
        v
    }

    pub fn higher_row(&self, state: &GoalState) -> Vec<f64> {
        let mut v = vec![0.0; self.higher_dim()];
        self.encode_higher(state, &mut v);
        v
    }

    pub fn cell_of(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn index_of(&self, cell: Cell) -> usize {
        cell.y as usize * self.width + cell.x as usize
    }
}
