//! Scripted preference feedback over trajectory pairs.

use rand::Rng;

use crate::buffer::PreferenceDataset;
use crate::config::{OracleMode, RunConfig, Scoring};
use crate::env::{bfs_distances, high_reward};
use crate::error::{Error, Result};
use crate::model::{Cell, FlatPair, FlatTrajectory, HighTrajectory, Maze, PreferenceLabel, TrajectoryPair};
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub mode: OracleMode,
    pub scoring: Scoring,
    pub tie_tolerance: f64,
    /// Success radius used by the sparse scorer.
    pub delta: f64,
}

impl OracleSpec {
    pub fn new(mode: OracleMode, scoring: Scoring, tie_tolerance: f64, delta: f64) -> Result<Self> {
        if !(tie_tolerance >= 0.0) {
            return Err(Error::config("tie_tolerance", "must be non-negative"));
        }
        Ok(Self {
            mode,
            scoring,
            tie_tolerance,
            delta,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.oracle_mode, cfg.scoring, cfg.tie_tolerance, cfg.delta)
    }
}

/// Anything the oracle can score: a goal plus the positions visited.
pub trait Scorable {
    fn goal(&self) -> Cell;
    fn visited(&self) -> Vec<Cell>;
    fn maze(&self) -> &Maze;
    /// Decisions taken: subgoal windows, or primitive steps for flat agents.
    fn windows(&self) -> usize;
}

impl Scorable for HighTrajectory {
    fn goal(&self) -> Cell {
        self.final_goal()
    }

    fn visited(&self) -> Vec<Cell> {
        self.positions().collect()
    }

    fn maze(&self) -> &Maze {
        &self.end_state.maze
    }

    fn windows(&self) -> usize {
        self.steps.len()
    }
}

impl Scorable for FlatTrajectory {
    fn goal(&self) -> Cell {
        self.end_state.final_goal
    }

    fn visited(&self) -> Vec<Cell> {
        self.steps
            .iter()
            .map(|(s, _)| s.position)
            .chain(std::iter::once(self.end_state.position))
            .collect()
    }

    fn maze(&self) -> &Maze {
        &self.end_state.maze
    }

    fn windows(&self) -> usize {
        self.steps.len()
    }
}

/// Task-progress score of a trajectory, over every visited position
/// including the one the episode ended in.
pub fn score_trajectory<T: Scorable>(tau: &T, spec: &OracleSpec) -> f64 {
    let goal = tau.goal();
    let visited = tau.visited();
    match spec.scoring {
        Scoring::SparseFinalReward => visited.iter().map(|&p| high_reward(p, goal, spec.delta)).sum(),
        Scoring::NegativeGoalDistance => -visited.iter().map(|p| p.dist(goal)).fold(f64::INFINITY, f64::min),
        Scoring::NegativePathDistance => -closest_path_distance(tau, goal, &visited),
        Scoring::Progress => -(tau.windows() as f64) - closest_path_distance(tau, goal, &visited),
    }
}

fn closest_path_distance<T: Scorable>(tau: &T, goal: Cell, visited: &[Cell]) -> f64 {
    let maze = tau.maze();
    let dist = bfs_distances(maze, goal);
    visited
        .iter()
        .filter_map(|&p| dist[maze.index(p)])
        .min()
        .map_or(f64::INFINITY, |d| d as f64)
}

/// Probability that the first trajectory is preferred, given both scores.
pub fn preference_probability(s1: f64, s2: f64, spec: &OracleSpec) -> f64 {
    match spec.mode {
        OracleMode::Deterministic => {
            if (s1 - s2).abs() <= spec.tie_tolerance {
                0.5
            } else if s1 > s2 {
                1.0
            } else {
                0.0
            }
        }
        OracleMode::BradleyTerry => sigmoid(s1 - s2),
    }
}

pub fn label_scores<R: Rng>(s1: f64, s2: f64, spec: &OracleSpec, rng: &mut R) -> PreferenceLabel {
    match spec.mode {
        OracleMode::Deterministic => match preference_probability(s1, s2, spec) {
            1.0 => PreferenceLabel::First,
            0.0 => PreferenceLabel::Second,
            _ => PreferenceLabel::Tie,
        },
        OracleMode::BradleyTerry => {
            if rng.gen::<f64>() < sigmoid(s1 - s2) {
                PreferenceLabel::First
            } else {
                PreferenceLabel::Second
            }
        }
    }
}

pub fn label_pair<T: Scorable, R: Rng>(tau1: &T, tau2: &T, spec: &OracleSpec, rng: &mut R) -> PreferenceLabel {
    label_scores(score_trajectory(tau1, spec), score_trajectory(tau2, spec), spec, rng)
}

/// Pairs whose label the oracle can refresh in place.
pub trait Relabel {
    fn relabel<R: Rng>(&mut self, spec: &OracleSpec, rng: &mut R);
}

impl Relabel for TrajectoryPair {
    fn relabel<R: Rng>(&mut self, spec: &OracleSpec, rng: &mut R) {
        self.label = label_pair(&self.tau1, &self.tau2, spec, rng);
    }
}

impl Relabel for FlatPair {
    fn relabel<R: Rng>(&mut self, spec: &OracleSpec, rng: &mut R) {
        self.label = label_pair(&self.tau1, &self.tau2, spec, rng);
    }
}

/// Recompute every stored label.
pub fn relabel_dataset<P: Relabel, R: Rng>(dataset: &mut PreferenceDataset<P>, spec: &OracleSpec, rng: &mut R) {
    for pair in dataset.iter_mut() {
        pair.relabel(spec, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GoalState, HighStep, Maze, Subgoal};
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn spec(mode: OracleMode, scoring: Scoring) -> OracleSpec {
        OracleSpec::new(mode, scoring, 1e-9, 1.5).unwrap()
    }

    fn trajectory(path: &[(i32, i32)], goal: (i32, i32)) -> HighTrajectory {
        trajectory_in(Maze::open(8, 8), path, goal)
    }

    fn trajectory_in(maze: Maze, path: &[(i32, i32)], goal: (i32, i32)) -> HighTrajectory {
        let maze = Arc::new(maze);
        let g = Cell::new(goal.0, goal.1);
        let state = |p: &(i32, i32)| GoalState::new(Cell::new(p.0, p.1), Arc::clone(&maze), g).unwrap();
        let (last, rest) = path.split_last().unwrap();
        HighTrajectory {
            steps: rest
                .iter()
                .map(|p| HighStep {
                    state: state(p),
                    subgoal: Subgoal::new(g),
                })
                .collect(),
            end_state: state(last),
        }
    }

    #[test]
    fn sparse_scores() {
        let s = spec(OracleMode::Deterministic, Scoring::SparseFinalReward);
        assert_eq!(score_trajectory(&trajectory(&[(0, 0), (3, 3), (6, 6)], (6, 6)), &s), 1.0);
        assert_eq!(score_trajectory(&trajectory(&[(0, 0), (1, 1)], (6, 6)), &s), 0.0);
    }

    #[test]
    fn distance_score_on_straight_line() {
        let s = spec(OracleMode::Deterministic, Scoring::NegativeGoalDistance);
        let tau = trajectory(&[(0, 0), (1, 0), (2, 0), (3, 0)], (7, 0));
        assert_eq!(score_trajectory(&tau, &s), -4.0);
        let diag = trajectory(&[(0, 0), (3, 4)], (0, 0));
        assert_eq!(score_trajectory(&diag, &s), 0.0);
        let away = trajectory(&[(1, 1), (4, 5)], (7, 7));
        assert!((score_trajectory(&away, &s) + 13f64.sqrt()).abs() < 1e-15);
    }

    fn walled() -> Maze {
        // Column 3 is a wall except at the bottom row.
        let mut m = Maze::open(8, 8);
        for y in 0..7 {
            m.set_wall(Cell::new(3, y), true);
        }
        m
    }

    #[test]
    fn path_distance_goes_around_walls() {
        let s = spec(OracleMode::Deterministic, Scoring::NegativePathDistance);
        let tau = trajectory_in(walled(), &[(0, 0), (2, 0)], (4, 0));
        // Down to row 7, across, and back up: 7 + 2 + 7.
        assert_eq!(score_trajectory(&tau, &s), -16.0);
        let e = spec(OracleMode::Deterministic, Scoring::NegativeGoalDistance);
        assert_eq!(score_trajectory(&tau, &e), -2.0);
        let reached = trajectory_in(walled(), &[(0, 0), (4, 0)], (4, 0));
        assert_eq!(score_trajectory(&reached, &s), 0.0);
    }

    #[test]
    fn progress_charges_each_window() {
        let s = spec(OracleMode::Deterministic, Scoring::Progress);
        let fast = trajectory(&[(0, 0), (5, 0)], (5, 0));
        let slow = trajectory(&[(0, 0), (2, 0), (4, 0), (5, 0)], (5, 0));
        assert_eq!(score_trajectory(&fast, &s), -1.0);
        assert_eq!(score_trajectory(&slow, &s), -3.0);
        let stuck = trajectory(&[(0, 0), (1, 0)], (5, 0));
        assert_eq!(score_trajectory(&stuck, &s), -5.0);
    }

    #[test]
    fn bradley_terry_probability() {
        let s = spec(OracleMode::BradleyTerry, Scoring::SparseFinalReward);
        assert!((preference_probability(3.0, 1.0, &s) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn equal_scores_tie() {
        let s = spec(OracleMode::Deterministic, Scoring::SparseFinalReward);
        let mut rng = stream(0, Stream::Preference);
        assert_eq!(label_scores(2.0, 2.0, &s, &mut rng), PreferenceLabel::Tie);
        assert_eq!(label_scores(2.0, 2.0 + 1e-12, &s, &mut rng), PreferenceLabel::Tie);
        assert_eq!(label_scores(2.0, 1.0, &s, &mut rng), PreferenceLabel::First);
        assert_eq!(label_scores(1.0, 2.0, &s, &mut rng), PreferenceLabel::Second);
    }

    #[test]
    fn bradley_terry_rate_within_three_sigma() {
        let s = spec(OracleMode::BradleyTerry, Scoring::SparseFinalReward);
        let mut rng = stream(11, Stream::Preference);
        let n = 100_000;
        let wins = (0..n)
            .filter(|_| label_scores(1.0, 0.0, &s, &mut rng) == PreferenceLabel::First)
            .count();
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((wins as f64 / n as f64 - p).abs() < 3.0 * sd);
    }

    #[test]
    fn negative_tolerance_rejected() {
        assert!(OracleSpec::new(OracleMode::Deterministic, Scoring::SparseFinalReward, -1.0, 1.5).is_err());
    }

    fn dataset() -> PreferenceDataset {
        let mut d = PreferenceDataset::new(16).unwrap();
        for i in 0..6 {
            let a = trajectory(&[(0, 0), (i, 0)], (7, 7));
            let b = trajectory(&[(0, 0), (0, 6 - i)], (7, 7));
            d.push_pair(TrajectoryPair::new(a, b, PreferenceLabel::Tie).unwrap());
        }
        d
    }

    #[test]
    fn deterministic_relabel_idempotent() {
        let s = spec(OracleMode::Deterministic, Scoring::NegativeGoalDistance);
        let mut d = dataset();
        let mut rng = stream(1, Stream::Preference);
        relabel_dataset(&mut d, &s, &mut rng);
        let first: Vec<_> = d.iter().map(|p| p.label).collect();
        relabel_dataset(&mut d, &s, &mut rng);
        assert_eq!(first, d.iter().map(|p| p.label).collect::<Vec<_>>());
        assert!(first.contains(&PreferenceLabel::First) && first.contains(&PreferenceLabel::Second));
    }

    #[test]
    fn seeded_bt_relabel_reproducible() {
        let s = spec(OracleMode::BradleyTerry, Scoring::NegativeGoalDistance);
        let run = || {
            let mut d = dataset();
            relabel_dataset(&mut d, &s, &mut stream(5, Stream::Preference));
            d.iter().map(|p| p.label).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_relabel_is_noop() {
        let s = spec(OracleMode::BradleyTerry, Scoring::SparseFinalReward);
        let mut d: PreferenceDataset = PreferenceDataset::new(4).unwrap();
        relabel_dataset(&mut d, &s, &mut stream(0, Stream::Preference));
        assert!(d.is_empty());
    }

    proptest! {
        #[test]
        fn antisymmetric(s1 in -5.0f64..5.0, s2 in -5.0f64..5.0, bt in any::<bool>()) {
            let mode = if bt { OracleMode::BradleyTerry } else { OracleMode::Deterministic };
            let s = spec(mode, Scoring::SparseFinalReward);
            let p = preference_probability(s1, s2, &s);
            let q = preference_probability(s2, s1, &s);
            prop_assert!((p + q - 1.0).abs() < 1e-15);
        }

        #[test]
        fn deterministic_transitive(scores in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let s = spec(OracleMode::Deterministic, Scoring::SparseFinalReward);
            let mut rng = stream(0, Stream::Preference);
            let beats = |a: f64, b: f64, rng: &mut _| label_scores(a, b, &s, rng) == PreferenceLabel::First;
            let (a, b, c) = (scores[0], scores[1], scores[2]);
            if beats(a, b, &mut rng) && beats(b, c, &mut rng) {
                prop_assert!(beats(a, c, &mut rng));
            }
        }
    }
}
