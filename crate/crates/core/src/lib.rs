//! Hierarchical reinforcement learning from trajectory preferences on
//! gridworld mazes, with a primitive-regularized DPO objective for the
//! higher level.

pub mod buffer;
pub mod config;
pub mod env;
pub mod error;
pub mod features;
pub mod harness;
pub mod higher;
pub mod lower;
pub mod model;
pub mod nn;
pub mod preference;
pub mod rng;
pub mod tabular;

pub use buffer::{PreferenceDataset, ReplayBuffer};
pub use config::{Algorithm, OracleMode, Preset, RunConfig, Scoring};
pub use env::{generate_maze, GridEnv, Layout, MazeSpec};
pub use error::{Error, Result};
pub use model::{
    Action, Cell, FlatPair, FlatTrajectory, GoalState, HighStep, HighTrajectory, HighTransition, LowTransition, Maze,
    PreferenceLabel, Subgoal, TrajectoryPair,
};
