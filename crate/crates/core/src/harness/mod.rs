//! Experiment runner: training loops, metrics and reports.

pub mod metrics;
pub mod report;
pub mod train;

pub use metrics::{lower_q_metric, subgoal_distance, WindowRecord};
pub use report::{csv_string, read_csv, render_report, render_svg, write_csv, EpochRow, RunReport, CSV_HEADER};
pub use train::{evaluate, flat_episode, hier_episode, run_experiment, sweep, sweep_label, train, train_labeled, Evaluation, HierEpisode, HighLevel, SweepParam};
