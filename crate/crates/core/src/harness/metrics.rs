//! Diagnostic metrics over higher-level windows.

use crate::error::Result;
use crate::model::{Cell, GoalState, Subgoal};

/// One subgoal window: where it started, what was asked, where it ended.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub state: GoalState,
    pub subgoal: Subgoal,
    pub end: Cell,
}

/// Mean Euclidean distance between each emitted subgoal and the position
/// reached at the end of its window. `None` without windows.
pub fn subgoal_distance(windows: &[WindowRecord]) -> Option<f64> {
    if windows.is_empty() {
        return None;
    }
    Some(windows.iter().map(|w| w.subgoal.cell.dist(w.end)).sum::<f64>() / windows.len() as f64)
}

/// Mean of `value(s_t, g_t)` over every emitted subgoal. `None` without windows.
pub fn lower_q_metric<F>(windows: &[WindowRecord], mut value: F) -> Result<Option<f64>>
where
    F: FnMut(&GoalState, Subgoal) -> Result<f64>,
{
    if windows.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for w in windows {
        total += value(&w.state, w.subgoal)?;
    }
    Ok(Some(total / windows.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Maze;
    use std::sync::Arc;

    fn window(from: (i32, i32), goal: (i32, i32), end: (i32, i32)) -> WindowRecord {
        let maze = Arc::new(Maze::open(8, 8));
        WindowRecord {
            state: GoalState::new(Cell::new(from.0, from.1), maze, Cell::new(7, 7)).unwrap(),
            subgoal: Subgoal::new(Cell::new(goal.0, goal.1)),
            end: Cell::new(end.0, end.1),
        }
    }

    #[test]
    fn reached_subgoals_give_zero() {
        let w = vec![window((0, 0), (2, 2), (2, 2)), window((2, 2), (5, 1), (5, 1))];
        assert_eq!(subgoal_distance(&w), Some(0.0));
    }

    #[test]
    fn stationary_lower_gives_subgoal_distance() {
        let w = vec![window((1, 1), (4, 5), (1, 1))];
        assert_eq!(subgoal_distance(&w), Some(5.0));
    }

    #[test]
    fn mixed_episode_mean() {
        let w = vec![
            window((0, 0), (3, 4), (0, 0)),
            window((0, 0), (1, 0), (1, 0)),
            window((1, 0), (1, 3), (1, 1)),
        ];
        assert!((subgoal_distance(&w).unwrap() - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(subgoal_distance(&[]), None);
    }

    #[test]
    fn lower_q_is_arithmetic_mean() {
        let w = vec![window((0, 0), (1, 1), (0, 0)), window((3, 0), (1, 1), (0, 0))];
        let m = lower_q_metric(&w, |s, _| Ok(s.position.x as f64)).unwrap();
        assert_eq!(m, Some(1.5));
        assert_eq!(lower_q_metric(&[], |_, _| Ok(1.0)).unwrap(), None);
    }
}
