use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level time grid: `n_dates` monitoring intervals over `[0, horizon]`,
/// each split into `n_substeps` integration sub-intervals.
///
/// Node times are always computed as `index * dt` so that the last sub-node
/// of interval `n` is the same floating-point number as the first sub-node
/// of interval `n + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_dates: usize,
    n_substeps: usize,
}

impl TimeGrid {
    /// Build a grid with horizon `t`, `n` monitoring intervals and `n0`
    /// sub-steps per interval.
    pub fn new(t: f64, n: usize, n0: usize) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("horizon must be positive, got {t}")));
        }
        if n == 0 {
            return Err(Error::invalid("need at least one monitoring interval"));
        }
        if n0 == 0 {
            return Err(Error::invalid("need at least one sub-step per interval"));
        }
        Ok(TimeGrid {
            horizon: t,
            n_dates: n,
            n_substeps: n0,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of monitoring intervals N (exercise dates are 0..=N).
    pub fn n_dates(&self) -> usize {
        self.n_dates
    }

    /// Sub-steps per monitoring interval.
    pub fn n_substeps(&self) -> usize {
        self.n_substeps
    }

    /// Fine-grid step length.
    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_dates * self.n_substeps) as f64
    }

    /// Total number of fine steps `N * N0`.
    pub fn n_steps(&self) -> usize {
        self.n_dates * self.n_substeps
    }

    /// Total number of fine nodes `N * N0 + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps() + 1
    }

    /// Time of fine node `k` (0-based global index).
    pub fn node_time(&self, k: usize) -> f64 {
        debug_assert!(k < self.n_nodes());
        k as f64 * self.dt()
    }

    /// Global fine-node index of monitoring date `n`.
    pub fn date_node(&self, n: usize) -> usize {
        debug_assert!(n <= self.n_dates);
        n * self.n_substeps
    }

    /// Time of monitoring date `n`.
    pub fn date_time(&self, n: usize) -> f64 {
        self.node_time(self.date_node(n))
    }
}
