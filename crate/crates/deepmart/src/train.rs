//! Shared training configuration and deterministic batch sharding used by
//! both the dual and the primal stage trainers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::seeds::derive_seed;

/// Paths per worker shard. Fixed so that gradient reductions happen in a
/// thread-count-independent order: shard results are collected by index and
/// folded sequentially.
pub const SHARD_PATHS: usize = 128;

/// Per-stage training knobs shared by the dual and primal trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adam steps per stage. Zero is allowed and returns the initialization.
    pub steps: usize,
    /// Paths simulated per Adam step.
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Base seed; batch and init streams are derived per stage and step.
    pub seed: u64,
    /// Reuse the step-0 batch for every step (deterministic unit tests).
    pub fixed_dataset: bool,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size,
            lr: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed,
            fixed_dataset: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        Ok(())
    }

    /// Seed of the training batch for `(stage, step)`. Shared between the
    /// dual and primal trainers so the sequential and interleaved drivers
    /// consume identical paths.
    pub fn batch_seed(&self, stage: usize, step: usize) -> u64 {
        let step = if self.fixed_dataset { 0 } else { step };
        derive_seed(self.seed, "train-batch", stage as u64, step as u64)
    }

    pub fn init_seed(&self, family: &str, stage: usize) -> u64 {
        derive_seed(self.seed, family, stage as u64, 0)
    }
}

/// Split `n_paths` into fixed-size shards: `(first_path, count)` pairs.
pub fn shards(n_paths: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n_paths.div_ceil(SHARD_PATHS));
    let mut start = 0;
    while start < n_paths {
        let count = SHARD_PATHS.min(n_paths - start);
        out.push((start, count));
        start += count;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_cover_the_range_exactly() {
        for n in [1, 127, 128, 129, 1000] {
            let s = shards(n);
            assert_eq!(s.iter().map(|(_, c)| c).sum::<usize>(), n);
            let mut expect = 0;
            for (start, count) in s {
                assert_eq!(start, expect);
                assert!(count <= SHARD_PATHS);
                expect += count;
            }
        }
    }

    #[test]
    fn fixed_dataset_pins_the_batch_seed() {
        let mut cfg = TrainConfig::new(10, 64, 5);
        assert_ne!(cfg.batch_seed(1, 0), cfg.batch_seed(1, 1));
        cfg.fixed_dataset = true;
        assert_eq!(cfg.batch_seed(1, 0), cfg.batch_seed(1, 1));
    }
}
