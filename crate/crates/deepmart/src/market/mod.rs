//! Market models: time grids, Itô diffusions, payoffs and path simulation.

mod grid;
mod model;
mod paths;
mod payoff;

pub use grid::TimeGrid;
pub use model::{ModelKind, ModelSpec};
pub use paths::{simulate_paths, simulate_paths_exact_gbm, simulate_range, PathBatch};
pub use payoff::{PayoffKind, PayoffSpec};
