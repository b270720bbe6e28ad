//! Data-generating processes and Monte-Carlo oracles.

mod benchmark;
mod bootstrap;
mod factor;
mod mcdof;

pub use benchmark::{
    desk_design, run_selection_benchmark, spearman, BenchMethod, BenchmarkConfig, BenchmarkReport, BenchmarkRow,
    Design, DeskDesign, RiskCurves,
};
pub use bootstrap::{stationary_bootstrap, stationary_indices, BootstrapDraw, BootstrapSpec};
pub use factor::{
    conditional_mean, conditional_means, draw_factor_empirical, draw_factor_gaussian, fit_factor_model,
    true_proportional_risk, ConditionalModel, FactorDraw, FactorModelSpec, OrderSelection,
};
pub use mcdof::{mc_dof, mc_dof_paired, solve_sc_total, McDof};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reproducible generator for work item `stream` under a master `seed`.
///
/// Every replication gets its own ChaCha stream, so results do not depend
/// on how replications are scheduled across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
