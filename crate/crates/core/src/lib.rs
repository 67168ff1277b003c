//! Simulation and statistical-verification toolkit for a family of
//! nonuniformly expanding interval maps with stretched-exponential return
//! times, their tower (Markov-chain) models, and the block-decomposition
//! diagnostics used to probe Brownian approximation rates of Birkhoff sums.
//!
//! Layout:
//! - [`interval_maps`]: the interval-map family, inverse-branch dynamics in
//!   log coordinates, return-time tails, inducing scheme, expansion and
//!   distortion certification.
//! - [`tower_chain`]: the tower Markov chain, its stationary measure,
//!   coupled-chain meeting times and renewal statistics.
//! - [`observables`]: observables on the interval and on tower trajectories,
//!   Birkhoff sums, windowed conditional expectations, covariance and
//!   variance estimation.
//! - [`block_scheme`]: block scheduling, block sums, gap bounds, block
//!   variance rates and the heuristic Gaussianization probe.
//! - [`stat_fit`]: tail-curve fits, the one-sample KS test and iterated
//!   logarithm diagnostics.
//! - [`harness`]: experiment configs, seeding, replica execution and CSV/JSON
//!   report emission.

pub mod block_scheme;
pub mod harness;
pub mod interval_maps;
pub mod numeric;
pub mod observables;
pub mod seeds;
pub mod stat_fit;
pub mod tower_chain;

pub use harness::{run_experiment, ExperimentConfig};
pub use seeds::{seed_stream, SeedSpec};
