//! Synthetic generator and executable checks of the map's population
//! structure: factorization, co-activation bound, row-wise concentration,
//! optimality of bottom-k ablation, and de-mixing recovery.

mod checks;
mod world;

pub use checks::*;
pub use world::{project_psd, trial_rng, GateLaw, GateLawSpec, MatrixSpec, PatternSpec, RandomSpec, SyntheticWorld, WorldSpec};
