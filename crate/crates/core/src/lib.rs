//! Density-conditioned steering of sparse-autoencoder latents.
//!
//! The pipeline reads preference triples (prompt, chosen, rejected) as
//! hidden-state traces, turns prompt latents into binary gates, and averages
//! chosen-minus-rejected response densities into a sparse map from prompt
//! features to output features. At inference the map scores output features
//! for a new prompt and the steering engine edits already-active latents at
//! each token.

pub mod audit;
pub mod container;
pub mod density;
pub mod diff_map;
pub mod error;
pub mod flops;
pub mod gram;
pub mod sae;
pub mod select;
pub mod steering;
pub mod theory;
pub mod trace;

pub use audit::{coverage_check, export_evidence, rank_columns, set_overlap, AuditSets, CoverageReport, EvidenceRecord};
pub use container::{Container, Tensor};
pub use density::{density, fit_thresholds, gate, top_k_prompt_features, DensityVector, GateThresholds, GateVector};
pub use diff_map::{build_map, sparsify, BuildOptions, DiffMap};
pub use error::{DspaError, Result};
pub use flops::{cost_report, flops_dspa, flops_rahf, CostConfig, CostReport};
pub use gram::{estimate_gram, estimate_gram_restricted, GramMatrix};
pub use sae::{Activation, LatentVector, SaeParams};
pub use steering::{demix_scores, edit_token, make_plan, steer_stream, SteeringMode, SteeringPlan, TokenEditReport};
pub use theory::{SyntheticWorld, UtilityModel};
pub use trace::{read_trace, write_trace, ActivationTrace, Manifest, PreferenceTriple, Segment};
