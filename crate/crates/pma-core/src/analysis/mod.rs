//! Executable verification and diagnostics: the softmax perturbation-bound
//! verifier, memory attention profiling, the ablation grid, attention-cost
//! benchmarks, and the oracle-equivalence suite.

pub mod ablation;
pub mod bench;
pub mod bound;
pub mod oracles;
pub mod profile;

pub use ablation::{
    expand_axes, run_ablation_grid, run_cell, AblationAxis, AblationCell, AblationReport,
    AblationRow,
};
pub use bench::{bench_attention, bench_to_csv, BenchRow};
pub use bound::{verify_lipschitz_bound, verify_lipschitz_sweep, BoundTrialReport};
pub use oracles::{
    bank_replay_equivalence, baseline_identity, eq4_oracle_equivalence, SuiteOutcome,
};
pub use profile::{memory_usage_profile, profile_from_scores, profile_to_csv, ProfilePoint};
