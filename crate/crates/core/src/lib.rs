//! Orthogonal and rotation group synchronization.
//!
//! Recover `Z_1, ..., Z_n` in `O(d)` or `SO(d)` from noisy pairwise blocks
//! `Y_ij = Z_i Z_j^T + sigma W_ij` observed on an Erdős–Rényi graph. The crate
//! covers the whole estimation pipeline (spectral initialization followed by
//! iterative polar decomposition), the Procrustes losses used to score it, the
//! one-step oracle experiment, and the numerics behind the matching lower bound
//! (the smooth rotation prior `Q(r)` and van Trees information quantities).
//!
//! ```
//! use groupsync_core::{GroupKind, IterationConfig, SyncParams, generate_instance, run_pipeline};
//!
//! let params = SyncParams::new(60, 3, 1.0, 0.0, GroupKind::Rotation, 7).unwrap();
//! let instance = generate_instance(&params).unwrap();
//! let traj = run_pipeline(&instance, &IterationConfig::new(5, true).unwrap()).unwrap();
//! assert!(traj.final_loss < 1e-8);
//! ```

pub mod algorithms;
pub mod eigen;
pub mod error;
pub mod experiments;
pub mod group;
pub mod lower_bound;
pub mod model;
pub mod rng;
pub mod theory;

pub use algorithms::{
    iterate_once, oracle_one_step, run_pipeline, skew_projection_check, spectral_init,
    IterationConfig, OracleOutcome, SkewStats, Trajectory,
};
pub use error::{Error, Result};
pub use experiments::{
    rate_sweep, run_experiment, ExperimentSpec, Mode, Summary, SweepField, SweepRow, TrialRecord,
};
pub use group::{
    align, loss, pairwise_loss, polar_factor, special_polar_factor, GroupElementSet, GroupKind,
    Matrix,
};
pub use lower_bound::{
    construct_q, information_bundle, jacobian_q, prior_density, sample_prior, vantrees_estimate,
    InformationBundle, PriorParams, PriorRotation, VanTreesEstimate,
};
pub use model::{
    assemble_masked_matrix, generate_instance, sample_ground_truth, BlockMatrix, SyncInstance,
    SyncParams,
};
