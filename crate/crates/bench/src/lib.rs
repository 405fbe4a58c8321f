//! Fixtures shared by the kernel benchmarks.

use groupsync_core::lower_bound::prior_pair;
use groupsync_core::{
    generate_instance, GroupKind, Matrix, PriorParams, SyncInstance, SyncParams,
};

/// A dense, moderately noisy instance.
pub fn instance(n: usize, d: usize) -> SyncInstance {
    let params = SyncParams::new(n, d, 1.0, 1.0, GroupKind::Rotation, 17).expect("valid params");
    generate_instance(&params).expect("instance")
}

/// Deterministic well-conditioned `d x d` matrix.
pub fn square(d: usize) -> Matrix {
    Matrix::from_fn(d, d, |i, j| {
        let x = (i * d + j) as f64;
        (0.7 * x).sin() + if i == j { 2.0 } else { 0.0 }
    })
}

pub fn prior_draws(d: usize) -> (PriorParams, PriorParams) {
    prior_pair(d, 5, 0)
}
