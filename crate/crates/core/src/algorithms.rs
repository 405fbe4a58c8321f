//! Spectral initialization, iterative polar decomposition, and the one-step
//! oracle experiment.

use serde::Serialize;

use crate::eigen::{self, EigenOptions};
use crate::error::{Error, Result};
use crate::group::{loss, GroupElementSet, GroupKind, Matrix};
use crate::model::SyncInstance;
use crate::rng::{self, streams};

/// Iteration count and whether to record the loss after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IterationConfig {
    max_iters: usize,
    record_trajectory: bool,
}

impl IterationConfig {
    pub const MIN_DEFAULT_ITERS: usize = 20;
    pub const MAX_DEFAULT_ITERS: usize = 200;

    pub fn new(max_iters: usize, record_trajectory: bool) -> Result<Self> {
        if max_iters == 0 {
            return Err(Error::invalid("max_iters", "at least one iteration required"));
        }
        Ok(Self {
            max_iters,
            record_trajectory,
        })
    }

    /// `max(ceil(log(1/sigma^2)), 20)`, capped at 200.
    pub fn default_iters(sigma: f64) -> usize {
        let t = (1.0 / (sigma * sigma)).ln().ceil();
        if !t.is_finite() || t >= Self::MAX_DEFAULT_ITERS as f64 {
            return Self::MAX_DEFAULT_ITERS;
        }
        (t.max(0.0) as usize).clamp(Self::MIN_DEFAULT_ITERS, Self::MAX_DEFAULT_ITERS)
    }

    pub fn for_sigma(sigma: f64, record_trajectory: bool) -> Self {
        Self {
            max_iters: Self::default_iters(sigma),
            record_trajectory,
        }
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }

    pub fn record_trajectory(&self) -> bool {
        self.record_trajectory
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `losses[t]` is the loss of `Z^(t)`; index 0 is the spectral
    /// initialization. Empty unless recording was requested.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub estimates: GroupElementSet,
    /// Node updates that hit the rank-deficient fallback, summed over
    /// iterations.
    pub fallbacks: usize,
}

fn block_of(stacked: &[f64], i: usize, d: usize) -> Matrix {
    Matrix::from_row_slice(d, d, &stacked[i * d * d..(i + 1) * d * d])
}

/// Top-`d` eigenvectors of the masked observation matrix, projected blockwise
/// onto the group.
///
/// For rotations the eigenbasis is first oriented so that most blocks have
/// positive determinant: the eigenbasis is only defined up to a right `O(d)`
/// factor, and a reflected basis leaves each block near a reflection, whose
/// nearest rotation is not informative.
pub fn spectral_init(instance: &SyncInstance) -> Result<GroupElementSet> {
    let (n, d) = (instance.n(), instance.d());
    let mut rng = rng::stream(instance.params().seed, streams::EIGEN_START);
    let pairs = eigen::top_eigenpairs(
        n * d,
        d,
        |x, k, out| instance.apply_masked(x, k, out),
        &mut rng,
        EigenOptions::default(),
    )?;
    let mut u = pairs.vectors;

    if instance.group() == GroupKind::Rotation {
        let balance: i64 = (0..n)
            .map(|i| {
                let det = block_of(&u, i, d).determinant();
                (det > 0.0) as i64 - (det < 0.0) as i64
            })
            .sum();
        if balance < 0 {
            for row in u.chunks_mut(d) {
                row[d - 1] = -row[d - 1];
            }
        }
    }

    let kind = instance.group();
    let elements = (0..n)
        .map(|i| kind.project(&block_of(&u, i, d)).unwrap_or_else(|_| Matrix::identity(d, d)))
        .collect();
    Ok(GroupElementSet::from_parts(kind, d, elements))
}

fn neighbour_sums(instance: &SyncInstance, z: &GroupElementSet) -> Vec<f64> {
    let (n, d) = (instance.n(), instance.d());
    assert_eq!(z.n(), n, "iterate has the wrong number of elements");
    assert_eq!(z.d(), d, "iterate has the wrong dimension");
    let x = z.stacked();
    let mut s = vec![0.0; n * d * d];
    instance.apply_masked(&x, d, &mut s);
    s
}

fn iterate_counting(instance: &SyncInstance, z: &GroupElementSet) -> (GroupElementSet, usize) {
    let d = instance.d();
    let kind = instance.group();
    let sums = neighbour_sums(instance, z);
    let mut fallbacks = 0;
    let elements = z
        .elements()
        .iter()
        .enumerate()
        .map(|(i, zi)| match kind.project(&block_of(&sums, i, d)) {
            Ok(p) => p,
            Err(_) => {
                fallbacks += 1;
                zi.clone()
            }
        })
        .collect();
    (GroupElementSet::from_parts(kind, d, elements), fallbacks)
}

/// One synchronous sweep `Z_i <- P(sum_{j != i} A_ij Y_ij Z_j)`, every node
/// reading the same input. Nodes whose sum is singular keep their value.
pub fn iterate_once(instance: &SyncInstance, z: &GroupElementSet) -> GroupElementSet {
    assert_eq!(z.kind(), instance.group(), "iterate group kind mismatch");
    iterate_counting(instance, z).0
}

/// Spectral initialization followed by `max_iters` sweeps.
pub fn run_pipeline(instance: &SyncInstance, config: &IterationConfig) -> Result<Trajectory> {
    let kind = instance.group();
    let truth = instance.truth();
    let mut z = spectral_init(instance)?;
    let mut losses = Vec::new();
    if config.record_trajectory {
        losses.reserve(config.max_iters + 1);
        losses.push(loss(&z, truth, kind));
    }
    let mut fallbacks = 0;
    for _ in 0..config.max_iters {
        let (next, f) = iterate_counting(instance, &z);
        z = next;
        fallbacks += f;
        if config.record_trajectory {
            losses.push(loss(&z, truth, kind));
        }
    }
    let final_loss = match losses.last() {
        Some(&l) => l,
        None => loss(&z, truth, kind),
    };
    Ok(Trajectory {
        losses,
        final_loss,
        estimates: z,
        fallbacks,
    })
}

/// Per-node squared errors of one projection step started from the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    /// `||Ž_i - Z*_i||_F^2`; flagged nodes report the maximum `4d`.
    pub errors: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl OracleOutcome {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    /// Mean over unflagged nodes (`NaN` if every node is flagged).
    pub fn mean_error(&self) -> f64 {
        let (sum, cnt) = self
            .errors
            .iter()
            .zip(&self.flagged)
            .filter(|(_, &f)| !f)
            .fold((0.0, 0usize), |(s, c), (e, _)| (s + e, c + 1));
        sum / cnt as f64
    }
}

fn require_noise(instance: &SyncInstance) -> Result<()> {
    if instance.params().sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("sigma", "sigma > 0 required"))
    }
}

/// `Ž_i = P(sum_{j != i} A_ij Y_ij Z*_j)` for every node, scored against
/// `Z*_i`. The projection is the one of the instance's group.
pub fn oracle_one_step(instance: &SyncInstance) -> Result<OracleOutcome> {
    require_noise(instance)?;
    oracle_errors(instance)
}

pub(crate) fn oracle_errors(instance: &SyncInstance) -> Result<OracleOutcome> {
    let d = instance.d();
    let kind = instance.group();
    let truth = instance.truth();
    let sums = neighbour_sums(instance, truth);
    let mut errors = Vec::with_capacity(instance.n());
    let mut flagged = Vec::with_capacity(instance.n());
    for (i, zi) in truth.elements().iter().enumerate() {
        match kind.project(&block_of(&sums, i, d)) {
            Ok(zc) => {
                errors.push((zc - zi).norm_squared());
                flagged.push(false);
            }
            Err(_) => {
                errors.push(4.0 * d as f64);
                flagged.push(true);
            }
        }
    }
    Ok(OracleOutcome { errors, flagged })
}

/// Statistics of the skew part `K_i = (E_i Z*_i^T - Z*_i E_i^T) / 2` of the
/// averaged noise `E_i = sigma sum_j A_ij W_ij Z*_j / sum_j A_ij`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewStats {
    /// `max_i max_a |(K_i)_aa|`.
    pub max_abs_diagonal: f64,
    /// Pooled off-diagonal second moment of `K_i` over that of `E_i`.
    pub variance_ratio: f64,
    /// Nodes with at least one neighbour.
    pub nodes_used: usize,
}

pub fn skew_projection_check(instance: &SyncInstance) -> Result<SkewStats> {
    require_noise(instance)?;
    let d = instance.d();
    let truth = instance.truth();
    let sums = neighbour_sums(instance, truth);
    let mut max_diag: f64 = 0.0;
    let (mut skew_ss, mut noise_ss) = (0.0, 0.0);
    let mut used = 0;
    for (i, zi) in truth.elements().iter().enumerate() {
        let deg = instance.degree(i);
        if deg == 0 {
            continue;
        }
        used += 1;
        // sum_j A_ij Y_ij Z*_j = deg Z*_i + sigma sum_j A_ij W_ij Z*_j
        let e = block_of(&sums, i, d) / deg as f64 - zi;
        let k = (&e * zi.transpose() - zi * e.transpose()) * 0.5;
        for a in 0..d {
            max_diag = max_diag.max(k[(a, a)].abs());
            for b in 0..d {
                if a != b {
                    skew_ss += k[(a, b)] * k[(a, b)];
                    noise_ss += e[(a, b)] * e[(a, b)];
                }
            }
        }
    }
    Ok(SkewStats {
        max_abs_diagonal: max_diag,
        variance_ratio: skew_ss / noise_ss,
        nodes_used: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{is_orthogonal, is_rotation};
    use crate::model::{generate_instance, SyncParams};

    fn instance(n: usize, d: usize, p: f64, sigma: f64, kind: GroupKind, seed: u64) -> SyncInstance {
        generate_instance(&SyncParams::new(n, d, p, sigma, kind, seed).unwrap()).unwrap()
    }

    #[test]
    fn config_defaults() {
        assert!(IterationConfig::new(0, true).is_err());
        assert_eq!(IterationConfig::default_iters(1.0), 20);
        assert_eq!(IterationConfig::default_iters(2.0), 20);
        assert_eq!(IterationConfig::default_iters(1e-20), 93);
        assert_eq!(IterationConfig::default_iters(0.0), 200);
    }

    #[test]
    fn noiseless_spectral_init_recovers_truth() {
        for kind in [GroupKind::Orthogonal, GroupKind::Rotation] {
            for (n, d) in [(30, 2), (80, 3), (40, 4)] {
                let inst = instance(n, d, 1.0, 0.0, kind, 11);
                let z0 = spectral_init(&inst).unwrap();
                assert!(loss(&z0, inst.truth(), kind) <= 1e-8, "{kind:?} n={n} d={d}");
            }
        }
    }

    #[test]
    fn truth_is_a_noiseless_fixed_point() {
        for kind in [GroupKind::Orthogonal, GroupKind::Rotation] {
            let inst = instance(40, 3, 1.0, 0.0, kind, 12);
            let z1 = iterate_once(&inst, inst.truth());
            assert!(loss(&z1, inst.truth(), kind) <= 1e-10);
        }
    }

    #[test]
    fn isolated_node_keeps_its_value() {
        let inst = instance(40, 2, 0.02, 0.5, GroupKind::Orthogonal, 13);
        let i = (0..40).find(|&i| inst.degree(i) == 0).expect("isolated node");
        let z = inst.truth();
        let z1 = iterate_once(&inst, z);
        assert_eq!(z1.elements()[i], z.elements()[i]);
    }

    #[test]
    fn iterates_stay_in_the_group() {
        for kind in [GroupKind::Orthogonal, GroupKind::Rotation] {
            let inst = instance(60, 3, 0.5, 1.5, kind, 14);
            let z0 = spectral_init(&inst).unwrap();
            let z1 = iterate_once(&inst, &z0);
            for q in z0.elements().iter().chain(z1.elements()) {
                match kind {
                    GroupKind::Orthogonal => assert!(is_orthogonal(q, 1e-10)),
                    GroupKind::Rotation => assert!(is_rotation(q, 1e-10)),
                }
            }
        }
    }

    #[test]
    fn iteration_is_globally_equivariant() {
        for kind in [GroupKind::Orthogonal, GroupKind::Rotation] {
            let inst = instance(50, 3, 0.6, 0.8, kind, 15);
            let z0 = spectral_init(&inst).unwrap();
            let r = crate::model::sample_ground_truth(
                &SyncParams::new(2, 3, 1.0, 0.0, kind, 99).unwrap(),
            )
            .unwrap()
            .into_elements()
            .remove(0);
            let lhs = iterate_once(&inst, &z0.right_mul(&r));
            let rhs = iterate_once(&inst, &z0).right_mul(&r);
            for (a, b) in lhs.elements().iter().zip(rhs.elements()) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn pipeline_records_trajectory() {
        let inst = instance(60, 3, 1.0, 0.0, GroupKind::Rotation, 16);
        let t = run_pipeline(&inst, &IterationConfig::new(4, true).unwrap()).unwrap();
        assert_eq!(t.losses.len(), 5);
        assert!(t.losses.iter().all(|&l| l <= 1e-8));
        let t = run_pipeline(&inst, &IterationConfig::new(4, false).unwrap()).unwrap();
        assert!(t.losses.is_empty());
        assert!(t.final_loss <= 1e-8);
    }

    #[test]
    fn noisy_pipeline_improves_on_initialization() {
        let inst = instance(300, 3, 0.5, 1.0, GroupKind::Orthogonal, 17);
        let t = run_pipeline(&inst, &IterationConfig::new(15, true).unwrap()).unwrap();
        assert!(t.final_loss < t.losses[0]);
        let theory = crate::theory::minimax_risk(300, 3, 0.5, 1.0);
        assert!(t.final_loss < 2.0 * theory, "{} vs {theory}", t.final_loss);
    }

    #[test]
    fn oracle_requires_noise_and_is_exact_without_it() {
        let inst = instance(20, 3, 1.0, 0.0, GroupKind::Orthogonal, 18);
        assert!(oracle_one_step(&inst).is_err());
        assert!(skew_projection_check(&inst).is_err());
        let out = oracle_errors(&inst).unwrap();
        assert!(out.errors.iter().all(|&e| e <= 1e-16));
        assert_eq!(out.flagged_count(), 0);
    }

    #[test]
    fn oracle_flags_isolated_nodes() {
        let inst = instance(40, 2, 0.02, 0.5, GroupKind::Orthogonal, 19);
        let out = oracle_one_step(&inst).unwrap();
        for i in 0..40 {
            assert_eq!(out.flagged[i], inst.degree(i) == 0);
            if out.flagged[i] {
                assert_eq!(out.errors[i], 8.0);
            }
        }
        assert!(out.mean_error().is_finite());
    }

    #[test]
    fn skew_part_has_zero_diagonal() {
        let inst = instance(100, 4, 0.5, 2.0, GroupKind::Rotation, 20);
        let s = skew_projection_check(&inst).unwrap();
        assert!(s.max_abs_diagonal <= 1e-12);
        assert_eq!(s.nodes_used, 100);
    }
}
