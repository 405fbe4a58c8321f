//! The smoothly parametrized rotation `Q(r)` behind the lower bound, its
//! prior, and the van Trees information quantities.
//!
//! `Q(r)` has the free parameters `r_ab` above the diagonal and solved
//! entries `s_ab` on and below it:
//!
//! ```text
//!     [ s11  r12  r13 ... r1d ]
//!     [ s21  s22  r23 ... r2d ]
//!     [ ...                   ]
//!     [ sd1  sd2  ...     sdd ]
//! ```
//!
//! Row `k` is found from rows `1..k-1`: orthogonality to each earlier row is
//! linear in `(s_k1, ..., s_k,k-1)` given `s_kk`, and the unit-norm condition
//! then gives a quadratic in `s_kk` whose larger root is kept.
//!
//! Vectorization is column-major throughout: entry `(u, v)` of a `d x d`
//! matrix sits at index `u + v d`.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::group::{orthogonality_residual, Matrix};
use crate::rng::{self, streams, StreamRng};
use crate::theory;

/// Finite-difference step for the Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Relative tolerance of the exact trace identity.
pub const IDENTITY_RTOL: f64 = 1e-6;

/// Half-width `1 / (8 d^{5/2})` of the parameter box.
pub fn prior_radius(d: usize) -> f64 {
    1.0 / (8.0 * (d as f64).powf(2.5))
}

/// Number of free parameters, `d (d-1) / 2`.
pub fn parameter_count(d: usize) -> usize {
    d * (d - 1) / 2
}

/// Row-major enumeration of the pairs `(a, b)`, `a < b`.
pub fn parameter_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d)
        .flat_map(|a| (a + 1..d).map(move |b| (a, b)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorParams {
    d: usize,
    r: Vec<f64>,
}

impl PriorParams {
    /// `r` is listed in [`parameter_pairs`] order and must lie in the box
    /// `max |r_ab| <= 1 / (8 d^{5/2})`.
    pub fn new(d: usize, r: Vec<f64>) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid("d", "d >= 2 required"));
        }
        if r.len() != parameter_count(d) {
            return Err(Error::invalid(
                "r",
                format!("expected {} parameters, got {}", parameter_count(d), r.len()),
            ));
        }
        let radius = prior_radius(d);
        if let Some(x) = r.iter().find(|x| !x.is_finite() || x.abs() > radius) {
            return Err(Error::InfeasibleParams(format!(
                "|r| = {x} exceeds the box radius {radius}"
            )));
        }
        Ok(Self { d, r })
    }

    pub fn zero(d: usize) -> Self {
        Self {
            d,
            r: vec![0.0; parameter_count(d)],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.r
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        assert!(a < b && b < self.d, "need a < b < d");
        self.r[pair_index(self.d, a, b)]
    }
}

fn pair_index(d: usize, a: usize, b: usize) -> usize {
    // pairs before row a: sum_{i<a} (d-1-i)
    a * (2 * d - a - 1) / 2 + (b - a - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorRotation {
    pub params: PriorParams,
    pub q: Matrix,
    /// Entries on and below the diagonal, row-major: `s11, s21, s22, s31, ...`.
    pub s: Vec<f64>,
}

impl PriorRotation {
    pub fn s(&self, a: usize, b: usize) -> f64 {
        assert!(b <= a && a < self.params.d, "need b <= a < d");
        self.s[a * (a + 1) / 2 + b]
    }

    pub fn min_diagonal(&self) -> f64 {
        (0..self.params.d).map(|a| self.s(a, a)).fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_below_diagonal(&self) -> f64 {
        let d = self.params.d;
        (0..d)
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .map(|(a, b)| self.s(a, b).abs())
            .fold(0.0, f64::max)
    }
}

/// Solve the row recursion for an arbitrary `r` (no box check).
fn solve_q(d: usize, r: &[f64]) -> Result<Matrix> {
    let mut q = Matrix::zeros(d, d);
    for (l, (a, b)) in parameter_pairs(d).into_iter().enumerate() {
        q[(a, b)] = r[l];
    }
    let head: f64 = 1.0 - (1..d).map(|b| q[(0, b)] * q[(0, b)]).sum::<f64>();
    if !(head > 0.0) {
        return Err(Error::InfeasibleParams("first row has norm >= 1".into()));
    }
    q[(0, 0)] = head.sqrt();

    for k in 1..d {
        let qk = q.view((0, 0), (k, k)).into_owned();
        let rk = DVector::from_fn(k, |a, _| q[(a, k)]);
        let v = DVector::from_fn(k, |a, _| (k + 1..d).map(|c| q[(a, c)] * q[(k, c)]).sum());
        let rho: f64 = (k + 1..d).map(|c| q[(k, c)] * q[(k, c)]).sum();

        let lu = qk.lu();
        let (alpha, beta) = match (lu.solve(&rk), lu.solve(&v)) {
            (Some(x), Some(y)) if x.iter().chain(y.iter()).all(|t| t.is_finite()) => (-x, -y),
            _ => {
                return Err(Error::InfeasibleParams(format!(
                    "leading {k}x{k} block is singular"
                )))
            }
        };
        // (1 + |alpha|^2) s^2 + 2 (alpha . beta) s + (|beta|^2 - 1 + rho) = 0
        let qa = 1.0 + alpha.norm_squared();
        let qb = 2.0 * alpha.dot(&beta);
        let qc = beta.norm_squared() - 1.0 + rho;
        let disc = qb * qb - 4.0 * qa * qc;
        if !(disc > 0.0) {
            return Err(Error::InfeasibleParams(format!(
                "row {}: quadratic has no two real roots (discriminant {disc:.3e})",
                k + 1
            )));
        }
        let skk = (-qb + disc.sqrt()) / (2.0 * qa);
        for b in 0..k {
            q[(k, b)] = skk * alpha[b] + beta[b];
        }
        q[(k, k)] = skk;
    }
    Ok(q)
}

fn lower_entries(q: &Matrix) -> Vec<f64> {
    let d = q.nrows();
    (0..d).flat_map(|a| (0..=a).map(move |b| (a, b))).map(|(a, b)| q[(a, b)]).collect()
}

/// Build `Q(r)`.
pub fn construct_q(params: &PriorParams) -> Result<PriorRotation> {
    let q = solve_q(params.d, &params.r)?;
    Ok(PriorRotation {
        s: lower_entries(&q),
        params: params.clone(),
        q,
    })
}

fn vec_col_major(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    m.iter().copied()
}

/// `G = d vec(Q(r)) / d r` by central differences with step `h`; one row per
/// parameter. The stencil may step up to `h` outside the box, which the
/// recursion tolerates.
pub fn jacobian_q_with_step(params: &PriorParams, h: f64) -> Result<Matrix> {
    let d = params.d;
    let m = parameter_count(d);
    let mut g = Matrix::zeros(m, d * d);
    let mut r = params.r.clone();
    for l in 0..m {
        let base = r[l];
        r[l] = base + h;
        let plus = solve_q(d, &r)?;
        r[l] = base - h;
        let minus = solve_q(d, &r)?;
        r[l] = base;
        for (c, (p, q)) in vec_col_major(&plus).zip(vec_col_major(&minus)).enumerate() {
            g[(l, c)] = (p - q) / (2.0 * h);
        }
    }
    Ok(g)
}

pub fn jacobian_q(params: &PriorParams) -> Result<Matrix> {
    jacobian_q_with_step(params, JACOBIAN_STEP)
}

/// `max_{(a,b), u} sqrt(sum_{v <= u} (d s_uv / d r_ab)^2)` read off a Jacobian.
pub fn max_derivative_norm(g: &Matrix, d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..g.nrows() {
        for u in 0..d {
            let ss: f64 = (0..=u).map(|v| g[(l, u + v * d)].powi(2)).sum();
            worst = worst.max(ss.sqrt());
        }
    }
    worst
}

/// Worst-case margins of the structural guarantees on `Q(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriorCheck {
    pub orthonormality_residual: f64,
    pub determinant: f64,
    pub min_diagonal: f64,
    pub max_below_diagonal: f64,
    pub max_derivative_norm: f64,
}

impl PriorCheck {
    pub const MIN_DIAGONAL: f64 = 7.0 / 8.0;
    pub const MAX_DERIVATIVE_NORM: f64 = 5.0;

    pub fn max_below_diagonal_bound(d: usize) -> f64 {
        1.0 / (4.0 * (d * d) as f64)
    }

    /// Every conclusion with the fixed tolerances: orthonormality and
    /// determinant `1e-10`, entry bounds `1e-9`, derivative bound `1e-3`.
    pub fn passes(&self, d: usize) -> bool {
        self.orthonormality_residual <= 1e-10
            && (self.determinant - 1.0).abs() <= 1e-10
            && self.min_diagonal >= Self::MIN_DIAGONAL - 1e-9
            && self.max_below_diagonal <= Self::max_below_diagonal_bound(d) + 1e-9
            && self.max_derivative_norm <= Self::MAX_DERIVATIVE_NORM + 1e-3
    }
}

pub fn check_prior_rotation(params: &PriorParams) -> Result<PriorCheck> {
    let rot = construct_q(params)?;
    let g = jacobian_q(params)?;
    Ok(PriorCheck {
        orthonormality_residual: orthogonality_residual(&rot.q),
        determinant: rot.q.determinant(),
        min_diagonal: rot.min_diagonal(),
        max_below_diagonal: rot.max_abs_below_diagonal(),
        max_derivative_norm: max_derivative_norm(&g, params.d),
    })
}

/// Unnormalized prior `exp(-1 / (1 - 64 d^5 t^2))` on `|t| < 1 / (8 d^{5/2})`.
pub fn prior_density(t: f64, d: usize) -> f64 {
    let u = t / prior_radius(d);
    let gap = 1.0 - u * u;
    if gap <= 0.0 || !gap.is_finite() {
        0.0
    } else {
        (-1.0 / gap).exp()
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson_rec(
    f: &impl Fn(f64) -> f64,
    (a, b): (f64, f64),
    (fa, fm, fb): (f64, f64, f64),
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson_rec(f, (a, m), (fa, flm, fm), left, tol / 2.0, depth - 1)
        + adaptive_simpson_rec(f, (m, b), (fm, frm, fb), right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive_simpson_rec(&f, (a, b), (fa, fm, fb), whole, tol, 48)
}

/// `int mu(t) dt` over the support.
pub fn prior_normalization(d: usize) -> f64 {
    let c = prior_radius(d);
    // exp(-1) * 2c bounds the integral; ask for ~1e-12 relative accuracy.
    integrate(|t| prior_density(t, d), -c, c, 1e-12 * 2.0 * c)
}

/// Rejection sampler for independent prior coordinates: uniform proposals on
/// the support, accepted with probability `mu(t) / exp(-1)`.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    d: usize,
    rng: StreamRng,
    proposals: u64,
    accepted: u64,
}

impl PriorSampler {
    pub fn new(d: usize, seed: u64) -> Self {
        Self {
            d,
            rng: rng::stream(seed, streams::PRIOR),
            proposals: 0,
            accepted: 0,
        }
    }

    pub fn coordinate(&mut self) -> f64 {
        let c = prior_radius(self.d);
        loop {
            self.proposals += 1;
            let t = c * (2.0 * self.rng.random::<f64>() - 1.0);
            let accept = prior_density(t, self.d) * std::f64::consts::E;
            if self.rng.random::<f64>() < accept {
                self.accepted += 1;
                return t;
            }
        }
    }

    pub fn draw(&mut self) -> PriorParams {
        let r = (0..parameter_count(self.d)).map(|_| self.coordinate()).collect();
        PriorParams { d: self.d, r }
    }

    pub fn proposals(&self) -> u64 {
        self.proposals
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }
}

/// One prior draw, deterministic in `seed`.
pub fn sample_prior(d: usize, seed: u64) -> PriorParams {
    PriorSampler::new(d, seed).draw()
}

/// The `(r, r')` pair used by draw `index` of [`vantrees_estimate`].
pub fn prior_pair(d: usize, seed: u64, index: u64) -> (PriorParams, PriorParams) {
    let mut sampler = PriorSampler::new(d, rng::derive_seed(seed, index));
    let r = sampler.draw();
    (r, sampler.draw())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InformationBundle {
    pub d: usize,
    pub n: usize,
    pub p: f64,
    pub sigma: f64,
    /// `d(d-1)/2 x d^2`
    pub g1: Matrix,
    pub g2: Matrix,
    /// `d(d-1) x d(d-1)`
    pub b1: Matrix,
    pub b2: Matrix,
    /// `d^2 x d(d-1)`: derivative of `vec(Z1 Z2^T)` in `(r, r')`.
    pub f: Matrix,
    /// `Tr(F (B1 + B2)^{-1} F^T)`
    pub trace_j: f64,
    /// `Tr(F B2^{-1} F^T)`, checked against its closed form.
    pub identity_value: f64,
}

fn check_information_args(n: usize, p: f64, sigma: f64) -> Result<()> {
    if n < 3 {
        return Err(Error::invalid("n", "n >= 3 required"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("p", "0 < p <= 1 required"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", "sigma > 0 required"));
    }
    Ok(())
}

/// `Tr(A X^{-1} A^T)` for symmetric positive definite `X`.
fn trace_quadratic(a: &Matrix, x: &Matrix) -> Option<f64> {
    let chol = x.clone().cholesky()?;
    let sol = chol.solve(&a.transpose());
    Some(a.component_mul(&sol.transpose()).sum())
}

/// Information matrices for the two-node sub-problem at `(r, r')`.
///
/// `F`'s first block is `(Z2 (x) I) G1^T`. Its second block holds
/// `vec(Z1 (dZ2/dr'_l)^T)`, the derivative of `vec(Z1 Z2^T)` in `r'`;
/// `(I (x) Z1) G2^T` would instead differentiate `vec(Z1 Z2)`.
pub fn information_bundle(
    n: usize,
    p: f64,
    sigma: f64,
    r: &PriorParams,
    rprime: &PriorParams,
) -> Result<InformationBundle> {
    check_information_args(n, p, sigma)?;
    if r.d != rprime.d {
        return Err(Error::invalid("rprime", "r and r' must share d"));
    }
    let d = r.d;
    let m = parameter_count(d);
    let z1 = construct_q(r)?.q;
    let z2 = construct_q(rprime)?.q;
    let g1 = jacobian_q(r)?;
    let g2 = jacobian_q(rprime)?;

    let scale1 = p / (sigma * sigma);
    let scale2 = (n as f64 - 2.0) * p / (sigma * sigma);
    let g11 = &g1 * g1.transpose();
    let g12 = &g1 * g2.transpose();
    let g22 = &g2 * g2.transpose();

    let mut b1 = Matrix::zeros(2 * m, 2 * m);
    b1.view_mut((0, 0), (m, m)).copy_from(&(&g11 * scale1));
    b1.view_mut((0, m), (m, m)).copy_from(&(&g12 * scale1));
    b1.view_mut((m, 0), (m, m)).copy_from(&(g12.transpose() * scale1));
    b1.view_mut((m, m), (m, m)).copy_from(&(&g22 * scale1));
    let mut b2 = Matrix::zeros(2 * m, 2 * m);
    b2.view_mut((0, 0), (m, m)).copy_from(&(&g11 * scale2));
    b2.view_mut((m, m), (m, m)).copy_from(&(&g22 * scale2));

    let mut f = Matrix::zeros(d * d, 2 * m);
    let eye = Matrix::identity(d, d);
    let left = z2.kronecker(&eye) * g1.transpose();
    f.view_mut((0, 0), (d * d, m)).copy_from(&left);
    for l in 0..m {
        let dz2 = Matrix::from_column_slice(d, d, g2.row(l).transpose().as_slice());
        let col = &z1 * dz2.transpose();
        f.column_mut(m + l).copy_from_slice(col.as_slice());
    }

    let singular = || Error::InfeasibleParams("information matrix is not positive definite".into());
    let identity_value = trace_quadratic(&f, &b2).ok_or_else(singular)?;
    let expected = theory::information_identity(n, d, p, sigma);
    if !((identity_value - expected).abs() <= IDENTITY_RTOL * expected) {
        return Err(Error::IdentityViolation {
            computed: identity_value,
            expected,
        });
    }
    let trace_j = trace_quadratic(&f, &(&b1 + &b2)).ok_or_else(singular)?;

    Ok(InformationBundle {
        d,
        n,
        p,
        sigma,
        g1,
        g2,
        b1,
        b2,
        f,
        trace_j,
        identity_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VanTreesEstimate {
    /// Monte Carlo mean of `Tr(J(r, r'))` over prior draws.
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    /// `sigma^2 d (d-1) / ((n-2) p)`, the value of `Tr(F B2^{-1} F^T)`.
    pub identity_value: f64,
}

/// Average of `Tr(J)` over `samples` independent prior pairs. Draw `k` uses
/// [`prior_pair`]`(d, seed, k)`.
pub fn vantrees_estimate(
    n: usize,
    p: f64,
    sigma: f64,
    d: usize,
    samples: usize,
    seed: u64,
) -> Result<VanTreesEstimate> {
    check_information_args(n, p, sigma)?;
    if d < 2 {
        return Err(Error::invalid("d", "d >= 2 required"));
    }
    if samples == 0 {
        return Err(Error::invalid("samples", "samples >= 1 required"));
    }
    let traces = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let (r, rp) = prior_pair(d, seed, k);
            information_bundle(n, p, sigma, &r, &rp).map(|b| b.trace_j)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std_error) = mean_and_stderr(&traces);
    Ok(VanTreesEstimate {
        mean,
        std_error,
        samples,
        identity_value: theory::information_identity(n, d, p, sigma),
    })
}

pub(crate) fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}
