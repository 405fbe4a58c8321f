//! Polar factors, Procrustes alignment and the synchronization losses.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative threshold on `s_min / s_max` below which a matrix is treated as
/// singular by the polar projections.
pub const RANK_TOL: f64 = 1e-12;

/// Tolerance for group membership checks (`||Q^T Q - I||_F`, `|det - 1|`).
pub const MEMBERSHIP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    /// `O(d)`
    Orthogonal,
    /// `SO(d)`
    Rotation,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Orthogonal => "orthogonal",
            GroupKind::Rotation => "rotation",
        }
    }

    /// The nearest-element projection onto this group.
    pub fn project(self, x: &Matrix) -> Result<Matrix> {
        match self {
            GroupKind::Orthogonal => polar_factor(x),
            GroupKind::Rotation => special_polar_factor(x),
        }
    }
}

impl std::str::FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" | "O" | "o" => Ok(GroupKind::Orthogonal),
            "rotation" | "SO" | "so" => Ok(GroupKind::Rotation),
            other => Err(Error::invalid(
                "group",
                format!("expected `orthogonal` or `rotation`, got `{other}`"),
            )),
        }
    }
}

pub(crate) struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v_t: Matrix,
}

impl Svd {
    fn argmin_singular(&self) -> usize {
        let mut k = 0;
        for (i, &v) in self.s.iter().enumerate() {
            if v < self.s[k] {
                k = i;
            }
        }
        k
    }
}

/// One-sided Jacobi SVD, singular values descending.
///
/// Column pairs of a working copy of `X` are rotated until mutually
/// orthogonal; the rotations accumulate into `V` and the column norms are the
/// singular values. This stays accurate for nearly rank-deficient input,
/// which matters because Procrustes alignment routinely sees such matrices.
pub(crate) fn svd(x: &Matrix) -> Svd {
    let (rows, d) = x.shape();
    let mut w = x.clone();
    let mut v = Matrix::identity(d, d);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut w, &mut v] {
                    for r in 0..m.nrows() {
                        let (a, b) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * a - s * b;
                        m[(r, q)] = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..d).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    // Normalize and re-orthogonalize in descending order; zero columns are
    // completed from the standard basis.
    let mut u = Matrix::zeros(rows, d);
    for (k, &j) in order.iter().enumerate() {
        let mut col = if norms[j] > 0.0 {
            w.column(j) / norms[j]
        } else {
            nalgebra::DVector::zeros(rows)
        };
        let mut candidates = (0..rows).map(|e| {
            let mut b = nalgebra::DVector::zeros(rows);
            b[e] = 1.0;
            b
        });
        loop {
            for _ in 0..2 {
                for i in 0..k {
                    let proj = u.column(i).dot(&col);
                    col -= u.column(i) * proj;
                }
            }
            let nrm = col.norm();
            if nrm > 0.5 {
                col /= nrm;
                break;
            }
            col = candidates.next().expect("basis completion");
        }
        u.set_column(k, &col);
    }
    let v_sorted = Matrix::from_fn(d, d, |r, c| v[(r, order[c])]);
    Svd {
        u,
        s: order.iter().map(|&j| norms[j]).collect(),
        v_t: v_sorted.transpose(),
    }
}

/// `X = U diag(s) V^T` with `s` descending.
pub fn singular_value_decomposition(x: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let dec = svd(x);
    (dec.u, dec.s, dec.v_t)
}

fn full_rank_svd(x: &Matrix) -> Result<Svd> {
    assert!(x.is_square(), "polar projections need a square matrix");
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let dec = svd(x);
    let smax = dec.s.iter().copied().fold(0.0, f64::max);
    let smin = dec.s.iter().copied().fold(f64::INFINITY, f64::min);
    if smax <= 0.0 {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    if smin <= RANK_TOL * smax {
        return Err(Error::RankDeficient { ratio: smin / smax });
    }
    Ok(dec)
}

/// The orthogonal polar factor `U V^T` of `X = U D V^T`, i.e. the element of
/// `O(d)` closest to `X` in Frobenius norm.
pub fn polar_factor(x: &Matrix) -> Result<Matrix> {
    let dec = full_rank_svd(x)?;
    Ok(&dec.u * &dec.v_t)
}

/// The element of `SO(d)` closest to `X`.
///
/// When `det(U V^T) = -1` the sign flip is placed on the singular pair with the
/// smallest singular value, which is what makes the result the Frobenius
/// minimizer over rotations. For `det(X) > 0` this is exactly
/// [`polar_factor`].
pub fn special_polar_factor(x: &Matrix) -> Result<Matrix> {
    let mut dec = full_rank_svd(x)?;
    let det = dec.u.determinant() * dec.v_t.determinant();
    if det < 0.0 {
        let k = dec.argmin_singular();
        dec.u.column_mut(k).neg_mut();
    }
    Ok(&dec.u * &dec.v_t)
}

pub fn orthogonality_residual(q: &Matrix) -> f64 {
    let id = Matrix::identity(q.nrows(), q.ncols());
    let a = (q.transpose() * q - &id).norm();
    let b = (q * q.transpose() - &id).norm();
    a.max(b)
}

pub fn is_orthogonal(q: &Matrix, tol: f64) -> bool {
    q.is_square() && orthogonality_residual(q) <= tol
}

pub fn is_rotation(q: &Matrix, tol: f64) -> bool {
    is_orthogonal(q, tol) && (q.determinant() - 1.0).abs() <= tol
}

/// `n` elements of `O(d)` or `SO(d)`: a ground truth, an iterate or an
/// estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElementSet {
    kind: GroupKind,
    d: usize,
    elements: Vec<Matrix>,
}

impl GroupElementSet {
    /// Checks every element against the membership tolerance of `kind`.
    pub fn new(kind: GroupKind, elements: Vec<Matrix>) -> Result<Self> {
        let d = elements
            .first()
            .map(|m| m.nrows())
            .ok_or_else(|| Error::invalid("elements", "at least one element required"))?;
        for (i, m) in elements.iter().enumerate() {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::invalid(
                    "elements",
                    format!("element {i} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols()),
                ));
            }
            let ok = match kind {
                GroupKind::Orthogonal => is_orthogonal(m, MEMBERSHIP_TOL),
                GroupKind::Rotation => is_rotation(m, MEMBERSHIP_TOL),
            };
            if !ok {
                return Err(Error::invalid(
                    "elements",
                    format!("element {i} is not in the {} group", kind.as_str()),
                ));
            }
        }
        Ok(Self { kind, d, elements })
    }

    pub(crate) fn from_parts(kind: GroupKind, d: usize, elements: Vec<Matrix>) -> Self {
        debug_assert!(elements.iter().all(|m| m.nrows() == d && m.ncols() == d));
        Self { kind, d, elements }
    }

    pub fn identity(kind: GroupKind, n: usize, d: usize) -> Self {
        Self::from_parts(kind, d, vec![Matrix::identity(d, d); n])
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.elements.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn elements(&self) -> &[Matrix] {
        &self.elements
    }

    pub fn into_elements(self) -> Vec<Matrix> {
        self.elements
    }

    /// Every element multiplied on the right by `r`.
    pub fn right_mul(&self, r: &Matrix) -> Self {
        Self::from_parts(
            self.kind,
            self.d,
            self.elements.iter().map(|z| z * r).collect(),
        )
    }

    /// Row-major `nd x d` stacking `(Z_1; ...; Z_n)`.
    pub fn stacked(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; self.n() * d * d];
        for (i, z) in self.elements.iter().enumerate() {
            for a in 0..d {
                for b in 0..d {
                    out[(i * d + a) * d + b] = z[(a, b)];
                }
            }
        }
        out
    }

    /// Largest membership residual across elements (orthogonality, plus
    /// `|det - 1|` for rotations).
    pub fn max_membership_residual(&self) -> f64 {
        self.elements
            .iter()
            .map(|m| {
                let r = orthogonality_residual(m);
                match self.kind {
                    GroupKind::Orthogonal => r,
                    GroupKind::Rotation => r.max((m.determinant() - 1.0).abs()),
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `M = (1/n) sum_i Z_i^T Z*_i`.
fn cross_moment(z: &[Matrix], zstar: &[Matrix]) -> Matrix {
    assert_eq!(z.len(), zstar.len(), "element counts differ");
    assert!(!z.is_empty(), "empty element sets");
    let d = z[0].ncols();
    let mut m = Matrix::zeros(d, d);
    for (a, b) in z.iter().zip(zstar) {
        m.gemm_tr(1.0, a, b, 1.0);
    }
    m / z.len() as f64
}

/// Maximizer of `Tr(M B)` over the group, returned with the maximum.
fn trace_maximizer(m: &Matrix, kind: GroupKind) -> (Matrix, f64) {
    let dec = svd(m);
    let mut v = dec.v_t.transpose();
    let mut s = dec.s.clone();
    if kind == GroupKind::Rotation && dec.u.determinant() * v.determinant() < 0.0 {
        let k = dec.argmin_singular();
        v.column_mut(k).neg_mut();
        s[k] = -s[k];
    }
    let b = v * dec.u.transpose();
    (b, s.iter().sum())
}

/// Procrustes alignment over raw blocks. Works for any blocks with
/// `sum_i ||Z_i||_F^2 = n d` (group elements or scaled Stiefel columns).
pub fn align_blocks(z: &[Matrix], zstar: &[Matrix], kind: GroupKind) -> Matrix {
    trace_maximizer(&cross_moment(z, zstar), kind).0
}

/// `min_B (1/n) sum_i ||Z_i - Z*_i B||_F^2` via `2 (d - max_B Tr(M B))`.
pub fn loss_blocks(z: &[Matrix], zstar: &[Matrix], kind: GroupKind) -> f64 {
    let m = cross_moment(z, zstar);
    let d = m.nrows() as f64;
    let (_, t) = trace_maximizer(&m, kind);
    (2.0 * (d - t)).max(0.0)
}

/// `(1/n^2) sum_{i,j} ||Z_i Z_j^T - Z*_i Z*_j^T||_F^2` via
/// `2 (d - ||M||_F^2)`.
pub fn pairwise_loss_blocks(z: &[Matrix], zstar: &[Matrix]) -> f64 {
    let m = cross_moment(z, zstar);
    let d = m.nrows() as f64;
    (2.0 * (d - m.norm_squared())).max(0.0)
}

/// The global group element `B` with `Z*_i B` closest to `Z_i` on average.
pub fn align(z: &GroupElementSet, zstar: &GroupElementSet, kind: GroupKind) -> Matrix {
    check_compatible(z, zstar);
    align_blocks(z.elements(), zstar.elements(), kind)
}

/// Synchronization loss modulo the global group ambiguity. Always in
/// `[0, 4d]`.
pub fn loss(z: &GroupElementSet, zstar: &GroupElementSet, kind: GroupKind) -> f64 {
    check_compatible(z, zstar);
    loss_blocks(z.elements(), zstar.elements(), kind)
}

pub fn pairwise_loss(z: &GroupElementSet, zstar: &GroupElementSet) -> f64 {
    check_compatible(z, zstar);
    pairwise_loss_blocks(z.elements(), zstar.elements())
}

fn check_compatible(z: &GroupElementSet, zstar: &GroupElementSet) {
    assert_eq!(z.n(), zstar.n(), "element counts differ");
    assert_eq!(z.d(), zstar.d(), "dimensions differ");
}
