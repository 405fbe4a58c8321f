#![allow(dead_code)]

use groupsync_core::{GroupKind, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

/// Haar element of `O(d)` via Gram–Schmidt on a Gaussian matrix.
pub fn haar(r: &mut impl Rng, d: usize) -> Matrix {
    let g = gaussian(r, d, d);
    let mut q = Matrix::zeros(d, d);
    for j in 0..d {
        let mut v = g.column(j).into_owned();
        for k in 0..j {
            let proj = q.column(k).dot(&v);
            v -= q.column(k) * proj;
        }
        let norm = v.norm();
        q.set_column(j, &(v / norm));
    }
    q
}

pub fn element(r: &mut impl Rng, d: usize, kind: GroupKind) -> Matrix {
    let mut q = haar(r, d);
    if kind == GroupKind::Rotation && q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

pub fn elements(r: &mut impl Rng, n: usize, d: usize, kind: GroupKind) -> Vec<Matrix> {
    (0..n).map(|_| element(r, d, kind)).collect()
}

pub fn rot2(t: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()])
}

pub fn refl2(t: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[t.cos(), t.sin(), t.sin(), -t.cos()])
}

pub fn smallest_singular_value(x: &Matrix) -> f64 {
    let (_, s, _) = groupsync_core::group::singular_value_decomposition(x);
    s[s.len() - 1]
}

/// `(1/n^2) sum_{i,j} ||Z_i Z_j^T - Z*_i Z*_j^T||^2` by direct summation.
pub fn pairwise_double_sum(z: &[Matrix], zs: &[Matrix]) -> f64 {
    let n = z.len() as f64;
    let mut total = 0.0;
    for i in 0..z.len() {
        for j in 0..z.len() {
            total += (&z[i] * z[j].transpose() - &zs[i] * zs[j].transpose()).norm_squared();
        }
    }
    total / (n * n)
}

/// `(1/n) sum_i ||Z_i - Z*_i B||^2` by direct summation.
pub fn aligned_error(z: &[Matrix], zs: &[Matrix], b: &Matrix) -> f64 {
    z.iter().zip(zs).map(|(a, s)| (a - s * b).norm_squared()).sum::<f64>() / z.len() as f64
}

/// `Tr(A X^{-1} A^T)` through an LU solve.
pub fn trace_quadratic(a: &Matrix, x: &Matrix) -> f64 {
    let sol = x.clone().lu().solve(&a.transpose()).expect("singular");
    (a * sol).trace()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
