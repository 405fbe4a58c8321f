//! Leading invariant subspace of a symmetric operator given only through
//! block products.
//!
//! Block subspace iteration with Rayleigh–Ritz extraction. The block is
//! oversampled past the requested count so repeated or clustered leading
//! eigenvalues (the noiseless synchronization matrix has one of multiplicity
//! `d`) do not stall convergence. Subspace iteration captures the eigenvalues
//! of largest magnitude; if the converged block shows negative eigenvalues
//! competing with the targets, the operator is shifted and iteration resumes,
//! so the returned pairs are the algebraically largest.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::group::Matrix;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Relative residual `||M x - theta x|| / max|theta|` required of every
    /// returned pair.
    pub tol: f64,
    pub max_iters: usize,
    /// Extra block columns beyond the requested count.
    pub oversample: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 3000,
            oversample: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpairs {
    /// Descending.
    pub values: Vec<f64>,
    /// Row-major `dim x count`, orthonormal columns.
    pub vectors: Vec<f64>,
    pub iterations: usize,
}

/// Below this size the operator is densified and diagonalized directly.
const DENSE_LIMIT: usize = 64;

fn to_matrix(rows: usize, cols: usize, row_major: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, row_major)
}

fn to_row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn sorted_eigen(h: Matrix) -> (Vec<f64>, Matrix) {
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn orthonormalize(m: Matrix) -> Matrix {
    m.qr().q()
}

/// The `count` algebraically largest eigenpairs of the symmetric operator
/// `apply(x, k, out)` acting on row-major `dim x k` blocks.
pub fn top_eigenpairs<F>(
    dim: usize,
    count: usize,
    apply: F,
    rng: &mut StreamRng,
    opts: EigenOptions,
) -> Result<Eigenpairs>
where
    F: Fn(&[f64], usize, &mut [f64]),
{
    assert!(count >= 1 && count <= dim, "need 1 <= count <= dim");
    if dim <= DENSE_LIMIT {
        return dense_top(dim, count, &apply);
    }

    let k = (count + opts.oversample.max(count)).min(dim);
    let start = Matrix::from_fn(dim, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = to_row_major(&orthonormalize(start));
    let mut w = vec![0.0; dim * k];
    let mut shift = 0.0;
    let mut last_residual = f64::INFINITY;

    for iter in 1..=opts.max_iters {
        apply(&q, k, &mut w);
        if shift != 0.0 {
            for (wv, qv) in w.iter_mut().zip(&q) {
                *wv += shift * qv;
            }
        }
        let qm = to_matrix(dim, k, &q);
        let wm = to_matrix(dim, k, &w);
        let mut h = qm.transpose() * &wm;
        h = (&h + h.transpose()) * 0.5;
        let (theta, s) = sorted_eigen(h);

        let x = &qm * &s;
        let ws = &wm * &s;
        let scale = theta
            .iter()
            .map(|t| (t - shift).abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut residual: f64 = 0.0;
        for j in 0..count {
            let r = (ws.column(j) - x.column(j) * theta[j]).norm();
            residual = residual.max(r / scale);
        }
        last_residual = residual;

        if residual <= opts.tol {
            // Ritz values of the shifted operator; the block holds the k
            // eigenvalues of largest magnitude. If negative ones rival the
            // targets, shift them away and keep iterating.
            let most_negative = theta[k - 1];
            if most_negative < 0.0 && -most_negative >= theta[count - 1] {
                // Restart from a fresh random block: the current one is an
                // invariant subspace of the shifted operator and would pass
                // the residual test immediately.
                shift += -most_negative * 1.05;
                let start = Matrix::from_fn(dim, k, |_, _| rng.sample::<f64, _>(StandardNormal));
                q = to_row_major(&orthonormalize(start));
                continue;
            }
            let values = theta[..count].iter().map(|t| t - shift).collect();
            let vectors = to_row_major(&x.columns(0, count).into_owned());
            return Ok(Eigenpairs {
                values,
                vectors,
                iterations: iter,
            });
        }
        q = to_row_major(&orthonormalize(ws));
    }
    Err(Error::EigenFailure {
        iterations: opts.max_iters,
        residual: last_residual,
    })
}

fn dense_top<F>(dim: usize, count: usize, apply: &F) -> Result<Eigenpairs>
where
    F: Fn(&[f64], usize, &mut [f64]),
{
    let id = to_row_major(&Matrix::identity(dim, dim));
    let mut out = vec![0.0; dim * dim];
    apply(&id, dim, &mut out);
    let m = to_matrix(dim, dim, &out);
    let m = (&m + m.transpose()) * 0.5;
    let (values, vectors) = sorted_eigen(m);
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::EigenFailure {
            iterations: 0,
            residual: f64::NAN,
        });
    }
    Ok(Eigenpairs {
        values: values[..count].to_vec(),
        vectors: to_row_major(&vectors.columns(0, count).into_owned()),
        iterations: 0,
    })
}
