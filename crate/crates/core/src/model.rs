//! Synthetic synchronization instances.
//!
//! Ground truth is Haar distributed, each pair `i < j` is observed
//! independently with probability `p`, and an observed block is
//! `Y_ij = Z*_i Z*_j^T + sigma W_ij` with i.i.d. standard normal `W_ij`.
//! Only `Y_ij` for `i < j` is stored; the `(j, i)` position of the block
//! matrix holds `Y_ij^T`, which keeps the `nd x nd` assembly symmetric.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{GroupElementSet, GroupKind, Matrix};
use crate::rng::{self, streams};

/// Version tag written into exported instance documents.
pub const INSTANCE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncParams {
    pub n: usize,
    pub d: usize,
    pub p: f64,
    pub sigma: f64,
    pub group: GroupKind,
    pub seed: u64,
}

impl SyncParams {
    pub fn new(n: usize, d: usize, p: f64, sigma: f64, group: GroupKind, seed: u64) -> Result<Self> {
        let params = Self {
            n,
            d,
            p,
            sigma,
            group,
            seed,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("n", format!("n >= 2 required, got {}", self.n)));
        }
        if self.d < 2 {
            return Err(Error::invalid(
                "d",
                format!("d >= 2 required (d = 1 is excluded), got {}", self.d),
            ));
        }
        if !(self.p.is_finite() && self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid("p", format!("p in (0, 1] required, got {}", self.p)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(
                "sigma",
                format!("finite sigma >= 0 required, got {}", self.sigma),
            ));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Haar-random element of `O(d)`: QR of a Gaussian matrix with the signs of
/// `diag(R)` pushed into `Q`.
pub(crate) fn haar_orthogonal(rng: &mut impl Rng, d: usize) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for k in 0..d {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

pub fn sample_ground_truth(params: &SyncParams) -> Result<GroupElementSet> {
    params.validate()?;
    let d = params.d;
    let mut rng = rng::stream(params.seed, streams::TRUTH);
    let elements = (0..params.n)
        .map(|_| {
            let mut q = haar_orthogonal(&mut rng, d);
            if params.group == GroupKind::Rotation && q.determinant() < 0.0 {
                q.column_mut(d - 1).neg_mut();
            }
            q
        })
        .collect();
    Ok(GroupElementSet::from_parts(params.group, d, elements))
}

/// An observed synchronization problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncInstance {
    params: SyncParams,
    truth: GroupElementSet,
    edges: Vec<(u32, u32)>,
    /// Row-major `d x d` blocks, one per edge, in edge order.
    blocks: Vec<f64>,
    degree: Vec<usize>,
}

pub fn generate_instance(params: &SyncParams) -> Result<SyncInstance> {
    let truth = sample_ground_truth(params)?;
    let (n, d) = (params.n, params.d);

    let mut graph = rng::stream(params.seed, streams::GRAPH);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if graph.random::<f64>() < params.p {
                edges.push((i as u32, j as u32));
            }
        }
    }

    let mut noise = rng::stream(params.seed, streams::NOISE);
    let dd = d * d;
    let mut blocks = vec![0.0; edges.len() * dd];
    for (e, &(i, j)) in edges.iter().enumerate() {
        let zi = &truth.elements()[i as usize];
        let zj = &truth.elements()[j as usize];
        let signal = zi * zj.transpose();
        let block = &mut blocks[e * dd..(e + 1) * dd];
        for a in 0..d {
            for b in 0..d {
                block[a * d + b] = signal[(a, b)];
            }
        }
        if params.sigma > 0.0 {
            for v in block.iter_mut() {
                let w: f64 = noise.sample(StandardNormal);
                *v += params.sigma * w;
            }
        }
    }

    Ok(SyncInstance::from_parts(*params, truth, edges, blocks))
}

impl SyncInstance {
    fn from_parts(
        params: SyncParams,
        truth: GroupElementSet,
        edges: Vec<(u32, u32)>,
        blocks: Vec<f64>,
    ) -> Self {
        let mut degree = vec![0; params.n];
        for &(i, j) in &edges {
            degree[i as usize] += 1;
            degree[j as usize] += 1;
        }
        Self {
            params,
            truth,
            edges,
            blocks,
            degree,
        }
    }

    pub fn params(&self) -> &SyncParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn d(&self) -> usize {
        self.params.d
    }

    pub fn group(&self) -> GroupKind {
        self.params.group
    }

    pub fn truth(&self) -> &GroupElementSet {
        &self.truth
    }

    /// Observed pairs `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `sum_j A_ij`.
    pub fn degree(&self, i: usize) -> usize {
        self.degree[i]
    }

    /// The stored observation for edge `e` as a matrix.
    pub fn block(&self, e: usize) -> Matrix {
        let d = self.d();
        Matrix::from_row_slice(d, d, &self.blocks[e * d * d..(e + 1) * d * d])
    }

    /// `Y_ij` for an observed pair; `Y_ji = Y_ij^T`.
    pub fn observation(&self, i: usize, j: usize) -> Option<Matrix> {
        let (lo, hi, transpose) = if i < j { (i, j, false) } else { (j, i, true) };
        let e = self
            .edges
            .binary_search(&(lo as u32, hi as u32))
            .ok()?;
        let y = self.block(e);
        Some(if transpose { y.transpose() } else { y })
    }

    /// `out = M x` where `M = (A ⊗ 1 1^T) ∘ Y` (zero diagonal blocks) and `x`,
    /// `out` are row-major `nd x k`.
    pub fn apply_masked(&self, x: &[f64], k: usize, out: &mut [f64]) {
        let d = self.d();
        let n = self.n();
        assert_eq!(x.len(), n * d * k);
        assert_eq!(out.len(), n * d * k);
        out.iter_mut().for_each(|v| *v = 0.0);
        match (d, k) {
            (2, 2) => self.apply_fixed::<2, 2>(x, out),
            (3, 3) => self.apply_fixed::<3, 3>(x, out),
            (4, 4) => self.apply_fixed::<4, 4>(x, out),
            _ => self.apply_dyn(x, k, out),
        }
    }

    fn apply_dyn(&self, x: &[f64], k: usize, out: &mut [f64]) {
        let d = self.d();
        let dd = d * d;
        let bs = d * k;
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let y = &self.blocks[e * dd..(e + 1) * dd];
            let xi = &x[i * bs..(i + 1) * bs];
            let xj = &x[j * bs..(j + 1) * bs];
            // out_i += Y x_j
            {
                let oi = &mut out[i * bs..(i + 1) * bs];
                for a in 0..d {
                    for b in 0..d {
                        let yab = y[a * d + b];
                        let row = &xj[b * k..(b + 1) * k];
                        let dst = &mut oi[a * k..(a + 1) * k];
                        for c in 0..k {
                            dst[c] += yab * row[c];
                        }
                    }
                }
            }
            // out_j += Y^T x_i
            let oj = &mut out[j * bs..(j + 1) * bs];
            for a in 0..d {
                let row = &xi[a * k..(a + 1) * k];
                for b in 0..d {
                    let yab = y[a * d + b];
                    let dst = &mut oj[b * k..(b + 1) * k];
                    for c in 0..k {
                        dst[c] += yab * row[c];
                    }
                }
            }
        }
    }

    fn apply_fixed<const D: usize, const K: usize>(&self, x: &[f64], out: &mut [f64]) {
        let bs = D * K;
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let y: &[f64; 16] = &{
                let mut t = [0.0; 16];
                t[..D * D].copy_from_slice(&self.blocks[e * D * D..(e + 1) * D * D]);
                t
            };
            let mut xi = [0.0; 16];
            let mut xj = [0.0; 16];
            xi[..bs].copy_from_slice(&x[i * bs..(i + 1) * bs]);
            xj[..bs].copy_from_slice(&x[j * bs..(j + 1) * bs]);
            let mut acc_i = [0.0; 16];
            let mut acc_j = [0.0; 16];
            for a in 0..D {
                for b in 0..D {
                    let yab = y[a * D + b];
                    for c in 0..K {
                        acc_i[a * K + c] += yab * xj[b * K + c];
                        acc_j[b * K + c] += yab * xi[a * K + c];
                    }
                }
            }
            for (o, v) in out[i * bs..(i + 1) * bs].iter_mut().zip(&acc_i) {
                *o += v;
            }
            for (o, v) in out[j * bs..(j + 1) * bs].iter_mut().zip(&acc_j) {
                *o += v;
            }
        }
    }

    pub fn to_document(&self) -> InstanceDocument {
        let d = self.d();
        let row_major = |m: &Matrix| {
            let mut v = Vec::with_capacity(d * d);
            for a in 0..d {
                for b in 0..d {
                    v.push(m[(a, b)]);
                }
            }
            v
        };
        InstanceDocument {
            schema_version: INSTANCE_SCHEMA_VERSION,
            params: self.params,
            truth: self.truth.elements().iter().map(row_major).collect(),
            edges: self
                .edges
                .iter()
                .map(|&(i, j)| [i as usize, j as usize])
                .collect(),
            blocks: self
                .blocks
                .chunks(d * d)
                .map(|c| c.to_vec())
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: InstanceDocument = serde_json::from_str(s)?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: InstanceDocument) -> Result<Self> {
        if doc.schema_version != INSTANCE_SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        doc.params.validate()?;
        let (n, d) = (doc.params.n, doc.params.d);
        if doc.truth.len() != n || doc.truth.iter().any(|t| t.len() != d * d) {
            return Err(Error::Document(format!("truth must hold {n} blocks of {d}x{d}")));
        }
        let truth = GroupElementSet::new(
            doc.params.group,
            doc.truth
                .iter()
                .map(|t| Matrix::from_row_slice(d, d, t))
                .collect(),
        )?;
        if doc.edges.len() != doc.blocks.len() {
            return Err(Error::Document("edges and blocks differ in length".into()));
        }
        let mut edges = Vec::with_capacity(doc.edges.len());
        for &[i, j] in &doc.edges {
            if !(i < j && j < n) {
                return Err(Error::Document(format!("bad edge ({i}, {j})")));
            }
            edges.push((i as u32, j as u32));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Document("edges must be sorted and unique".into()));
        }
        let mut blocks = Vec::with_capacity(edges.len() * d * d);
        for b in &doc.blocks {
            if b.len() != d * d || !b.iter().all(|v| v.is_finite()) {
                return Err(Error::Document(format!("blocks must hold {} finite values", d * d)));
            }
            blocks.extend_from_slice(b);
        }
        Ok(Self::from_parts(doc.params, truth, edges, blocks))
    }
}

/// Self-describing JSON form of an instance, used for regression fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub schema_version: u32,
    pub params: SyncParams,
    /// Row-major ground truth blocks.
    pub truth: Vec<Vec<f64>>,
    /// Observed pairs `[i, j]`, `i < j`, sorted.
    pub edges: Vec<[usize; 2]>,
    /// Row-major `Y_ij`, one per edge.
    pub blocks: Vec<Vec<f64>>,
}

/// Dense `nd x nd` masked observation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    pub n: usize,
    pub d: usize,
    pub matrix: Matrix,
}

impl BlockMatrix {
    pub fn block(&self, i: usize, j: usize) -> Matrix {
        self.matrix
            .view((i * self.d, j * self.d), (self.d, self.d))
            .into_owned()
    }
}

/// Dense assembly of `(A ⊗ 1_d 1_d^T) ∘ Y`. Intended for small problems and
/// checks; the solvers use [`SyncInstance::apply_masked`].
pub fn assemble_masked_matrix(instance: &SyncInstance) -> BlockMatrix {
    let (n, d) = (instance.n(), instance.d());
    let mut m = Matrix::zeros(n * d, n * d);
    for (e, &(i, j)) in instance.edges().iter().enumerate() {
        let y = instance.block(e);
        let (i, j) = (i as usize, j as usize);
        m.view_mut((i * d, j * d), (d, d)).copy_from(&y);
        m.view_mut((j * d, i * d), (d, d)).copy_from(&y.transpose());
    }
    BlockMatrix { n, d, matrix: m }
}
