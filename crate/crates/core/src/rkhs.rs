//! Reproducing kernels and dual potentials in representer form
//! `g(x) = Σ_k α_k κ(s_k, x)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / (2 bandwidth^2))`.
    Gaussian { bandwidth: f64 },
    /// `(x·y + offset)^degree`.
    Polynomial { degree: u32, offset: f64 },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Self {
        Self::Gaussian { bandwidth }
    }

    pub fn polynomial(degree: u32, offset: f64) -> Self {
        Self::Polynomial { degree, offset }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                Error::InvalidArgument(format!("gaussian bandwidth must be > 0, got {bandwidth}")),
            ),
            Self::Polynomial { degree: 0, .. } => {
                Err(Error::InvalidArgument("polynomial degree must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Self::Gaussian { bandwidth } => {
                let mut d2 = 0.0;
                for (a, b) in x.iter().zip(y) {
                    let r = a - b;
                    d2 += r * r;
                }
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            Self::Polynomial { degree, offset } => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                (dot + offset).powi(degree as i32)
            }
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(spec.eval_unchecked(x, y))
}

fn row_slice<'a>(m: &'a ArrayView2<'_, f64>, i: usize) -> &'a [f64] {
    m.row(i).to_slice().expect("points must be in standard layout")
}

/// Kernel expansion over a set of support points.
#[derive(Debug, Clone)]
pub struct DualPotential {
    pub kernel: KernelSpec,
    pub support: Array2<f64>,
    pub coefficients: Array1<f64>,
}

impl DualPotential {
    pub fn new(kernel: KernelSpec, support: Array2<f64>, coefficients: Array1<f64>) -> Result<Self> {
        kernel.validate()?;
        if support.nrows() != coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: support.nrows(),
                got: coefficients.len(),
            });
        }
        Ok(Self {
            kernel,
            support: support.as_standard_layout().to_owned(),
            coefficients,
        })
    }

    pub fn zeros(kernel: KernelSpec, support: Array2<f64>) -> Result<Self> {
        let p = support.nrows();
        Self::new(kernel, support, Array1::zeros(p))
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let support = self.support.view();
        let mut acc = 0.0;
        for (k, &alpha) in self.coefficients.iter().enumerate() {
            if alpha != 0.0 {
                acc += alpha * self.kernel.eval_unchecked(row_slice(&support, k), x);
            }
        }
        acc
    }

    /// RKHS norm `sqrt(αᵀ K α)` over the support Gram matrix.
    pub fn rkhs_norm(&self) -> f64 {
        let support = self.support.view();
        let p = self.len();
        let mut acc = 0.0;
        for i in 0..p {
            let mut row = 0.0;
            for j in 0..p {
                row += self.kernel.eval_unchecked(row_slice(&support, i), row_slice(&support, j))
                    * self.coefficients[j];
            }
            acc += self.coefficients[i] * row;
        }
        acc.max(0.0).sqrt()
    }
}

/// `g(x)` at every row of `points`. Each query is summed serially in
/// support order, so the result does not depend on the thread count.
pub fn potential_eval_batch(g: &DualPotential, points: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if points.ncols() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: points.ncols(),
        });
    }
    let points = points.as_standard_layout();
    let pv = points.view();
    Ok((0..pv.nrows())
        .into_par_iter()
        .map(|i| g.eval(row_slice(&pv, i)))
        .collect())
}

/// `K[i][k] = κ(queries_i, support_k)`, refusing allocations above `cap_bytes`.
pub fn potential_eval_gram(
    support: ArrayView2<'_, f64>,
    queries: ArrayView2<'_, f64>,
    spec: &KernelSpec,
    cap_bytes: usize,
) -> Result<Array2<f64>> {
    spec.validate()?;
    if support.ncols() != queries.ncols() {
        return Err(Error::DimensionMismatch {
            expected: support.ncols(),
            got: queries.ncols(),
        });
    }
    let (rows, cols) = (queries.nrows(), support.nrows());
    let bytes = rows
        .saturating_mul(cols)
        .saturating_mul(std::mem::size_of::<f64>());
    if bytes > cap_bytes {
        return Err(Error::Capacity {
            rows,
            cols,
            bytes,
            cap: cap_bytes,
        });
    }
    let support = support.as_standard_layout();
    let queries = queries.as_standard_layout();
    let (sv, qv) = (support.view(), queries.view());
    let mut data = vec![0.0; rows * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            let q = row_slice(&qv, i);
            for (k, r) in row.iter_mut().enumerate() {
                *r = spec.eval_unchecked(q, row_slice(&sv, k));
            }
        });
    }
    let gram = Array2::from_shape_vec((rows, cols), data).expect("shape matches data");
    Ok(gram)
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums so the loop vectorizes; the order is
    // fixed, so results stay reproducible.
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `K α`, parallel over rows with a fixed per-row summation order.
pub fn gram_matvec(gram: &Array2<f64>, alpha: ArrayView1<'_, f64>) -> Vec<f64> {
    let alpha = alpha.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| alpha.to_vec());
    let (rows, cols) = gram.dim();
    if cols == 0 {
        return vec![0.0; rows];
    }
    let slice = gram.as_slice().expect("gram is in standard layout");
    slice.par_chunks(cols).map(|r| dot4(r, &alpha)).collect()
}

/// `Kᵀ v`, parallel over column blocks; each output entry accumulates rows
/// in index order, so results are identical for any thread count.
pub fn gram_t_matvec(gram: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = gram.dim();
    const BLOCK: usize = 64;
    let slice = gram.as_slice().expect("gram is in standard layout");
    let mut out = vec![0.0; cols];
    out.par_chunks_mut(BLOCK)
        .enumerate()
        .for_each(|(b, chunk)| {
            let c0 = b * BLOCK;
            let width = chunk.len();
            for i in 0..rows {
                let vi = v[i];
                if vi == 0.0 {
                    continue;
                }
                let row = &slice[i * cols + c0..i * cols + c0 + width];
                for (o, g) in chunk.iter_mut().zip(row) {
                    *o += g * vi;
                }
            }
        });
    out
}

/// Entries of a Gaussian Gram matrix below this are dropped by
/// [`GramMatrix::compact`]; their effect on `K α` is below `1e-17 Σ|α|`.
pub const GRAM_DROP: f64 = 1e-17;

/// Row-compressed Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGram {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
}

const ROW_CHUNK: usize = 512;

impl SparseGram {
    fn from_dense(gram: &Array2<f64>, drop_below: f64) -> Self {
        let (rows, cols) = gram.dim();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in gram.rows() {
            for (k, &v) in row.iter().enumerate() {
                if v.abs() >= drop_below {
                    col_idx.push(k as u32);
                    vals.push(v);
                }
            }
            row_ptr.push(vals.len());
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn row_dot(&self, i: usize, alpha: &[f64]) -> f64 {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        let mut acc = 0.0;
        for (c, v) in self.col_idx[a..b].iter().zip(&self.vals[a..b]) {
            acc += v * alpha[*c as usize];
        }
        acc
    }

    fn matvec(&self, alpha: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .into_par_iter()
            .map(|i| self.row_dot(i, alpha))
            .collect()
    }

    /// Fixed row chunks, each summed in row order, combined in chunk order.
    fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        let n_chunks = self.rows.div_ceil(ROW_CHUNK);
        let partials: Vec<Vec<f64>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut out = vec![0.0; self.cols];
                for i in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(self.rows) {
                    let vi = v[i];
                    if vi == 0.0 {
                        continue;
                    }
                    let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
                    for (col, val) in self.col_idx[a..b].iter().zip(&self.vals[a..b]) {
                        out[*col as usize] += val * vi;
                    }
                }
                out
            })
            .collect();
        let mut out = vec![0.0; self.cols];
        for p in &partials {
            for (o, x) in out.iter_mut().zip(p) {
                *o += x;
            }
        }
        out
    }
}

/// A Gram matrix stored densely or, when most entries are negligible,
/// in compressed rows.
#[derive(Debug, Clone, PartialEq)]
pub enum GramMatrix {
    Dense(Array2<f64>),
    Sparse(SparseGram),
}

impl GramMatrix {
    /// Compress when dropping entries below [`GRAM_DROP`] removes at least
    /// half of them; only Gaussian kernels qualify.
    pub fn compact(gram: Array2<f64>, kernel: &KernelSpec) -> Self {
        if !matches!(kernel, KernelSpec::Gaussian { .. }) {
            return Self::Dense(gram);
        }
        let kept = gram.iter().filter(|v| v.abs() >= GRAM_DROP).count();
        if 2 * kept <= gram.len() {
            Self::Sparse(SparseGram::from_dense(&gram, GRAM_DROP))
        } else {
            Self::Dense(gram)
        }
    }

    pub fn nrows(&self) -> usize {
        match self {
            Self::Dense(g) => g.nrows(),
            Self::Sparse(s) => s.rows,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Self::Dense(g) => g.ncols(),
            Self::Sparse(s) => s.cols,
        }
    }

    pub fn matvec(&self, alpha: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense(g) => gram_matvec(g, ArrayView1::from(alpha)),
            Self::Sparse(s) => s.matvec(alpha),
        }
    }

    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense(g) => gram_t_matvec(g, v),
            Self::Sparse(s) => s.t_matvec(v),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Self::Dense(g) => g.clone(),
            Self::Sparse(s) => {
                let mut out = Array2::zeros((s.rows, s.cols));
                for i in 0..s.rows {
                    for j in s.row_ptr[i]..s.row_ptr[i + 1] {
                        out[[i, s.col_idx[j] as usize]] = s.vals[j];
                    }
                }
                out
            }
        }
    }
}
