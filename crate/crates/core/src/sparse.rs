//! Compressed-row storage for quantized preactivation gradients and the two
//! sparse products of the backward pass, with multiply-accumulate counting.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Nonzero payload of a [`SparseGrad`].
#[derive(Clone, Debug, PartialEq)]
pub enum SparseValues {
    /// Integer quantization levels; the stored value is `level * delta`.
    Levels { delta: f64, levels: Vec<i32> },
    /// Full-precision values (degenerate-σ passthrough, top-k selection).
    Real(Vec<f64>),
}

/// Compressed sparse row matrix holding a (quantized) gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: SparseValues,
}

impl SparseGrad {
    /// Assembles a matrix from raw parts, checking every format invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: SparseValues,
    ) -> Result<Self> {
        let g = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        g.check_invariants()?;
        Ok(g)
    }

    /// Unchecked construction for the quantizers, which build sorted rows by
    /// construction. Invariants are still verified in debug builds.
    pub(crate) fn from_parts_trusted(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: SparseValues,
    ) -> Self {
        let g = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        debug_assert!(g.check_invariants().is_ok(), "{:?}", g.check_invariants());
        g
    }

    pub fn zeros(rows: usize, cols: usize, delta: f64) -> Self {
        Self::from_parts_trusted(
            rows,
            cols,
            vec![0; rows + 1],
            Vec::new(),
            SparseValues::Levels {
                delta,
                levels: Vec::new(),
            },
        )
    }

    /// Compresses `g`, whose nonzeros must all be integer multiples of `delta`
    /// (to 1e-9 relative). The result reconstructs `g` exactly when the
    /// entries were produced as `level * delta`.
    pub fn from_dense(g: &Matrix, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Contract(format!("step size must be positive, got {delta}")));
        }
        let mut row_ptr = Vec::with_capacity(g.rows() + 1);
        let mut col_idx = Vec::new();
        let mut levels = Vec::new();
        row_ptr.push(0);
        for i in 0..g.rows() {
            for (j, &x) in g.row(i).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let q = (x / delta).round();
                if (q * delta - x).abs() > 1e-9 * x.abs().max(delta) || q.abs() > i32::MAX as f64 {
                    return Err(Error::Contract(format!(
                        "entry ({i}, {j}) = {x} is not an integer multiple of delta {delta}"
                    )));
                }
                col_idx.push(j as u32);
                levels.push(q as i32);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self::from_parts_trusted(
            g.rows(),
            g.cols(),
            row_ptr,
            col_idx,
            SparseValues::Levels { delta, levels },
        ))
    }

    /// Lossless compression of arbitrary real values.
    pub fn from_dense_real(g: &Matrix) -> Self {
        let mut row_ptr = Vec::with_capacity(g.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..g.rows() {
            for (j, &x) in g.row(i).iter().enumerate() {
                if x != 0.0 {
                    col_idx.push(j as u32);
                    values.push(x);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_parts_trusted(g.rows(), g.cols(), row_ptr, col_idx, SparseValues::Real(values))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.row_ptr.len() != self.rows + 1 {
            return bad(format!("row_ptr length {} != rows + 1 = {}", self.row_ptr.len(), self.rows + 1));
        }
        if self.row_ptr[0] != 0 || *self.row_ptr.last().unwrap() != self.col_idx.len() {
            return bad("row_ptr must start at 0 and end at nnz".into());
        }
        let nvals = match &self.values {
            SparseValues::Levels { delta, levels } => {
                if !(*delta > 0.0) {
                    return bad(format!("delta must be positive, got {delta}"));
                }
                if levels.contains(&0) {
                    return bad("stored level equal to zero".into());
                }
                levels.len()
            }
            SparseValues::Real(v) => {
                if v.contains(&0.0) {
                    return bad("stored value equal to zero".into());
                }
                v.len()
            }
        };
        if nvals != self.col_idx.len() {
            return bad("values and col_idx lengths differ".into());
        }
        for i in 0..self.rows {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            if lo > hi {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let idx = &self.col_idx[lo..hi];
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("column indices not strictly increasing in row {i}"));
            }
            if idx.last().is_some_and(|&c| c as usize >= self.cols) {
                return bad(format!("column index out of range in row {i}"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of zero entries.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz() as f64 / self.len() as f64
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &SparseValues {
        &self.values
    }

    /// Step size, or `None` for full-precision payloads.
    pub fn delta(&self) -> Option<f64> {
        match &self.values {
            SparseValues::Levels { delta, .. } => Some(*delta),
            SparseValues::Real(_) => None,
        }
    }

    pub fn levels(&self) -> Option<&[i32]> {
        match &self.values {
            SparseValues::Levels { levels, .. } => Some(levels),
            SparseValues::Real(_) => None,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        matches!(self.values, SparseValues::Real(_))
    }

    /// Reconstructed nonzero values in storage order.
    pub fn reconstructed(&self) -> Cow<'_, [f64]> {
        match &self.values {
            SparseValues::Levels { delta, levels } => Cow::Owned(levels.iter().map(|&l| l as f64 * delta).collect()),
            SparseValues::Real(v) => Cow::Borrowed(v),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        let vals = self.reconstructed();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k] as usize] = vals[k];
            }
        }
        out
    }

    /// Per-row sums of the reconstructed values (the bias gradient).
    pub fn row_sums(&self) -> Vec<f64> {
        let vals = self.reconstructed();
        (0..self.rows)
            .map(|i| vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum())
            .collect()
    }

    /// Whether row `i` holds no nonzero.
    pub fn row_is_empty(&self, i: usize) -> bool {
        self.row_ptr[i] == self.row_ptr[i + 1]
    }

    fn for_each_nonzero(&self, mut f: impl FnMut(usize, usize, f64)) {
        let vals = self.reconstructed();
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                f(r, self.col_idx[k] as usize, vals[k]);
            }
        }
    }
}

/// Multiply-accumulate bookkeeping for the backward products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    pub macs_performed: u64,
    pub macs_dense_equivalent: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, performed: u64, dense: u64) {
        debug_assert!(performed <= dense);
        self.macs_performed += performed;
        self.macs_dense_equivalent += dense;
    }

    pub fn merge(&mut self, other: &MacCounter) {
        self.record(other.macs_performed, other.macs_dense_equivalent);
    }

    /// `macs_performed / macs_dense_equivalent`.
    pub fn savings_ratio(&self) -> Result<f64> {
        savings_ratio(self)
    }
}

pub fn savings_ratio(ctr: &MacCounter) -> Result<f64> {
    if ctr.macs_dense_equivalent == 0 {
        return Err(Error::Config("savings ratio undefined: no dense-equivalent MACs recorded".into()));
    }
    Ok(ctr.macs_performed as f64 / ctr.macs_dense_equivalent as f64)
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::Shape { op, lhs, rhs }
}

/// `w_t · g` for a dense left operand and a sparse right operand.
pub fn dense_times_sparse(w_t: &Matrix, g: &SparseGrad, ctr: &mut MacCounter) -> Result<Matrix> {
    if w_t.cols() != g.rows() {
        return Err(shape_err("dense_times_sparse", w_t.shape(), (g.rows(), g.cols())));
    }
    let mut out = Matrix::zeros(w_t.rows(), g.cols());
    let vals = g.reconstructed();
    for i in 0..w_t.rows() {
        let wrow = w_t.row(i);
        let orow = out.row_mut(i);
        for (r, &wr) in wrow.iter().enumerate() {
            for k in g.row_ptr[r]..g.row_ptr[r + 1] {
                orow[g.col_idx[k] as usize] += wr * vals[k];
            }
        }
    }
    ctr.record(
        (w_t.rows() * g.nnz()) as u64,
        (w_t.rows() * g.rows() * g.cols()) as u64,
    );
    Ok(out)
}

/// `wᵀ · g` without materialising the transpose; `w` is `g.rows × m`.
///
/// This is the `δa = Wᵀ·δz̃` product of the backward pass.
pub fn transpose_times_sparse(w: &Matrix, g: &SparseGrad, ctr: &mut MacCounter) -> Result<Matrix> {
    if w.rows() != g.rows() {
        return Err(shape_err("transpose_times_sparse", (w.cols(), w.rows()), (g.rows(), g.cols())));
    }
    let m = w.cols();
    // Accumulate the transposed result so both operands are read row-wise.
    let mut out_t = Matrix::zeros(g.cols(), m);
    g.for_each_nonzero(|r, c, v| {
        let wrow = w.row(r);
        for (o, &x) in out_t.row_mut(c).iter_mut().zip(wrow) {
            *o += v * x;
        }
    });
    ctr.record((m * g.nnz()) as u64, (m * g.rows() * g.cols()) as u64);
    Ok(out_t.transpose())
}

/// `g · a_t` for a sparse left operand; this is `δW = δz̃ · aᵀ` with
/// `a_t = aᵀ` supplied row-major.
pub fn sparse_times_dense(g: &SparseGrad, a_t: &Matrix, ctr: &mut MacCounter) -> Result<Matrix> {
    if g.cols() != a_t.rows() {
        return Err(shape_err("sparse_times_dense", (g.rows(), g.cols()), a_t.shape()));
    }
    let n = a_t.cols();
    let mut out = Matrix::zeros(g.rows(), n);
    g.for_each_nonzero(|r, c, v| {
        let arow = a_t.row(c);
        for (o, &x) in out.row_mut(r).iter_mut().zip(arow) {
            *o += v * x;
        }
    });
    ctr.record((n * g.nnz()) as u64, (n * g.rows() * g.cols()) as u64);
    Ok(out)
}
