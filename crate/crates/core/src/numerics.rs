//! Dense row-major matrices, seeded random streams, and the handful of
//! linear-algebra kernels the rest of the crate needs.
//!
//! All arithmetic is `f64`. Reductions run in a fixed sequential order so
//! every result is reproducible to the bit.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A batch of embeddings, one sample per row. Rows are expected to be unit
/// norm wherever a cosine formula consumes them.
pub type EmbeddingBatch = Matrix;

/// Rows whose norm is within this distance of 1 are left untouched by
/// [`l2_normalize_rows`], which makes normalization idempotent bitwise.
const UNIT_NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major values, rejecting empty shapes and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Gather the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_raw(self.rows + other.rows, self.cols, data))
    }

    /// Plain matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// Scores closer than this are treated as tied by [`argmax_low`].
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index and value of the largest score. Scores within [`TIE_TOLERANCE`] of
/// the running best do not displace it, so ties resolve to the lowest index.
pub fn argmax_low(scores: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if s <= b + TIE_TOLERANCE => {}
            _ => best = Some((i, s)),
        }
    }
    best
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Deterministic random stream (ChaCha8). The same `(seed, stream)` pair
/// yields the same sequence on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// An independent stream derived from `seed`, keyed by `stream`.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `d × k` matrix with orthonormal columns, from Householder QR of a
/// Gaussian matrix. Columns are sign-fixed so `R` has a nonnegative diagonal.
pub fn orthonormal_columns(d: usize, k: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Dimension("need at least one column".into()));
    }
    if d < k {
        return Err(Error::Dimension(format!(
            "cannot fit {k} orthonormal columns in dimension {d} (need d >= K)"
        )));
    }

    // Column-major working copy: a[j] is column j.
    let mut a: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut r_diag = vec![0.0; k];

    for j in 0..k {
        let x = &a[j][j..];
        let x_norm = norm(x);
        let alpha = if x[0] >= 0.0 { -x_norm } else { x_norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let v_norm = norm(&v);
        if v_norm > 0.0 {
            v.iter_mut().for_each(|e| *e /= v_norm);
        }
        for col in a.iter_mut().skip(j) {
            let tail = &mut col[j..];
            let proj = 2.0 * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= proj * vi;
            }
        }
        r_diag[j] = alpha;
        reflectors.push(v);
    }

    // Q e_c = H_0 H_1 ... H_{k-1} e_c
    let mut q = Matrix::zeros(d, k);
    for c in 0..k {
        let mut col = vec![0.0; d];
        col[c] = 1.0;
        for (j, v) in reflectors.iter().enumerate().rev() {
            let tail = &mut col[j..];
            let proj = 2.0 * dot(v, tail);
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= proj * vi;
            }
        }
        let sign = if r_diag[c] < 0.0 { -1.0 } else { 1.0 };
        for (r, value) in col.into_iter().enumerate() {
            q.set(r, c, sign * value);
        }
    }
    Ok(q)
}

/// Normalize every row to unit L2 norm.
///
/// Rows with norm `<= eps` are replaced by the first basis vector and flagged
/// in the returned mask. Rows already within `1e-12` of unit norm are kept
/// as-is, so applying this twice gives bitwise the same matrix as once.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> (Matrix, Vec<bool>) {
    let mut out = m.clone();
    let mut degenerate = vec![false; m.rows()];
    for (r, flag) in degenerate.iter_mut().enumerate() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n <= eps {
            row.fill(0.0);
            row[0] = 1.0;
            *flag = true;
        } else if (n - 1.0).abs() > UNIT_NORM_SLACK {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, degenerate)
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
pub fn cosine_gram(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "cosine_gram: {} columns vs {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let row_norms = |m: &Matrix, name: &str| -> Result<Vec<f64>> {
        m.row_iter()
            .enumerate()
            .map(|(i, row)| {
                let n = norm(row);
                if n == 0.0 {
                    Err(Error::DegenerateInput(format!("row {i} of {name} has zero norm")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = row_norms(a, "a")?;
    let nb = row_norms(b, "b")?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(a.row(i), b.row(j)) / (na[i] * nb[j]));
        }
    }
    Ok(out)
}
