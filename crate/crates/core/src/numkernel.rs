//! Dense row-major `f32` kernels.
//!
//! Every reduction accumulates in `f64` in ascending index order, so a result
//! depends only on its inputs: not on thread count, not on which SIMD path
//! was picked at runtime. Products of two `f32` values are exact in `f64`,
//! which makes fused and unfused multiply-add paths agree bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of the listed rows, in list order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy of columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Copy of rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "add {}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of each column, accumulated in `f64`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(r)) {
                *s += v as f64;
            }
        }
        sums
    }
}

const ROW_TILE: usize = 4;
const COL_TILE: usize = 8;
const ROW_PANEL: usize = 64;

/// `a · b`.
///
/// Every output element is accumulated in f64 over ascending `k` starting
/// from zero, so the result does not depend on the SIMD path or on the
/// number of threads.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "matmul {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let b64: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let mut out = Matrix::zeros(a.rows, b.cols);
    if a.rows == 0 || b.cols == 0 {
        return Ok(out);
    }
    let k = a.cols;
    let n = b.cols;
    out.data
        .par_chunks_mut(ROW_PANEL * n)
        .enumerate()
        .for_each(|(blk, out_rows)| {
            let r0 = blk * ROW_PANEL;
            let nrows = out_rows.len() / n;
            let a_rows = &a.data[r0 * k..(r0 + nrows) * k];
            matmul_block(a_rows, &b64, out_rows, nrows, k, n);
        });
    Ok(out)
}

/// `a · bᵀ`, the shape of an attention score product.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch(format!(
            "matmul_bt {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(a, &b.transpose())
}

fn matmul_block(a: &[f32], b: &[f64], out: &mut [f32], rows: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was just detected.
            unsafe { matmul_block_avx512(a, b, out, rows, k, n) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            unsafe { matmul_block_avx2(a, b, out, rows, k, n) };
            return;
        }
    }
    matmul_block_generic(a, b, out, rows, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_block_avx2(a: &[f32], b: &[f64], out: &mut [f32], rows: usize, k: usize, n: usize) {
    matmul_block_generic(a, b, out, rows, k, n);
}

// A product of two f32 values is exact in f64, so a fused multiply-add
// rounds exactly once like the separate multiply and add of the generic path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_block_avx512(a: &[f32], b: &[f64], out: &mut [f32], rows: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    const WIDE: usize = 32;
    assert!(a.len() >= rows * k && b.len() >= k * n && out.len() >= rows * n);
    let full_rows = rows - rows % ROW_TILE;
    let wide_cols = n - n % WIDE;
    let narrow_cols = n - n % COL_TILE;
    let a64: Vec<f64> = a[..rows * k].iter().map(|&v| v as f64).collect();
    let ap = a64.as_ptr();
    let bp = b.as_ptr();
    let op = out.as_mut_ptr();
    let mut j = 0;
    while j < wide_cols {
        for r0 in (0..full_rows).step_by(ROW_TILE) {
            let mut acc = [[_mm512_setzero_pd(); 4]; ROW_TILE];
            for kk in 0..k {
                let brow = bp.add(kk * n + j);
                let bv = [
                    _mm512_loadu_pd(brow),
                    _mm512_loadu_pd(brow.add(8)),
                    _mm512_loadu_pd(brow.add(16)),
                    _mm512_loadu_pd(brow.add(24)),
                ];
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = _mm512_set1_pd(*ap.add((r0 + r) * k + kk));
                    for c in 0..4 {
                        acc_row[c] = _mm512_fmadd_pd(av, bv[c], acc_row[c]);
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                for (c, &v) in acc_row.iter().enumerate() {
                    _mm256_storeu_ps(op.add((r0 + r) * n + j + c * 8), _mm512_cvtpd_ps(v));
                }
            }
        }
        j += WIDE;
    }
    while j < narrow_cols {
        for r0 in (0..full_rows).step_by(ROW_TILE) {
            let mut acc = [_mm512_setzero_pd(); ROW_TILE];
            for kk in 0..k {
                let bv = _mm512_loadu_pd(bp.add(kk * n + j));
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = _mm512_set1_pd(*ap.add((r0 + r) * k + kk));
                    *acc_row = _mm512_fmadd_pd(av, bv, *acc_row);
                }
            }
            for (r, &v) in acc.iter().enumerate() {
                _mm256_storeu_ps(op.add((r0 + r) * n + j), _mm512_cvtpd_ps(v));
            }
        }
        j += COL_TILE;
    }
    finish_edges(a, b, out, rows, k, n, full_rows, narrow_cols);
}

#[inline(always)]
fn matmul_block_generic(a: &[f32], b: &[f64], out: &mut [f32], rows: usize, k: usize, n: usize) {
    let full_rows = rows - rows % ROW_TILE;
    let full_cols = n - n % COL_TILE;
    let mut j = 0;
    while j < full_cols {
        for r0 in (0..full_rows).step_by(ROW_TILE) {
            let mut acc = [[0.0f64; COL_TILE]; ROW_TILE];
            for kk in 0..k {
                let bv: &[f64; COL_TILE] = b[kk * n + j..kk * n + j + COL_TILE]
                    .try_into()
                    .expect("tile width");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(r0 + r) * k + kk] as f64;
                    for c in 0..COL_TILE {
                        acc_row[c] += av * bv[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                for c in 0..COL_TILE {
                    out[(r0 + r) * n + j + c] = acc_row[c] as f32;
                }
            }
        }
        j += COL_TILE;
    }
    finish_edges(a, b, out, rows, k, n, full_rows, full_cols);
}

/// Columns from `done_cols` on for the tiled rows, then every column of the
/// rows past `done_rows`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn finish_edges(a: &[f32], b: &[f64], out: &mut [f32], rows: usize, k: usize, n: usize, done_rows: usize, done_cols: usize) {
    if done_cols < n {
        tail_columns(a, b, out, done_rows, k, n, done_cols);
    }
    if done_rows < rows {
        tail_columns(&a[done_rows * k..], b, &mut out[done_rows * n..], rows - done_rows, k, n, 0);
    }
}

#[inline(always)]
fn tail_columns(a: &[f32], b: &[f64], out: &mut [f32], rows: usize, k: usize, n: usize, from: usize) {
    let width = n - from;
    let mut acc = vec![0.0f64; width];
    for r in 0..rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let av = a[r * k + kk] as f64;
            let brow = &b[kk * n + from..kk * n + n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv;
            }
        }
        for (o, &s) in out[r * n + from..r * n + n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
}

/// Softmax of `scale · row` for every row, max-subtracted.
pub fn row_softmax(m: &Matrix, scale: f32) -> Matrix {
    let mut out = m.clone();
    row_softmax_in_place(&mut out, scale);
    out
}

pub fn row_softmax_in_place(m: &mut Matrix, scale: f32) {
    let cols = m.cols;
    if cols == 0 {
        return;
    }
    m.data.par_chunks_mut(cols).for_each(|row| {
        softmax_slice(row, scale);
    });
}

pub(crate) fn softmax_slice(row: &mut [f32], scale: f32) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was just detected.
            unsafe { softmax_avx512(row, scale) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was just detected.
            unsafe { softmax_avx2(row, scale) };
            return;
        }
    }
    softmax_generic(row, scale);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn softmax_avx512(row: &mut [f32], scale: f32) {
    softmax_generic(row, scale);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn softmax_avx2(row: &mut [f32], scale: f32) {
    softmax_generic(row, scale);
}

const LANES: usize = 16;

#[inline(always)]
fn softmax_generic(row: &mut [f32], scale: f32) {
    let mut maxes = [f32::NEG_INFINITY; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for (m, &v) in maxes.iter_mut().zip(c) {
            *m = if v > *m { v } else { *m };
        }
    }
    let max = chunks
        .remainder()
        .iter()
        .chain(&maxes)
        .fold(f32::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    for v in row.iter_mut() {
        *v = exp_nonpositive((*v - max) * scale);
    }
    let mut sums = [0.0f64; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for (s, &v) in sums.iter_mut().zip(c) {
            *s += v as f64;
        }
    }
    let sum = sums.iter().sum::<f64>() + chunks.remainder().iter().map(|&v| v as f64).sum::<f64>();
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// `e^x` for `x ≤ 0`, within a few ulp, written so that it vectorises.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // below -87 the result leaves the normal range; NaN also lands on -87
    let x = if x >= -87.0 {
        if x <= 0.0 {
            x
        } else {
            0.0
        }
    } else {
        -87.0
    };
    // SAFETY: x * LOG2E lies in [-126, 0], well inside i32 range.
    let n: i32 = unsafe { (x * LOG2E - 0.5).to_int_unchecked() };
    let nf = n as f32;
    let r = (x - nf * LN2_HI) - nf * LN2_LO;
    let p = 1.0 / 5040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    p * f32::from_bits(((n + 127) as u32) << 23)
}

/// f64 inner product, summed in eight interleaved lanes in a fixed order.
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was just detected.
            return unsafe { dot_avx512(u, v) };
        }
    }
    dot_generic(u, v)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn dot_avx512(u: &[f32], v: &[f32]) -> f64 {
    dot_generic(u, v)
}

#[inline(always)]
fn dot_generic(u: &[f32], v: &[f32]) -> f64 {
    const W: usize = 8;
    let n = u.len().min(v.len());
    let (u, v) = (&u[..n], &v[..n]);
    let mut acc = [0.0f64; W];
    let mut cu = u.chunks_exact(W);
    let mut cv = v.chunks_exact(W);
    for (a, b) in (&mut cu).zip(&mut cv) {
        for i in 0..W {
            acc[i] += a[i] as f64 * b[i] as f64;
        }
    }
    let tail: f64 = cu.remainder().iter().zip(cv.remainder()).map(|(&a, &b)| a as f64 * b as f64).sum();
    acc.iter().sum::<f64>() + tail
}

pub fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0) as f32)
}

/// Row-wise RMS normalisation with unit gain.
pub fn rms_norm(m: &Matrix, eps: f32) -> Matrix {
    let mut out = m.clone();
    let cols = m.cols.max(1);
    out.data.par_chunks_mut(cols).for_each(|row| {
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        for v in row.iter_mut() {
            *v = (*v as f64 * inv) as f32;
        }
    });
    out
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
