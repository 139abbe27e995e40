//! Dense row-major `f64` matrices and the handful of kernels the model needs.
//!
//! Vectors are plain `[f64]` slices. Sequences are stored column-major in the
//! sense that token `i` of a `d × N` sequence is column `i` of a [`Matrix`].

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::from_vec",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A single column `d × 1` holding `v`.
    pub fn column_vector(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let rows = cols.first().map_or(0, |c| c.len());
        let mut m = Matrix::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            m.set_col(j, c)?;
        }
        Ok(m)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[f64]) -> Result<()> {
        if v.len() != self.rows || c >= self.cols {
            return Err(Error::dims(
                "Matrix::set_col",
                format!("column < {} of length {}", self.cols, self.rows),
                format!("column {} of length {}", c, v.len()),
            ));
        }
        for (r, x) in v.iter().enumerate() {
            self.data[r * self.cols + c] = *x;
        }
        Ok(())
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_range(&self, start: usize, end: usize) -> Matrix {
        let mut m = Matrix::zeros(self.rows, end - start);
        for r in 0..self.rows {
            m.data[r * m.cols..(r + 1) * m.cols]
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        m
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dims(
                "matvec",
                format!("vector of length {}", self.cols),
                format!("length {}", v.len()),
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Frobenius inner product `Tr(selfᵀ other)`.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::dims(
                    "vstack",
                    format!("{cols} columns"),
                    format!("{} columns", p.cols),
                ));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dims(
            "matmul_tn",
            format!("equal row counts ({})", a.rows),
            format!("{:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dims(
            "matmul_nt",
            format!("equal column counts ({})", a.cols),
            format!("{:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            m.data[i * v.len() + j] = ui * vj;
        }
    }
    m
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Intermediate values of a layer norm, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// `γ ⊙ (x − mean) / sqrt(var + eps) + β` with the population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache)> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::dims(
            "layer_norm",
            format!("gamma/beta of length {}", x.len()),
            format!("{}/{}", gamma.len(), beta.len()),
        ));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = normalized
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Gradient of a layer norm with respect to its input, given `dL/dy`.
/// `dgamma`/`dbeta` are accumulated in place.
pub fn layer_norm_backward(
    dy: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = Vec::with_capacity(dy.len());
    for k in 0..dy.len() {
        dgamma[k] += dy[k] * cache.normalized[k];
        dbeta[k] += dy[k];
        dxhat.push(dy[k] * gamma[k]);
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dot(&dxhat, &cache.normalized) / n;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(g, h)| cache.inv_std * (g - mean_dxhat - h * mean_dxhat_xhat))
        .collect()
}

/// Exact GeLU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `d/dx gelu(x) = Φ(x) + x φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Which score entries may receive attention weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Key row `j` is visible to query column `i` iff `j <= i`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for j in 0..n {
            for i in j..n {
                allowed[j * n + i] = true;
            }
        }
        Mask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Mask { rows, cols, allowed }
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Column-wise softmax; masked entries become exactly zero.
pub fn softmax_columns(scores: &Matrix, mask: &Mask) -> Result<Matrix> {
    if (mask.rows, mask.cols) != scores.shape() {
        return Err(Error::dims(
            "softmax_columns",
            format!("mask of shape {:?}", scores.shape()),
            format!("{:?}", (mask.rows, mask.cols)),
        ));
    }
    let (rows, cols) = scores.shape();
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..rows {
            if mask.is_allowed(r, c) {
                max = max.max(scores[(r, c)]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedColumn(c));
        }
        if !max.is_finite() {
            return Err(Error::NonFinite("softmax_columns"));
        }
        let mut total = 0.0;
        for r in 0..rows {
            if mask.is_allowed(r, c) {
                let e = (scores[(r, c)] - max).exp();
                out[(r, c)] = e;
                total += e;
            }
        }
        for r in 0..rows {
            out[(r, c)] /= total;
        }
    }
    Ok(out)
}

/// Seeded, counter-based random stream (ChaCha20).
///
/// Named substreams share the seed but select independent ChaCha stream ids,
/// so `init`, `train-tasks` and `test-tasks` never overlap.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn substream(seed: u64, name: &str) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id(name));
        RngState { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

// FNV-1a, so stream ids are stable across platforms and releases.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `rows × cols` i.i.d. standard normal draws, filled row by row.
pub fn gaussian(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix { rows, cols, data }
}

/// Two largest singular values `(σ₁, σ₂)`, `σ₁ ≥ σ₂ ≥ 0`.
///
/// One-sided Jacobi on the narrow side of the matrix. Singular values come out
/// with absolute error around `eps · σ₁`, which keeps the numerical `σ₂` of an
/// exactly rank-1 matrix near machine precision.
pub fn top_two_singular_values(m: &Matrix) -> Result<(f64, f64)> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::dims("top_two_singular_values", "nonempty matrix", "empty"));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("top_two_singular_values"));
    }
    let sv = singular_values(m);
    let s1 = sv[0];
    let s2 = sv.get(1).copied().unwrap_or(0.0);
    Ok((s1, s2))
}

/// All singular values in descending order (`min(rows, cols)` of them).
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Work on columns of the tall orientation.
    let tall = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let (rows, cols) = tall.shape();
    let mut columns: Vec<Vec<f64>> = (0..cols).map(|c| tall.col(c)).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = norm_sq(&columns[p]);
                let beta = norm_sq(&columns[q]);
                let gamma = dot(&columns[p], &columns[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let a = columns[p][r];
                    let b = columns[q][r];
                    columns[p][r] = c * a - s * b;
                    columns[q][r] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = columns.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);

        let lhs = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let rhs = Matrix::from_rows(&[&[2.0], &[3.0]]);
        let prod = lhs.matmul(&rhs).unwrap();
        assert_eq!(prod, Matrix::from_rows(&[&[2.0], &[3.0], &[5.0]]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(a.matmul(&b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = RngState::new(3);
        let a = gaussian(&mut rng, 4, 3);
        let b = gaussian(&mut rng, 4, 5);
        let c = gaussian(&mut rng, 6, 3);
        let tn = matmul_tn(&a, &b).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(tn.sub(&a.transpose().matmul(&b).unwrap()).unwrap().max_abs() < 1e-14);
        assert!(nt.sub(&a.matmul(&c.transpose()).unwrap()).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&[2.5; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));

        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);

        let y = layer_norm(&[1.0, -1.0], &[2.0, 2.0], &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(y, vec![7.0, 3.0]);

        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(x) + Φ(−x) = 1 gives gelu(x) − gelu(−x) = x.
        for x in [0.3, 1.0, 2.7, 5.0] {
            assert!(close(gelu(x) - gelu(-x), x, 4.0 * f64::EPSILON * x));
        }
    }

    /// erf by its Maclaurin series, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-20 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_matches_series_oracle() {
        let oracle = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
        assert!(close(gelu(1.0), oracle, 1e-12), "{} vs {}", gelu(1.0), oracle);
        // Frozen from the series above.
        assert!(close(gelu(1.0), 0.841_344_746_068_542_9, 1e-12));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), fd, 1e-8));
        }
    }

    #[test]
    fn softmax_cases() {
        let s = Matrix::from_rows(&[&[0.3, 9.0], &[-2.0, 1.0]]);
        let mask = Mask::causal(2);
        let p = softmax_columns(&s, &mask).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(1, 0)], 0.0);

        let s = Matrix::from_rows(&[&[1.5], &[1.5]]);
        let p = softmax_columns(&s, &Mask::all(2, 1)).unwrap();
        assert_eq!((p[(0, 0)], p[(1, 0)]), (0.5, 0.5));

        let s = Matrix::from_rows(&[&[0.0], &[2f64.ln()]]);
        let p = softmax_columns(&s, &Mask::all(2, 1)).unwrap();
        assert!(close(p[(0, 0)], 1.0 / 3.0, 1e-15));
        assert!(close(p[(1, 0)], 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_rejects_fully_masked_column() {
        let s = Matrix::zeros(2, 2);
        let mask = Mask::from_fn(2, 2, |_, c| c == 0);
        assert!(matches!(
            softmax_columns(&s, &mask),
            Err(Error::FullyMaskedColumn(1))
        ));
    }

    #[test]
    fn gaussian_is_deterministic_and_standard() {
        let a = gaussian(&mut RngState::new(11), 3, 4);
        let b = gaussian(&mut RngState::new(11), 3, 4);
        assert_eq!(a, b);

        let m = gaussian(&mut RngState::new(5), 1000, 1000);
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 5e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "var {var}");
    }

    #[test]
    fn substreams_differ() {
        let a = gaussian(&mut RngState::substream(1, "init"), 1, 8);
        let b = gaussian(&mut RngState::substream(1, "test-tasks"), 1, 8);
        assert_ne!(a, b);
    }

    #[test]
    fn singular_value_cases() {
        let (s1, s2) = top_two_singular_values(&Matrix::identity(2)).unwrap();
        assert!(close(s1, 1.0, 1e-15) && close(s2, 1.0, 1e-15));

        let (s1, s2) = top_two_singular_values(&Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 4.0]])).unwrap();
        assert!(close(s1, 4.0, 1e-15) && close(s2, 3.0, 1e-15));

        let u = [1.0, -2.0, 0.5, 3.0, 0.1];
        let v = [0.3, 1.7, -0.9];
        let (s1, s2) = top_two_singular_values(&outer(&u, &v)).unwrap();
        assert!(close(s1, norm(&u) * norm(&v), 1e-12));
        assert!(s2 / s1 <= 1e-10, "ratio {}", s2 / s1);

        // Wide orientation.
        let (s1, s2) = top_two_singular_values(&outer(&v, &u)).unwrap();
        assert!(s2 / s1 <= 1e-10 && s1 > 0.0);
    }

    #[test]
    fn singular_values_match_two_by_two_closed_form() {
        // σ² are the eigenvalues of MᵀM.
        let m = Matrix::from_rows(&[&[2.0, 1.0], &[-1.0, 3.0]]);
        let g = m.transpose().matmul(&m).unwrap();
        let (a, b, d) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
        let tr = a + d;
        let det = a * d - b * b;
        let disc = (tr * tr / 4.0 - det).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let (s1, s2) = top_two_singular_values(&m).unwrap();
        assert!(close(s1, l1.sqrt(), 1e-12));
        assert!(close(s2, l2.sqrt(), 1e-12));
    }

    #[test]
    fn singular_values_reject_non_finite() {
        let m = Matrix::from_rows(&[&[f64::NAN]]);
        assert!(top_two_singular_values(&m).is_err());
    }
}
