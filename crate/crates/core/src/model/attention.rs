//! Multi-head scaled dot-product self-attention, the contextual layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian, matmul, matmul_nt, matmul_tn, softmax_columns, Mask, Matrix, RngState};

/// Projections for `heads` attention heads of width `head_dim` each.
///
/// The per-head query/key/value projections are stored stacked: head `h`
/// owns rows `h * head_dim .. (h + 1) * head_dim` of `query`, `key` and
/// `value`, and the matching columns of `output`. No projection carries a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

/// Activations of one attention call, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// Column-stochastic `N × N` weights per head; column `i` is query position `i`.
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
}

impl AttentionParams {
    pub fn init(rng: &mut RngState, width: usize, heads: usize, head_dim: usize) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let inner = heads * head_dim;
        AttentionParams {
            heads,
            head_dim,
            query: gaussian(rng, inner, width).scale(std),
            key: gaussian(rng, inner, width).scale(std),
            value: gaussian(rng, inner, width).scale(std),
            output: gaussian(rng, width, inner).scale(std),
        }
    }

    pub fn zeros(width: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        AttentionParams {
            heads,
            head_dim,
            query: Matrix::zeros(inner, width),
            key: Matrix::zeros(inner, width),
            value: Matrix::zeros(inner, width),
            output: Matrix::zeros(width, inner),
        }
    }

    pub fn width(&self) -> usize {
        self.output.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let inner = self.heads * self.head_dim;
        let d = self.width();
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::dims("AttentionParams", "heads, head_dim >= 1", format!("{}, {}", self.heads, self.head_dim)));
        }
        for (name, m, shape) in [
            ("query", &self.query, (inner, d)),
            ("key", &self.key, (inner, d)),
            ("value", &self.value, (inner, d)),
            ("output", &self.output, (d, inner)),
        ] {
            if m.shape() != shape {
                return Err(Error::dims(
                    "AttentionParams",
                    format!("{name} of shape {shape:?}"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, causal: bool) -> Result<Matrix> {
        self.forward_cached(x, causal).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x: &Matrix, causal: bool) -> Result<(Matrix, AttentionCache)> {
        let n = x.cols();
        if n == 0 || x.rows() != self.width() {
            return Err(Error::dims(
                "attention_forward",
                format!("{} x N with N >= 1", self.width()),
                format!("{:?}", x.shape()),
            ));
        }
        let q = matmul(&self.query, x)?;
        let k = matmul(&self.key, x)?;
        let v = matmul(&self.value, x)?;
        let mask = if causal { Mask::causal(n) } else { Mask::all(n, n) };
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut concat = Matrix::zeros(self.heads * self.head_dim, n);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let rows = h * self.head_dim..(h + 1) * self.head_dim;
            let qh = q.row_range(rows.start, rows.end);
            let kh = k.row_range(rows.start, rows.end);
            let vh = v.row_range(rows.start, rows.end);
            // scores[j, i] = <k_j, q_i>
            let scores = matmul_tn(&kh, &qh)?.scale(scale);
            let p = softmax_columns(&scores, &mask)?;
            let oh = matmul(&vh, &p)?;
            for (r, row) in rows.clone().enumerate() {
                concat.data_mut()[row * n..(row + 1) * n].copy_from_slice(oh.row(r));
            }
            probs.push(p);
        }
        let out = matmul(&self.output, &concat)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("attention output"));
        }
        Ok((
            out,
            AttentionCache {
                input: x.clone(),
                query: q,
                key: k,
                value: v,
                probs,
                concat,
            },
        ))
    }

    /// Backpropagates `d_out` (`d × N`), accumulating parameter gradients into
    /// `grads` and returning the gradient with respect to the input.
    pub fn backward(&self, cache: &AttentionCache, d_out: &Matrix, grads: &mut AttentionParams) -> Result<Matrix> {
        let n = d_out.cols();
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        grads.output.add_assign(&matmul_nt(d_out, &cache.concat)?)?;
        let d_concat = matmul_tn(&self.output, d_out)?;

        let inner = self.heads * self.head_dim;
        let mut dq = Matrix::zeros(inner, n);
        let mut dk = Matrix::zeros(inner, n);
        let mut dv = Matrix::zeros(inner, n);
        for h in 0..self.heads {
            let (start, end) = (h * self.head_dim, (h + 1) * self.head_dim);
            let p = &cache.probs[h];
            let qh = cache.query.row_range(start, end);
            let kh = cache.key.row_range(start, end);
            let vh = cache.value.row_range(start, end);
            let d_oh = d_concat.row_range(start, end);

            let d_vh = matmul_nt(&d_oh, p)?;
            let d_p = matmul_tn(&vh, &d_oh)?;
            let mut d_scores = Matrix::zeros(n, n);
            for i in 0..n {
                let mut weighted = 0.0;
                for j in 0..n {
                    weighted += p[(j, i)] * d_p[(j, i)];
                }
                for j in 0..n {
                    d_scores[(j, i)] = p[(j, i)] * (d_p[(j, i)] - weighted) * scale;
                }
            }
            let d_qh = matmul(&kh, &d_scores)?;
            let d_kh = matmul_nt(&qh, &d_scores)?;
            for r in 0..self.head_dim {
                let row = start + r;
                dq.data_mut()[row * n..(row + 1) * n].copy_from_slice(d_qh.row(r));
                dk.data_mut()[row * n..(row + 1) * n].copy_from_slice(d_kh.row(r));
                dv.data_mut()[row * n..(row + 1) * n].copy_from_slice(d_vh.row(r));
            }
        }
        grads.query.add_assign(&matmul_nt(&dq, &cache.input)?)?;
        grads.key.add_assign(&matmul_nt(&dk, &cache.input)?)?;
        grads.value.add_assign(&matmul_nt(&dv, &cache.input)?)?;

        let mut dx = matmul_tn(&self.query, &dq)?;
        dx.add_assign(&matmul_tn(&self.key, &dk)?)?;
        dx.add_assign(&matmul_tn(&self.value, &dv)?)?;
        Ok(dx)
    }
}
