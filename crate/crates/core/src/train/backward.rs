//! Hand-derived reverse pass through a stack of contextual blocks.

use crate::error::{Error, Result};
use crate::model::{BlockParams, BlockVariant, BranchTrace, ModelParams};
use crate::tensor::{gelu_grad, layer_norm_backward, matmul_nt, matmul_tn, LayerNormCache, Matrix};

/// Gradients with the same structure as the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: ModelParams,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            grads: params.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.grads.tensors()
    }

    /// All entries in [`ModelParams::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        let rhs = other.grads.tensors();
        for (dst, (_, src)) in self.grads.tensors_mut().into_iter().zip(rhs) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Sums gradients with a pairwise tree whose shape depends only on the count.
pub fn tree_sum(mut parts: Vec<GradientSet>) -> Option<GradientSet> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

fn add_row_sums(dst: &mut [f64], m: &Matrix) {
    for (r, d) in dst.iter_mut().enumerate() {
        *d += m.row(r).iter().sum::<f64>();
    }
}

fn ln_columns_backward(
    dy: &Matrix,
    gamma: &[f64],
    caches: &[LayerNormCache],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Result<Matrix> {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for (c, cache) in caches.iter().enumerate() {
        let col = layer_norm_backward(&dy.col(c), gamma, cache, dgamma, dbeta);
        dx.set_col(c, &col)?;
    }
    Ok(dx)
}

/// Backpropagates `d_out` through one block, accumulating into `grads` and
/// returning the gradient with respect to the block input.
pub fn block_backward(
    params: &BlockParams,
    variant: BlockVariant,
    trace: &BranchTrace,
    d_out: &Matrix,
    grads: &mut BlockParams,
) -> Result<Matrix> {
    let mlp = &params.mlp;
    add_row_sums(&mut grads.mlp.b_out, d_out);
    grads.mlp.w_out.add_assign(&matmul_nt(d_out, &trace.hidden)?)?;
    let d_hidden = matmul_tn(&mlp.w_out, d_out)?;
    let mut d_pre = d_hidden;
    for (d, p) in d_pre.data_mut().iter_mut().zip(trace.pre.data()) {
        *d *= gelu_grad(*p);
    }
    add_row_sums(&mut grads.mlp.b, &d_pre);
    grads.mlp.w.add_assign(&matmul_nt(&d_pre, &trace.g)?)?;
    let d_g = matmul_tn(&mlp.w, &d_pre)?;

    let (d_attn, mut d_x) = match variant {
        BlockVariant::Plain => (d_g, Matrix::zeros(d_out.rows(), d_out.cols())),
        BlockVariant::DherinSkip => (d_g.add(d_out)?, d_out.clone()),
        BlockVariant::Skip => {
            let d_q = d_g.add(d_out)?;
            (d_q.clone(), d_q)
        }
        BlockVariant::PreLn => {
            let (ln, caches) = match (&params.ln_mlp, &trace.ln_mlp) {
                (Some(ln), Some(c)) => (ln, c),
                _ => return Err(Error::InvalidConfig("pre-ln trace without layer norm state".into())),
            };
            let g_ln = grads
                .ln_mlp
                .as_mut()
                .ok_or_else(|| Error::InvalidConfig("gradient set without layer norm slots".into()))?;
            let mut d_q = ln_columns_backward(&d_g, &ln.gamma, caches, &mut g_ln.gamma, &mut g_ln.beta)?;
            d_q.add_assign(d_out)?;
            (d_q.clone(), d_q)
        }
    };

    let d_attn_in = params.attention.backward(&trace.attention, &d_attn, &mut grads.attention)?;
    match variant {
        BlockVariant::PreLn => {
            let (ln, caches) = match (&params.ln_attn, &trace.ln_attn) {
                (Some(ln), Some((_, c))) => (ln, c),
                _ => return Err(Error::InvalidConfig("pre-ln trace without layer norm state".into())),
            };
            let g_ln = grads
                .ln_attn
                .as_mut()
                .ok_or_else(|| Error::InvalidConfig("gradient set without layer norm slots".into()))?;
            let d = ln_columns_backward(&d_attn_in, &ln.gamma, caches, &mut g_ln.gamma, &mut g_ln.beta)?;
            d_x.add_assign(&d)?;
        }
        _ => d_x.add_assign(&d_attn_in)?,
    }
    Ok(d_x)
}

/// Gradient of `d_pred · ŷ` for one sequence, where `ŷ` is the readout of
/// the last token.
pub fn sequence_backward(params: &ModelParams, branches: &[BranchTrace], d_pred: f64) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params);
    let last = branches.last().ok_or_else(|| Error::dims("backward", "at least one block", "none"))?;
    let (d, n) = last.output.shape();
    let mut d_h = Matrix::zeros(d, n);
    d_h[(params.readout, n - 1)] = d_pred;
    for (l, (block, trace)) in params.blocks.iter().zip(branches).enumerate().rev() {
        d_h = block_backward(block, params.variant, trace, &d_h, &mut grads.grads.blocks[l])?;
    }
    if let Some(p) = grads.grads.positions.as_mut() {
        for r in 0..d {
            for c in 0..n {
                p[(r, c)] += d_h[(r, c)];
            }
        }
    }
    Ok(grads)
}
