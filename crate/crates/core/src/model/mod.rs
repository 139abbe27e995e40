//! Stacks of contextual blocks reading out the target slot of the last token.

mod attention;
mod block;
pub mod checkpoint;

pub use attention::{AttentionCache, AttentionParams};
pub use block::{
    block_forward, block_forward_branch, query_only_block_forward, BlockParams, BlockVariant, BranchTrace,
    ForwardTrace, LnParams, MlpParams,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian, Matrix, RngState};

/// Architecture hyperparameters needed to build a [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub variant: BlockVariant,
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub ln_eps: f64,
    /// Learned absolute positions for sequences up to this length, if any.
    pub positions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub variant: BlockVariant,
    pub blocks: Vec<BlockParams>,
    /// Row of the residual stream holding the prediction.
    pub readout: usize,
    /// Learned absolute positions added to the input (experimental, off by default).
    pub positions: Option<Matrix>,
}

pub(crate) fn init_block(
    rng: &mut RngState,
    variant: BlockVariant,
    width: usize,
    heads: usize,
    head_dim: usize,
    hidden: usize,
    ln_eps: f64,
) -> BlockParams {
    let attention = AttentionParams::init(rng, width, heads, head_dim);
    let mlp = MlpParams::init(rng, width, hidden);
    let (ln_attn, ln_mlp) = if variant.has_layer_norm() {
        (Some(LnParams::identity(width, ln_eps)), Some(LnParams::identity(width, ln_eps)))
    } else {
        (None, None)
    };
    BlockParams {
        attention,
        mlp,
        ln_attn,
        ln_mlp,
    }
}

impl ModelParams {
    /// Gaussian projections with std `1/√d`, zero biases, identity layer norms.
    pub fn init(rng: &mut RngState, shape: &ModelShape) -> Self {
        let blocks = (0..shape.blocks)
            .map(|_| {
                init_block(
                    rng,
                    shape.variant,
                    shape.width,
                    shape.heads,
                    shape.head_dim,
                    shape.hidden,
                    shape.ln_eps,
                )
            })
            .collect();
        let positions = shape
            .positions
            .map(|n| gaussian(rng, shape.width, n).scale(1.0 / (shape.width as f64).sqrt()));
        ModelParams {
            variant: shape.variant,
            blocks,
            readout: shape.width - 1,
            positions,
        }
    }

    /// All-zero parameters (identity layer norms) of the given shape.
    pub fn zeros(shape: &ModelShape) -> Self {
        let blocks = (0..shape.blocks)
            .map(|_| BlockParams {
                attention: AttentionParams::zeros(shape.width, shape.heads, shape.head_dim),
                mlp: MlpParams::zeros(shape.width, shape.hidden),
                ln_attn: shape
                    .variant
                    .has_layer_norm()
                    .then(|| LnParams::identity(shape.width, shape.ln_eps)),
                ln_mlp: shape
                    .variant
                    .has_layer_norm()
                    .then(|| LnParams::identity(shape.width, shape.ln_eps)),
            })
            .collect();
        ModelParams {
            variant: shape.variant,
            blocks,
            readout: shape.width - 1,
            positions: shape.positions.map(|n| Matrix::zeros(shape.width, n)),
        }
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one block".into()));
        }
        let d = self.width();
        for b in &self.blocks {
            b.validate(self.variant)?;
            if b.width() != d {
                return Err(Error::dims("ModelParams", format!("all blocks of width {d}"), format!("width {}", b.width())));
            }
        }
        if self.readout >= d {
            return Err(Error::dims("ModelParams", format!("readout < {d}"), self.readout.to_string()));
        }
        if let Some(p) = &self.positions {
            if p.rows() != d {
                return Err(Error::dims("ModelParams", format!("positions with {d} rows"), format!("{:?}", p.shape())));
            }
        }
        Ok(())
    }

    /// Input to the first block: the sequence plus learned positions, if enabled.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.width() || x.cols() == 0 {
            return Err(Error::dims(
                "model_forward",
                format!("{} x N with N >= 1", self.width()),
                format!("{:?}", x.shape()),
            ));
        }
        match &self.positions {
            None => Ok(x.clone()),
            Some(p) => {
                if x.cols() > p.cols() {
                    return Err(Error::dims(
                        "model_forward",
                        format!("at most {} tokens", p.cols()),
                        format!("{} tokens", x.cols()),
                    ));
                }
                x.add(&p.col_range(0, x.cols()))
            }
        }
    }

    /// Forward pass on one sequence recording both branches of every block.
    pub fn forward_traced(&self, x: &Matrix) -> Result<ModelTrace> {
        let mut h = self.embed(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, trace) = block_forward(b, self.variant, &h)?;
            blocks.push(trace);
            h = out;
        }
        let prediction = h[(self.readout, h.cols() - 1)];
        Ok(ModelTrace {
            blocks,
            output: h,
            prediction,
        })
    }

    /// Forward pass on one sequence keeping only the context branches.
    pub fn forward_branches(&self, x: &Matrix) -> Result<(Vec<BranchTrace>, f64)> {
        let mut h = self.embed(x)?;
        let mut branches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let t = block_forward_branch(b, self.variant, &h)?;
            h = t.output.clone();
            branches.push(t);
        }
        Ok((branches, h[(self.readout, h.cols() - 1)]))
    }

    pub fn predict(&self, x: &Matrix) -> Result<f64> {
        self.forward_branches(x).map(|(_, y)| y)
    }

    /// Named views of every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.attn.query"), b.attention.query.data()));
            out.push((format!("block{l}.attn.key"), b.attention.key.data()));
            out.push((format!("block{l}.attn.value"), b.attention.value.data()));
            out.push((format!("block{l}.attn.output"), b.attention.output.data()));
            out.push((format!("block{l}.mlp.w"), b.mlp.w.data()));
            out.push((format!("block{l}.mlp.b"), &b.mlp.b));
            out.push((format!("block{l}.mlp.w_out"), b.mlp.w_out.data()));
            out.push((format!("block{l}.mlp.b_out"), &b.mlp.b_out));
            if let Some(ln) = &b.ln_attn {
                out.push((format!("block{l}.ln_attn.gamma"), &ln.gamma));
                out.push((format!("block{l}.ln_attn.beta"), &ln.beta));
            }
            if let Some(ln) = &b.ln_mlp {
                out.push((format!("block{l}.ln_mlp.gamma"), &ln.gamma));
                out.push((format!("block{l}.ln_mlp.beta"), &ln.beta));
            }
        }
        if let Some(p) = &self.positions {
            out.push(("positions".into(), p.data()));
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.attention.query.data_mut());
            out.push(b.attention.key.data_mut());
            out.push(b.attention.value.data_mut());
            out.push(b.attention.output.data_mut());
            out.push(b.mlp.w.data_mut());
            out.push(&mut b.mlp.b);
            out.push(b.mlp.w_out.data_mut());
            out.push(&mut b.mlp.b_out);
            if let Some(ln) = &mut b.ln_attn {
                out.push(&mut ln.gamma);
                out.push(&mut ln.beta);
            }
            if let Some(ln) = &mut b.ln_mlp {
                out.push(&mut ln.gamma);
                out.push(&mut ln.beta);
            }
        }
        if let Some(p) = &mut self.positions {
            out.push(p.data_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every trainable entry set to zero.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}

/// Per-block traces and the prediction for one sequence.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub blocks: Vec<ForwardTrace>,
    pub output: Matrix,
    pub prediction: f64,
}

/// Predictions `ŷ_b` and per-sequence traces for a batch of sequences.
pub fn model_forward(params: &ModelParams, inputs: &[Matrix]) -> Result<(Vec<f64>, Vec<ModelTrace>)> {
    let traces = inputs
        .iter()
        .map(|x| params.forward_traced(x))
        .collect::<Result<Vec<_>>>()?;
    Ok((traces.iter().map(|t| t.prediction).collect(), traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu;

    fn shape(variant: BlockVariant, blocks: usize) -> ModelShape {
        ModelShape {
            variant,
            blocks,
            width: 3,
            heads: 3,
            head_dim: 1,
            hidden: 12,
            ln_eps: 1e-5,
            positions: None,
        }
    }

    #[test]
    fn zero_skip_model_predicts_query_target_slot() {
        let params = ModelParams::zeros(&shape(BlockVariant::Skip, 1));
        let x = Matrix::from_rows(&[&[1.0, 0.3, -0.2], &[2.0, 0.1, 0.5], &[4.0, 7.0, 0.0]]);
        assert_eq!(params.predict(&x).unwrap(), 0.0);
    }

    #[test]
    fn identical_sequences_give_identical_predictions() {
        let params = ModelParams::init(&mut RngState::new(1), &shape(BlockVariant::PreLn, 2));
        let x = gaussian(&mut RngState::new(2), 3, 5);
        let (preds, _) = model_forward(&params, &[x.clone(), x]).unwrap();
        assert_eq!(preds[0], preds[1]);
    }

    /// Straight-line reimplementation with no traces or shared helpers.
    fn reference_predict(params: &ModelParams, x: &Matrix) -> f64 {
        let d = x.rows();
        let n = x.cols();
        let mut h: Vec<Vec<f64>> = (0..n).map(|i| x.col(i)).collect();
        let ln = |v: &[f64], p: &LnParams| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(|k| p.gamma[k] * (v[k] - m) / (var + p.eps).sqrt() + p.beta[k]).collect()
        };
        for b in &params.blocks {
            let a_in: Vec<Vec<f64>> = match &b.ln_attn {
                Some(p) => h.iter().map(|v| ln(v, p)).collect(),
                None => h.clone(),
            };
            let at = &b.attention;
            let proj = |m: &Matrix, v: &[f64]| -> Vec<f64> {
                (0..m.rows()).map(|r| (0..m.cols()).map(|c| m[(r, c)] * v[c]).sum()).collect()
            };
            let qs: Vec<_> = a_in.iter().map(|v| proj(&at.query, v)).collect();
            let ks: Vec<_> = a_in.iter().map(|v| proj(&at.key, v)).collect();
            let vs: Vec<_> = a_in.iter().map(|v| proj(&at.value, v)).collect();
            let mut next = Vec::new();
            for i in 0..n {
                let mut concat = vec![0.0; at.heads * at.head_dim];
                for hd in 0..at.heads {
                    let r = hd * at.head_dim..(hd + 1) * at.head_dim;
                    let s: Vec<f64> = (0..=i)
                        .map(|j| r.clone().map(|k| qs[i][k] * ks[j][k]).sum::<f64>() / (at.head_dim as f64).sqrt())
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for k in r.clone() {
                        concat[k] = (0..=i).map(|j| e[j] / z * vs[j][k]).sum();
                    }
                }
                let a = proj(&at.output, &concat);
                let q: Vec<f64> = if params.variant.has_skip() {
                    (0..d).map(|k| a[k] + h[i][k]).collect()
                } else {
                    a.clone()
                };
                let g = match params.variant {
                    BlockVariant::DherinSkip => a.clone(),
                    BlockVariant::PreLn => ln(&q, b.ln_mlp.as_ref().unwrap()),
                    _ => q.clone(),
                };
                let hid: Vec<f64> = proj(&b.mlp.w, &g).iter().zip(&b.mlp.b).map(|(v, bb)| gelu(v + bb)).collect();
                let m = proj(&b.mlp.w_out, &hid);
                let out: Vec<f64> = (0..d)
                    .map(|k| m[k] + b.mlp.b_out[k] + if params.variant.has_skip() { q[k] } else { 0.0 })
                    .collect();
                next.push(out);
            }
            h = next;
        }
        h[n - 1][params.readout]
    }

    #[test]
    fn prediction_matches_straight_line_reference() {
        for variant in BlockVariant::ALL {
            let mut rng = RngState::new(17);
            let mut params = ModelParams::init(&mut rng, &shape(variant, 3));
            for b in &mut params.blocks {
                b.mlp.b = gaussian(&mut rng, 1, 12).scale(0.1).data().to_vec();
                b.mlp.b_out = gaussian(&mut rng, 1, 3).scale(0.1).data().to_vec();
            }
            let x = gaussian(&mut rng, 3, 6);
            let got = params.predict(&x).unwrap();
            let want = reference_predict(&params, &x);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{variant}: {got} vs {want}");
        }
    }

    #[test]
    fn tensor_views_cover_every_parameter() {
        let mut params = ModelParams::init(&mut RngState::new(3), &shape(BlockVariant::PreLn, 2));
        let n = params.num_parameters();
        // Per block: 4 * 9 attention + 36 + 12 + 36 + 3 MLP + 12 LN.
        assert_eq!(n, 2 * (36 + 36 + 12 + 36 + 3 + 12));
        assert_eq!(params.tensors_mut().iter().map(|t| t.len()).sum::<usize>(), n);
    }

    #[test]
    fn positions_are_added_to_the_input() {
        let mut s = shape(BlockVariant::Skip, 1);
        s.positions = Some(4);
        let mut params = ModelParams::zeros(&s);
        params.positions.as_mut().unwrap()[(2, 3)] = 1.5;
        let x = gaussian(&mut RngState::new(4), 3, 4);
        let mut xq = x.clone();
        xq[(2, 3)] = 0.0;
        assert_eq!(params.predict(&xq).unwrap(), 1.5);
        assert!(params.embed(&gaussian(&mut RngState::new(4), 3, 5)).is_err());
    }
}
