//! Implicit MLP updates equivalent to the context.
//!
//! For a block with full MLP input `g_i` (with context, token `i`) and `f`
//! (query alone), and full contextual-layer output `q_i` / `p`:
//!
//! ```text
//! ΔW_i  = W (g_i − f) fᵀ / ‖f‖²      so that (W + ΔW_i) f = W g_i
//! Δb'_i = q_i − p                    (zero for blocks without a skip)
//! ```
//!
//! Running the block on the query alone with `W + ΔW_i`, `b' + Δb'_i`
//! reproduces the context output at token `i`. Every `ΔW_i` of a block shares
//! the right factor `f`, so the stacked update is rank one as well.

use crate::error::{Error, Result};
use crate::model::{BlockParams, ForwardTrace};
use crate::tensor::{dot, norm, norm_sq, outer, sub_vec, top_two_singular_values, Matrix};

/// Guard on `‖f‖²` below which the query representation counts as degenerate.
pub fn degenerate_threshold(width: usize) -> f64 {
    1e-12 * width as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitUpdate {
    /// 0-based block index.
    pub block: usize,
    /// 0-based token index; reports add one.
    pub token: usize,
    /// `ΔW_i`, `h × d`.
    pub delta_w: Matrix,
    /// `Δb'_i`, length `d`.
    pub delta_b: Vec<f64>,
}

/// `W (g − f) fᵀ / ‖f‖²`.
pub fn general_weight_update(w: &Matrix, g: &[f64], f: &[f64]) -> Result<Matrix> {
    if g.len() != w.cols() || f.len() != w.cols() {
        return Err(Error::dims(
            "general_weight_update",
            format!("g, f of length {}", w.cols()),
            format!("{}, {}", g.len(), f.len()),
        ));
    }
    let fnorm = norm_sq(f);
    let threshold = degenerate_threshold(f.len());
    if !(fnorm >= threshold) {
        return Err(Error::DegenerateQuery {
            norm_sq: fnorm,
            threshold,
        });
    }
    let u = w.matvec(&sub_vec(g, f))?;
    let inv = 1.0 / fnorm;
    let v: Vec<f64> = f.iter().map(|x| x * inv).collect();
    Ok(outer(&u, &v))
}

/// `q − p`.
pub fn general_bias_update(q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if q.len() != p.len() {
        return Err(Error::dims(
            "general_bias_update",
            format!("equal lengths ({})", q.len()),
            p.len().to_string(),
        ));
    }
    Ok(sub_vec(q, p))
}

/// One update per token of block `block`, from its forward trace.
pub fn extract_updates(trace: &ForwardTrace, params: &BlockParams, block: usize) -> Result<Vec<ImplicitUpdate>> {
    let f = trace.f();
    let p = trace.p();
    let w = &params.mlp.w;
    (0..trace.tokens())
        .map(|i| {
            let delta_w = general_weight_update(w, &trace.g(i), &f)?;
            let delta_b = if trace.variant.has_skip() {
                general_bias_update(&trace.q(i), &p)?
            } else {
                vec![0.0; f.len()]
            };
            Ok(ImplicitUpdate {
                block,
                token: i,
                delta_w,
                delta_b,
            })
        })
        .collect()
}

/// Update for a single token, without computing the others.
pub fn extract_update(trace: &ForwardTrace, params: &BlockParams, block: usize, token: usize) -> Result<ImplicitUpdate> {
    if token >= trace.tokens() {
        return Err(Error::dims("extract_update", format!("token < {}", trace.tokens()), token.to_string()));
    }
    let f = trace.f();
    let delta_w = general_weight_update(&params.mlp.w, &trace.g(token), &f)?;
    let delta_b = if trace.variant.has_skip() {
        general_bias_update(&trace.q(token), &trace.p())?
    } else {
        vec![0.0; f.len()]
    };
    Ok(ImplicitUpdate {
        block,
        token,
        delta_w,
        delta_b,
    })
}

/// Token-stacked weights and biases of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedUpdate {
    /// `N` copies of `W`, `(hN) × d`.
    pub weights: Matrix,
    /// `ΔW_1; …; ΔW_N`, `(hN) × d`.
    pub delta_weights: Matrix,
    /// `N` copies of `b'`, length `dN`.
    pub biases: Vec<f64>,
    /// `Δb'_1; …; Δb'_N`, length `dN`.
    pub delta_biases: Vec<f64>,
}

impl StackedUpdate {
    pub fn tokens(&self) -> usize {
        self.biases.len() / self.weights.cols()
    }

    /// Weight and bias of the MLP that reproduces token `i` (0-based).
    pub fn token_mlp(&self, i: usize) -> Result<(Matrix, Vec<f64>)> {
        let d = self.weights.cols();
        let h = self.weights.rows() / self.tokens();
        let w = self
            .weights
            .row_range(i * h, (i + 1) * h)
            .add(&self.delta_weights.row_range(i * h, (i + 1) * h))?;
        let b = (0..d)
            .map(|k| self.biases[i * d + k] + self.delta_biases[i * d + k])
            .collect();
        Ok((w, b))
    }
}

pub fn stack_updates(updates: &[ImplicitUpdate], w: &Matrix, b_out: &[f64]) -> Result<StackedUpdate> {
    if updates.is_empty() {
        return Err(Error::dims("stack_updates", "at least one update", "none"));
    }
    for u in updates {
        if u.delta_w.shape() != w.shape() || u.delta_b.len() != b_out.len() {
            return Err(Error::dims(
                "stack_updates",
                format!("ΔW {:?}, Δb' {}", w.shape(), b_out.len()),
                format!("ΔW {:?}, Δb' {}", u.delta_w.shape(), u.delta_b.len()),
            ));
        }
    }
    let n = updates.len();
    let weights = Matrix::vstack(&vec![w.clone(); n])?;
    let delta_weights = Matrix::vstack(&updates.iter().map(|u| u.delta_w.clone()).collect::<Vec<_>>())?;
    let biases = b_out.repeat(n);
    let delta_biases = updates.iter().flat_map(|u| u.delta_b.iter().copied()).collect();
    Ok(StackedUpdate {
        weights,
        delta_weights,
        biases,
        delta_biases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankReport {
    pub sigma1: f64,
    pub sigma2: f64,
    /// `σ₂ / max(σ₁, tiny)`.
    pub ratio: f64,
}

pub fn update_rank(delta: &Matrix) -> Result<RankReport> {
    let (sigma1, sigma2) = top_two_singular_values(delta)?;
    Ok(RankReport {
        sigma1,
        sigma2,
        ratio: sigma2 / sigma1.max(f64::MIN_POSITIVE),
    })
}

/// `|cos|` between every nonzero row of `delta` and `direction`.
pub fn row_alignment(delta: &Matrix, direction: &[f64]) -> Vec<f64> {
    let dn = norm(direction);
    (0..delta.rows())
        .filter_map(|r| {
            let row = delta.row(r);
            let rn = norm(row);
            (rn > 0.0).then(|| dot(row, direction).abs() / (rn * dn))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{block_forward, query_only_block_forward, BlockVariant, ModelParams, ModelShape};
    use crate::tensor::{gaussian, max_abs, RngState};
    use proptest::prelude::*;

    #[test]
    fn identical_inputs_give_zero_update() {
        let w = gaussian(&mut RngState::new(1), 4, 3);
        let f = [0.3, -0.2, 1.0];
        assert_eq!(general_weight_update(&w, &f, &f).unwrap(), Matrix::zeros(4, 3));
    }

    #[test]
    fn hand_computed_update() {
        let w = Matrix::identity(2);
        let dw = general_weight_update(&w, &[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(dw, Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]));
        let lhs = w.add(&dw).unwrap().matvec(&[1.0, 0.0]).unwrap();
        assert_eq!(lhs, vec![1.0, 1.0]);
    }

    #[test]
    fn degenerate_query_is_an_error() {
        let w = Matrix::identity(3);
        let err = general_weight_update(&w, &[1.0, 0.0, 0.0], &[1e-7, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateQuery { .. }));
    }

    #[test]
    fn bias_update_cases() {
        assert_eq!(general_bias_update(&[1.0, 2.0], &[0.0, 2.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(general_bias_update(&[0.5], &[0.5]).unwrap(), vec![0.0]);
        assert!(general_bias_update(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn defining_identity_holds(seed in 0u64..10_000) {
            let mut rng = RngState::new(seed);
            let w = gaussian(&mut rng, 5, 4);
            let g = gaussian(&mut rng, 1, 4).data().to_vec();
            let f = gaussian(&mut rng, 1, 4).data().to_vec();
            let dw = general_weight_update(&w, &g, &f).unwrap();
            let lhs = w.add(&dw).unwrap().matvec(&f).unwrap();
            let rhs = w.matvec(&g).unwrap();
            let scale = max_abs(&rhs).max(1.0);
            prop_assert!(max_abs(&sub_vec(&lhs, &rhs)) <= 1e-12 * scale);
            prop_assert!(update_rank(&dw).unwrap().ratio <= 1e-10);
        }
    }

    fn skip_block() -> crate::model::BlockParams {
        let shape = ModelShape {
            variant: BlockVariant::Skip,
            blocks: 1,
            width: 3,
            heads: 3,
            head_dim: 1,
            hidden: 12,
            ln_eps: 1e-5,
            positions: None,
        };
        ModelParams::init(&mut RngState::new(21), &shape).blocks.remove(0)
    }

    #[test]
    fn skip_bias_update_is_attention_plus_input_delta() {
        let block = skip_block();
        let x = gaussian(&mut RngState::new(22), 3, 5);
        let (_, trace) = block_forward(&block, BlockVariant::Skip, &x).unwrap();
        let updates = extract_updates(&trace, &block, 0).unwrap();
        let xq = x.col(4);
        let a_q = trace.query.attn_out.col(0);
        for (i, u) in updates.iter().enumerate() {
            let a_i = trace.context.attn_out.col(i);
            let x_i = x.col(i);
            for k in 0..3 {
                let expected = (a_i[k] - a_q[k]) + (x_i[k] - xq[k]);
                assert!((u.delta_b[k] - expected).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn stacked_update_is_rank_one_and_reproduces_tokens() {
        let block = skip_block();
        let x = gaussian(&mut RngState::new(23), 3, 7);
        let (out, trace) = block_forward(&block, BlockVariant::Skip, &x).unwrap();
        let updates = extract_updates(&trace, &block, 0).unwrap();
        let stacked = stack_updates(&updates, &block.mlp.w, &block.mlp.b_out).unwrap();
        assert_eq!(stacked.delta_weights.shape(), (12 * 7, 3));
        assert_eq!(stacked.delta_biases.len(), 3 * 7);
        assert!(update_rank(&stacked.delta_weights).unwrap().ratio <= 1e-10);

        let f = trace.f();
        for c in row_alignment(&stacked.delta_weights, &f) {
            assert!((c - 1.0).abs() <= 1e-12);
        }

        let xq = trace.query_input();
        for i in 0..7 {
            let (w_i, b_i) = stacked.token_mlp(i).unwrap();
            let dw = w_i.sub(&block.mlp.w).unwrap();
            let db = sub_vec(&b_i, &block.mlp.b_out);
            let rhs = query_only_block_forward(&block, BlockVariant::Skip, &xq, &dw, &db).unwrap();
            assert!(max_abs(&sub_vec(&rhs, &out.col(i))) <= 1e-12);
        }
    }

    #[test]
    fn single_update_stacks_to_itself() {
        let block = skip_block();
        let x = gaussian(&mut RngState::new(24), 3, 1);
        let (_, trace) = block_forward(&block, BlockVariant::Skip, &x).unwrap();
        let updates = extract_updates(&trace, &block, 0).unwrap();
        let stacked = stack_updates(&updates, &block.mlp.w, &block.mlp.b_out).unwrap();
        assert_eq!(stacked.delta_weights, updates[0].delta_w);
        assert_eq!(updates[0].delta_w, Matrix::zeros(12, 3));
        assert_eq!(updates[0].delta_b, vec![0.0; 3]);
    }

    #[test]
    fn zero_matrix_rank_report() {
        let r = update_rank(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!((r.sigma1, r.sigma2, r.ratio), (0.0, 0.0, 0.0));
    }
}
