//! Contextual blocks: a contextual layer followed by a two-layer GeLU MLP.
//!
//! All variants share one shape of computation on a `d × N` input `X`:
//!
//! ```text
//! Plain        q = A(X)                 g = q             out = MLP(g)
//! DherinSkip   q = A(X) + X             g = A(X)          out = q + MLP(g)
//! Skip         q = A(X) + X             g = q             out = q + MLP(g)
//! PreLn        q = A(LN(X)) + X         g = LN'(q)        out = q + MLP(g)
//! ```
//!
//! with `MLP(g) = W' gelu(W g + b) + b'` applied column by column. `q` is the
//! full contextual-layer output and `g` the full MLP input; the implicit
//! updates are built from these two quantities alone.

use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, AttentionParams};
use crate::error::{Error, Result};
use crate::tensor::{gaussian, gelu, layer_norm_cached, LayerNormCache, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockVariant {
    /// No skip connections, no normalisation.
    Plain,
    /// Skip around the block, but the MLP only sees the attention output.
    DherinSkip,
    /// Skip around attention and the MLP; the MLP sees `A(X) + X`.
    Skip,
    /// Pre-LN residual block.
    PreLn,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 4] = [
        BlockVariant::Plain,
        BlockVariant::DherinSkip,
        BlockVariant::Skip,
        BlockVariant::PreLn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Plain => "plain",
            BlockVariant::DherinSkip => "dherin-skip",
            BlockVariant::Skip => "skip",
            BlockVariant::PreLn => "pre-ln",
        }
    }

    pub fn has_skip(self) -> bool {
        !matches!(self, BlockVariant::Plain)
    }

    pub fn has_layer_norm(self) -> bool {
        matches!(self, BlockVariant::PreLn)
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?} (expected plain, dherin-skip, skip or pre-ln)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// First weight matrix `W`, `h × d`.
    pub w: Matrix,
    /// First bias `b`, length `h`.
    pub b: Vec<f64>,
    /// Second weight matrix `W'`, `d × h`.
    pub w_out: Matrix,
    /// Last-layer bias `b'`, length `d`.
    pub b_out: Vec<f64>,
}

impl MlpParams {
    pub fn init(rng: &mut RngState, width: usize, hidden: usize) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        MlpParams {
            w: gaussian(rng, hidden, width).scale(std),
            b: vec![0.0; hidden],
            w_out: gaussian(rng, width, hidden).scale(std),
            b_out: vec![0.0; width],
        }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        MlpParams {
            w: Matrix::zeros(hidden, width),
            b: vec![0.0; hidden],
            w_out: Matrix::zeros(width, hidden),
            b_out: vec![0.0; width],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    fn validate(&self, width: usize) -> Result<()> {
        let h = self.hidden();
        if self.w.shape() != (h, width)
            || self.b.len() != h
            || self.w_out.shape() != (width, h)
            || self.b_out.len() != width
        {
            return Err(Error::dims(
                "MlpParams",
                format!("W {h}x{width}, b {h}, W' {width}x{h}, b' {width}"),
                format!(
                    "W {:?}, b {}, W' {:?}, b' {}",
                    self.w.shape(),
                    self.b.len(),
                    self.w_out.shape(),
                    self.b_out.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LnParams {
    pub fn identity(width: usize, eps: f64) -> Self {
        LnParams {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            eps,
        }
    }

    /// Normalises every column of `x`.
    pub fn apply_columns(&self, x: &Matrix) -> Result<(Matrix, Vec<LayerNormCache>)> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut caches = Vec::with_capacity(x.cols());
        for c in 0..x.cols() {
            let (y, cache) = layer_norm_cached(&x.col(c), &self.gamma, &self.beta, self.eps)?;
            out.set_col(c, &y)?;
            caches.push(cache);
        }
        Ok((out, caches))
    }

    fn validate(&self, width: usize) -> Result<()> {
        if self.gamma.len() != width || self.beta.len() != width {
            return Err(Error::dims(
                "LnParams",
                format!("gamma/beta of length {width}"),
                format!("{}/{}", self.gamma.len(), self.beta.len()),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("layer norm eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub mlp: MlpParams,
    /// Pre-attention layer norm (Pre-LN only).
    pub ln_attn: Option<LnParams>,
    /// Pre-MLP layer norm (Pre-LN only).
    pub ln_mlp: Option<LnParams>,
}

impl BlockParams {
    pub fn width(&self) -> usize {
        self.attention.width()
    }

    pub fn validate(&self, variant: BlockVariant) -> Result<()> {
        self.attention.validate()?;
        let d = self.width();
        self.mlp.validate(d)?;
        match (variant.has_layer_norm(), &self.ln_attn, &self.ln_mlp) {
            (true, Some(a), Some(m)) => {
                a.validate(d)?;
                m.validate(d)
            }
            (false, None, None) => Ok(()),
            _ => Err(Error::InvalidConfig(format!(
                "layer norm parameters must be present iff the variant is pre-ln (variant {variant})"
            ))),
        }
    }

    /// Returns a copy with `W ← W + dw` and `b' ← b' + db`.
    pub fn patched(&self, dw: &Matrix, db: &[f64]) -> Result<BlockParams> {
        if dw.shape() != self.mlp.w.shape() || db.len() != self.mlp.b_out.len() {
            return Err(Error::dims(
                "patched block",
                format!("dW {:?}, db' {}", self.mlp.w.shape(), self.mlp.b_out.len()),
                format!("dW {:?}, db' {}", dw.shape(), db.len()),
            ));
        }
        let mut p = self.clone();
        p.mlp.w = p.mlp.w.add(dw)?;
        for (b, d) in p.mlp.b_out.iter_mut().zip(db) {
            *b += d;
        }
        Ok(p)
    }
}

/// Every intermediate of one block applied to one input sequence.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    /// Block input `(C, x)` (or just `x` on the query-only branch).
    pub input: Matrix,
    /// `LN(input)` and its caches, Pre-LN only.
    pub ln_attn: Option<(Matrix, Vec<LayerNormCache>)>,
    pub attention: AttentionCache,
    /// Contextual-layer output `A(·)`.
    pub attn_out: Matrix,
    /// Full contextual-layer output, skip included where the variant has one.
    pub q: Matrix,
    /// Full MLP input.
    pub g: Matrix,
    pub ln_mlp: Option<Vec<LayerNormCache>>,
    /// `W g + b`.
    pub pre: Matrix,
    /// `gelu(W g + b)`.
    pub hidden: Matrix,
    pub output: Matrix,
}

/// Context branch `(C_ℓ, x_ℓ)` and query-only branch `x_ℓ` of one block.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub variant: BlockVariant,
    pub context: BranchTrace,
    pub query: BranchTrace,
}

impl ForwardTrace {
    pub fn tokens(&self) -> usize {
        self.context.input.cols()
    }

    /// Block input at the query position, `x_ℓ`.
    pub fn query_input(&self) -> Vec<f64> {
        self.query.input.col(0)
    }

    /// Full MLP input with context at token `i` (0-based).
    pub fn g(&self, i: usize) -> Vec<f64> {
        self.context.g.col(i)
    }

    /// Full MLP input without context.
    pub fn f(&self) -> Vec<f64> {
        self.query.g.col(0)
    }

    pub fn q(&self, i: usize) -> Vec<f64> {
        self.context.q.col(i)
    }

    pub fn p(&self) -> Vec<f64> {
        self.query.q.col(0)
    }
}

/// Runs one block on a `d × N` sequence without the query-only branch.
pub fn block_forward_branch(params: &BlockParams, variant: BlockVariant, x: &Matrix) -> Result<BranchTrace> {
    if x.rows() != params.width() || x.cols() == 0 {
        return Err(Error::dims(
            "block_forward",
            format!("{} x N with N >= 1", params.width()),
            format!("{:?}", x.shape()),
        ));
    }
    let ln_attn = match (variant, &params.ln_attn) {
        (BlockVariant::PreLn, Some(ln)) => Some(ln.apply_columns(x)?),
        (BlockVariant::PreLn, None) => {
            return Err(Error::InvalidConfig("pre-ln block without layer norm parameters".into()))
        }
        _ => None,
    };
    let attn_in = ln_attn.as_ref().map_or(x, |(y, _)| y);
    let (attn_out, attention) = params.attention.forward_cached(attn_in, true)?;

    let q = if variant.has_skip() { attn_out.add(x)? } else { attn_out.clone() };
    let (g, ln_mlp) = match variant {
        BlockVariant::Plain | BlockVariant::Skip => (q.clone(), None),
        BlockVariant::DherinSkip => (attn_out.clone(), None),
        BlockVariant::PreLn => {
            let ln = params
                .ln_mlp
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("pre-ln block without layer norm parameters".into()))?;
            let (y, caches) = ln.apply_columns(&q)?;
            (y, Some(caches))
        }
    };

    let mlp = &params.mlp;
    let mut pre = mlp.w.matmul(&g)?;
    for r in 0..pre.rows() {
        for c in 0..pre.cols() {
            pre[(r, c)] += mlp.b[r];
        }
    }
    let hidden = pre.map(gelu);
    let mut output = mlp.w_out.matmul(&hidden)?;
    for r in 0..output.rows() {
        for c in 0..output.cols() {
            output[(r, c)] += mlp.b_out[r];
        }
    }
    if variant.has_skip() {
        output.add_assign(&q)?;
    }
    if !output.is_finite() {
        return Err(Error::NonFinite("block output"));
    }
    Ok(BranchTrace {
        input: x.clone(),
        ln_attn,
        attention,
        attn_out,
        q,
        g,
        ln_mlp,
        pre,
        hidden,
        output,
    })
}

/// Runs one block on `(C, x)` and, independently, on the query `x` alone.
pub fn block_forward(params: &BlockParams, variant: BlockVariant, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    let context = block_forward_branch(params, variant, x)?;
    let query_col = Matrix::column_vector(&x.col(x.cols() - 1));
    let query = block_forward_branch(params, variant, &query_col)?;
    Ok((
        context.output.clone(),
        ForwardTrace {
            variant,
            context,
            query,
        },
    ))
}

/// `T_{W+ΔW, b'+Δb'}(x)`: the block on the query alone with patched MLP parameters.
pub fn query_only_block_forward(
    params: &BlockParams,
    variant: BlockVariant,
    x: &[f64],
    dw: &Matrix,
    db: &[f64],
) -> Result<Vec<f64>> {
    let patched = params.patched(dw, db)?;
    let trace = block_forward_branch(&patched, variant, &Matrix::column_vector(x))?;
    Ok(trace.output.col(0))
}
