//! Scaled dot-product and multi-head attention with an α-entmax row
//! normalizer per head, plus the explicit backward pass through the block,
//! including the per-head shape parameters.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gradients::{grad_alpha, vjp_scores, EntmaxBackwardContext};
use crate::linalg::{dot, Matrix};
use crate::math;
use crate::transforms::{entmax, DEFAULT_TOL};
use crate::types::{
    AttentionKind, AttentionMask, AttentionTensor, ScoreVector, ShapeParam, SimplexPoint,
};

/// Lower-triangular mask for decoder self-attention over `n` positions.
pub fn causal_mask(n: usize) -> AttentionMask {
    AttentionMask::causal(n)
}

/// Learned maps of one head, each `model_dim × head_dim`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadProjection {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
}

impl HeadProjection {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() {
            return Err(Error::ShapeMismatch("query, key and value maps differ in shape"));
        }
        if w_q.rows() == 0 || w_q.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        for (m, name) in [(&w_q, "w_q"), (&w_k, "w_k"), (&w_v, "w_v")] {
            if !m.is_finite() {
                return Err(Error::NonFiniteWeight(name));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }
}

/// `H` heads with independent shape parameters and an output map of shape
/// `(H · head_dim) × model_dim`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiHeadBlock {
    heads: Vec<HeadProjection>,
    shapes: Vec<ShapeParam>,
    w_out: Matrix,
    kind: AttentionKind,
    #[cfg_attr(feature = "serde", serde(default = "default_tol"))]
    tol: f64,
}

#[cfg(feature = "serde")]
fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl MultiHeadBlock {
    pub fn new(
        heads: Vec<HeadProjection>,
        shapes: Vec<ShapeParam>,
        w_out: Matrix,
        kind: AttentionKind,
    ) -> Result<Self> {
        let first = heads.first().ok_or(Error::EmptyInput)?;
        if shapes.len() != heads.len() {
            return Err(Error::ShapeMismatch("one shape parameter per head"));
        }
        if heads
            .iter()
            .any(|h| h.model_dim() != first.model_dim() || h.head_dim() != first.head_dim())
        {
            return Err(Error::ShapeMismatch("heads differ in dimensions"));
        }
        if w_out.rows() != heads.len() * first.head_dim() {
            return Err(Error::ShapeMismatch("w_out rows must equal heads × head_dim"));
        }
        if !w_out.is_finite() {
            return Err(Error::NonFiniteWeight("w_out"));
        }
        Ok(Self { heads, shapes, w_out, kind, tol: DEFAULT_TOL })
    }

    /// Residual tolerance handed to the bisection solver.
    pub fn with_tol(mut self, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidTolerance(tol));
        }
        self.tol = tol;
        Ok(self)
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn model_dim(&self) -> usize {
        self.heads[0].model_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].head_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.w_out.cols()
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn heads(&self) -> &[HeadProjection] {
        &self.heads
    }

    pub fn shapes(&self) -> &[ShapeParam] {
        &self.shapes
    }

    pub fn w_out(&self) -> &Matrix {
        &self.w_out
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.shapes.iter().map(ShapeParam::alpha).collect()
    }

    /// Number of scalars returned by [`Self::params_flat`].
    pub fn num_params(&self) -> usize {
        let per_head = 3 * self.model_dim() * self.head_dim();
        self.heads.len() * per_head + self.w_out.as_slice().len() + self.heads.len()
    }

    /// Parameters in a fixed order: for each head `w_q`, `w_k`, `w_v`
    /// (row-major), then `w_out`, then one raw α per head. Fixed shape
    /// parameters still occupy a slot.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for h in &self.heads {
            out.extend_from_slice(h.w_q.as_slice());
            out.extend_from_slice(h.w_k.as_slice());
            out.extend_from_slice(h.w_v.as_slice());
        }
        out.extend_from_slice(self.w_out.as_slice());
        out.extend(self.shapes.iter().map(ShapeParam::raw));
        out
    }

    /// Inverse of [`Self::params_flat`]. Raw entries of fixed shape
    /// parameters are ignored.
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::LengthMismatch { expected: self.num_params(), found: params.len() });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteWeight("parameter vector"));
        }
        let mut offset = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[offset..offset + dst.len()]);
            offset += dst.len();
        };
        for h in &mut self.heads {
            take(h.w_q.as_mut_slice());
            take(h.w_k.as_mut_slice());
            take(h.w_v.as_mut_slice());
        }
        take(self.w_out.as_mut_slice());
        let raw_start = params.len() - self.shapes.len();
        for (i, s) in self.shapes.iter_mut().enumerate() {
            *s = s.with_raw(params[raw_start + i])?;
        }
        Ok(())
    }
}

/// Output of one scaled dot-product attention call.
#[derive(Debug, Clone)]
pub struct ScaledDotAttention {
    /// `n × d_v` attended values.
    pub output: Matrix,
    /// One normalized row per query.
    pub rows: Vec<SimplexPoint>,
    contexts: Vec<EntmaxBackwardContext>,
    weights: Matrix,
}

impl ScaledDotAttention {
    /// Attention weights as an `n × m` matrix.
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// The weights as a one-layer, one-head tensor.
    pub fn to_tensor(
        &self,
        kind: AttentionKind,
        shape: ShapeParam,
        mask: Option<&AttentionMask>,
    ) -> Result<AttentionTensor> {
        AttentionTensor::new(
            kind,
            alloc::vec![alloc::vec![shape]],
            alloc::vec![alloc::vec![self.weights.to_rows()]],
            mask.cloned(),
        )
    }
}

fn check_mask(mask: Option<&AttentionMask>, n: usize, m: usize) -> Result<()> {
    if let Some(mask) = mask {
        if mask.queries() != n || mask.keys() != m {
            return Err(Error::ShapeMismatch("mask does not match queries × keys"));
        }
    }
    Ok(())
}

/// `π(Q Kᵀ / √d) V`, where π applies α-entmax with the given shape to every
/// row of scores.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    shape: &ShapeParam,
    mask: Option<&AttentionMask>,
) -> Result<ScaledDotAttention> {
    scaled_dot_attention_tol(q, k, v, shape, mask, DEFAULT_TOL)
}

pub(crate) fn scaled_dot_attention_tol(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    shape: &ShapeParam,
    mask: Option<&AttentionMask>,
    tol: f64,
) -> Result<ScaledDotAttention> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch("queries and keys differ in width"));
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch("keys and values differ in count"));
    }
    let (n, m) = (q.rows(), k.rows());
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput);
    }
    check_mask(mask, n, m)?;
    let inv_sqrt_d = 1.0 / math::sqrt(q.cols() as f64);
    let mut scores = q.matmul_t(k);
    scores.scale(inv_sqrt_d);

    let mut rows = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    let mut weights = Matrix::zeros(n, m);
    for i in 0..n {
        let z = match mask {
            Some(mask) if mask.row(i).iter().any(|&x| x) => {
                if mask.unmasked_in_row(i) == 0 {
                    return Err(Error::AllMaskedRow { row: i });
                }
                ScoreVector::masked(scores.row(i).to_vec(), mask.row(i).to_vec())?
            }
            _ => ScoreVector::from_slice(scores.row(i))?,
        };
        let (p, _) = entmax(&z, shape, tol)?;
        weights.row_mut(i).copy_from_slice(p.probs());
        contexts.push(EntmaxBackwardContext::new(p.clone(), shape.alpha())?);
        rows.push(p);
    }
    let output = weights.matmul(v);
    Ok(ScaledDotAttention { output, rows, contexts, weights })
}

struct HeadCache {
    q_proj: Matrix,
    k_proj: Matrix,
    v_proj: Matrix,
    attention: ScaledDotAttention,
}

/// Everything [`multi_head_backward`] needs from the forward pass.
pub struct ForwardCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    heads: Vec<HeadCache>,
    concat: Matrix,
}

/// Result of [`multi_head_forward`].
pub struct MultiHeadForward {
    /// `n × out_dim`.
    pub output: Matrix,
    /// One-layer tensor with every head's attention rows.
    pub attention: AttentionTensor,
    pub cache: ForwardCache,
}

fn effective_mask(
    block: &MultiHeadBlock,
    mask: Option<&AttentionMask>,
    n: usize,
    m: usize,
) -> Result<Option<AttentionMask>> {
    check_mask(mask, n, m)?;
    if block.kind == AttentionKind::DecoderSelf {
        if n != m {
            return Err(Error::ShapeMismatch("decoder self-attention must be square"));
        }
        let causal = causal_mask(n);
        return Ok(Some(match mask {
            Some(mask) => mask.union(&causal)?,
            None => causal,
        }));
    }
    Ok(mask.cloned())
}

/// Runs every head on `(Q W_q, K W_k, V W_v)`, concatenates the head
/// outputs and applies `w_out`. Decoder self-attention blocks always add
/// the causal mask.
pub fn multi_head_forward(
    block: &MultiHeadBlock,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&AttentionMask>,
) -> Result<MultiHeadForward> {
    let dm = block.model_dim();
    if q.cols() != dm || k.cols() != dm || v.cols() != dm {
        return Err(Error::ShapeMismatch("inputs must have model_dim columns"));
    }
    let mask = effective_mask(block, mask, q.rows(), k.rows())?;
    let hd = block.head_dim();
    let mut concat = Matrix::zeros(q.rows(), block.num_heads() * hd);
    let mut heads = Vec::with_capacity(block.num_heads());
    let mut maps = Vec::with_capacity(block.num_heads());
    for (h, (proj, shape)) in block.heads.iter().zip(&block.shapes).enumerate() {
        let q_proj = q.matmul(&proj.w_q);
        let k_proj = k.matmul(&proj.w_k);
        let v_proj = v.matmul(&proj.w_v);
        let attention =
            scaled_dot_attention_tol(&q_proj, &k_proj, &v_proj, shape, mask.as_ref(), block.tol)?;
        concat.set_columns(h * hd, &attention.output);
        maps.push(attention.weights.to_rows());
        heads.push(HeadCache { q_proj, k_proj, v_proj, attention });
    }
    let output = concat.matmul(&block.w_out);
    let attention = AttentionTensor::new(
        block.kind,
        alloc::vec![block.shapes.clone()],
        alloc::vec![maps],
        mask,
    )?;
    let cache = ForwardCache { q: q.clone(), k: k.clone(), v: v.clone(), heads, concat };
    Ok(MultiHeadForward { output, attention, cache })
}

/// Gradients of one head's projections.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// Gradients of a scalar loss with respect to every block parameter and
/// every input.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradients {
    pub heads: Vec<HeadGradients>,
    pub w_out: Matrix,
    /// With respect to α itself, per head.
    pub alpha: Vec<f64>,
    /// With respect to the raw pre-activation, per head; zero for fixed heads.
    pub raw_alpha: Vec<f64>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl BlockGradients {
    /// Same layout as [`MultiHeadBlock::params_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.extend_from_slice(h.w_q.as_slice());
            out.extend_from_slice(h.w_k.as_slice());
            out.extend_from_slice(h.w_v.as_slice());
        }
        out.extend_from_slice(self.w_out.as_slice());
        out.extend_from_slice(&self.raw_alpha);
        out
    }
}

/// Backpropagates `upstream = ∂L/∂output` through the block.
pub fn multi_head_backward(
    block: &MultiHeadBlock,
    forward: &MultiHeadForward,
    upstream: &Matrix,
) -> Result<BlockGradients> {
    let cache = &forward.cache;
    if upstream.shape() != forward.output.shape() {
        return Err(Error::ShapeMismatch("upstream must match the block output"));
    }
    let hd = block.head_dim();
    let w_out = cache.concat.t_matmul(upstream);
    let d_concat = upstream.matmul_t(&block.w_out);

    let mut d_q = Matrix::zeros(cache.q.rows(), cache.q.cols());
    let mut d_k = Matrix::zeros(cache.k.rows(), cache.k.cols());
    let mut d_v = Matrix::zeros(cache.v.rows(), cache.v.cols());
    let mut heads = Vec::with_capacity(block.num_heads());
    let mut alpha = Vec::with_capacity(block.num_heads());
    let mut raw_alpha = Vec::with_capacity(block.num_heads());

    for (h, head) in cache.heads.iter().enumerate() {
        let proj = &block.heads[h];
        let shape = &block.shapes[h];
        let d_out = d_concat.columns(h * hd, hd);
        let att = &head.attention;
        // output = P · V_h
        let d_weights = d_out.matmul_t(&head.v_proj);
        let d_v_proj = att.weights.t_matmul(&d_out);

        let (n, m) = att.weights.shape();
        let mut d_scores = Matrix::zeros(n, m);
        let mut d_alpha = 0.0;
        for (i, ctx) in att.contexts.iter().enumerate() {
            let upstream_row = d_weights.row(i);
            d_scores.row_mut(i).copy_from_slice(&vjp_scores(ctx, upstream_row)?);
            if shape.is_learnable() {
                d_alpha += dot(upstream_row, &grad_alpha(ctx));
            }
        }
        d_scores.scale(1.0 / math::sqrt(hd as f64));
        let d_q_proj = d_scores.matmul(&head.k_proj);
        let d_k_proj = d_scores.t_matmul(&head.q_proj);

        heads.push(HeadGradients {
            w_q: cache.q.t_matmul(&d_q_proj),
            w_k: cache.k.t_matmul(&d_k_proj),
            w_v: cache.v.t_matmul(&d_v_proj),
        });
        d_q.add_assign(&d_q_proj.matmul_t(&proj.w_q));
        d_k.add_assign(&d_k_proj.matmul_t(&proj.w_k));
        d_v.add_assign(&d_v_proj.matmul_t(&proj.w_v));
        alpha.push(d_alpha);
        raw_alpha.push(d_alpha * shape.dalpha_draw());
    }
    Ok(BlockGradients { heads, w_out, alpha, raw_alpha, q: d_q, k: d_k, v: d_v })
}
