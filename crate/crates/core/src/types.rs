//! Shared value types: score vectors, simplex points, shape parameters,
//! thresholds and recorded attention.
//!
//! Every type validates on construction and is immutable afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Absolute tolerance on `Σp = 1` used throughout the crate.
pub const SIMPLEX_TOL: f64 = 1e-8;

/// A row of logits, optionally masked. Masked positions never receive mass.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "ScoreVectorRepr", into = "ScoreVectorRepr"))]
pub struct ScoreVector {
    scores: Vec<f64>,
    mask: Option<Vec<bool>>,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone)]
struct ScoreVectorRepr {
    scores: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    mask: Option<Vec<bool>>,
}

impl TryFrom<ScoreVectorRepr> for ScoreVector {
    type Error = Error;
    fn try_from(r: ScoreVectorRepr) -> Result<Self> {
        match r.mask {
            Some(mask) => ScoreVector::masked(r.scores, mask),
            None => ScoreVector::new(r.scores),
        }
    }
}

impl From<ScoreVector> for ScoreVectorRepr {
    fn from(s: ScoreVector) -> Self {
        ScoreVectorRepr { scores: s.scores, mask: s.mask }
    }
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore { index });
        }
        Ok(Self { scores, mask: None })
    }

    /// `mask[i] == true` excludes position `i`. Masked scores may hold any
    /// value, including infinities.
    pub fn masked(scores: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput);
        }
        if mask.len() != scores.len() {
            return Err(Error::MaskLengthMismatch { scores: scores.len(), mask: mask.len() });
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::AllMasked);
        }
        if let Some(index) = (0..scores.len()).find(|&i| !mask[i] && !scores[i].is_finite()) {
            return Err(Error::NonFiniteScore { index });
        }
        Ok(Self { scores, mask: Some(mask) })
    }

    pub fn from_slice(scores: &[f64]) -> Result<Self> {
        Self::new(scores.to_vec())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    #[inline]
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn is_masked(&self, i: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[i])
    }

    /// Indices of unmasked positions, ascending.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_masked(i)).collect()
    }

    /// Scores restricted to unmasked positions, in index order.
    pub fn active_scores(&self) -> Vec<f64> {
        (0..self.len()).filter(|&i| !self.is_masked(i)).map(|i| self.scores[i]).collect()
    }

    /// Scatters `values` (one per unmasked position) back to full length,
    /// with exact zeros at masked positions.
    pub(crate) fn scatter(&self, values: Vec<f64>) -> Vec<f64> {
        match &self.mask {
            None => values,
            Some(mask) => {
                let mut out = vec![0.0; self.len()];
                let mut it = values.into_iter();
                for (o, &m) in out.iter_mut().zip(mask) {
                    if !m {
                        *o = it.next().expect("one value per unmasked position");
                    }
                }
                out
            }
        }
    }

    /// Adds `c` to every unmasked score.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        let scores = self
            .scores
            .iter()
            .enumerate()
            .map(|(i, &s)| if self.is_masked(i) { s } else { s + c })
            .collect();
        match &self.mask {
            None => Self::new(scores),
            Some(m) => Self::masked(scores, m.clone()),
        }
    }
}

/// A probability vector with its support (the strictly positive entries).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "SimplexRepr", into = "SimplexRepr"))]
pub struct SimplexPoint {
    probs: Vec<f64>,
    support: Vec<usize>,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone)]
struct SimplexRepr {
    probs: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    support: Vec<usize>,
}

impl TryFrom<SimplexRepr> for SimplexPoint {
    type Error = Error;
    fn try_from(r: SimplexRepr) -> Result<Self> {
        let p = validate_simplex(&r.probs, SIMPLEX_TOL)?;
        if !r.support.is_empty() && r.support != p.support {
            return Err(Error::ShapeMismatch("support disagrees with probabilities"));
        }
        Ok(p)
    }
}

impl From<SimplexPoint> for SimplexRepr {
    fn from(p: SimplexPoint) -> Self {
        SimplexRepr { probs: p.probs, support: p.support }
    }
}

impl SimplexPoint {
    /// Wraps solver output. Callers guarantee nonnegativity and normalization.
    pub(crate) fn from_probs(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|&p| p >= 0.0));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        let support = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
        Self { probs, support }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn in_support(&self, i: usize) -> bool {
        self.probs[i] > 0.0
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// Checks that `p` lies on the simplex within `tol` and computes its support.
///
/// Entries in `[-tol, 0)` are rounded to exactly zero.
pub fn validate_simplex(p: &[f64], tol: f64) -> Result<SimplexPoint> {
    if p.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = p.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteScore { index });
    }
    if let Some(index) = p.iter().position(|&x| x < -tol) {
        return Err(Error::NegativeEntry { index, value: p[index] });
    }
    let probs: Vec<f64> = p.iter().map(|&x| x.max(0.0)).collect();
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::NotNormalized { sum });
    }
    let support = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    Ok(SimplexPoint { probs, support })
}

/// Shape parameter α of an entmax mapping.
///
/// A learnable parameter stores the unconstrained pre-activation `raw` and
/// derives α = 1 + sigmoid(raw) ∈ (1, 2). A fixed parameter pins α to any
/// value in [1, ∞) and ignores `raw`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "ShapeRepr", into = "ShapeRepr"))]
pub struct ShapeParam {
    raw: f64,
    alpha: f64,
    fixed_alpha: Option<f64>,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy)]
struct ShapeRepr {
    raw: f64,
    alpha: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    fixed_alpha: Option<f64>,
}

impl TryFrom<ShapeRepr> for ShapeParam {
    type Error = Error;
    fn try_from(r: ShapeRepr) -> Result<Self> {
        let shape = match r.fixed_alpha {
            Some(a) => ShapeParam::fixed(a)?,
            None => ShapeParam::learnable(r.raw)?,
        };
        if (shape.alpha - r.alpha).abs() > 1e-12 {
            return Err(Error::InvalidAlpha(r.alpha));
        }
        Ok(shape)
    }
}

impl From<ShapeParam> for ShapeRepr {
    fn from(s: ShapeParam) -> Self {
        ShapeRepr { raw: s.raw, alpha: s.alpha, fixed_alpha: s.fixed_alpha }
    }
}

impl ShapeParam {
    pub fn learnable(raw: f64) -> Result<Self> {
        if !raw.is_finite() {
            return Err(Error::InvalidAlpha(raw));
        }
        Ok(Self { raw, alpha: 1.0 + math::sigmoid(raw), fixed_alpha: None })
    }

    pub fn fixed(alpha: f64) -> Result<Self> {
        if !(alpha >= 1.0) || !alpha.is_finite() {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(Self { raw: 0.0, alpha, fixed_alpha: Some(alpha) })
    }

    pub fn softmax() -> Self {
        Self { raw: 0.0, alpha: 1.0, fixed_alpha: Some(1.0) }
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    pub fn raw(&self) -> f64 {
        self.raw
    }

    #[inline]
    pub fn fixed_alpha(&self) -> Option<f64> {
        self.fixed_alpha
    }

    #[inline]
    pub fn is_learnable(&self) -> bool {
        self.fixed_alpha.is_none()
    }

    /// dα/d(raw) = σ(raw)(1 − σ(raw)); zero for fixed parameters.
    pub fn dalpha_draw(&self) -> f64 {
        if self.is_learnable() {
            let s = math::sigmoid(self.raw);
            s * (1.0 - s)
        } else {
            0.0
        }
    }

    /// Same kind of parameter with a new pre-activation. Fixed parameters are
    /// returned unchanged.
    pub fn with_raw(&self, raw: f64) -> Result<Self> {
        if self.is_learnable() {
            Self::learnable(raw)
        } else {
            Ok(*self)
        }
    }
}

/// The Lagrange multiplier τ of the normalization constraint together with
/// the size of the resulting support.
///
/// For α > 1, `p_i = [(α − 1) z_i − τ]_+^{1/(α−1)}`. For softmax τ is the
/// log-partition value, `p_i = exp(z_i − τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Threshold {
    pub tau: f64,
    pub support_size: usize,
}

impl Threshold {
    /// Rebuilds the full-length probability vector from `(τ, α, z)`.
    pub fn reconstruct(&self, z: &ScoreVector, alpha: f64) -> Vec<f64> {
        let values = z
            .active_scores()
            .into_iter()
            .map(|s| {
                if alpha == 1.0 {
                    math::exp(s - self.tau)
                } else {
                    let base = (alpha - 1.0) * s - self.tau;
                    if base > 0.0 {
                        math::powf(base, 1.0 / (alpha - 1.0))
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        z.scatter(values)
    }
}

/// Which attention mechanism produced a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum AttentionKind {
    EncoderSelf,
    Context,
    /// Causal: key `j` is hidden from query `i` whenever `j > i`.
    DecoderSelf,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::EncoderSelf => "encoder-self",
            AttentionKind::Context => "context",
            AttentionKind::DecoderSelf => "decoder-self",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder-self" => Some(Self::EncoderSelf),
            "context" => Some(Self::Context),
            "decoder-self" => Some(Self::DecoderSelf),
            _ => None,
        }
    }
}

impl core::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Query × key exclusion mask; `true` hides the key from that query.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<Vec<bool>>", into = "Vec<Vec<bool>>"))]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    excluded: Vec<bool>,
}

impl AttentionMask {
    pub fn none(queries: usize, keys: usize) -> Self {
        Self { queries, keys, excluded: vec![false; queries * keys] }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let queries = rows.len();
        let keys = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != keys) {
            return Err(Error::ShapeMismatch("ragged mask rows"));
        }
        Ok(Self { queries, keys, excluded: rows.concat() })
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut m = Self::none(n, n);
        for i in 0..n {
            for j in i + 1..n {
                m.excluded[i * n + j] = true;
            }
        }
        m
    }

    #[inline]
    pub fn queries(&self) -> usize {
        self.queries
    }

    #[inline]
    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn is_excluded(&self, query: usize, key: usize) -> bool {
        self.excluded[query * self.keys + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.excluded[query * self.keys..(query + 1) * self.keys]
    }

    pub fn unmasked_in_row(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&m| !m).count()
    }

    /// Union of two masks of the same shape.
    pub fn union(&self, other: &AttentionMask) -> Result<Self> {
        if self.queries != other.queries || self.keys != other.keys {
            return Err(Error::ShapeMismatch("mask shapes differ"));
        }
        let excluded = self.excluded.iter().zip(&other.excluded).map(|(a, b)| *a || *b).collect();
        Ok(Self { queries: self.queries, keys: self.keys, excluded })
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.queries).map(|q| self.row(q).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<bool>>> for AttentionMask {
    type Error = Error;
    fn try_from(rows: Vec<Vec<bool>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<AttentionMask> for Vec<Vec<bool>> {
    fn from(m: AttentionMask) -> Self {
        m.to_rows()
    }
}

/// Attention weights recorded from a forward pass, indexed
/// `[layer][head][query][key]`, with the shape parameter of every head.
///
/// Every row is a valid simplex point over its unmasked keys; masked
/// entries (including the implicit causal mask of decoder self-attention)
/// are exactly zero.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "TensorRepr", into = "TensorRepr"))]
pub struct AttentionTensor {
    kind: AttentionKind,
    shapes: Vec<Vec<ShapeParam>>,
    entries: Vec<Vec<Vec<Vec<f64>>>>,
    mask: Option<AttentionMask>,
}

/// Metadata block written ahead of the nested weights.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct TensorHeader {
    pub layers: usize,
    pub heads: usize,
    pub kind: AttentionKind,
    pub alpha_values: Vec<Vec<f64>>,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone)]
struct TensorRepr {
    header: TensorHeader,
    shapes: Vec<Vec<ShapeParam>>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    mask: Option<AttentionMask>,
    entries: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TryFrom<TensorRepr> for AttentionTensor {
    type Error = Error;
    fn try_from(r: TensorRepr) -> Result<Self> {
        let t = AttentionTensor::new(r.header.kind, r.shapes, r.entries, r.mask)?;
        if t.layers() != r.header.layers || t.heads() != r.header.heads {
            return Err(Error::ShapeMismatch("header disagrees with entries"));
        }
        Ok(t)
    }
}

impl From<AttentionTensor> for TensorRepr {
    fn from(t: AttentionTensor) -> Self {
        TensorRepr { header: t.header(), shapes: t.shapes, mask: t.mask, entries: t.entries }
    }
}

impl AttentionTensor {
    pub fn new(
        kind: AttentionKind,
        shapes: Vec<Vec<ShapeParam>>,
        entries: Vec<Vec<Vec<Vec<f64>>>>,
        mask: Option<AttentionMask>,
    ) -> Result<Self> {
        if entries.is_empty() || entries[0].is_empty() || entries[0][0].is_empty() {
            return Err(Error::EmptyInput);
        }
        let heads = entries[0].len();
        let queries = entries[0][0].len();
        let keys = entries[0][0][0].len();
        if keys == 0 {
            return Err(Error::EmptyInput);
        }
        if shapes.len() != entries.len() || shapes.iter().any(|l| l.len() != heads) {
            return Err(Error::ShapeMismatch("one shape parameter per (layer, head)"));
        }
        let mut effective = match mask {
            Some(m) => {
                if m.queries() != queries || m.keys() != keys {
                    return Err(Error::ShapeMismatch("mask does not match tensor"));
                }
                Some(m)
            }
            None => None,
        };
        if kind == AttentionKind::DecoderSelf {
            if queries != keys {
                return Err(Error::ShapeMismatch("decoder self-attention must be square"));
            }
            let causal = AttentionMask::causal(queries);
            effective = Some(match effective {
                Some(m) => m.union(&causal)?,
                None => causal,
            });
        }
        for (l, layer) in entries.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::ShapeMismatch("every layer needs the same number of heads"));
            }
            for (h, head) in layer.iter().enumerate() {
                if head.len() != queries {
                    return Err(Error::ShapeMismatch("every head needs the same query count"));
                }
                for (q, row) in head.iter().enumerate() {
                    if row.len() != keys {
                        return Err(Error::ShapeMismatch("every row needs the same key count"));
                    }
                    if let Some(m) = &effective {
                        if m.unmasked_in_row(q) == 0 {
                            return Err(Error::AllMaskedRow { row: q });
                        }
                        for (k, &p) in row.iter().enumerate() {
                            if m.is_excluded(q, k) && p != 0.0 {
                                return Err(if kind == AttentionKind::DecoderSelf && k > q {
                                    Error::CausalViolation { layer: l, head: h, query: q, key: k }
                                } else {
                                    Error::ShapeMismatch("masked entry carries mass")
                                });
                            }
                        }
                    }
                    validate_simplex(row, SIMPLEX_TOL)?;
                }
            }
        }
        Ok(Self { kind, shapes, entries, mask: effective })
    }

    /// Concatenates single- or multi-layer tensors along the layer axis.
    pub fn stack(parts: Vec<AttentionTensor>) -> Result<Self> {
        let mut it = parts.into_iter();
        let mut first = it.next().ok_or(Error::EmptyInput)?;
        for t in it {
            if t.kind != first.kind
                || t.heads() != first.heads()
                || t.queries() != first.queries()
                || t.keys() != first.keys()
                || t.mask != first.mask
            {
                return Err(Error::ShapeMismatch("stacked tensors differ in shape"));
            }
            first.shapes.extend(t.shapes);
            first.entries.extend(t.entries);
        }
        Ok(first)
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            layers: self.layers(),
            heads: self.heads(),
            kind: self.kind,
            alpha_values: self.alpha_values(),
        }
    }

    #[inline]
    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    #[inline]
    pub fn layers(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.entries[0].len()
    }

    #[inline]
    pub fn queries(&self) -> usize {
        self.entries[0][0].len()
    }

    #[inline]
    pub fn keys(&self) -> usize {
        self.entries[0][0][0].len()
    }

    pub fn shape(&self, layer: usize, head: usize) -> ShapeParam {
        self.shapes[layer][head]
    }

    pub fn shapes(&self) -> &[Vec<ShapeParam>] {
        &self.shapes
    }

    pub fn alpha_values(&self) -> Vec<Vec<f64>> {
        self.shapes.iter().map(|l| l.iter().map(ShapeParam::alpha).collect()).collect()
    }

    /// Rows of one head, `[query][key]`.
    pub fn head_rows(&self, layer: usize, head: usize) -> &[Vec<f64>] {
        &self.entries[layer][head]
    }

    #[inline]
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        &self.entries[layer][head][query]
    }

    pub fn entries(&self) -> &[Vec<Vec<Vec<f64>>>] {
        &self.entries
    }

    /// The effective mask, including the causal mask for decoder self-attention.
    pub fn mask(&self) -> Option<&AttentionMask> {
        self.mask.as_ref()
    }

    #[inline]
    pub fn is_masked(&self, query: usize, key: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m.is_excluded(query, key))
    }

    pub fn unmasked_keys(&self, query: usize) -> usize {
        match &self.mask {
            Some(m) => m.unmasked_in_row(query),
            None => self.keys(),
        }
    }
}
