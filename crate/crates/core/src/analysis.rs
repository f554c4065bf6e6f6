//! Head-level metrics over recorded attention: density, diversity across
//! heads, positional confidence and cluster-merge scores, plus a log of α
//! values over training.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::transforms::shannon_entropy;
use crate::types::{validate_simplex, AttentionKind, AttentionTensor, SIMPLEX_TOL};

/// Threshold recommended for attention maps produced elsewhere, where zeros
/// may not be exact.
pub const IMPORTED_DENSITY_EPS: f64 = 1e-9;

struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    const fn new() -> Self {
        Self { sum: 0.0, count: 0 }
    }

    fn push(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn row_density(tensor: &AttentionTensor, row: &[f64], query: usize, eps: f64) -> f64 {
    let nonzero =
        row.iter().enumerate().filter(|&(k, &p)| !tensor.is_masked(query, k) && p > eps).count();
    nonzero as f64 / tensor.unmasked_keys(query) as f64
}

fn accumulate_density(tensor: &AttentionTensor, eps: f64, acc: &mut [Vec<Mean>]) {
    for (l, layer) in acc.iter_mut().enumerate() {
        for (h, mean) in layer.iter_mut().enumerate() {
            for (q, row) in tensor.head_rows(l, h).iter().enumerate() {
                mean.push(row_density(tensor, row, q, eps));
            }
        }
    }
}

fn mean_grid(layers: usize, heads: usize) -> Vec<Vec<Mean>> {
    (0..layers).map(|_| (0..heads).map(|_| Mean::new()).collect()).collect()
}

/// Fraction of unmasked keys with weight above `eps`, averaged over query
/// rows, for every `(layer, head)`. Softmax rows always score 1.
pub fn attention_density(tensor: &AttentionTensor, eps: f64) -> Vec<Vec<f64>> {
    let mut acc = mean_grid(tensor.layers(), tensor.heads());
    accumulate_density(tensor, eps, &mut acc);
    acc.iter().map(|l| l.iter().map(|m| m.get().unwrap_or(0.0)).collect()).collect()
}

/// Generalized Jensen-Shannon divergence of `H ≥ 2` distributions over the
/// same `d ≥ 2` outcomes: entropy of the mean minus mean entropy, with
/// entropies in base `d` so the result lies in `[0, 1]`.
pub fn js_divergence<R: AsRef<[f64]>>(head_rows: &[R]) -> Result<f64> {
    if head_rows.len() < 2 {
        return Err(Error::DimensionMismatch);
    }
    let d = head_rows[0].as_ref().len();
    if d < 2 || head_rows.iter().any(|r| r.as_ref().len() != d) {
        return Err(Error::DimensionMismatch);
    }
    for r in head_rows {
        validate_simplex(r.as_ref(), SIMPLEX_TOL)?;
    }
    Ok(js_unchecked(head_rows, d))
}

fn js_unchecked<R: AsRef<[f64]>>(head_rows: &[R], d: usize) -> f64 {
    let h = head_rows.len() as f64;
    let mut mean = vec![0.0; d];
    let mut mean_entropy = 0.0;
    for r in head_rows {
        let r = r.as_ref();
        for (m, &p) in mean.iter_mut().zip(r) {
            *m += p / h;
        }
        mean_entropy += shannon_entropy(r) / h;
    }
    let js = (shannon_entropy(&mean) - mean_entropy) / math::ln(d as f64);
    js.clamp(0.0, 1.0)
}

fn accumulate_js(tensor: &AttentionTensor, layer: usize, acc: &mut Mean) {
    let d = tensor.keys();
    if tensor.heads() < 2 || d < 2 {
        return;
    }
    for q in 0..tensor.queries() {
        let rows: Vec<&[f64]> = (0..tensor.heads()).map(|h| tensor.row(layer, h, q)).collect();
        acc.push(js_unchecked(&rows, d));
    }
}

/// Head diversity of one layer: JS across heads per query position,
/// averaged over positions.
pub fn layer_js(tensor: &AttentionTensor, layer: usize) -> Result<f64> {
    if layer >= tensor.layers() || tensor.heads() < 2 || tensor.keys() < 2 {
        return Err(Error::DimensionMismatch);
    }
    let mut acc = Mean::new();
    accumulate_js(tensor, layer, &mut acc);
    acc.get().ok_or(Error::DimensionMismatch)
}

fn accumulate_positional(tensor: &AttentionTensor, offset: i64, acc: &mut [Vec<Mean>]) {
    let keys = tensor.keys() as i64;
    for t in 0..tensor.queries() {
        let target = t as i64 + offset;
        if target < 0 || target >= keys || tensor.is_masked(t, target as usize) {
            continue;
        }
        for (l, layer) in acc.iter_mut().enumerate() {
            for (h, mean) in layer.iter_mut().enumerate() {
                mean.push(tensor.row(l, h, t)[target as usize]);
            }
        }
    }
}

/// Mean weight a head puts on key `t + offset` from query `t`, over every
/// query whose target key exists and is unmasked.
pub fn positional_confidence(tensor: &AttentionTensor, offset: i64) -> Result<Vec<Vec<f64>>> {
    let mut acc = mean_grid(tensor.layers(), tensor.heads());
    accumulate_positional(tensor, offset, &mut acc);
    collect_means(acc).ok_or(Error::NoValidPositions { offset })
}

fn collect_means(acc: Vec<Vec<Mean>>) -> Option<Vec<Vec<f64>>> {
    acc.iter().map(|l| l.iter().map(Mean::get).collect()).collect()
}

fn check_partition(clusters: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for c in clusters {
        if c.is_empty() {
            return Err(Error::InvalidPartition);
        }
        for &t in c {
            if t >= n || seen[t] {
                return Err(Error::InvalidPartition);
            }
            seen[t] = true;
        }
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(Error::InvalidPartition)
    }
}

fn cluster_score(rows: &[Vec<f64>], cluster: &[usize]) -> f64 {
    cluster.iter().map(|&t| cluster.iter().map(|&j| rows[t][j]).sum::<f64>()).fold(0.0, f64::max)
}

fn accumulate_clusters(tensor: &AttentionTensor, clusters: &[Vec<usize>], acc: &mut [Vec<Mean>]) {
    for (l, layer) in acc.iter_mut().enumerate() {
        for (h, mean) in layer.iter_mut().enumerate() {
            let rows = tensor.head_rows(l, h);
            for c in clusters {
                mean.push(cluster_score(rows, c));
            }
        }
    }
}

/// For each cluster, the largest attention mass any member token keeps
/// inside the cluster (a singleton scores its self-weight); averaged over
/// clusters, per head of `layer`.
pub fn cluster_merge_score(
    tensor: &AttentionTensor,
    layer: usize,
    clusters: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if tensor.queries() != tensor.keys() {
        return Err(Error::ShapeMismatch("cluster scores need self-attention"));
    }
    if layer >= tensor.layers() {
        return Err(Error::DimensionMismatch);
    }
    check_partition(clusters, tensor.queries())?;
    Ok((0..tensor.heads())
        .map(|h| {
            let rows = tensor.head_rows(layer, h);
            let total: f64 = clusters.iter().map(|c| cluster_score(rows, c)).sum();
            total / clusters.len() as f64
        })
        .collect())
}

/// One logged α value.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaRecord {
    pub step: u64,
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
    pub alpha: f64,
}

/// Append-only log of α per head over training.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaTrajectory {
    records: Vec<AlphaRecord>,
}

impl AlphaTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one row per head of `layer`.
    pub fn record(&mut self, step: u64, kind: AttentionKind, layer: usize, alphas: &[f64]) {
        self.records.extend(alphas.iter().enumerate().map(|(head, &alpha)| AlphaRecord {
            step,
            kind,
            layer,
            head,
            alpha,
        }));
    }

    pub fn records(&self) -> &[AlphaRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// α values of one head in logging order.
    pub fn series(&self, kind: AttentionKind, layer: usize, head: usize) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.kind == kind && r.layer == layer && r.head == head)
            .map(|r| (r.step, r.alpha))
            .collect()
    }

    /// CSV with header `step,kind,layer,head,alpha`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,kind,layer,head,alpha\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.step, r.kind, r.layer, r.head, r.alpha));
        }
        out
    }
}

/// Confidence of every head at one offset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionalConfidence {
    pub offset: i64,
    /// `[layer][head]`.
    pub values: Vec<Vec<f64>>,
}

/// Corpus-level metrics for one attention mechanism.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub kind: AttentionKind,
    pub layers: usize,
    pub heads: usize,
    /// `[layer][head]`.
    pub densities: Vec<Vec<f64>>,
    /// Mean JS across heads per layer; `None` with a single head.
    pub js_per_layer: Option<Vec<f64>>,
    pub positional_confidence: Vec<PositionalConfidence>,
    /// `[layer][head]`.
    pub alpha_snapshot: Vec<Vec<f64>>,
    /// `[layer][head]`.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub cluster_scores: Option<Vec<Vec<f64>>>,
}

/// What to compute in [`MetricReport::from_tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub density_eps: f64,
    pub offsets: Vec<i64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { density_eps: 0.0, offsets: vec![-1, 0, 1] }
    }
}

impl MetricReport {
    /// Aggregates over a corpus of tensors (one per sequence) of the same
    /// kind and layout. Densities, confidences and cluster scores pool all
    /// rows; JS is computed per (layer, query, sequence) and then averaged.
    /// `clusters`, when given, holds one partition per tensor.
    pub fn from_tensors(
        tensors: &[AttentionTensor],
        opts: &ReportOptions,
        clusters: Option<&[Vec<Vec<usize>>]>,
    ) -> Result<Self> {
        let first = tensors.first().ok_or(Error::EmptyInput)?;
        let (layers, heads, kind) = (first.layers(), first.heads(), first.kind());
        if tensors.iter().any(|t| t.layers() != layers || t.heads() != heads || t.kind() != kind) {
            return Err(Error::ShapeMismatch("tensors differ in layout"));
        }
        if let Some(c) = clusters {
            if c.len() != tensors.len() {
                return Err(Error::LengthMismatch { expected: tensors.len(), found: c.len() });
            }
        }

        let mut density = mean_grid(layers, heads);
        let mut js: Vec<Mean> = (0..layers).map(|_| Mean::new()).collect();
        let mut positional: Vec<Vec<Vec<Mean>>> =
            opts.offsets.iter().map(|_| mean_grid(layers, heads)).collect();
        let mut cluster_acc = mean_grid(layers, heads);
        for (i, t) in tensors.iter().enumerate() {
            accumulate_density(t, opts.density_eps, &mut density);
            for (l, acc) in js.iter_mut().enumerate() {
                accumulate_js(t, l, acc);
            }
            for (o, acc) in opts.offsets.iter().zip(&mut positional) {
                accumulate_positional(t, *o, acc);
            }
            if let Some(c) = clusters {
                if t.queries() != t.keys() {
                    return Err(Error::ShapeMismatch("cluster scores need self-attention"));
                }
                check_partition(&c[i], t.queries())?;
                accumulate_clusters(t, &c[i], &mut cluster_acc);
            }
        }

        let positional_confidence = opts
            .offsets
            .iter()
            .zip(positional)
            .map(|(&offset, acc)| {
                collect_means(acc)
                    .map(|values| PositionalConfidence { offset, values })
                    .ok_or(Error::NoValidPositions { offset })
            })
            .collect::<Result<Vec<_>>>()?;
        let js_per_layer =
            (heads >= 2).then(|| js.iter().map(|m| m.get().unwrap_or(0.0)).collect());
        let report = MetricReport {
            kind,
            layers,
            heads,
            densities: collect_means(density).ok_or(Error::EmptyInput)?,
            js_per_layer,
            positional_confidence,
            alpha_snapshot: first.alpha_values(),
            cluster_scores: match clusters {
                Some(_) => Some(collect_means(cluster_acc).ok_or(Error::InvalidPartition)?),
                None => None,
            },
        };
        debug_assert!(report.in_range());
        Ok(report)
    }

    /// Whether every value lies in its documented range.
    pub fn in_range(&self) -> bool {
        let unit = |x: &f64| (0.0..=1.0).contains(x);
        self.densities.iter().flatten().all(unit)
            && self.js_per_layer.iter().flatten().all(unit)
            && self.positional_confidence.iter().flat_map(|p| p.values.iter().flatten()).all(unit)
            && self.cluster_scores.iter().flatten().flatten().all(|x| unit(&(x - 1e-12).max(0.0)))
            && self.alpha_snapshot.iter().flatten().all(|&a| a >= 1.0)
    }

    /// Long-format rows `(layer, head, metric, value)`; per-layer metrics
    /// use head `None`.
    pub fn long_rows(&self) -> Vec<(usize, Option<usize>, String, f64)> {
        let mut rows = Vec::new();
        for l in 0..self.layers {
            for h in 0..self.heads {
                rows.push((l, Some(h), String::from("density"), self.densities[l][h]));
                rows.push((l, Some(h), String::from("alpha"), self.alpha_snapshot[l][h]));
                for p in &self.positional_confidence {
                    rows.push((l, Some(h), format!("confidence[{:+}]", p.offset), p.values[l][h]));
                }
                if let Some(c) = &self.cluster_scores {
                    rows.push((l, Some(h), String::from("cluster_merge"), c[l][h]));
                }
            }
            if let Some(js) = &self.js_per_layer {
                rows.push((l, None, String::from("js_divergence"), js[l]));
            }
        }
        rows
    }
}
