//! Forward α-entmax mappings.
//!
//! All mappings share the threshold form
//! `p_i = [(α − 1) z_i − τ]_+^{1/(α−1)}` with τ chosen so that `Σp = 1`.
//! Masked positions are removed before solving and come back as exact
//! zeros.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::types::{ScoreVector, ShapeParam, SimplexPoint, Threshold};

/// Iteration cap for [`entmax_bisect`].
pub const BISECT_MAX_ITER: usize = 100;

/// Bracket width at which bisection stops regardless of the residual.
pub const BISECT_MIN_WIDTH: f64 = 1e-14;

/// Distance from 1.5 within which [`entmax`] uses the exact 1.5 solver.
pub const ENTMAX15_DISPATCH_EPS: f64 = 1e-12;

/// Default residual tolerance used by the attention layers.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Softmax over unmasked positions, via max-subtraction.
///
/// The returned threshold holds the log-partition value `log Σ exp(z_j)`.
pub fn softmax(z: &ScoreVector) -> (SimplexPoint, Threshold) {
    let active = z.active_scores();
    let (probs, tau) = softmax_slice(&active);
    let support_size = probs.len();
    (SimplexPoint::from_probs(z.scatter(probs)), Threshold { tau, support_size })
}

fn softmax_slice(x: &[f64]) -> (Vec<f64>, f64) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = x.iter().map(|&v| math::exp(v - max)).collect();
    let sum = sorted_sum(&probs);
    for p in &mut probs {
        *p /= sum;
    }
    (probs, max + math::ln(sum))
}

/// Sum in descending order, so the result does not depend on the order of
/// the input. Keeps every mapping exactly permutation-equivariant.
fn sorted_sum(x: &[f64]) -> f64 {
    sorted_desc(x).iter().sum()
}

/// Euclidean projection onto the simplex by sort-and-scan.
pub fn sparsemax(z: &ScoreVector) -> (SimplexPoint, Threshold) {
    let active = z.active_scores();
    let (tau, support_size) = sparsemax_threshold(&active);
    let probs = active.iter().map(|&v| (v - tau).max(0.0)).collect();
    let probs = renormalize(probs);
    (SimplexPoint::from_probs(z.scatter(probs)), Threshold { tau, support_size })
}

fn sorted_desc(x: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted
}

fn sparsemax_threshold(x: &[f64]) -> (f64, usize) {
    let sorted = sorted_desc(x);
    let mut cumsum = 0.0;
    let mut best = (sorted[0] - 1.0, 1);
    // Condition holds on a prefix of k; equal scores pass or fail together.
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            best = ((cumsum - 1.0) / k, i + 1);
        }
    }
    best
}

/// Exact 1.5-entmax by sorting and solving one quadratic per support size.
///
/// With `s = z / 2`, the output is `p_i = [s_i − τ]_+²`.
pub fn entmax15_exact(z: &ScoreVector) -> (SimplexPoint, Threshold) {
    let active: Vec<f64> = z.active_scores().into_iter().map(|v| v / 2.0).collect();
    let (tau, support_size) = entmax15_threshold(&active);
    let probs = active
        .iter()
        .map(|&s| {
            let d = (s - tau).max(0.0);
            d * d
        })
        .collect();
    let probs = renormalize(probs);
    (SimplexPoint::from_probs(z.scatter(probs)), Threshold { tau, support_size })
}

fn entmax15_threshold(s: &[f64]) -> (f64, usize) {
    let sorted = sorted_desc(s);
    let mut best = (sorted[0] - 1.0, 1);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for (i, &v) in sorted.iter().enumerate() {
        sum += v;
        sum_sq += v * v;
        let k = (i + 1) as f64;
        let mean = sum / k;
        // k τ² − 2 Σs τ + Σs² − 1 = 0, smaller root.
        let disc = 1.0 / k - (sum_sq / k - mean * mean);
        if disc < 0.0 {
            continue;
        }
        let tau = mean - math::sqrt(disc);
        if tau < v {
            best = (tau, i + 1);
        }
    }
    best
}

/// Options for [`entmax_bisect_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectOptions {
    /// Stop once `|Σp − 1| ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl BisectOptions {
    pub fn new(tol: f64) -> Self {
        Self { tol, max_iter: BISECT_MAX_ITER }
    }
}

/// General α-entmax (α > 1) by bisection on τ.
pub fn entmax_bisect(z: &ScoreVector, alpha: f64, tol: f64) -> Result<(SimplexPoint, Threshold)> {
    entmax_bisect_with(z, alpha, BisectOptions::new(tol))
}

/// Bisection over `τ ∈ [max (α−1)z − 1, max (α−1)z]`.
///
/// The normalization sum is decreasing in τ, at least 1 at the lower end and
/// 0 at the upper end. Iteration stops when the residual falls below
/// `opts.tol` or the bracket shrinks below machine resolution. The positive
/// entries are then renormalized to sum to exactly one.
pub fn entmax_bisect_with(
    z: &ScoreVector,
    alpha: f64,
    opts: BisectOptions,
) -> Result<(SimplexPoint, Threshold)> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::InvalidAlpha(alpha));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidTolerance(opts.tol));
    }
    let am1 = alpha - 1.0;
    let inv = 1.0 / am1;
    let x: Vec<f64> = z.active_scores().into_iter().map(|v| am1 * v).collect();
    let sorted = sorted_desc(&x);
    let max = sorted[0];

    // Sorted descending, so the scan can stop at the first inactive entry.
    let mass = |tau: f64| -> f64 {
        sorted.iter().take_while(|&&v| v > tau).map(|&v| math::powf(v - tau, inv)).sum()
    };

    let min_width = BISECT_MIN_WIDTH.max(4.0 * f64::EPSILON * max.abs().max(1.0));
    let (mut lo, mut hi) = (max - 1.0, max);
    let mut residual = mass(lo) - 1.0;
    let mut tau = lo;
    let mut iterations = 0;
    while residual.abs() > opts.tol {
        if hi - lo < min_width {
            // Bracket collapsed. One Newton step from the lower end (which
            // always carries mass >= 1), kept inside the bracket.
            let slope: f64 = sorted
                .iter()
                .take_while(|&&v| v > lo)
                .map(|&v| inv * math::powf(v - lo, inv - 1.0))
                .sum();
            let step = (mass(lo) - 1.0) / slope;
            tau = if step.is_finite() { (lo + step).clamp(lo, hi) } else { lo };
            if mass(tau) <= 0.0 {
                tau = lo;
            }
            break;
        }
        if iterations == opts.max_iter {
            return Err(Error::NoConvergence { iterations, residual });
        }
        iterations += 1;
        tau = 0.5 * (lo + hi);
        residual = mass(tau) - 1.0;
        if residual > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
    }

    let probs: Vec<f64> =
        x.iter().map(|&v| if v > tau { math::powf(v - tau, inv) } else { 0.0 }).collect();
    let support_size = probs.iter().filter(|&&p| p > 0.0).count();
    let probs = renormalize(probs);
    Ok((SimplexPoint::from_probs(z.scatter(probs)), Threshold { tau, support_size }))
}

fn renormalize(mut probs: Vec<f64>) -> Vec<f64> {
    let sum = sorted_sum(&probs);
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

/// α-entmax for any α ≥ 1, dispatching to the cheapest exact route:
/// softmax at α = 1, sparsemax at α = 2, the sort-based solver at α = 1.5
/// and bisection otherwise.
pub fn entmax(z: &ScoreVector, shape: &ShapeParam, tol: f64) -> Result<(SimplexPoint, Threshold)> {
    entmax_alpha(z, shape.alpha(), tol)
}

/// [`entmax`] with a bare α.
pub fn entmax_alpha(z: &ScoreVector, alpha: f64, tol: f64) -> Result<(SimplexPoint, Threshold)> {
    if alpha == 1.0 {
        Ok(softmax(z))
    } else if alpha == 2.0 {
        Ok(sparsemax(z))
    } else if (alpha - 1.5).abs() < ENTMAX15_DISPATCH_EPS {
        Ok(entmax15_exact(z))
    } else {
        entmax_bisect(z, alpha, tol)
    }
}

/// Tsallis α-entropy; Shannon entropy at α = 1 (with `0 log 0 = 0`).
pub fn tsallis_entropy(p: &SimplexPoint, alpha: f64) -> f64 {
    tsallis_entropy_slice(p.probs(), alpha)
}

pub(crate) fn tsallis_entropy_slice(p: &[f64], alpha: f64) -> f64 {
    if alpha == 1.0 {
        shannon_entropy(p)
    } else {
        let s: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x - math::powf(x, alpha)).sum();
        s / (alpha * (alpha - 1.0))
    }
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| math::xlogx(x)).sum::<f64>()
}

/// The entmax objective `pᵀz + H_α(p)` maximized by α-entmax.
pub fn entmax_objective(p: &[f64], z: &[f64], alpha: f64) -> f64 {
    let linear: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    linear + tsallis_entropy_slice(p, alpha)
}
