//! Randomized finite-difference checks of the analytic gradients.
//!
//! Central differences are only meaningful where the support of the
//! output does not change within the probe radius, so every draw whose
//! support moves under a probe, or which has a support coordinate below
//! [`MIN_SUPPORT_PROB`], is re-sampled.

use entmax_core::attention::{
    multi_head_backward, multi_head_forward, HeadProjection, MultiHeadBlock,
};
use entmax_core::gradients::{fd_gradient, grad_alpha, vjp_scores, EntmaxBackwardContext};
use entmax_core::linalg::dot;
use entmax_core::transforms::entmax_alpha;
use entmax_core::{AttentionKind, Matrix, ScoreVector, ShapeParam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const SCORE_STEP: f64 = 1e-6;
pub const ALPHA_STEP: f64 = 1e-5;
/// Step of the one-sided α stencil used when `α − ALPHA_STEP < 1`. The
/// forward map is badly conditioned just above α = 1 (the exponent is
/// `1/(α−1)`), so a wider step trades truncation error for rounding error.
pub const ONE_SIDED_ALPHA_STEP: f64 = 1e-4;
pub const SCORE_TOL: f64 = 1e-5;
pub const ALPHA_TOL: f64 = 1e-4;
pub const ALPHA_SUM_TOL: f64 = 1e-10;
pub const BLOCK_STEP: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-4;
/// Support coordinates smaller than this make a draw unstable.
pub const MIN_SUPPORT_PROB: f64 = 1e-6;
/// Draws tried per trial before giving up.
pub const MAX_REDRAWS: usize = 10_000;
/// Forward passes bisect down to the bracket width bound.
const FINE_TOL: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub alpha: f64,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
    /// Scores are drawn uniformly in `±score_scale`.
    pub score_scale: f64,
}

impl GradcheckOptions {
    pub fn new(alpha: f64, dim: usize, trials: usize, seed: u64) -> Self {
        Self { alpha, dim, trials, seed, score_scale: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub redraws: usize,
    pub support_size: usize,
    /// `‖analytic − fd‖∞ / ‖fd‖∞` of the score VJP.
    pub score_rel_err: f64,
    /// Largest componentwise relative error of the α gradient on the
    /// support.
    pub alpha_rel_err: f64,
    /// `Σ_i ∂p_i/∂α`.
    pub alpha_sum: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub score_tol: f64,
    pub alpha_tol: f64,
    pub alpha_sum_tol: f64,
    pub trials: Vec<TrialResult>,
    pub max_score_rel_err: f64,
    pub max_alpha_rel_err: f64,
    pub max_abs_alpha_sum: f64,
    pub passed: bool,
}

fn forward(z: &[f64], alpha: f64) -> Result<Vec<f64>> {
    Ok(entmax_alpha(&ScoreVector::from_slice(z)?, alpha, FINE_TOL)?.0.into_probs())
}

fn support(p: &[f64]) -> Vec<bool> {
    p.iter().map(|&x| x > 0.0).collect()
}

/// Points at which α is probed, with weights: central when `α − h ≥ 1`,
/// otherwise a one-sided second-order stencil.
fn alpha_stencil(alpha: f64) -> Vec<(f64, f64)> {
    let h = ALPHA_STEP;
    if alpha - h >= 1.0 {
        vec![(alpha + h, 0.5 / h), (alpha - h, -0.5 / h)]
    } else {
        let h = ONE_SIDED_ALPHA_STEP;
        vec![(alpha, -1.5 / h), (alpha + h, 2.0 / h), (alpha + 2.0 * h, -0.5 / h)]
    }
}

fn is_stable(z: &[f64], alpha: f64, p: &[f64]) -> Result<bool> {
    if p.iter().any(|&x| x > 0.0 && x < MIN_SUPPORT_PROB) {
        return Ok(false);
    }
    let base = support(p);
    for i in 0..z.len() {
        for sign in [1.0, -1.0] {
            let mut zp = z.to_vec();
            zp[i] += sign * SCORE_STEP;
            if support(&forward(&zp, alpha)?) != base {
                return Ok(false);
            }
        }
    }
    for (a, _) in alpha_stencil(alpha) {
        if support(&forward(z, a)?) != base {
            return Ok(false);
        }
    }
    Ok(true)
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares the score VJP and the α gradient against finite differences
/// on `trials` support-stable random draws.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.alpha >= 1.0 && opts.alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be at least 1, got {}", opts.alpha)));
    }
    if opts.dim == 0 || opts.trials == 0 {
        return Err(Error::InvalidInput("dim and trials must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = opts.dim;
    let mut trials = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let mut redraws = 0;
        let (z, p) = loop {
            let z: Vec<f64> =
                (0..d).map(|_| rng.gen_range(-opts.score_scale..opts.score_scale)).collect();
            let p = forward(&z, opts.alpha)?;
            if is_stable(&z, opts.alpha, &p)? {
                break (z, p);
            }
            redraws += 1;
            if redraws >= MAX_REDRAWS {
                return Err(Error::InvalidInput(format!(
                    "no support-stable draw after {MAX_REDRAWS} attempts"
                )));
            }
        };
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ctx = EntmaxBackwardContext::new(
            entmax_alpha(&ScoreVector::from_slice(&z)?, opts.alpha, FINE_TOL)?.0,
            opts.alpha,
        )?;

        let analytic = vjp_scores(&ctx, &u)?;
        let jac = fd_gradient(|x| forward(x, opts.alpha).expect("finite scores"), &z, SCORE_STEP);
        let numeric: Vec<f64> = (0..d).map(|j| (0..d).map(|i| u[i] * jac[(i, j)]).sum()).collect();
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let score_rel_err = if scale == 0.0 { err } else { err / scale };

        let g = grad_alpha(&ctx);
        let mut fd = vec![0.0; d];
        for (a, w) in alpha_stencil(opts.alpha) {
            for (f, x) in fd.iter_mut().zip(forward(&z, a)?) {
                *f += w * x;
            }
        }
        let alpha_rel_err =
            (0..d).filter(|&i| p[i] > 0.0).map(|i| rel(g[i], fd[i])).fold(0.0, f64::max);
        let alpha_sum: f64 = g.iter().sum();
        let passed = score_rel_err < SCORE_TOL
            && alpha_rel_err < ALPHA_TOL
            && alpha_sum.abs() <= ALPHA_SUM_TOL;
        trials.push(TrialResult {
            trial,
            redraws,
            support_size: ctx.p_star().support().len(),
            score_rel_err,
            alpha_rel_err,
            alpha_sum,
            passed,
        });
    }
    let max = |f: fn(&TrialResult) -> f64| trials.iter().map(f).fold(0.0, f64::max);
    Ok(GradcheckReport {
        options: opts.clone(),
        score_tol: SCORE_TOL,
        alpha_tol: ALPHA_TOL,
        alpha_sum_tol: ALPHA_SUM_TOL,
        max_score_rel_err: max(|t| t.score_rel_err),
        max_alpha_rel_err: max(|t| t.alpha_rel_err),
        max_abs_alpha_sum: max(|t| t.alpha_sum.abs()),
        passed: trials.iter().all(|t| t.passed),
        trials,
    })
}

/// `‖g(1 + h) − g(1)‖∞` for each `h`, where `g(1)` is the α = 1 branch of
/// the α gradient.
pub fn alpha_continuity(z: &[f64], steps: &[f64]) -> Result<Vec<f64>> {
    let ctx = |alpha: f64| -> Result<EntmaxBackwardContext> {
        let (p, _) = entmax_alpha(&ScoreVector::from_slice(z)?, alpha, FINE_TOL)?;
        Ok(EntmaxBackwardContext::new(p, alpha)?)
    };
    let limit = grad_alpha(&ctx(1.0)?);
    steps
        .iter()
        .map(|&h| {
            let g = grad_alpha(&ctx(1.0 + h)?);
            Ok(g.iter().zip(&limit).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        })
        .collect()
}

/// Dimensions of the block used by [`block_gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockDims {
    pub queries: usize,
    pub keys: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
}

impl Default for BlockDims {
    fn default() -> Self {
        Self { queries: 3, keys: 3, model_dim: 4, head_dim: 2, heads: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheckReport {
    pub dims: BlockDims,
    pub redraws: usize,
    /// Relative error `‖analytic − fd‖∞ / max(‖analytic‖∞, ‖fd‖∞)` per
    /// parameter tensor and input.
    pub tensors: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub passed: bool,
}

struct BlockProblem {
    block: MultiHeadBlock,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    upstream: Matrix,
}

impl BlockProblem {
    fn draw(dims: BlockDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut mat = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let (dm, hd) = (dims.model_dim, dims.head_dim);
        let heads = (0..dims.heads)
            .map(|_| HeadProjection::new(mat(dm, hd), mat(dm, hd), mat(dm, hd)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let w_out = mat(dims.heads * hd, dm);
        let q = mat(dims.queries, dm);
        let k = mat(dims.keys, dm);
        let v = mat(dims.keys, dm);
        let upstream = mat(dims.queries, dm);
        let shapes = (0..dims.heads)
            .map(|_| ShapeParam::learnable(rng.gen_range(-1.0..1.0)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let block = MultiHeadBlock::new(heads, shapes, w_out, AttentionKind::Context)?
            .with_tol(FINE_TOL)?;
        Ok(Self { block, q, k, v, upstream })
    }

    /// Loss `⟨upstream, output⟩` and the support pattern of every row.
    fn probe(
        &self,
        block: &MultiHeadBlock,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
    ) -> (f64, Vec<bool>, f64) {
        let fwd = multi_head_forward(block, q, k, v, None).expect("valid block");
        let entries = fwd.attention.entries();
        let flat: Vec<f64> = entries.iter().flatten().flatten().flatten().copied().collect();
        let min_positive = flat.iter().copied().filter(|&x| x > 0.0).fold(1.0, f64::min);
        (dot(fwd.output.as_slice(), self.upstream.as_slice()), support(&flat), min_positive)
    }
}

/// End-to-end check of [`multi_head_backward`] against central differences
/// of `⟨upstream, output⟩` over every parameter (raw α included) and every
/// input.
pub fn block_gradcheck(dims: BlockDims, seed: u64) -> Result<BlockCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut redraws = 0;
    loop {
        let problem = BlockProblem::draw(dims, &mut rng)?;
        if let Some(tensors) = check_block(&problem)? {
            let max_rel_err = tensors.iter().map(|t| t.1).fold(0.0, f64::max);
            return Ok(BlockCheckReport {
                dims,
                redraws,
                tensors,
                max_rel_err,
                passed: max_rel_err < BLOCK_TOL,
            });
        }
        redraws += 1;
        if redraws >= MAX_REDRAWS {
            return Err(Error::InvalidInput("no support-stable block draw".into()));
        }
    }
}

fn check_block(pb: &BlockProblem) -> Result<Option<Vec<(String, f64)>>> {
    let (_, base, min_p) = pb.probe(&pb.block, &pb.q, &pb.k, &pb.v);
    if min_p < MIN_SUPPORT_PROB {
        return Ok(None);
    }
    let fwd = multi_head_forward(&pb.block, &pb.q, &pb.k, &pb.v, None)?;
    let grads = multi_head_backward(&pb.block, &fwd, &pb.upstream)?;

    let mut stable = true;
    let mut loss_at = |block: &MultiHeadBlock, q: &Matrix, k: &Matrix, v: &Matrix| {
        let (l, s, _) = pb.probe(block, q, k, v);
        stable &= s == base;
        vec![l]
    };
    let params = pb.block.params_flat();
    let d_params = fd_gradient(
        |p| {
            let mut b = pb.block.clone();
            b.set_params_flat(p).expect("finite parameters");
            loss_at(&b, &pb.q, &pb.k, &pb.v)
        },
        &params,
        BLOCK_STEP,
    );
    let reshape = |m: &Matrix, x: &[f64]| Matrix::from_vec(m.rows(), m.cols(), x.to_vec()).unwrap();
    let d_q = fd_gradient(
        |x| loss_at(&pb.block, &reshape(&pb.q, x), &pb.k, &pb.v),
        pb.q.as_slice(),
        BLOCK_STEP,
    );
    let d_k = fd_gradient(
        |x| loss_at(&pb.block, &pb.q, &reshape(&pb.k, x), &pb.v),
        pb.k.as_slice(),
        BLOCK_STEP,
    );
    let d_v = fd_gradient(
        |x| loss_at(&pb.block, &pb.q, &pb.k, &reshape(&pb.v, x)),
        pb.v.as_slice(),
        BLOCK_STEP,
    );
    if !stable {
        return Ok(None);
    }

    let tensor_err = |a: &[f64], b: &[f64]| {
        let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            0.0
        } else {
            err / scale
        }
    };
    let analytic = grads.params_flat();
    let numeric = d_params.row(0);
    let mut out = Vec::new();
    let mut offset = 0;
    let per = pb.block.model_dim() * pb.block.head_dim();
    for h in 0..pb.block.num_heads() {
        for name in ["w_q", "w_k", "w_v"] {
            let r = offset..offset + per;
            out.push((format!("head{h}.{name}"), tensor_err(&analytic[r.clone()], &numeric[r])));
            offset += per;
        }
    }
    let n_out = pb.block.w_out().as_slice().len();
    let r = offset..offset + n_out;
    out.push(("w_out".into(), tensor_err(&analytic[r.clone()], &numeric[r])));
    offset += n_out;
    for h in 0..pb.block.num_heads() {
        out.push((format!("head{h}.raw_alpha"), rel(analytic[offset + h], numeric[offset + h])));
    }
    out.push(("q".into(), tensor_err(grads.q.as_slice(), d_q.row(0))));
    out.push(("k".into(), tensor_err(grads.k.as_slice(), d_k.row(0))));
    out.push(("v".into(), tensor_err(grads.v.as_slice(), d_v.row(0))));
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gradcheck_passes() {
        for alpha in [1.0, 1.3, 2.0] {
            let report = run_gradcheck(&GradcheckOptions::new(alpha, 5, 5, 1)).unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn gradcheck_is_deterministic() {
        let opts = GradcheckOptions::new(1.5, 6, 3, 9);
        assert_eq!(run_gradcheck(&opts).unwrap(), run_gradcheck(&opts).unwrap());
    }

    #[test]
    fn rejects_bad_options() {
        assert!(run_gradcheck(&GradcheckOptions::new(0.9, 4, 1, 0)).is_err());
        assert!(run_gradcheck(&GradcheckOptions::new(1.5, 0, 1, 0)).is_err());
    }

    #[test]
    fn block_check_passes() {
        let report = block_gradcheck(BlockDims::default(), 4).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.tensors.len(), 2 * 3 + 1 + 2 + 3);
    }
}
