//! Backward passes of α-entmax and the oracles that check them.
//!
//! Given `p★ = entmax_α(z)`, let `s_i = (p★_i)^{2−α}` on the support and 0
//! elsewhere. The Jacobian with respect to the scores is
//! `diag(s) − s sᵀ / Σs`; the derivative with respect to α is given in
//! closed form by [`grad_alpha`], with a separate limit expression at α = 1.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::math;
use crate::transforms::{entmax_objective, shannon_entropy};
use crate::types::{ScoreVector, ShapeParam, SimplexPoint};

/// Below this value of `α − 1` the α-gradient uses its α = 1 limit.
///
/// The general expression divides by `(α − 1)²` and cancels terms of order
/// `1/(α − 1)`; at 1e-6 it still holds about ten digits, which is where the
/// limit form becomes at least as accurate.
pub const ALPHA_ONE_BRANCH_EPS: f64 = 1e-6;

/// Cached quantities of a forward α-entmax output needed by both Jacobians.
///
/// Entries are used as computed; there is no clamping of tiny positive
/// probabilities. For α ≤ 2 every `s_i` lies in `(0, 1]` on the support.
#[derive(Debug, Clone, PartialEq)]
pub struct EntmaxBackwardContext {
    p_star: SimplexPoint,
    alpha: f64,
    s: Vec<f64>,
    s_sum: f64,
    p_tilde: Vec<f64>,
}

impl EntmaxBackwardContext {
    pub fn new(p_star: SimplexPoint, alpha: f64) -> Result<Self> {
        if !(alpha >= 1.0) || !alpha.is_finite() {
            return Err(Error::InvalidAlpha(alpha));
        }
        let exponent = 2.0 - alpha;
        let s: Vec<f64> = p_star
            .probs()
            .iter()
            .map(|&p| if p > 0.0 { math::powf(p, exponent) } else { 0.0 })
            .collect();
        let s_sum: f64 = s.iter().sum();
        let p_tilde = s.iter().map(|&v| v / s_sum).collect();
        Ok(Self { p_star, alpha, s, s_sum, p_tilde })
    }

    #[inline]
    pub fn p_star(&self) -> &SimplexPoint {
        &self.p_star
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    pub fn s(&self) -> &[f64] {
        &self.s
    }

    /// The skewed distribution `s / Σs`.
    #[inline]
    pub fn p_tilde(&self) -> &[f64] {
        &self.p_tilde
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.s.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

fn check_len(ctx: &EntmaxBackwardContext, v: &[f64]) -> Result<()> {
    if v.len() != ctx.len() {
        return Err(Error::LengthMismatch { expected: ctx.len(), found: v.len() });
    }
    Ok(())
}

/// `Jᵀ u` for the score Jacobian `J = diag(s) − s sᵀ / Σs`.
pub fn vjp_scores(ctx: &EntmaxBackwardContext, upstream: &[f64]) -> Result<Vec<f64>> {
    check_len(ctx, upstream)?;
    if !(ctx.s_sum > 0.0) {
        return Err(Error::DegenerateSupport);
    }
    let proj = dot(&ctx.s, upstream) / ctx.s_sum;
    Ok(ctx.s.iter().zip(upstream).map(|(&s, &u)| s * (u - proj)).collect())
}

/// The dense score Jacobian.
pub fn score_jacobian(ctx: &EntmaxBackwardContext) -> Result<Matrix> {
    if !(ctx.s_sum > 0.0) {
        return Err(Error::DegenerateSupport);
    }
    let s = &ctx.s;
    Ok(Matrix::from_fn(s.len(), s.len(), |i, j| {
        let diag = if i == j { s[i] } else { 0.0 };
        diag - s[i] * s[j] / ctx.s_sum
    }))
}

/// `J v`, computed from the dense Jacobian.
pub fn jvp_scores(ctx: &EntmaxBackwardContext, v: &[f64]) -> Result<Vec<f64>> {
    check_len(ctx, v)?;
    let j = score_jacobian(ctx)?;
    Ok((0..j.rows()).map(|i| dot(j.row(i), v)).collect())
}

/// `∂p★/∂α`, one component per coordinate; exactly zero off the support.
pub fn grad_alpha(ctx: &EntmaxBackwardContext) -> Vec<f64> {
    let p = ctx.p_star.probs();
    let delta = ctx.alpha - 1.0;
    if delta < ALPHA_ONE_BRANCH_EPS {
        // (−p_i log² p_i + p_i Σ_j p_j log² p_j) / 2
        let log_sq = |x: f64| {
            let l = math::ln(x);
            x * l * l
        };
        let total: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| log_sq(x)).sum();
        return p
            .iter()
            .map(|&x| if x > 0.0 { 0.5 * (x * total - log_sq(x)) } else { 0.0 })
            .collect();
    }

    // (p_i − p̃_i)/δ² − (p_i log p_i + p̃_i H(p))/δ, with p_i − p̃_i formed
    // through expm1 so the leading O(δ) difference keeps its digits.
    let em: Vec<f64> =
        p.iter().map(|&x| if x > 0.0 { libm::expm1(-delta * math::ln(x)) } else { 0.0 }).collect();
    let mean_em: f64 = p.iter().zip(&em).map(|(&x, &e)| x * e).sum();
    let entropy = shannon_entropy(p);
    p.iter()
        .enumerate()
        .map(|(i, &x)| {
            if x <= 0.0 {
                return 0.0;
            }
            let diff = x * (mean_em - em[i]) / (1.0 + mean_em);
            diff / (delta * delta) - (math::xlogx(x) + ctx.p_tilde[i] * entropy) / delta
        })
        .collect()
}

/// Gradient of `⟨upstream, p★⟩` with respect to the pre-activation of a
/// learnable shape parameter. Zero for fixed parameters.
pub fn grad_raw_alpha(
    ctx: &EntmaxBackwardContext,
    upstream: &[f64],
    shape: &ShapeParam,
) -> Result<f64> {
    check_len(ctx, upstream)?;
    let dalpha = shape.dalpha_draw();
    if dalpha == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(upstream, &grad_alpha(ctx)) * dalpha)
}

/// Central-difference Jacobian of `f` at `x`; column `i` holds
/// `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn fd_gradient<F>(mut f: F, x: &[f64], step: f64) -> Matrix
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut probe = x.to_vec();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        columns.push(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect());
    }
    let m = columns.first().map_or(0, Vec::len);
    Matrix::from_fn(m, x.len(), |r, c| columns[c][r])
}

/// Brute-force maximizer of `pᵀz + H_α(p)` over a regular simplex grid.
///
/// Only unmasked coordinates are searched, and there may be at most three.
pub fn simplex_oracle(z: &ScoreVector, alpha: f64, grid_step: f64) -> Result<SimplexPoint> {
    if !(grid_step > 0.0 && grid_step <= 0.1) {
        return Err(Error::InvalidGridStep(grid_step));
    }
    if !(alpha >= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let x = z.active_scores();
    let d = x.len();
    if d > 3 {
        return Err(Error::DimensionTooLarge(d));
    }
    let n = libm::round(1.0 / grid_step) as usize;
    let nf = n as f64;
    let mut best = (f64::NEG_INFINITY, vec![1.0]);
    let mut consider = |p: Vec<f64>| {
        let value = entmax_objective(&p, &x, alpha);
        if value > best.0 {
            best = (value, p);
        }
    };
    match d {
        1 => consider(vec![1.0]),
        2 => {
            for i in 0..=n {
                let a = i as f64 / nf;
                consider(vec![a, (n - i) as f64 / nf]);
            }
        }
        _ => {
            for i in 0..=n {
                for j in 0..=n - i {
                    consider(vec![i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf]);
                }
            }
        }
    }
    let probs = z.scatter(best.1);
    crate::types::validate_simplex(&probs, crate::SIMPLEX_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{entmax_alpha, softmax};
    use crate::validate_simplex;

    fn ctx_for(z: &[f64], alpha: f64) -> EntmaxBackwardContext {
        let (p, _) = entmax_alpha(&ScoreVector::from_slice(z).unwrap(), alpha, 1e-14).unwrap();
        EntmaxBackwardContext::new(p, alpha).unwrap()
    }

    #[test]
    fn context_invariants() {
        let ctx = ctx_for(&[2.0, 1.9, -3.0, 0.5], 1.6);
        for (i, &p) in ctx.p_star().probs().iter().enumerate() {
            assert_eq!(ctx.s()[i] == 0.0, p == 0.0);
            assert_eq!(ctx.p_tilde()[i] == 0.0, p == 0.0);
        }
        let tilde = validate_simplex(ctx.p_tilde(), 1e-12).unwrap();
        assert_eq!(tilde.support(), ctx.p_star().support());
    }

    #[test]
    fn vjp_at_alpha_one_is_softmax_vjp() {
        let z = [0.2, -0.4, 1.1];
        let ctx = ctx_for(&z, 1.0);
        let p = softmax(&ScoreVector::from_slice(&z).unwrap()).0.into_probs();
        let u = [0.3, -1.0, 2.0];
        let pu = dot(&p, &u);
        let expected: Vec<f64> = p.iter().zip(&u).map(|(pi, ui)| pi * ui - pi * pu).collect();
        let got = vjp_scores(&ctx, &u).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn vjp_of_ones_is_zero() {
        for alpha in [1.0, 1.3, 1.5, 2.0] {
            let ctx = ctx_for(&[0.5, 0.1, -0.2, 0.45], alpha);
            for g in vjp_scores(&ctx, &[1.0; 4]).unwrap() {
                assert!(g.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_rejects_bad_input() {
        let ctx = ctx_for(&[0.5, 0.1], 1.5);
        assert!(matches!(vjp_scores(&ctx, &[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn grad_alpha_vanishes_at_uniform_and_one_hot() {
        for alpha in [1.0, 1.2, 1.5, 1.9, 2.5] {
            let ctx = ctx_for(&[0.0; 5], alpha);
            assert!(grad_alpha(&ctx).iter().all(|g| g.abs() < 1e-10), "alpha {alpha}");
        }
        for alpha in [1.2, 1.5, 1.9] {
            let one_hot = validate_simplex(&[0.0, 1.0, 0.0], 1e-12).unwrap();
            let ctx = EntmaxBackwardContext::new(one_hot, alpha).unwrap();
            assert_eq!(grad_alpha(&ctx), vec![0.0; 3]);
        }
    }

    #[test]
    fn grad_raw_alpha_saturates_and_scales() {
        let ctx = ctx_for(&[1.0, 0.2, -0.3], 1.5);
        let u = [1.0, 0.0, 0.0];
        let shape = ShapeParam::learnable(0.0).unwrap();
        let g = grad_raw_alpha(&ctx, &u, &shape).unwrap();
        assert!((g - 0.25 * grad_alpha(&ctx)[0]).abs() < 1e-15);
        let saturated = ShapeParam::learnable(800.0).unwrap();
        assert_eq!(grad_raw_alpha(&ctx, &u, &saturated).unwrap(), 0.0);
        let uniform = ctx_for(&[0.0; 3], 1.5);
        assert!(grad_raw_alpha(&uniform, &[0.3, -2.0, 5.0], &shape).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_examples() {
        let id = fd_gradient(|x| x.to_vec(), &[0.3, -1.2, 5.0], 1e-6);
        assert!(id.max_abs_diff(&Matrix::identity(3)) < 1e-9);
        let exact = fd_gradient(|x| x.to_vec(), &[0.5, 0.25], 0.125);
        assert!(exact.max_abs_diff(&Matrix::identity(2)) < 1e-12);

        let sm = fd_gradient(
            |x| softmax(&ScoreVector::from_slice(x).unwrap()).0.into_probs(),
            &[0.0, 0.0],
            1e-5,
        );
        let expected = Matrix::from_rows(&[[0.25, -0.25], [-0.25, 0.25]]).unwrap();
        assert!(sm.max_abs_diff(&expected) < 1e-8);

        let quad = fd_gradient(|x| vec![dot(x, x)], &[1.0, 2.0], 1e-4);
        assert!((quad[(0, 0)] - 2.0).abs() < 1e-8 && (quad[(0, 1)] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn oracle_examples() {
        let sv = |v: &[f64]| ScoreVector::from_slice(v).unwrap();
        let p = simplex_oracle(&sv(&[0.0, 0.0]), 1.5, 1e-3).unwrap();
        assert!((p.probs()[0] - 0.5).abs() <= 1e-3);
        let p = simplex_oracle(&sv(&[2.0, 0.0]), 2.0, 1e-3).unwrap();
        assert!((p.probs()[0] - 1.0).abs() <= 1e-3);
        let z = sv(&[0.9, 0.1]);
        let p = simplex_oracle(&z, 1.5, 1e-3).unwrap();
        let exact = crate::transforms::entmax15_exact(&z).0;
        assert!((p.probs()[0] - exact.probs()[0]).abs() <= 2e-3);
        assert_eq!(simplex_oracle(&sv(&[0.0; 4]), 1.5, 1e-3), Err(Error::DimensionTooLarge(4)));
        assert!(matches!(simplex_oracle(&sv(&[0.0; 2]), 1.5, 0.5), Err(Error::InvalidGridStep(_))));
    }
}
