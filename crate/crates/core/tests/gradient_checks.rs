use entmax_core::gradients::{
    fd_gradient, grad_alpha, grad_raw_alpha, jvp_scores, vjp_scores, EntmaxBackwardContext,
};
use entmax_core::transforms::{entmax15_exact, entmax_alpha};
use entmax_core::{ScoreVector, ShapeParam};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FINE: f64 = 1e-300;

fn forward(z: &[f64], alpha: f64) -> Vec<f64> {
    entmax_alpha(&ScoreVector::from_slice(z).unwrap(), alpha, FINE).unwrap().0.into_probs()
}

fn context(z: &[f64], alpha: f64) -> EntmaxBackwardContext {
    let (p, _) = entmax_alpha(&ScoreVector::from_slice(z).unwrap(), alpha, FINE).unwrap();
    EntmaxBackwardContext::new(p, alpha).unwrap()
}

fn support(p: &[f64]) -> Vec<bool> {
    p.iter().map(|&x| x > 0.0).collect()
}

proptest! {
    #[test]
    fn jacobian_rows_sum_to_zero(
        z in prop::collection::vec(-5.0..5.0f64, 1..24),
        alpha in prop_oneof![Just(1.0), 1.01..2.5f64],
    ) {
        let ctx = context(&z, alpha);
        let ones = vec![1.0; z.len()];
        for g in vjp_scores(&ctx, &ones).unwrap() {
            prop_assert!(g.abs() <= 1e-12);
        }
    }

    #[test]
    fn jacobian_is_symmetric(
        z in prop::collection::vec(-5.0..5.0f64, 1..24),
        alpha in prop_oneof![Just(1.0), 1.01..2.5f64],
        seed in any::<u64>(),
    ) {
        let ctx = context(&z, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..z.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = vjp_scores(&ctx, &v).unwrap();
        let b = jvp_scores(&ctx, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn alpha_gradient_sums_to_zero_and_vanishes_off_support(
        z in prop::collection::vec(-5.0..5.0f64, 1..24),
        alpha in prop_oneof![Just(1.0), Just(1.0 + 1e-7), 1.01..2.0f64],
    ) {
        let ctx = context(&z, alpha);
        let g = grad_alpha(&ctx);
        prop_assert!(g.iter().sum::<f64>().abs() <= 1e-10);
        for (gi, &p) in g.iter().zip(ctx.p_star().probs()) {
            if p == 0.0 {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }
}

#[test]
fn score_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 20 {
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let step = 1e-6;
        let p = forward(&z, 1.5);
        let stable = (0..8).all(|i| {
            let mut zp = z.clone();
            zp[i] += step;
            let mut zm = z.clone();
            zm[i] -= step;
            support(&forward(&zp, 1.5)) == support(&p) && support(&forward(&zm, 1.5)) == support(&p)
        });
        if !stable || p.iter().any(|&x| x > 0.0 && x < 1e-6) {
            continue;
        }
        checked += 1;
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = vjp_scores(&context(&z, 1.5), &u).unwrap();
        let jac = fd_gradient(|x| forward(x, 1.5), &z, step);
        let numeric: Vec<f64> = (0..8).map(|j| (0..8).map(|i| u[i] * jac[(i, j)]).sum()).collect();
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err / scale < 1e-5, "relative error {}", err / scale);
    }
}

#[test]
fn alpha_gradient_matches_finite_differences() {
    let z = [1.0, 0.2, -0.3];
    let h = 1e-5;
    for alpha in [1.05, 1.3, 1.5, 1.9] {
        let (plus, minus) = (forward(&z, alpha + h), forward(&z, alpha - h));
        assert_eq!(support(&plus), support(&minus));
        let g = grad_alpha(&context(&z, alpha));
        let p = forward(&z, alpha);
        for i in 0..3 {
            if p[i] > 0.0 {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs());
                assert!(rel < 1e-4, "alpha {alpha} coord {i}: {} vs {fd}", g[i]);
            } else {
                assert_eq!(g[i], 0.0);
            }
        }
    }
}

#[test]
fn alpha_gradient_is_continuous_at_one() {
    let z = [0.8, -0.1, 0.3, -1.2];
    let limit = grad_alpha(&context(&z, 1.0));
    let gaps: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|h| {
            let g = grad_alpha(&context(&z, 1.0 + h));
            g.iter().zip(&limit).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn raw_alpha_gradient_through_the_sigmoid() {
    let z = [1.0, 0.2, -0.3];
    let shape = ShapeParam::learnable(0.0).unwrap();
    let upstream = [1.0, 0.0, 0.0];
    let (p, _) = entmax15_exact(&ScoreVector::from_slice(&z).unwrap());
    let ctx = EntmaxBackwardContext::new(p, shape.alpha()).unwrap();
    let analytic = grad_raw_alpha(&ctx, &upstream, &shape).unwrap();
    assert!((analytic - 0.25 * grad_alpha(&ctx)[0]).abs() < 1e-15);

    let through_raw = |raw: &[f64]| {
        let s = ShapeParam::learnable(raw[0]).unwrap();
        vec![forward(&z, s.alpha())[0]]
    };
    let numeric = fd_gradient(through_raw, &[0.0], 1e-5)[(0, 0)];
    assert!((analytic - numeric).abs() / numeric.abs() < 1e-4, "{analytic} vs {numeric}");
}
