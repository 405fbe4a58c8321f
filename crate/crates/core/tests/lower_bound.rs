mod common;

use common::*;
use groupsync_core::lower_bound::{
    jacobian_q_with_step, max_derivative_norm, parameter_count, prior_normalization, prior_pair,
    prior_radius, PriorSampler, JACOBIAN_STEP,
};
use groupsync_core::{
    construct_q, information_bundle, jacobian_q, prior_density, vantrees_estimate, Matrix,
    PriorParams,
};
use rand::Rng;

/// Composite Simpson on `[a, b]` with `2k` panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, k: usize) -> f64 {
    let n = 2 * k;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn uniform_box(r: &mut TestRng, d: usize) -> PriorParams {
    let c = prior_radius(d);
    let v = (0..parameter_count(d)).map(|_| c * (2.0 * r.random::<f64>() - 1.0)).collect();
    PriorParams::new(d, v).unwrap()
}

#[test]
fn normalization_matches_composite_rule() {
    for d in [2, 3, 4] {
        let c = prior_radius(d);
        let oracle = simpson(|t| prior_density(t, d), -c, c, 200_000);
        let got = prior_normalization(d);
        assert!((got - oracle).abs() <= 1e-8 * oracle, "d={d}: {got} vs {oracle}");
    }
}

#[test]
fn density_is_smooth_at_the_boundary() {
    for d in [2, 3, 5] {
        let c = prior_radius(d);
        let h = c * 1e-4;
        // slope in units of the support width, flattening towards the edge
        for (gap, limit) in [(1e-2, 1e-15), (1e-3, 1e-200)] {
            let t = c * (1.0 - gap);
            let slope = (prior_density(t + h / 10.0, d) - prior_density(t - h / 10.0, d)) / (h / 5.0);
            assert!((slope * c).abs() < limit, "d={d} t={t} slope={slope}");
        }
        assert_eq!(prior_density(c, d), 0.0);
        assert_eq!(prior_density(-c, d), 0.0);
    }
}

#[test]
fn sampler_moments_match_quadrature() {
    let d = 2;
    let c = prior_radius(d);
    let z = simpson(|t| prior_density(t, d), -c, c, 100_000);
    let mean_abs = simpson(|t| t.abs() * prior_density(t, d), -c, c, 100_000) / z;
    let second = simpson(|t| t * t * prior_density(t, d), -c, c, 100_000) / z;

    let mut sampler = PriorSampler::new(d, 2024);
    let draws: Vec<f64> = (0..100_000).map(|_| sampler.coordinate().abs()).collect();
    let m = mean(&draws);
    let se = ((second - mean_abs * mean_abs) / draws.len() as f64).sqrt();
    assert!((m - mean_abs).abs() <= 3.0 * se, "{m} vs {mean_abs} (se {se})");

    let rate = sampler.accepted() as f64 / sampler.proposals() as f64;
    let expected = z / ((-1.0f64).exp() * 2.0 * c);
    let se = (expected * (1.0 - expected) / sampler.proposals() as f64).sqrt();
    assert!((rate - expected).abs() <= 3.0 * se, "{rate} vs {expected} (se {se})");
}

#[test]
fn boundary_example_in_four_dimensions() {
    let mut r = rng(4);
    let c = prior_radius(4);
    for _ in 0..50 {
        let v = (0..6).map(|_| if r.random::<bool>() { c } else { -c }).collect();
        let rot = construct_q(&PriorParams::new(4, v).unwrap()).unwrap();
        assert!((rot.q.transpose() * &rot.q - Matrix::identity(4, 4)).norm() <= 1e-10);
        assert!((rot.q.determinant() - 1.0).abs() <= 1e-10);
        assert!(rot.min_diagonal() >= 7.0 / 8.0 - 1e-9);
        assert!(rot.max_abs_below_diagonal() <= 1.0 / 64.0 + 1e-9);
    }
}

#[test]
fn derivative_bound_on_random_parameters() {
    let mut r = rng(5);
    for d in [2, 3, 4] {
        for _ in 0..100 {
            let p = uniform_box(&mut r, d);
            let g = jacobian_q(&p).unwrap();
            assert!(max_derivative_norm(&g, d) <= 5.0 + 1e-3);
            let row_bound = (1.0 + 25.0 * (d * d * d) as f64 / 2.0).sqrt() + 0.01;
            for l in 0..g.nrows() {
                assert!(g.row(l).norm() <= row_bound);
            }
            let eig = (&g * g.transpose()).symmetric_eigen().eigenvalues;
            assert!(eig.min() >= 1.0 - 1e-6);
            assert!(eig.max() <= 1.0 + 25.0 * (d * d * d) as f64 / 2.0 + 1e-3);
        }
    }
}

#[test]
fn step_halving_is_consistent() {
    let mut r = rng(6);
    for d in [2, 3, 4, 5] {
        for _ in 0..10 {
            let p = uniform_box(&mut r, d);
            let a = jacobian_q(&p).unwrap();
            let b = jacobian_q_with_step(&p, JACOBIAN_STEP / 2.0).unwrap();
            assert!((a - b).amax() <= 1e-6);
        }
    }
}

#[test]
fn jacobian_matches_closed_form_in_two_dimensions() {
    // Q = [[sqrt(1 - t^2), t], [-t, sqrt(1 - t^2)]]; column-major vec.
    for t in [-0.02, 0.0, 0.013] {
        let g = jacobian_q(&PriorParams::new(2, vec![t]).unwrap()).unwrap();
        let ds = -t / (1.0 - t * t).sqrt();
        let want = [ds, -1.0, 1.0, ds];
        for (k, w) in want.iter().enumerate() {
            assert!((g[(0, k)] - w).abs() < 1e-8);
        }
    }
}

#[test]
fn symmetric_configuration_keeps_the_identity() {
    for d in [2, 3, 4] {
        let z = PriorParams::zero(d);
        let b = information_bundle(30, 0.8, 0.7, &z, &z).unwrap();
        assert_eq!(b.g1, b.g2);
        let m = parameter_count(d);
        let top = b.b1.view((0, 0), (m, m)).into_owned();
        assert!((b.b1.view((m, m), (m, m)).into_owned() - &top).amax() < 1e-12);
        assert!((b.b1.view((0, m), (m, m)).into_owned() - &top).amax() < 1e-12);
        let want = 0.49 * (d * (d - 1)) as f64 / (28.0 * 0.8);
        assert!((trace_quadratic(&b.f, &b.b2) - want).abs() <= 1e-6 * want);
    }
}

#[test]
fn information_gap_shrinks_like_one_over_n() {
    let (r, rp) = prior_pair(3, 31, 0);
    let gaps: Vec<f64> = [50usize, 100, 200]
        .iter()
        .map(|&n| {
            let b = information_bundle(n, 1.0, 1.0, &r, &rp).unwrap();
            1.0 - b.trace_j / b.identity_value
        })
        .collect();
    assert!(gaps.iter().all(|&g| g > 0.0), "{gaps:?}");
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.7..=2.3).contains(&ratio), "{gaps:?}");
    }
}

#[test]
fn vantrees_mean_sits_just_below_the_identity() {
    let est = vantrees_estimate(200, 1.0, 1.0, 3, 200, 8).unwrap();
    let identity = 6.0 / 198.0;
    let ratio = est.mean / identity;
    assert!((0.95..=1.0).contains(&ratio), "{ratio}");
    assert_eq!(est.samples, 200);

    let doubled = vantrees_estimate(400, 1.0, 1.0, 3, 200, 8).unwrap();
    let halving = doubled.mean / est.mean;
    assert!((halving - 0.5).abs() <= 0.05 * 0.5, "{halving}");
}

#[test]
fn estimate_is_reproducible() {
    let a = vantrees_estimate(20, 0.5, 1.0, 2, 16, 3).unwrap();
    let b = vantrees_estimate(20, 0.5, 1.0, 2, 16, 3).unwrap();
    assert_eq!(a, b);
    assert!(vantrees_estimate(20, 0.5, 1.0, 2, 0, 3).is_err());
}
