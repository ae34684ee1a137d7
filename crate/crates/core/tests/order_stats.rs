use approx::assert_abs_diff_eq;
use cascade_lab::order_stats::{
    expected_order_stat, expected_order_stat_with_alpha, expected_topk_sum, inv_norm_cdf, GaussianRankingSpec,
    OrderStatTable,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// erf by its Maclaurin series; accurate to ~1e-13 for |x| < 3.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

fn quantile_by_bisection(p: f64) -> f64 {
    let (mut lo, mut hi) = (-6.0, 6.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn spec(n: usize, mu: f64, sigma: f64, sigma_model: f64) -> GaussianRankingSpec {
    GaussianRankingSpec::new(n, mu, sigma, sigma_model).unwrap()
}

#[test]
fn quantile_matches_erf_oracle() {
    assert_eq!(inv_norm_cdf(0.5).unwrap(), 0.0);
    assert_abs_diff_eq!(
        inv_norm_cdf(0.975).unwrap(),
        quantile_by_bisection(0.975),
        epsilon = 1e-9
    );
    assert_abs_diff_eq!(inv_norm_cdf(0.975).unwrap(), 1.959964, epsilon = 1e-6);
    let p1 = phi(1.0);
    assert_abs_diff_eq!(p1, 0.841344746, epsilon = 1e-9);
    assert_abs_diff_eq!(inv_norm_cdf(p1).unwrap(), 1.0, epsilon = 1e-9);
    for k in 1..200 {
        let p = 1e-4 + (1.0 - 2e-4) * k as f64 / 200.0;
        assert_abs_diff_eq!(inv_norm_cdf(p).unwrap(), quantile_by_bisection(p), epsilon = 1e-9);
    }
}

#[test]
fn quantile_rejects_closed_interval() {
    for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(inv_norm_cdf(p).is_err(), "{p}");
    }
}

#[test]
fn middle_rank_is_the_mean() {
    assert_abs_diff_eq!(
        expected_order_stat(&spec(101, 10.0, 2.0, 1.0), 51).unwrap(),
        10.0,
        epsilon = 1e-12
    );
}

#[test]
fn top_of_hundred() {
    let oracle = quantile_by_bisection(99.625 / 100.25);
    let v = expected_order_stat(&spec(100, 0.0, 1.0, 0.0), 1).unwrap();
    assert_abs_diff_eq!(v, oracle, epsilon = 1e-9);
    assert_abs_diff_eq!(v, 2.498, epsilon = 1e-3);
}

#[test]
fn max_of_two_is_close_to_closed_form() {
    let exact = 1.0 / std::f64::consts::PI.sqrt();
    let v = expected_order_stat(&spec(2, 0.0, 1.0, 0.0), 1).unwrap();
    assert_abs_diff_eq!(v, 0.5895, epsilon = 1e-4);
    assert!((v - exact).abs() < 0.03);
}

#[test]
fn approximation_error_shrinks_with_n() {
    // E[max] of n standard normals by Monte Carlo
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut err = Vec::new();
    for n in [2usize, 10, 50] {
        let trials = 200_000;
        let mean = (0..trials)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut r)).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / trials as f64;
        err.push((expected_order_stat(&spec(n, 0.0, 1.0, 0.0), 1).unwrap() - mean).abs());
    }
    assert!(err[0] > err[1] && err[1] > err[2], "{err:?}");
}

#[test]
fn topk_sum_matches_monte_carlo() {
    let s = spec(100, 0.0, 1.0, 0.0);
    let trials = 1_000_000;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut draws = vec![0.0f64; 100];
    let mut total = 0.0;
    for _ in 0..trials {
        draws.iter_mut().for_each(|d| *d = StandardNormal.sample(&mut r));
        draws.select_nth_unstable_by(10, |a, b| b.total_cmp(a));
        total += draws[..10].iter().sum::<f64>();
    }
    let mc = total / trials as f64;
    let analytic = expected_topk_sum(&s, 10).unwrap();
    assert_abs_diff_eq!(analytic, 17.2547, epsilon = 1e-4);
    assert!((analytic - mc).abs() / mc < 0.005, "{analytic} vs {mc}");
}

#[test]
fn topk_sum_over_everything_is_n_mu() {
    for (n, mu) in [(7, 2.0), (100, -1.5), (1000, 5.0)] {
        assert_abs_diff_eq!(
            expected_topk_sum(&spec(n, mu, 1.2, 0.4), n).unwrap(),
            n as f64 * mu,
            epsilon = 1e-9
        );
    }
}

#[test]
fn model_noise_inflates_topk_sum() {
    let a = expected_topk_sum(&spec(100, 0.0, 1.0, 0.0), 10).unwrap();
    let b = expected_topk_sum(&spec(100, 0.0, 1.0, 1.0), 10).unwrap();
    assert!(b > a);
    assert_abs_diff_eq!(b / a, std::f64::consts::SQRT_2, epsilon = 1e-12);
}

#[test]
fn ranks_are_antisymmetric_and_monotone() {
    for n in [3usize, 10, 101, 1000] {
        let s = spec(n, 1.5, 0.8, 0.6);
        let values: Vec<f64> = (1..=n).map(|i| expected_order_stat(&s, i).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[0] > w[1]));
        for i in 0..n {
            assert_abs_diff_eq!(values[i] + values[n - 1 - i], 3.0, epsilon = 1e-9);
        }
        let noisier = spec(n, 1.5, 0.8, 0.9);
        for i in 1..=(n / 2) {
            if 2 * i < n + 1 {
                assert!(expected_order_stat(&noisier, i).unwrap() > values[i - 1]);
            }
        }
    }
}

#[test]
fn printed_alpha_breaks_the_top_ranks() {
    let s = spec(100, 0.0, 1.0, 0.0);
    for i in 1..=3 {
        assert!(expected_order_stat_with_alpha(&s, i, 3.375).is_err(), "rank {i}");
    }
    assert!(expected_order_stat_with_alpha(&s, 4, 3.375).is_ok());
}

#[test]
fn table_lists_the_top_k() {
    let s = spec(50, 0.0, 1.0, 0.5);
    let t = OrderStatTable::new(s, 5, 0.375).unwrap();
    assert_eq!(t.expected_prediction.len(), 5);
    assert_abs_diff_eq!(t.total(), expected_topk_sum(&s, 5).unwrap(), epsilon = 1e-12);
}

#[test]
fn invalid_specs_and_ranks() {
    assert!(GaussianRankingSpec::new(0, 0.0, 1.0, 0.0).is_err());
    assert!(GaussianRankingSpec::new(5, 0.0, -1.0, 0.0).is_err());
    assert!(GaussianRankingSpec::new(5, 0.0, 1.0, -0.1).is_err());
    let s = spec(5, 0.0, 1.0, 0.0);
    assert!(expected_order_stat(&s, 0).is_err());
    assert!(expected_order_stat(&s, 6).is_err());
    assert!(expected_topk_sum(&s, 6).is_err());
}
