use approx::assert_abs_diff_eq;
use cascade_lab::cascade_sim::{
    sample_two_stage_trial, simulate_one_stage, simulate_two_stage, sweep_two_stage, top_k_indices, SweepParam,
    TwoStageSpec,
};
use cascade_lab::order_stats::{expected_topk_sum, GaussianRankingSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn figure_spec() -> TwoStageSpec {
    TwoStageSpec {
        n: 1000,
        k1: 100,
        k2: 10,
        mu: 5.0,
        sigma: 1.0,
        sigma1: 0.8,
        sigma2: 0.3,
        trials: 10_000,
        seed: 0,
    }
}

#[test]
fn noiseless_stage_reports_the_truth() {
    let spec = GaussianRankingSpec::new(50, 1.0, 2.0, 0.0).unwrap();
    let r = simulate_one_stage(&spec, 10, 2000, 4).unwrap();
    assert_eq!(r.mean_pred, r.mean_true);
    assert_eq!(r.total_pred, r.total_true);
}

#[test]
fn selection_orders_predicted_optimal_and_realized() {
    let spec = GaussianRankingSpec::new(100, 0.0, 1.0, 1.0).unwrap();
    let r = simulate_one_stage(&spec, 10, 100_000, 9).unwrap();
    let optimal = expected_topk_sum(&GaussianRankingSpec::new(100, 0.0, 1.0, 0.0).unwrap(), 10).unwrap();
    let predicted = expected_topk_sum(&spec, 10).unwrap();
    assert_abs_diff_eq!(predicted, std::f64::consts::SQRT_2 * optimal, epsilon = 1e-9);
    assert!(
        (r.total_pred - predicted).abs() / predicted < 0.01,
        "{} vs {predicted}",
        r.total_pred
    );
    assert!(r.total_pred > optimal);
    assert!(r.total_true < optimal);
}

#[test]
fn no_selection_is_unbiased() {
    let spec = GaussianRankingSpec::new(40, 3.0, 1.0, 0.7).unwrap();
    let r = simulate_one_stage(&spec, 40, 20_000, 2).unwrap();
    assert!((r.total_pred - 120.0).abs() < 3.0 * r.total_pred_stderr + 1e-9);
    assert!((r.total_true - 120.0).abs() < 3.0 * r.total_true_stderr + 1e-9);
}

#[test]
fn one_stage_total_agrees_with_order_statistics() {
    let spec = GaussianRankingSpec::new(1000, 5.0, 1.0, 0.8).unwrap();
    let r = simulate_one_stage(&spec, 100, 20_000, 13).unwrap();
    let analytic = expected_topk_sum(&spec, 100).unwrap();
    assert!(
        (r.total_pred - analytic).abs() < 3.0 * r.total_pred_stderr,
        "{} vs {analytic}",
        r.total_pred
    );
}

#[test]
fn exact_stage_one_is_calibrated() {
    let e = simulate_two_stage(&TwoStageSpec {
        sigma1: 0.0,
        trials: 500,
        ..figure_spec()
    })
    .unwrap();
    assert_eq!(e.cal_1_0, 1.0);
}

#[test]
fn full_stage_one_is_unbiased() {
    let e = simulate_two_stage(&TwoStageSpec {
        k1: 1000,
        trials: 2000,
        ..figure_spec()
    })
    .unwrap();
    assert!((e.cal_1_0 - 1.0).abs() <= 3.0 * e.stderr_1_0);
}

#[test]
fn figure_pattern() {
    let e = simulate_two_stage(&figure_spec()).unwrap();
    assert!(e.cal_1_0 > 1.02);
    assert!(e.cal_1_2 > 1.0);
    assert!((e.cal_2_0 - 1.0).abs() <= 3.0 * e.stderr_2_0);
    assert_abs_diff_eq!(e.cal_1_2, e.mean_pred_stage1 / e.mean_pred_stage2, epsilon = 1e-15);
    assert_abs_diff_eq!(e.cal_1_0, e.mean_pred_stage1 / e.mean_true_topk, epsilon = 1e-15);
}

#[test]
fn ratios_aggregate_over_all_selected_items() {
    let spec = TwoStageSpec {
        n: 200,
        k1: 20,
        trials: 300,
        ..figure_spec()
    };
    let e = simulate_two_stage(&spec).unwrap();
    let (mut p1, mut p2, mut y) = (0.0, 0.0, 0.0);
    for t in 0..spec.trials as u64 {
        let trial = sample_two_stage_trial(&spec, t).unwrap();
        for &i in &trial.stage1_set {
            p1 += trial.stage1_pred[i];
            p2 += trial.stage2_pred[i];
            y += trial.truth[i];
        }
    }
    assert_abs_diff_eq!(e.cal_1_0, p1 / y, epsilon = 1e-12);
    assert_abs_diff_eq!(e.cal_1_2, p1 / p2, epsilon = 1e-12);
    assert_abs_diff_eq!(e.cal_2_0, p2 / y, epsilon = 1e-12);
}

#[test]
fn agrees_with_an_independent_simulation() {
    let spec = TwoStageSpec {
        n: 200,
        k1: 20,
        trials: 20_000,
        ..figure_spec()
    };
    let lib = simulate_two_stage(&spec).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let truth = Normal::new(spec.mu, spec.sigma).unwrap();
    let e1 = Normal::new(0.0, spec.sigma1).unwrap();
    let (mut pred, mut real) = (0.0, 0.0);
    let mut per_trial = Vec::with_capacity(spec.trials);
    for _ in 0..spec.trials {
        let y: Vec<f64> = (0..spec.n).map(|_| truth.sample(&mut r)).collect();
        let z: Vec<f64> = y.iter().map(|v| v + e1.sample(&mut r)).collect();
        let mut idx: Vec<usize> = (0..spec.n).collect();
        idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
        let (tp, tt): (f64, f64) = idx[..spec.k1]
            .iter()
            .map(|&i| (z[i], y[i]))
            .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        pred += tp;
        real += tt;
        per_trial.push(tp / tt);
    }
    let oracle = pred / real;
    let mean = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
    let sd = (per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (per_trial.len() - 1) as f64).sqrt();
    let se = sd / (per_trial.len() as f64).sqrt();
    assert!(
        (lib.cal_1_0 - oracle).abs() < 4.0 * se.hypot(lib.stderr_1_0),
        "{} vs {oracle}",
        lib.cal_1_0
    );
}

#[test]
fn stage_sets_nest() {
    let spec = TwoStageSpec {
        n: 300,
        k1: 40,
        ..figure_spec()
    };
    for t in 0..50 {
        let trial = sample_two_stage_trial(&spec, t).unwrap();
        assert_eq!(trial.stage1_set.len(), 40);
        assert_eq!(trial.stage2_set.len(), 10);
        assert!(trial.stage2_set.iter().all(|i| trial.stage1_set.contains(i)));
        assert_eq!(trial.stage1_set, top_k_indices(&trial.stage1_pred, 40));
    }
}

#[test]
fn ties_fall_back_to_index() {
    assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 3), vec![1, 2, 4]);
}

#[test]
fn same_spec_same_estimate() {
    let spec = TwoStageSpec {
        trials: 500,
        ..figure_spec()
    };
    assert_eq!(simulate_two_stage(&spec).unwrap(), simulate_two_stage(&spec).unwrap());
}

#[test]
fn k1_sweep_decreases_toward_one() {
    let values = [50.0, 100.0, 200.0, 500.0, 1000.0];
    let c = sweep_two_stage(&figure_spec(), SweepParam::K1, &values).unwrap();
    let cal: Vec<f64> = c.estimates.iter().map(|e| e.cal_1_0).collect();
    assert!(cal.windows(2).all(|w| w[1] < w[0]), "{cal:?}");
    let last = c.estimates.last().unwrap();
    assert!((last.cal_1_0 - 1.0).abs() <= 3.0 * last.stderr_1_0);
    assert_eq!(c.sweep_values, values);
    assert_eq!(c.to_csv().lines().count(), values.len() + 1);
}

#[test]
fn single_point_sweep_at_n() {
    let c = sweep_two_stage(
        &TwoStageSpec {
            trials: 2000,
            ..figure_spec()
        },
        SweepParam::K1,
        &[1000.0],
    )
    .unwrap();
    assert_eq!(c.estimates.len(), 1);
    assert!((c.estimates[0].cal_1_0 - 1.0).abs() <= 3.0 * c.estimates[0].stderr_1_0);
}

#[test]
fn sigma1_sweep_increases_overcalibration() {
    let c = sweep_two_stage(
        &TwoStageSpec {
            trials: 3000,
            ..figure_spec()
        },
        SweepParam::Sigma1,
        &[0.0, 0.4, 0.8],
    )
    .unwrap();
    let cal: Vec<f64> = c.estimates.iter().map(|e| e.cal_1_0).collect();
    assert!(cal.windows(2).all(|w| w[1] > w[0]), "{cal:?}");
}

#[test]
fn invalid_specs() {
    let bad = [
        TwoStageSpec {
            k1: 5,
            k2: 10,
            ..figure_spec()
        },
        TwoStageSpec {
            k1: 2000,
            ..figure_spec()
        },
        TwoStageSpec {
            trials: 0,
            ..figure_spec()
        },
        TwoStageSpec {
            sigma1: -1.0,
            ..figure_spec()
        },
    ];
    for s in bad {
        assert!(simulate_two_stage(&s).is_err(), "{s:?}");
    }
    assert!(sweep_two_stage(&figure_spec(), SweepParam::K1, &[]).is_err());
    assert!(sweep_two_stage(&figure_spec(), SweepParam::K1, &[100.0, 50.0]).is_err());
    assert!(sweep_two_stage(&figure_spec(), SweepParam::K1, &[2.5]).is_err());
    assert!("k2".parse::<SweepParam>().is_err());
}
