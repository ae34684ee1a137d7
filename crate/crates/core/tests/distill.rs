use approx::assert_abs_diff_eq;
use cascade_lab::distill::{distill_train, evaluate_cross_stage, make_pseudo_labels, DistillConfig, DistillExperiment};
use cascade_lab::predictor::{bce_loss, train, DifferentiablePredictor, LrSchedule, PredictorArch, TrainConfig};
use cascade_lab::synthgen::{
    generate_pool, make_splits, run_cascade, CandidatePool, ConsiderationSet, ImpressionSet, NoisyOracle, PoolConfig,
    StageScorer,
};
use cascade_lab::Dataset;

const STUDENT_COLUMNS: [usize; 5] = [0, 1, 2, 3, 4];

fn planted_teacher(cfg: &PoolConfig) -> DifferentiablePredictor {
    let mut params = cfg.informative_weights.clone();
    params.push(cfg.bias);
    DifferentiablePredictor::from_parameters(PredictorArch::linear(cfg.num_features), params).unwrap()
}

fn pool(seed: u64) -> (PoolConfig, CandidatePool) {
    let cfg = PoolConfig {
        num_candidates: 20_000,
        seed,
        ..PoolConfig::default()
    };
    let pool = generate_pool(&cfg).unwrap();
    (cfg, pool)
}

/// Logs of a noisy first stage followed by the planted model as stage 2.
fn logs(seed: u64) -> (ImpressionSet, ConsiderationSet) {
    let (cfg, pool) = pool(seed);
    let stage1 = NoisyOracle { noise: 1.5, seed };
    let stage2 = cascade_lab::synthgen::ColumnScorer {
        model: planted_teacher(&cfg),
        columns: (0..cfg.num_features).collect(),
    };
    let stages: [&dyn StageScorer; 2] = [&stage1, &stage2];
    let trace = run_cascade(&pool, &stages, &[4000, 400]).unwrap();
    make_splits(&trace, &pool)
}

fn student_cfg(lambda: f64, seed: u64) -> DistillConfig {
    DistillConfig {
        distill_weight: lambda,
        ..DistillConfig::new(TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            schedule: LrSchedule::LinearDecay,
            ..TrainConfig::sgd(seed)
        })
    }
}

fn student_data(imp: &ImpressionSet, cons: &ConsiderationSet) -> (Dataset, Dataset) {
    (
        imp.to_dataset().unwrap().select_features(&STUDENT_COLUMNS).unwrap(),
        cons.to_dataset().unwrap().select_features(&STUDENT_COLUMNS).unwrap(),
    )
}

#[test]
fn planted_teacher_pseudo_labels_are_the_truth() {
    let (cfg, pool) = pool(1);
    let labels = make_pseudo_labels(&planted_teacher(&cfg), pool.features()).unwrap();
    for (p, t) in labels.targets.iter().zip(pool.true_prob()) {
        assert_abs_diff_eq!(p, t, epsilon = 1e-12);
    }
    assert_eq!(labels.features, *pool.features());
}

#[test]
fn consideration_pseudo_labels_sit_above_the_pool() {
    let (_, pool) = pool(2);
    let (_, cons) = logs(2);
    let mean = cons.teacher_pred.iter().sum::<f64>() / cons.len() as f64;
    assert!(mean > pool.mean_true_prob(), "{mean} vs {}", pool.mean_true_prob());
}

#[test]
fn zero_weight_matches_plain_training_on_cascade_logs() {
    let (imp, cons) = logs(3);
    let (imp, cons) = student_data(&imp, &cons);
    let s = DifferentiablePredictor::zeros(PredictorArch::linear(STUDENT_COLUMNS.len())).unwrap();
    let cfg = student_cfg(0.0, 4);
    assert_eq!(
        distill_train(&s, &imp, &cons, &cfg).unwrap(),
        train(&s, &imp, &cfg.train).unwrap()
    );
    let no_mix = DistillConfig {
        distill_weight: 1.0,
        unlabeled_batch_mix: 0.0,
        ..cfg.clone()
    };
    assert_eq!(
        distill_train(&s, &imp, &cons, &no_mix).unwrap(),
        train(&s, &imp, &cfg.train).unwrap()
    );
}

#[test]
fn planted_student_is_a_fixed_point() {
    let (cfg, pool) = pool(5);
    let teacher = planted_teacher(&cfg);
    let cons = make_pseudo_labels(&teacher, &pool.features().select_rows(&(0..512).collect::<Vec<_>>())).unwrap();
    let empty = Dataset::new(cascade_lab::Matrix::zeros(0, cfg.num_features), vec![]).unwrap();
    let c = DistillConfig {
        unlabeled_batch_mix: 1.0,
        ..student_cfg(1.0, 0)
    };
    let out = distill_train(&teacher, &empty, &cons, &c).unwrap();
    for (a, b) in out.model.parameters().iter().zip(teacher.parameters()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn more_distillation_tracks_the_teacher_more_closely() {
    let s = DifferentiablePredictor::zeros(PredictorArch::linear(STUDENT_COLUMNS.len())).unwrap();
    let (_, held_out) = logs(100);
    let held_x = held_out.features.select_cols(&STUDENT_COLUMNS).unwrap();
    for seed in 0..3 {
        let (imp, cons) = logs(10 + seed);
        let (imp, cons) = student_data(&imp, &cons);
        let losses: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&lambda| {
                let m = distill_train(&s, &imp, &cons, &student_cfg(lambda, seed))
                    .unwrap()
                    .model;
                let p = m.predict_batch(&held_x).unwrap();
                p.iter()
                    .zip(&held_out.teacher_pred)
                    .map(|(&p, &t)| bce_loss(t, p))
                    .sum::<f64>()
                    / p.len() as f64
            })
            .collect();
        assert!(
            losses[0] > losses[1] + 1e-3 && losses[1] > losses[2] + 1e-3,
            "seed {seed}: {losses:?}"
        );
    }
}

#[test]
fn identical_students_evaluate_as_no_change() {
    let (imp, cons) = logs(7);
    let (d, _) = student_data(&imp, &cons);
    let s = DifferentiablePredictor::zeros(PredictorArch::linear(STUDENT_COLUMNS.len())).unwrap();
    let m = train(&s, &d, &student_cfg(0.0, 1).train).unwrap().model;
    let e = evaluate_cross_stage(&m, &m, &imp, &cons, &STUDENT_COLUMNS).unwrap();
    assert_eq!(e.impression_ne_change(), 0.0);
    assert_eq!(e.consideration_ne_change(), 0.0);
    let [a, b] = e.consideration_calibration();
    assert_eq!(a, b);
    // trained only on shown items, the student overshoots on the rest
    assert!(a > 1.0, "{a}");
    assert!(evaluate_cross_stage(&m, &m, &imp, &cons, &[0, 1]).is_err());
}

#[test]
fn small_experiment_is_reproducible() {
    let exp = DistillExperiment {
        seed: 3,
        exploration_candidates: 10_000,
        train_requests: 2,
        eval_requests: 2,
        pool: PoolConfig {
            num_candidates: 5000,
            ..PoolConfig::default()
        },
        stage_sizes: vec![500, 50],
        ..DistillExperiment::default()
    };
    let a = exp.run().unwrap();
    let b = exp.run().unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train_data.impression_count, 100);
    assert_eq!(a.train_data.consideration_count, 900);
    assert_ne!(a.baseline, a.distilled);
    let other = DistillExperiment { seed: 4, ..exp }.run().unwrap();
    assert_ne!(other.train_data.impression_hash, a.train_data.impression_hash);
}

#[test]
fn invalid_experiments() {
    let base = DistillExperiment::default();
    let bad = [
        DistillExperiment {
            stage_sizes: vec![100],
            ..base.clone()
        },
        DistillExperiment {
            student_features: vec![],
            ..base.clone()
        },
        DistillExperiment {
            student_features: vec![25],
            ..base.clone()
        },
        DistillExperiment {
            train_requests: 0,
            ..base.clone()
        },
    ];
    for e in bad {
        assert!(e.run().is_err());
    }
}
