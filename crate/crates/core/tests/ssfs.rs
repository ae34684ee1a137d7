use std::collections::BTreeSet;

use cascade_lab::predictor::{DifferentiablePredictor, PredictorArch};
use cascade_lab::ssfs::{
    combine_rankings, dataset_from_columns, perturb_importance, CombinationStrategy, FeatureImportance,
    FeatureImportanceReport, ImportanceConfig, Regime, SsfsConfig,
};
use cascade_lab::synthgen::{generate_pool, PoolConfig};
use cascade_lab::Dataset;
use proptest::prelude::*;

fn report(means: &[f64], regime: Regime) -> FeatureImportanceReport {
    FeatureImportanceReport {
        regime,
        records: means
            .iter()
            .enumerate()
            .map(|(i, &m)| FeatureImportance {
                feature_index: i,
                mean_importance: m,
                std_importance: 0.0,
                batches: 1,
            })
            .collect(),
    }
}

/// Pool rows with their true probabilities as targets.
fn truth_data(cfg: &PoolConfig) -> (DifferentiablePredictor, Dataset) {
    let pool = generate_pool(cfg).unwrap();
    let data = Dataset::new(pool.features().clone(), pool.true_prob().to_vec()).unwrap();
    let mut p = cfg.informative_weights.clone();
    p.push(cfg.bias);
    let model = DifferentiablePredictor::from_parameters(PredictorArch::linear(cfg.num_features), p).unwrap();
    (model, data)
}

fn small_config() -> SsfsConfig {
    let base = SsfsConfig::default();
    SsfsConfig {
        pool: PoolConfig {
            num_candidates: 3000,
            ..base.pool.clone()
        },
        stage_sizes: vec![600, 60],
        train_requests: 2,
        eval_requests: 2,
        importance: ImportanceConfig {
            num_batches: 10,
            batch_size: 128,
        },
        student_hidden: vec![4],
        train: cascade_lab::predictor::TrainConfig {
            epochs: 3,
            ..base.train.clone()
        },
        ..base
    }
}

#[test]
fn true_model_puts_informative_features_first() {
    let cfg = PoolConfig {
        num_candidates: 20_000,
        bias: -1.0,
        seed: 4,
        ..PoolConfig::default()
    };
    let (model, data) = truth_data(&cfg);
    let r = perturb_importance(&model, &data, 40, 512, 1, Regime::Impression).unwrap();
    let informative: BTreeSet<usize> = cfg.informative_features().into_iter().collect();
    let top: BTreeSet<usize> = r.ranking().into_iter().take(informative.len()).collect();
    assert_eq!(top, informative);
    for j in 0..cfg.num_features {
        let m = r.records[j].mean_importance;
        if informative.contains(&j) {
            assert!(m > 0.0, "{j}: {m}");
        } else {
            assert_eq!(m, 0.0, "{j}");
        }
    }
}

#[test]
fn importance_follows_weight_magnitude() {
    let n = 8000;
    let cfg = PoolConfig {
        num_candidates: n,
        num_features: 3,
        informative_weights: vec![0.3, 1.2, -0.7],
        bias: 0.0,
        feature_correlation: 0.0,
        seed: 9,
        ..PoolConfig::default()
    };
    let (model, data) = truth_data(&cfg);
    let r = perturb_importance(&model, &data, 50, 256, 2, Regime::Impression).unwrap();
    assert_eq!(r.ranking(), vec![1, 2, 0]);
    assert_eq!(r.rank_of(0), Some(2));
    assert_eq!(r.rank_of(3), None);
}

#[test]
fn column_layout_round_trips() {
    let cols = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]];
    let d = dataset_from_columns(&cols, vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.features.row(2), &[3.0, 1.0]);
    assert!(dataset_from_columns(&[vec![1.0], vec![1.0, 2.0]], vec![0.0]).is_err());
}

#[test]
fn oracle_combinations() {
    let imp = report(&[0.9, 0.8, 0.1, 0.0, 0.05], Regime::Impression);
    let cd = report(&[0.7, 0.0, 0.6, 0.5, 0.05], Regime::ConsiderationMixed);
    let pick = |s| combine_rankings(&imp, &cd, s, 2).unwrap();
    assert_eq!(pick(CombinationStrategy::ImpOnly), vec![0, 1]);
    assert_eq!(pick(CombinationStrategy::CdOnly), vec![0, 2]);
    assert_eq!(pick(CombinationStrategy::IntersectionTop), vec![0]);
    assert_eq!(pick(CombinationStrategy::UnionTop), vec![0, 1, 2]);
    // positions: 0 -> 0+0, 1 -> 1+4, 2 -> 2+1, 3 -> 4+2, 4 -> 3+3
    assert_eq!(pick(CombinationStrategy::AverageRank), vec![0, 2]);
    // min-max scaled: 0 -> (1 + 1)/2, 1 -> (0.889 + 0)/2, 2 -> (0.111 + 0.857)/2
    assert_eq!(pick(CombinationStrategy::AverageImportance), vec![0, 2]);
}

#[test]
fn strategy_catalogue() {
    let names: Vec<&str> = CombinationStrategy::ALL.iter().map(|s| s.name()).collect();
    assert_eq!(
        names,
        [
            "imp_only",
            "cd_only",
            "average_rank",
            "average_importance",
            "intersection_top",
            "union_top"
        ]
    );
    assert_eq!(CombinationStrategy::UnionTop.title(), "Union of Top Features");
    for s in CombinationStrategy::ALL {
        assert_eq!(s.name().parse::<CombinationStrategy>().unwrap(), s);
    }
}

#[test]
fn full_selection_changes_nothing() {
    let cfg = SsfsConfig {
        top_n: 20,
        ..small_config()
    };
    let out = cfg.run().unwrap();
    assert_eq!(out.results.len(), 6);
    assert_eq!(out.results[0].strategy, CombinationStrategy::ImpOnly);
    for r in &out.results {
        assert_eq!(r.selected, (0..20).collect::<Vec<_>>(), "{}", r.strategy);
        assert_eq!(r.impression_ne_change(), 0.0);
        assert_eq!(r.consideration_ne_change(), 0.0);
    }
}

#[test]
fn pipeline_is_reproducible() {
    let cfg = small_config();
    let a = cfg.run().unwrap();
    assert_eq!(a, cfg.run().unwrap());
    assert_eq!(a.imp_report.regime, Regime::Impression);
    assert_eq!(a.cd_report.regime, Regime::ConsiderationMixed);
    let union = a.result(CombinationStrategy::UnionTop).unwrap();
    let inter = a.result(CombinationStrategy::IntersectionTop).unwrap();
    assert!(inter.selected.iter().all(|f| union.selected.contains(f)));
    assert!(a.render_table().contains("Union of Top Features"));
}

#[test]
fn invalid_configs() {
    let base = small_config();
    let bad = [
        SsfsConfig {
            top_n: 0,
            ..base.clone()
        },
        SsfsConfig {
            top_n: 21,
            ..base.clone()
        },
        SsfsConfig {
            holdout_fraction: 1.0,
            ..base.clone()
        },
        SsfsConfig {
            planted_feature: Some(20),
            ..base.clone()
        },
        SsfsConfig {
            stage_weights: vec![vec![0.0; 20]],
            ..base.clone()
        },
        SsfsConfig {
            student_hidden: vec![],
            ..base.clone()
        },
    ];
    for c in bad {
        assert!(c.run().is_err());
    }
    assert!(SsfsConfig {
        planted_feature: None,
        ..base
    }
    .planted_check()
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn union_contains_intersection(
        pair in (2usize..15).prop_flat_map(|d| (
            prop::collection::vec(0.0f64..1.0, d),
            prop::collection::vec(0.0f64..1.0, d),
            1..=d,
        ))
    ) {
        let (a, b, top_n) = pair;
        let (imp, cd) = (report(&a, Regime::Impression), report(&b, Regime::ConsiderationMixed));
        let union = combine_rankings(&imp, &cd, CombinationStrategy::UnionTop, top_n).unwrap();
        let inter = combine_rankings(&imp, &cd, CombinationStrategy::IntersectionTop, top_n).unwrap();
        prop_assert!(inter.iter().all(|f| union.contains(f)));
        prop_assert!(union.len() >= top_n && union.len() <= 2 * top_n);
        prop_assert_eq!(union.len() + inter.len(), 2 * top_n);
        for s in [CombinationStrategy::AverageRank, CombinationStrategy::AverageImportance] {
            prop_assert_eq!(combine_rankings(&imp, &cd, s, top_n).unwrap().len(), top_n);
        }
        // a report combined with itself is just its own top-n
        let own = combine_rankings(&imp, &imp, CombinationStrategy::ImpOnly, top_n).unwrap();
        for s in CombinationStrategy::ALL {
            prop_assert_eq!(&combine_rankings(&imp, &imp, s, top_n).unwrap(), &own);
        }
    }
}
