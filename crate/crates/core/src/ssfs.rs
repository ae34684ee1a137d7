//! Semi-supervised feature selection.
//!
//! Feature importance is the rise in cross-entropy when one column is
//! shuffled within a batch. Ranked on impressions alone it reflects the
//! selected traffic; ranked by a model trained on impressions plus
//! pseudo-labeled consideration data it reflects what the early stage
//! actually serves. The two rankings are then combined.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::distill::make_pseudo_labels;
use crate::error::{Error, Result};
use crate::metrics::{normalized_entropy, NeReport, TargetKind};
use crate::predictor::{train, Activation, DifferentiablePredictor, LrSchedule, PredictorArch, TrainConfig};
use crate::report::{fmt_pct, render_table};
use crate::rng;
use crate::synthgen::{
    generate_pool, make_splits, run_cascade, ConsiderationSet, ImpressionSet, PoolConfig, StageScorer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Impression,
    ConsiderationMixed,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Impression => "impression",
            Regime::ConsiderationMixed => "consideration_mixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature_index: usize,
    pub mean_importance: f64,
    pub std_importance: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub regime: Regime,
    pub records: Vec<FeatureImportance>,
}

pub const IMPORTANCE_CSV_HEADER: &str = "feature_index,mean_importance,std_importance,batches,regime";

impl FeatureImportanceReport {
    pub fn num_features(&self) -> usize {
        self.records.len()
    }

    pub fn means(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_importance).collect()
    }

    /// Feature indices from most to least important, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_desc(&self.means())
    }

    /// Zero-based position of `feature` in [`Self::ranking`].
    pub fn rank_of(&self, feature: usize) -> Option<usize> {
        self.ranking().iter().position(|&f| f == feature)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(IMPORTANCE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.feature_index, r.mean_importance, r.std_importance, r.batches, self.regime
            ));
        }
        out
    }
}

/// Indices sorted by value, largest first, ties by index.
fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Permutation importance over `num_batches` batches of `batch_size` rows.
///
/// Batches walk through the rows in shuffled passes. For every batch and
/// feature the column is permuted without replacement using its own
/// substream, and the importance is the increase of the batch's mean
/// weighted cross-entropy.
pub fn perturb_importance(
    model: &DifferentiablePredictor,
    data: &Dataset,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
    regime: Regime,
) -> Result<FeatureImportanceReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("feature importance needs data".into()));
    }
    if model.input_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    if num_batches == 0 || batch_size == 0 {
        return Err(Error::Config("num_batches and batch_size must be at least 1".into()));
    }
    let d = data.dim();
    let size = batch_size.min(data.len());
    let batches = batch_rows(data.len(), num_batches, size, seed);
    let mut deltas = vec![vec![0.0; num_batches]; d];
    for (b, rows) in batches.iter().enumerate() {
        let batch = data.subset(rows);
        let base = model.loss(&batch)?;
        let per_feature: Vec<f64> = (0..d)
            .into_par_iter()
            .map(|j| {
                let mut col: Vec<f64> = (0..batch.len()).map(|i| batch.features.get(i, j)).collect();
                col.shuffle(&mut rng::stream(seed, "importance:permute", (b * d + j) as u64));
                let mut shuffled = batch.clone();
                for (i, v) in col.into_iter().enumerate() {
                    shuffled.features.set(i, j, v);
                }
                model.loss(&shuffled).map(|l| l - base)
            })
            .collect::<Result<_>>()?;
        for (j, v) in per_feature.into_iter().enumerate() {
            deltas[j][b] = v;
        }
    }
    let records = deltas
        .iter()
        .enumerate()
        .map(|(j, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            FeatureImportance {
                feature_index: j,
                mean_importance: mean,
                std_importance: var.sqrt(),
                batches: xs.len(),
            }
        })
        .collect();
    Ok(FeatureImportanceReport { regime, records })
}

fn batch_rows(n: usize, num_batches: usize, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut pass = 0u64;
    order.shuffle(&mut rng::stream(seed, "importance:batches", pass));
    let mut cursor = 0;
    let mut out = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        if cursor + size > n {
            pass += 1;
            order.shuffle(&mut rng::stream(seed, "importance:batches", pass));
            cursor = 0;
        }
        out.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    out
}

// ---------------------------------------------------------------------------
// Combining rankings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationStrategy {
    ImpOnly,
    CdOnly,
    AverageRank,
    AverageImportance,
    IntersectionTop,
    UnionTop,
}

impl CombinationStrategy {
    pub const ALL: [CombinationStrategy; 6] = [
        CombinationStrategy::ImpOnly,
        CombinationStrategy::CdOnly,
        CombinationStrategy::AverageRank,
        CombinationStrategy::AverageImportance,
        CombinationStrategy::IntersectionTop,
        CombinationStrategy::UnionTop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombinationStrategy::ImpOnly => "imp_only",
            CombinationStrategy::CdOnly => "cd_only",
            CombinationStrategy::AverageRank => "average_rank",
            CombinationStrategy::AverageImportance => "average_importance",
            CombinationStrategy::IntersectionTop => "intersection_top",
            CombinationStrategy::UnionTop => "union_top",
        }
    }

    /// Row label in the comparison table.
    pub fn title(self) -> &'static str {
        match self {
            CombinationStrategy::ImpOnly => "IMP Importance Only",
            CombinationStrategy::CdOnly => "CD Importance Only",
            CombinationStrategy::AverageRank => "Average Rank",
            CombinationStrategy::AverageImportance => "Average Importance",
            CombinationStrategy::IntersectionTop => "Intersection of Top Features",
            CombinationStrategy::UnionTop => "Union of Top Features",
        }
    }
}

impl fmt::Display for CombinationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombinationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown combination strategy `{s}`")))
    }
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Selected feature indices in ascending order.
pub fn combine_rankings(
    imp: &FeatureImportanceReport,
    cd: &FeatureImportanceReport,
    strategy: CombinationStrategy,
    top_n: usize,
) -> Result<Vec<usize>> {
    let d = imp.num_features();
    if cd.num_features() != d {
        return Err(Error::UniverseMismatch(d, cd.num_features()));
    }
    if top_n == 0 || top_n > d {
        return Err(Error::Config(format!("top_n must lie in 1..={d}, got {top_n}")));
    }
    let top = |ranking: Vec<usize>| -> BTreeSet<usize> { ranking.into_iter().take(top_n).collect() };
    let imp_top = top(imp.ranking());
    let cd_top = top(cd.ranking());
    let set = match strategy {
        CombinationStrategy::ImpOnly => imp_top,
        CombinationStrategy::CdOnly => cd_top,
        CombinationStrategy::AverageRank => {
            let mut pos = vec![0.0; d];
            for (r, f) in imp.ranking().into_iter().enumerate() {
                pos[f] += r as f64;
            }
            for (r, f) in cd.ranking().into_iter().enumerate() {
                pos[f] += r as f64;
            }
            // lower mean position is better
            let neg: Vec<f64> = pos.iter().map(|p| -p / 2.0).collect();
            top(rank_desc(&neg))
        }
        CombinationStrategy::AverageImportance => {
            let (a, b) = (min_max(&imp.means()), min_max(&cd.means()));
            let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
            top(rank_desc(&avg))
        }
        CombinationStrategy::IntersectionTop => imp_top.intersection(&cd_top).copied().collect(),
        CombinationStrategy::UnionTop => imp_top.union(&cd_top).copied().collect(),
    };
    Ok(set.into_iter().collect())
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    pub num_batches: usize,
    pub batch_size: usize,
}

/// A cascade of two fixed linear scorers over a synthetic pool. The default
/// plants feature 8: stage 1 ignores it and stage 2 selects heavily on it,
/// so shown candidates all sit in its upper tail while the consideration set
/// spans its full range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsfsConfig {
    pub seed: u64,
    pub pool: PoolConfig,
    pub stage_sizes: Vec<usize>,
    /// Logit weights of the two stage scorers, one row per stage.
    pub stage_weights: Vec<Vec<f64>>,
    pub planted_feature: Option<usize>,
    pub train_requests: usize,
    pub eval_requests: usize,
    /// Share of the training logs withheld for importance.
    pub holdout_fraction: f64,
    pub top_n: usize,
    pub strategies: Vec<CombinationStrategy>,
    /// Hidden sizes of the student; the importance model uses one layer of
    /// half the first width. Empty hidden sizes mean a linear model.
    pub student_hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
    pub importance: ImportanceConfig,
    pub train: TrainConfig,
}

impl Default for SsfsConfig {
    fn default() -> Self {
        let planted = 8;
        let mut w = vec![0.0; 20];
        w[..9].copy_from_slice(&[0.9, -0.8, 0.7, 0.6, -0.6, 0.5, 0.5, 0.45, 0.7]);
        let pool = PoolConfig {
            informative_weights: w.clone(),
            bias: -7.0,
            ..PoolConfig::default()
        };
        let mut stage1 = w.clone();
        stage1[planted] = 0.0;
        let mut stage2 = w;
        stage2[planted] *= 5.0;
        Self {
            seed: 0,
            pool,
            stage_sizes: vec![5000, 500],
            stage_weights: vec![stage1, stage2],
            planted_feature: Some(planted),
            train_requests: 10,
            eval_requests: 10,
            holdout_fraction: 0.2,
            top_n: 8,
            strategies: CombinationStrategy::ALL.to_vec(),
            student_hidden: vec![16],
            teacher_hidden: vec![],
            importance: ImportanceConfig {
                num_batches: 100,
                batch_size: 256,
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 20,
                batch_size: 128,
                schedule: LrSchedule::LinearDecay,
                ..TrainConfig::adam(0)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: CombinationStrategy,
    pub selected: Vec<usize>,
    pub impression_ne: NeReport,
    pub consideration_ne: NeReport,
}

impl StrategyResult {
    pub fn impression_ne_change(&self) -> f64 {
        self.impression_ne.ne_relative_change.unwrap_or(0.0)
    }

    pub fn consideration_ne_change(&self) -> f64 {
        self.consideration_ne.ne_relative_change.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsfsOutcome {
    pub imp_report: FeatureImportanceReport,
    pub cd_report: FeatureImportanceReport,
    /// Results relative to `imp_only`, which always comes first.
    pub results: Vec<StrategyResult>,
}

impl SsfsOutcome {
    pub fn result(&self, strategy: CombinationStrategy) -> Option<&StrategyResult> {
        self.results.iter().find(|r| r.strategy == strategy)
    }

    pub fn render_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .results
            .iter()
            .map(|r| {
                vec![
                    r.strategy.title().to_string(),
                    fmt_pct(r.impression_ne_change(), 3),
                    fmt_pct(r.consideration_ne_change(), 3),
                    format!("{:?}", r.selected),
                ]
            })
            .collect();
        render_table(&["Method", "Impression Data", "Consideration Data", "Features"], &rows)
    }
}

/// Ranks of the planted feature under the ground-truth model, on held-out
/// logs whose targets are the true probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedCheck {
    pub feature: usize,
    /// Zero-based.
    pub impression_rank: usize,
    pub mixed_rank: usize,
    pub top_n: usize,
}

impl PlantedCheck {
    /// Top-n on the mixed logs, outside it on impressions.
    pub fn holds(&self) -> bool {
        self.mixed_rank < self.top_n && self.impression_rank >= self.top_n
    }
}

struct Logs {
    impression: ImpressionSet,
    consideration: ConsiderationSet,
    imp_truth: Vec<f64>,
    cons_truth: Vec<f64>,
}

impl SsfsConfig {
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        self.train.validate()?;
        crate::synthgen::validate_stage_sizes(&self.stage_sizes, self.pool.num_candidates)?;
        let d = self.pool.num_features;
        if self.stage_weights.len() != self.stage_sizes.len() || self.stage_weights.iter().any(|w| w.len() != d) {
            return Err(Error::Config(format!(
                "stage_weights needs one row of {d} weights per stage"
            )));
        }
        if self.top_n == 0 || self.top_n > d {
            return Err(Error::Config(format!("top_n must lie in 1..={d}, got {}", self.top_n)));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        if self.planted_feature.is_some_and(|p| p >= d) {
            return Err(Error::Config("planted_feature is not a valid column".into()));
        }
        if self.train_requests == 0 || self.eval_requests == 0 {
            return Err(Error::Config("request counts must be at least 1".into()));
        }
        if self.student_hidden.is_empty() || self.student_hidden.contains(&0) {
            return Err(Error::Config("student_hidden must be nonempty positive widths".into()));
        }
        Ok(())
    }

    fn sub_seed(&self, label: &str, index: u64) -> u64 {
        rng::derive_seed(self.seed, label, index)
    }

    fn train_cfg(&self, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.sub_seed(label, self.train.seed),
            ..self.train.clone()
        }
    }

    fn stage_models(&self) -> Result<Vec<DifferentiablePredictor>> {
        self.stage_weights
            .iter()
            .map(|w| {
                let mut p = w.clone();
                p.push(self.pool.bias);
                DifferentiablePredictor::from_parameters(PredictorArch::linear(w.len()), p)
            })
            .collect()
    }

    fn logs(&self, label: &str, requests: usize) -> Result<Logs> {
        let models = self.stage_models()?;
        let stages: Vec<&dyn StageScorer> = models.iter().map(|m| m as &dyn StageScorer).collect();
        let mut imps = Vec::new();
        let mut cons = Vec::new();
        let (mut imp_truth, mut cons_truth) = (Vec::new(), Vec::new());
        for r in 0..requests {
            let pool = generate_pool(&PoolConfig {
                seed: self.sub_seed(label, r as u64),
                ..self.pool.clone()
            })?;
            let trace = run_cascade(&pool, &stages, &self.stage_sizes)?;
            let (i, c) = make_splits(&trace, &pool);
            // ids are positions within their own pool
            imp_truth.extend(i.ids.iter().map(|&id| pool.true_prob()[id as usize]));
            cons_truth.extend(c.ids.iter().map(|&id| pool.true_prob()[id as usize]));
            imps.push(i);
            cons.push(c);
        }
        Ok(Logs {
            impression: ImpressionSet::concat(&imps)?,
            consideration: ConsiderationSet::concat(&cons)?,
            imp_truth,
            cons_truth,
        })
    }

    fn holdout_split(&self, n: usize, label: &str) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.seed, label, 0));
        let cut = ((n as f64) * self.holdout_fraction).round() as usize;
        let (held, kept) = idx.split_at(cut);
        (kept.to_vec(), held.to_vec())
    }

    fn ground_truth_model(&self) -> Result<DifferentiablePredictor> {
        if self.pool.nonlinearity {
            return Err(Error::Config(
                "the planted-feature check needs a linear ground truth".into(),
            ));
        }
        let mut p = self.pool.informative_weights.clone();
        p.push(self.pool.bias);
        DifferentiablePredictor::from_parameters(PredictorArch::linear(p.len() - 1), p)
    }

    /// Brute-force ranking of the planted feature by the true model, on
    /// impressions alone and on impressions plus consideration.
    pub fn planted_check(&self) -> Result<PlantedCheck> {
        self.validate()?;
        let feature = self
            .planted_feature
            .ok_or_else(|| Error::Config("no planted_feature configured".into()))?;
        let logs = self.logs("pool:check", self.train_requests)?;
        let truth = self.ground_truth_model()?;
        let imp = Dataset::new(logs.impression.features.clone(), logs.imp_truth.clone())?;
        let mixed = Dataset::new(
            logs.impression.features.vstack(&logs.consideration.features)?,
            logs.imp_truth.iter().chain(&logs.cons_truth).copied().collect(),
        )?;
        let n_batches = 4 * self.importance.num_batches;
        let b = self.importance.batch_size;
        let seed = self.sub_seed("importance:check", 0);
        let imp_r = perturb_importance(&truth, &imp, n_batches, b, seed, Regime::Impression)?;
        let mix_r = perturb_importance(&truth, &mixed, n_batches, b, seed, Regime::ConsiderationMixed)?;
        Ok(PlantedCheck {
            feature,
            impression_rank: imp_r.rank_of(feature).expect("feature in range"),
            mixed_rank: mix_r.rank_of(feature).expect("feature in range"),
            top_n: self.top_n,
        })
    }

    fn arch(&self, hidden: Vec<usize>, d: usize) -> PredictorArch {
        if hidden.is_empty() {
            PredictorArch::linear(d)
        } else {
            PredictorArch::feedforward(d, hidden, Activation::Relu)
        }
    }

    pub fn run(&self) -> Result<SsfsOutcome> {
        self.validate()?;
        let d = self.pool.num_features;
        let train_logs = self
            .logs("pool:train", self.train_requests)
            .map_err(Error::at_stage("training logs"))?;
        let eval_logs = self
            .logs("pool:eval", self.eval_requests)
            .map_err(Error::at_stage("evaluation logs"))?;

        // teacher on impressions, pseudo-labels on consideration
        let imp_all = train_logs.impression.to_dataset()?;
        let teacher = DifferentiablePredictor::new(
            self.arch(self.teacher_hidden.clone(), d),
            self.sub_seed("init:teacher", 0),
        )?;
        let teacher = train(&teacher, &imp_all, &self.train_cfg("train:teacher"))
            .map_err(Error::at_stage("teacher"))?
            .model;
        let cons_all = make_pseudo_labels(&teacher, &train_logs.consideration.features)?;

        let (imp_fit, imp_held) = self.holdout_split(imp_all.len(), "split:impression");
        let (cons_fit, cons_held) = self.holdout_split(cons_all.len(), "split:consideration");
        let imp_train = imp_all.subset(&imp_fit);
        let mixed_train = concat(&imp_train, &cons_all.subset(&cons_fit))?;
        let imp_holdout = imp_all.subset(&imp_held);
        let mixed_holdout = concat(&imp_holdout, &cons_all.subset(&cons_held))?;

        // importance from a simplified all-feature student per regime
        let half = (self.student_hidden[0] / 2).max(1);
        let simple = DifferentiablePredictor::new(self.arch(vec![half], d), self.sub_seed("init:simplified", 0))?;
        let fi =
            |data: &Dataset, held: &Dataset, regime: Regime, label: &'static str| -> Result<FeatureImportanceReport> {
                let m = train(&simple, data, &self.train_cfg(label))?.model;
                perturb_importance(
                    &m,
                    held,
                    self.importance.num_batches,
                    self.importance.batch_size,
                    self.sub_seed("importance", regime as u64),
                    regime,
                )
            };
        let imp_report = fi(&imp_train, &imp_holdout, Regime::Impression, "train:simplified:imp")
            .map_err(Error::at_stage("impression importance"))?;
        let cd_report = fi(
            &mixed_train,
            &mixed_holdout,
            Regime::ConsiderationMixed,
            "train:simplified:mixed",
        )
        .map_err(Error::at_stage("mixed importance"))?;

        // retrain restricted students and evaluate on fresh logs
        let mixed_full = concat(&imp_all, &cons_all)?;
        let eval_cons_targets = teacher.predict_batch(&eval_logs.consideration.features)?;
        let mut strategies = vec![CombinationStrategy::ImpOnly];
        strategies.extend(
            self.strategies
                .iter()
                .copied()
                .filter(|&s| s != CombinationStrategy::ImpOnly),
        );
        let mut results: Vec<StrategyResult> = Vec::with_capacity(strategies.len());
        for strategy in strategies {
            let selected = combine_rankings(&imp_report, &cd_report, strategy, self.top_n)?;
            let (imp_ne, cons_ne) = self
                .evaluate_selection(&selected, &mixed_full, &eval_logs, &eval_cons_targets)
                .map_err(Error::at_stage("restricted student"))?;
            let (imp_ne, cons_ne) = match results.first() {
                Some(base) => (
                    imp_ne.against("imp_only", &base.impression_ne)?,
                    cons_ne.against("imp_only", &base.consideration_ne)?,
                ),
                None => (imp_ne, cons_ne),
            };
            results.push(StrategyResult {
                strategy,
                selected,
                impression_ne: imp_ne,
                consideration_ne: cons_ne,
            });
        }
        if let Some(base) = results.first_mut() {
            base.impression_ne.ne_relative_change = Some(0.0);
            base.consideration_ne.ne_relative_change = Some(0.0);
        }
        Ok(SsfsOutcome {
            imp_report,
            cd_report,
            results,
        })
    }

    fn evaluate_selection(
        &self,
        selected: &[usize],
        train_data: &Dataset,
        eval: &Logs,
        eval_cons_targets: &[f64],
    ) -> Result<(NeReport, NeReport)> {
        let data = train_data.select_features(selected)?;
        let init = DifferentiablePredictor::new(
            self.arch(self.student_hidden.clone(), selected.len()),
            self.sub_seed("init:student", 0),
        )?;
        let student = train(&init, &data, &self.train_cfg("train:student"))?.model;
        let imp_x = eval.impression.features.select_cols(selected)?;
        let cons_x = eval.consideration.features.select_cols(selected)?;
        let imp_ne = normalized_entropy(
            &eval.impression.labels,
            &student.predict_batch(&imp_x)?,
            TargetKind::GroundTruth,
        )?;
        let cons_ne = normalized_entropy(
            eval_cons_targets,
            &student.predict_batch(&cons_x)?,
            TargetKind::TeacherPrediction,
        )?;
        Ok((imp_ne, cons_ne))
    }
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    Dataset::with_weights(
        a.features.vstack(&b.features)?,
        a.targets.iter().chain(&b.targets).copied().collect(),
        a.weights.iter().chain(&b.weights).copied().collect(),
    )
}

/// Convenience for tests and callers holding plain columns.
pub fn dataset_from_columns(columns: &[Vec<f64>], targets: Vec<f64>) -> Result<Dataset> {
    let n = targets.len();
    let d = columns.len();
    let mut m = Matrix::zeros(n, d);
    for (j, col) in columns.iter().enumerate() {
        if col.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: col.len(),
            });
        }
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    Dataset::new(m, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn report(means: &[f64]) -> FeatureImportanceReport {
        FeatureImportanceReport {
            regime: Regime::Impression,
            records: means
                .iter()
                .enumerate()
                .map(|(j, &m)| FeatureImportance {
                    feature_index: j,
                    mean_importance: m,
                    std_importance: 0.0,
                    batches: 1,
                })
                .collect(),
        }
    }

    /// Logistic data drawn from `w`, with true probabilities as targets.
    fn planted(w: &[f64], n: usize, seed: u64) -> (DifferentiablePredictor, Dataset) {
        let mut r = rng::stream(seed, "test", 0);
        let d = w.len();
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let mut p = w.to_vec();
        p.push(0.0);
        let m = DifferentiablePredictor::from_parameters(PredictorArch::linear(d), p).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let x: Vec<f64> = cols.iter().map(|c| c[i]).collect();
                f64::from(u8::from(r.random::<f64>() < m.predict(&x).unwrap()))
            })
            .collect();
        (m, dataset_from_columns(&cols, y).unwrap())
    }

    #[test]
    fn unused_feature_has_exactly_zero_importance() {
        let (m, data) = planted(&[1.5, 0.0], 2000, 1);
        let r = perturb_importance(&m, &data, 20, 64, 3, Regime::Impression).unwrap();
        assert_eq!(r.records[1].mean_importance, 0.0);
        assert_eq!(r.records[1].std_importance, 0.0);
    }

    #[test]
    fn single_informative_feature_is_clearly_important() {
        let (m, data) = planted(&[2.0], 20_000, 2);
        let r = perturb_importance(&m, &data, 50, 256, 4, Regime::Impression).unwrap();
        let f = r.records[0];
        assert_eq!(f.batches, 50);
        assert!(f.mean_importance > 5.0 * f.std_importance, "{f:?}");
    }

    #[test]
    fn larger_weight_ranks_higher() {
        let (m, data) = planted(&[1.2, 0.6], 20_000, 5);
        let r = perturb_importance(&m, &data, 100, 128, 6, Regime::Impression).unwrap();
        assert!(r.records[0].mean_importance > r.records[1].mean_importance);
        assert_eq!(r.ranking(), vec![0, 1]);
    }

    #[test]
    fn importance_is_deterministic_and_thread_independent() {
        let (m, data) = planted(&[1.0, -0.5, 0.2], 3000, 7);
        let a = perturb_importance(&m, &data, 10, 100, 8, Regime::Impression).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| perturb_importance(&m, &data, 10, 100, 8, Regime::Impression).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn row_order_within_batches_does_not_matter_in_distribution() {
        let (m, data) = planted(&[1.0, 0.5], 4000, 9);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(1, "reorder", 0));
        let shuffled = data.subset(&order);
        for seed in 0..3 {
            let a = perturb_importance(&m, &data, 60, 200, seed, Regime::Impression).unwrap();
            let b = perturb_importance(&m, &shuffled, 60, 200, seed + 100, Regime::Impression).unwrap();
            for j in 0..2 {
                let (x, y) = (a.records[j], b.records[j]);
                let se = (x.std_importance.powi(2) / 60.0 + y.std_importance.powi(2) / 60.0).sqrt();
                assert!(
                    (x.mean_importance - y.mean_importance).abs() < 3.0 * se.max(1e-12),
                    "{x:?} {y:?}"
                );
            }
        }
    }

    #[test]
    fn importance_errors() {
        let (m, data) = planted(&[1.0, 0.5], 100, 1);
        let empty = Dataset::new(Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(matches!(
            perturb_importance(&m, &empty, 1, 10, 0, Regime::Impression),
            Err(Error::EmptyDataset(_))
        ));
        let narrow = data.select_features(&[0]).unwrap();
        assert!(matches!(
            perturb_importance(&m, &narrow, 1, 10, 0, Regime::Impression),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(perturb_importance(&m, &data, 0, 10, 0, Regime::Impression).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = report(&[0.5, 0.25]);
        assert_eq!(
            r.to_csv(),
            "feature_index,mean_importance,std_importance,batches,regime\n0,0.5,0,1,impression\n1,0.25,0,1,impression\n"
        );
    }

    #[test]
    fn identical_reports_agree_across_strategies() {
        let r = report(&[0.3, 0.1, 0.5, 0.0, 0.2]);
        for s in CombinationStrategy::ALL {
            assert_eq!(combine_rankings(&r, &r, s, 3).unwrap(), vec![0, 2, 4], "{s}");
        }
    }

    #[test]
    fn set_arithmetic_example() {
        // A=0, B=1, C=2, D=3, E=4
        let imp = report(&[0.9, 0.8, 0.7, 0.1, 0.0]);
        let cd = report(&[0.0, 0.9, 0.1, 0.8, 0.7]);
        assert_eq!(
            combine_rankings(&imp, &cd, CombinationStrategy::UnionTop, 3).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(
            combine_rankings(&imp, &cd, CombinationStrategy::IntersectionTop, 3).unwrap(),
            vec![1]
        );
        assert_eq!(
            combine_rankings(&imp, &cd, CombinationStrategy::ImpOnly, 3).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(
            combine_rankings(&imp, &cd, CombinationStrategy::CdOnly, 3).unwrap(),
            vec![1, 3, 4]
        );
        // mean positions: A 2, B 0.5, C 2.5, D 2, E 3
        assert_eq!(
            combine_rankings(&imp, &cd, CombinationStrategy::AverageRank, 3).unwrap(),
            vec![0, 1, 3]
        );
        // normalized means: A .5, B .944, C .444, D .5, E .389
        assert_eq!(
            combine_rankings(&imp, &cd, CombinationStrategy::AverageImportance, 3).unwrap(),
            vec![0, 1, 3]
        );
    }

    #[test]
    fn ties_break_by_index() {
        let r = report(&[0.1, 0.1, 0.1, 0.1]);
        assert_eq!(
            combine_rankings(&r, &r, CombinationStrategy::ImpOnly, 2).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            combine_rankings(&r, &r, CombinationStrategy::AverageImportance, 2).unwrap(),
            vec![0, 1]
        );
    }

    #[test]
    fn combine_errors() {
        let a = report(&[0.1, 0.2]);
        let b = report(&[0.1, 0.2, 0.3]);
        assert!(matches!(
            combine_rankings(&a, &b, CombinationStrategy::UnionTop, 1),
            Err(Error::UniverseMismatch(2, 3))
        ));
        assert!(combine_rankings(&a, &a, CombinationStrategy::UnionTop, 0).is_err());
        assert!(combine_rankings(&a, &a, CombinationStrategy::UnionTop, 3).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in CombinationStrategy::ALL {
            assert_eq!(s.name().parse::<CombinationStrategy>().unwrap(), s);
        }
        assert_eq!(CombinationStrategy::UnionTop.title(), "Union of Top Features");
        assert!("best".parse::<CombinationStrategy>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn union_contains_intersection(a in proptest::collection::vec(0.0f64..1.0, 2..15),
                                       b in proptest::collection::vec(0.0f64..1.0, 15),
                                       n in 1usize..15) {
            let d = a.len();
            let top_n = 1 + n % d;
            let (ra, rb) = (report(&a), report(&b[..d]));
            let u = combine_rankings(&ra, &rb, CombinationStrategy::UnionTop, top_n).unwrap();
            let i = combine_rankings(&ra, &rb, CombinationStrategy::IntersectionTop, top_n).unwrap();
            proptest::prop_assert!(i.iter().all(|f| u.contains(f)));
            proptest::prop_assert!(u.len() >= top_n && top_n >= i.len());
        }
    }
}
