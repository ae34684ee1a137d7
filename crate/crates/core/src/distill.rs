//! Cross-stage distillation: a later stage's logged predictions serve as soft
//! labels for an earlier stage, on the shown (labeled) candidates and on the
//! far larger set it scored but never showed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::metrics::{calibration_ratio, normalized_entropy, CalibrationReport, NeReport, ReferenceKind, TargetKind};
use crate::predictor::{
    fit, train, Activation, DifferentiablePredictor, LrSchedule, PredictorArch, TrainConfig, Trainable, Trained,
};
use crate::report::{fmt_pct, render_table};
use crate::rng;
use crate::synthgen::{
    expose_all, generate_pool, make_splits, run_cascade, ColumnScorer, ConsiderationSet, ImpressionSet, PoolConfig,
    StageScorer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the pseudo-label loss relative to the supervised loss.
    pub distill_weight: f64,
    /// Fraction of each batch drawn from the consideration set.
    pub unlabeled_batch_mix: f64,
    pub student_stage: usize,
    pub teacher_stage: usize,
    pub train: TrainConfig,
}

impl DistillConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            distill_weight: 1.0,
            unlabeled_batch_mix: 0.5,
            student_stage: 1,
            teacher_stage: 2,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(Error::Config(format!(
                "distill_weight must be >= 0, got {}",
                self.distill_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_batch_mix) {
            return Err(Error::Config(format!(
                "unlabeled_batch_mix must lie in [0, 1], got {}",
                self.unlabeled_batch_mix
            )));
        }
        if self.teacher_stage != self.student_stage + 1 {
            return Err(Error::Config(format!(
                "teacher stage {} must be the stage right after student stage {}",
                self.teacher_stage, self.student_stage
            )));
        }
        self.train.validate()
    }

    /// Consideration rows per step that make them `mix` of the whole batch.
    fn consideration_batch(&self) -> usize {
        let b = self.train.batch_size as f64;
        let mix = self.unlabeled_batch_mix;
        ((b * mix / (1.0 - mix)).round() as usize).max(1)
    }
}

/// The teacher's predictions as soft targets.
pub fn make_pseudo_labels(teacher: &DifferentiablePredictor, consideration: &Matrix) -> Result<Dataset> {
    let targets = teacher.predict_batch(consideration)?;
    Dataset::new(consideration.clone(), targets)
}

/// Trains `student` on `mean BCE(impression) + distill_weight * mean
/// BCE(consideration pseudo-labels)` per step.
///
/// Impression batches follow the same schedule as plain training, and
/// consideration batches come from their own substream, so a zero weight
/// reproduces [`train`] exactly.
pub fn distill_train(
    student: &DifferentiablePredictor,
    impression: &Dataset,
    consideration: &Dataset,
    cfg: &DistillConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let lambda = cfg.distill_weight;
    let mix = cfg.unlabeled_batch_mix;
    if lambda == 0.0 || mix == 0.0 {
        return train(student, impression, &cfg.train);
    }
    if consideration.is_empty() {
        return Err(Error::EmptyDataset(
            "consideration set is empty but the distillation term is active".into(),
        ));
    }
    if consideration.dim() != student.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: student.input_dim(),
            got: consideration.dim(),
        });
    }
    if mix == 1.0 {
        // no supervised portion: the pseudo-labels are the whole objective
        let weighted = Dataset::with_weights(
            consideration.features.clone(),
            consideration.targets.clone(),
            vec![lambda; consideration.len()],
        )?;
        return train(student, &weighted, &cfg.train);
    }
    if impression.dim() != student.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: student.input_dim(),
            got: impression.dim(),
        });
    }
    let per_step = cfg.consideration_batch();
    let mut schedule = ConsiderationSchedule::new(consideration.len(), cfg.train.seed);
    let mut scratch = vec![0.0; student.parameters().len()];
    let mut model = student.clone();
    let loss_history = fit(&mut model, impression, &cfg.train, |m, _, grad| {
        let rows = schedule.next_batch(per_step);
        scratch.iter_mut().for_each(|g| *g = 0.0);
        let loss = m.supervised_grad(consideration, &rows, &mut scratch);
        for (g, s) in grad.iter_mut().zip(&scratch) {
            *g += lambda * s;
        }
        Ok(lambda * loss)
    })?;
    Ok(Trained { model, loss_history })
}

/// Endless passes over the consideration rows, each in a fresh order.
pub(crate) struct ConsiderationSchedule {
    order: Vec<usize>,
    cursor: usize,
    pass: u64,
    seed: u64,
}

impl ConsiderationSchedule {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: 0,
            pass: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order
            .shuffle(&mut rng::stream(self.seed, "shuffle:consideration", self.pass));
        self.cursor = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.cursor == self.order.len() {
                self.pass += 1;
                self.reshuffle();
            }
            let take = (size - rows.len()).min(self.order.len() - self.cursor);
            rows.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        rows
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Baseline and distilled student on one data regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeEvaluation {
    /// Student mean over teacher mean.
    pub baseline_calibration: CalibrationReport,
    pub distilled_calibration: CalibrationReport,
    pub baseline_ne: NeReport,
    /// Carries the relative change against the baseline.
    pub distilled_ne: NeReport,
}

impl RegimeEvaluation {
    pub fn ne_change(&self) -> f64 {
        self.distilled_ne
            .ne_relative_change
            .expect("set by evaluate_cross_stage")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossStageEvaluation {
    pub baseline_id: String,
    pub candidate_id: String,
    /// NE against observed labels.
    pub impression: RegimeEvaluation,
    /// NE against the teacher's predictions.
    pub consideration: RegimeEvaluation,
    /// Student mean over label mean on impressions, baseline then distilled.
    pub impression_truth_calibration: [CalibrationReport; 2],
}

impl CrossStageEvaluation {
    pub fn impression_calibration(&self) -> [f64; 2] {
        [
            self.impression.baseline_calibration.ratio,
            self.impression.distilled_calibration.ratio,
        ]
    }

    pub fn consideration_calibration(&self) -> [f64; 2] {
        [
            self.consideration.baseline_calibration.ratio,
            self.consideration.distilled_calibration.ratio,
        ]
    }

    pub fn impression_ne_change(&self) -> f64 {
        self.impression.ne_change()
    }

    pub fn consideration_ne_change(&self) -> f64 {
        self.consideration.ne_change()
    }

    /// Relative shrinkage of `|consideration calibration - 1|`.
    pub fn consideration_gap_reduction(&self) -> f64 {
        let [b, d] = self.consideration_calibration();
        1.0 - (d - 1.0).abs() / (b - 1.0).abs()
    }

    pub fn render_table(&self) -> String {
        render_calibration_table(
            self.impression_calibration(),
            self.consideration_calibration(),
            [0.0, self.impression_ne_change()],
            [0.0, self.consideration_ne_change()],
        )
    }
}

/// Two regimes by two metrics, baseline and distilled columns.
pub fn render_calibration_table(
    impression_cal: [f64; 2],
    consideration_cal: [f64; 2],
    impression_ne: [f64; 2],
    consideration_ne: [f64; 2],
) -> String {
    let cal = |label: &str, v: [f64; 2]| vec![label.to_string(), format!("{:.2}", v[0]), format!("{:.2}", v[1])];
    let ne = |label: &str, v: [f64; 2]| vec![label.to_string(), fmt_pct(v[0], 2), fmt_pct(v[1], 2)];
    let section = |title: &str| vec![title.to_string(), String::new(), String::new()];
    render_table(
        &["Data", "Baseline", "w/ Distillation"],
        &[
            section("Model calibration"),
            cal("  Impression data", impression_cal),
            cal("  Consideration data", consideration_cal),
            section("NE relative change"),
            ne("  Impression data", impression_ne),
            ne("  Consideration data", consideration_ne),
        ],
    )
}

fn regime(
    baseline: &[f64],
    distilled: &[f64],
    teacher: &[f64],
    targets: &[f64],
    kind: TargetKind,
    baseline_id: &str,
) -> Result<RegimeEvaluation> {
    let baseline_ne = normalized_entropy(targets, baseline, kind)?;
    let distilled_ne = normalized_entropy(targets, distilled, kind)?.against(baseline_id, &baseline_ne)?;
    Ok(RegimeEvaluation {
        baseline_calibration: calibration_ratio(baseline, teacher, ReferenceKind::ReferenceModel)?,
        distilled_calibration: calibration_ratio(distilled, teacher, ReferenceKind::ReferenceModel)?,
        baseline_ne,
        distilled_ne,
    })
}

/// Compares two students against the teacher's logged predictions. Students
/// see the feature columns in `student_columns`.
pub fn evaluate_cross_stage(
    student_baseline: &DifferentiablePredictor,
    student_distilled: &DifferentiablePredictor,
    impression: &ImpressionSet,
    consideration: &ConsiderationSet,
    student_columns: &[usize],
) -> Result<CrossStageEvaluation> {
    let imp_x = impression.features.select_cols(student_columns)?;
    let cons_x = consideration.features.select_cols(student_columns)?;
    let imp_b = student_baseline.predict_batch(&imp_x)?;
    let imp_d = student_distilled.predict_batch(&imp_x)?;
    let cons_b = student_baseline.predict_batch(&cons_x)?;
    let cons_d = student_distilled.predict_batch(&cons_x)?;
    let baseline_id = "baseline".to_string();
    Ok(CrossStageEvaluation {
        impression: regime(
            &imp_b,
            &imp_d,
            &impression.teacher_pred,
            &impression.labels,
            TargetKind::GroundTruth,
            &baseline_id,
        )?,
        consideration: regime(
            &cons_b,
            &cons_d,
            &consideration.teacher_pred,
            &consideration.teacher_pred,
            TargetKind::TeacherPrediction,
            &baseline_id,
        )?,
        impression_truth_calibration: [
            calibration_ratio(&imp_b, &impression.labels, ReferenceKind::GroundTruth)?,
            calibration_ratio(&imp_d, &impression.labels, ReferenceKind::GroundTruth)?,
        ],
        baseline_id,
        candidate_id: "distilled".to_string(),
    })
}

// ---------------------------------------------------------------------------
// End-to-end experiment
// ---------------------------------------------------------------------------

/// A two-stage cascade whose stage 2 is a network over all features and
/// whose stage 1 is a smaller model over a subset of them. Both production
/// models are trained on randomized exploration traffic; training logs then
/// accumulate over independent requests, each a fresh pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillExperiment {
    pub seed: u64,
    pub pool: PoolConfig,
    pub stage_sizes: Vec<usize>,
    /// Feature columns available to stage 1.
    pub student_features: Vec<usize>,
    /// Empty for a linear stage 1.
    pub student_hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
    pub exploration_candidates: usize,
    pub train_requests: usize,
    pub eval_requests: usize,
    pub teacher_train: TrainConfig,
    pub distill: DistillConfig,
}

impl Default for DistillExperiment {
    fn default() -> Self {
        let pool = PoolConfig::default();
        let student_features = (0..pool.num_features).filter(|&j| j != 7).collect();
        Self {
            seed: 0,
            pool,
            stage_sizes: vec![5000, 500],
            student_features,
            student_hidden: Vec::new(),
            teacher_hidden: vec![16],
            exploration_candidates: 100_000,
            train_requests: 20,
            eval_requests: 40,
            teacher_train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 20,
                batch_size: 128,
                schedule: LrSchedule::LinearDecay,
                ..TrainConfig::adam(0)
            },
            distill: DistillConfig::new(TrainConfig {
                learning_rate: 0.1,
                epochs: 60,
                schedule: LrSchedule::LinearDecay,
                ..TrainConfig::sgd(0)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub impression_count: usize,
    pub consideration_count: usize,
    pub impression_hash: String,
    pub consideration_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub evaluation: CrossStageEvaluation,
    pub train_data: DatasetSummary,
    pub eval_data: DatasetSummary,
    pub baseline: DifferentiablePredictor,
    pub distilled: DifferentiablePredictor,
}

/// Exploration-trained production models for a two-stage cascade.
pub(crate) struct ProductionCascade {
    pub stage1: ColumnScorer,
    pub stage2: DifferentiablePredictor,
}

impl DistillExperiment {
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        self.distill.validate()?;
        self.teacher_train.validate()?;
        if self.stage_sizes.len() != 2 {
            return Err(Error::Config(
                "the distillation experiment uses a two-stage cascade".into(),
            ));
        }
        crate::synthgen::validate_stage_sizes(&self.stage_sizes, self.pool.num_candidates)?;
        if self.student_features.is_empty() || self.student_features.iter().any(|&c| c >= self.pool.num_features) {
            return Err(Error::Config(
                "student_features must be nonempty valid column indices".into(),
            ));
        }
        if self.train_requests == 0 || self.eval_requests == 0 || self.exploration_candidates == 0 {
            return Err(Error::Config(
                "request and exploration counts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn student_arch(&self) -> PredictorArch {
        let d = self.student_features.len();
        if self.student_hidden.is_empty() {
            PredictorArch::linear(d)
        } else {
            PredictorArch::feedforward(d, self.student_hidden.clone(), Activation::Relu)
        }
    }

    fn sub_seed(&self, label: &str, index: u64) -> u64 {
        rng::derive_seed(self.seed, label, index)
    }

    fn train_cfg(&self, base: &TrainConfig, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.sub_seed(label, base.seed),
            ..base.clone()
        }
    }

    pub(crate) fn production_models(&self) -> Result<ProductionCascade> {
        let explore_cfg = PoolConfig {
            num_candidates: self.exploration_candidates,
            seed: self.sub_seed("pool:exploration", 0),
            ..self.pool.clone()
        };
        let pool = generate_pool(&explore_cfg)?;
        let trace = expose_all(&pool)?;
        let (shown, _) = make_splits(&trace, &pool);
        let data = shown.to_dataset()?;
        let d = self.pool.num_features;
        let teacher_arch = PredictorArch::feedforward(d, self.teacher_hidden.clone(), Activation::Relu);
        let teacher = DifferentiablePredictor::new(teacher_arch, self.sub_seed("init:stage2", 0))?;
        let stage2 = train(&teacher, &data, &self.train_cfg(&self.teacher_train, "train:stage2"))?.model;
        let student_data = data.select_features(&self.student_features)?;
        let student = DifferentiablePredictor::new(self.student_arch(), self.sub_seed("init:stage1", 0))?;
        let stage1 = train(
            &student,
            &student_data,
            &self.train_cfg(&self.distill.train, "train:stage1"),
        )?
        .model;
        Ok(ProductionCascade {
            stage1: ColumnScorer {
                model: stage1,
                columns: self.student_features.clone(),
            },
            stage2,
        })
    }

    /// Logs of `requests` independent cascades under `label`.
    pub(crate) fn collect_logs(
        &self,
        prod: &ProductionCascade,
        label: &str,
        requests: usize,
    ) -> Result<(ImpressionSet, ConsiderationSet)> {
        let mut imps = Vec::with_capacity(requests);
        let mut cons = Vec::with_capacity(requests);
        for r in 0..requests {
            let cfg = PoolConfig {
                seed: self.sub_seed(label, r as u64),
                ..self.pool.clone()
            };
            let pool = generate_pool(&cfg)?;
            let stages: [&dyn StageScorer; 2] = [&prod.stage1, &prod.stage2];
            let trace = run_cascade(&pool, &stages, &self.stage_sizes)?;
            let (i, c) = make_splits(&trace, &pool);
            imps.push(i);
            cons.push(c);
        }
        Ok((ImpressionSet::concat(&imps)?, ConsiderationSet::concat(&cons)?))
    }

    pub fn run(&self) -> Result<DistillOutcome> {
        self.validate()?;
        let prod = self.production_models().map_err(Error::at_stage("production models"))?;
        let (imp, cons) = self
            .collect_logs(&prod, "pool:train", self.train_requests)
            .map_err(Error::at_stage("training logs"))?;
        let (eval_imp, eval_cons) = self
            .collect_logs(&prod, "pool:eval", self.eval_requests)
            .map_err(Error::at_stage("evaluation logs"))?;
        let imp_data = imp.to_dataset()?.select_features(&self.student_features)?;
        let cons_data = cons.to_dataset()?.select_features(&self.student_features)?;
        let student = DifferentiablePredictor::new(self.student_arch(), self.sub_seed("init:student", 0))?;
        let cfg = DistillConfig {
            train: self.train_cfg(&self.distill.train, "train:student"),
            ..self.distill.clone()
        };
        let baseline = distill_train(
            &student,
            &imp_data,
            &cons_data,
            &DistillConfig {
                distill_weight: 0.0,
                ..cfg.clone()
            },
        )
        .map_err(Error::at_stage("baseline training"))?
        .model;
        let distilled = distill_train(&student, &imp_data, &cons_data, &cfg)
            .map_err(Error::at_stage("distillation"))?
            .model;
        let evaluation = evaluate_cross_stage(&baseline, &distilled, &eval_imp, &eval_cons, &self.student_features)
            .map_err(Error::at_stage("evaluation"))?;
        let summary = |i: &ImpressionSet, c: &ConsiderationSet| DatasetSummary {
            impression_count: i.len(),
            consideration_count: c.len(),
            impression_hash: i.content_hash(),
            consideration_hash: c.content_hash(),
        };
        Ok(DistillOutcome {
            evaluation,
            train_data: summary(&imp, &cons),
            eval_data: summary(&eval_imp, &eval_cons),
            baseline,
            distilled,
        })
    }
}
