//! Semi-supervised learning from a foundation model.
//!
//! A large non-serving teacher labels the unlabeled consideration set. The
//! student keeps its ordinary main head, trained on impressions only, and
//! gains up to two distillation heads that see only the teacher's labels:
//! an auxiliary head on the shared representation and a dependent head on
//! the main head's output. Their gradients reach the main model through the
//! shared trunk.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::distill::ConsiderationSchedule;
use crate::error::{Error, Result};
use crate::metrics::{normalized_entropy, NeReport, TargetKind};
use crate::predictor::{
    backward, bce_with_logit, fit, forward, logistic, supervised_grad_slice, supervised_loss_slice, train, Activation,
    DifferentiablePredictor, LrSchedule, PredictorArch, Scratch, TrainConfig, Trainable,
};
use crate::report::{fmt_pct, render_table};
use crate::rng;
use crate::synthgen::{generate_pool, make_splits, run_cascade, ImpressionSet, NoisyOracle, PoolConfig, StageScorer};

/// Hidden units of the dependent head.
pub const DEPENDENT_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    DependentOnly,
    AuxiliaryOnly,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::DependentOnly,
        Variant::AuxiliaryOnly,
        Variant::Both,
    ];

    pub fn has_dependent(self) -> bool {
        matches!(self, Variant::DependentOnly | Variant::Both)
    }

    pub fn has_auxiliary(self) -> bool {
        matches!(self, Variant::AuxiliaryOnly | Variant::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DependentOnly => "dependent_only",
            Variant::AuxiliaryOnly => "auxiliary_only",
            Variant::Both => "both",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::DependentOnly => "Dependent task",
            Variant::AuxiliaryOnly => "Auxiliary task",
            Variant::Both => "Dependent + auxiliary task",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Parameters are laid out as `[main | auxiliary | dependent]`, with absent
/// heads taking no space. The main block is exactly a
/// [`DifferentiablePredictor`] over the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskStudent {
    pub arch: PredictorArch,
    pub variant: Variant,
    params: Vec<f64>,
}

/// Parameter count of an auxiliary head on `arch`'s representation.
pub fn auxiliary_parameter_count(arch: &PredictorArch) -> usize {
    arch.representation_dim() + 1
}

/// Parameter count of the dependent head.
pub const DEPENDENT_PARAMETERS: usize = 3 * DEPENDENT_WIDTH + 1;

/// Student with main parameters initialized as `DifferentiablePredictor::new(arch, seed)`,
/// a zero auxiliary head and an identity-like dependent head: unit `j`
/// computes `tanh(4 z - 2 + (j - 1.5) / 2)` of the main probability `z` and
/// the output logit is their plain sum.
pub fn build_multitask_student(arch: &PredictorArch, variant: Variant, seed: u64) -> Result<MultiTaskStudent> {
    let main = DifferentiablePredictor::new(arch.clone(), seed)?;
    let mut params = main.parameters().to_vec();
    if variant.has_auxiliary() {
        params.extend(std::iter::repeat_n(0.0, auxiliary_parameter_count(arch)));
    }
    if variant.has_dependent() {
        params.extend(std::iter::repeat_n(4.0, DEPENDENT_WIDTH));
        params.extend((0..DEPENDENT_WIDTH).map(|j| -2.0 + (j as f64 - 1.5) * 0.5));
        params.extend(std::iter::repeat_n(1.0, DEPENDENT_WIDTH));
        params.push(0.0);
    }
    Ok(MultiTaskStudent {
        arch: arch.clone(),
        variant,
        params,
    })
}

impl MultiTaskStudent {
    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn main_len(&self) -> usize {
        self.arch.num_parameters()
    }

    fn aux_range(&self) -> Option<std::ops::Range<usize>> {
        let start = self.main_len();
        self.variant
            .has_auxiliary()
            .then(|| start..start + auxiliary_parameter_count(&self.arch))
    }

    fn dep_range(&self) -> Option<std::ops::Range<usize>> {
        let start = self.aux_range().map_or(self.main_len(), |r| r.end);
        self.variant
            .has_dependent()
            .then(|| start..start + DEPENDENT_PARAMETERS)
    }

    /// The serving model: the main head alone.
    pub fn main(&self) -> DifferentiablePredictor {
        DifferentiablePredictor::from_parameters(self.arch.clone(), self.params[..self.main_len()].to_vec())
            .expect("main block matches its architecture")
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let mut s = Scratch::new(&self.arch);
        Ok(logistic(forward(
            &self.arch,
            &self.params[..self.main_len()],
            x,
            &mut s,
        )))
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.main().predict_batch(x)
    }

    /// Auxiliary head probability, if the variant has one.
    pub fn auxiliary(&self, x: &[f64]) -> Result<Option<f64>> {
        self.check_dim(x.len())?;
        let Some(r) = self.aux_range() else {
            return Ok(None);
        };
        let mut s = Scratch::new(&self.arch);
        forward(&self.arch, &self.params[..self.main_len()], x, &mut s);
        Ok(Some(logistic(aux_logit(&self.params[r], s.representation()))))
    }

    /// Dependent head probability, if the variant has one.
    pub fn dependent(&self, x: &[f64]) -> Result<Option<f64>> {
        let z = self.predict(x)?;
        Ok(self.dependent_from_main(z))
    }

    /// The dependent head applied to a given main-head probability.
    pub fn dependent_from_main(&self, z: f64) -> Option<f64> {
        let r = self.dep_range()?;
        let mut h = [0.0; DEPENDENT_WIDTH];
        Some(logistic(dep_logit(&self.params[r], z, &mut h)))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d == self.arch.input_dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: d,
            })
        }
    }
}

fn aux_logit(p: &[f64], repr: &[f64]) -> f64 {
    let (w, b) = p.split_at(repr.len());
    w.iter().zip(repr).map(|(a, r)| a * r).sum::<f64>() + b[0]
}

fn dep_logit(p: &[f64], z: f64, h: &mut [f64; DEPENDENT_WIDTH]) -> f64 {
    let (a, rest) = p.split_at(DEPENDENT_WIDTH);
    let (c, rest) = rest.split_at(DEPENDENT_WIDTH);
    let (v, b) = rest.split_at(DEPENDENT_WIDTH);
    let mut u = b[0];
    for j in 0..DEPENDENT_WIDTH {
        h[j] = (a[j] * z + c[j]).tanh();
        u += v[j] * h[j];
    }
    u
}

impl Trainable for MultiTaskStudent {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn l2_mask(&self) -> Vec<bool> {
        let mut mask = self.arch.weight_mask();
        mask.resize(self.params.len(), false);
        mask
    }

    fn supervised_grad(&self, data: &Dataset, rows: &[usize], grad: &mut [f64]) -> f64 {
        let n = self.main_len();
        supervised_grad_slice(&self.arch, &self.params[..n], data, rows, &mut grad[..n])
    }

    fn supervised_loss(&self, data: &Dataset) -> f64 {
        supervised_loss_slice(&self.arch, &self.params[..self.main_len()], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslfmConfig {
    pub dependent_weight: f64,
    pub auxiliary_weight: f64,
    /// Unlabeled rows per optimizer step.
    pub unlabeled_batch_size: usize,
    /// Let the dependent head's gradient reach the main output.
    #[serde(default = "yes")]
    pub dependent_gradient: bool,
    pub train: TrainConfig,
}

fn yes() -> bool {
    true
}

impl SslfmConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            dependent_weight: 0.5,
            auxiliary_weight: 0.5,
            unlabeled_batch_size: train.batch_size,
            dependent_gradient: true,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for (name, v) in [
            ("dependent_weight", self.dependent_weight),
            ("auxiliary_weight", self.auxiliary_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.unlabeled_batch_size == 0 {
            return Err(Error::Config("unlabeled_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Labeled,
    Unlabeled,
}

/// One batch consumed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAudit {
    pub step: usize,
    pub kind: BatchKind,
    pub rows: usize,
    pub head_losses: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslfmTrained {
    pub model: MultiTaskStudent,
    pub loss_history: Vec<f64>,
    pub audit: Vec<BatchAudit>,
}

/// Trains the main head on `impression` (student columns) and the active
/// heads on the teacher's predictions for `consideration` (teacher
/// columns), the student reading `student_columns` of the latter.
pub fn sslfm_train(
    student: &MultiTaskStudent,
    teacher: &DifferentiablePredictor,
    impression: &Dataset,
    consideration: &Matrix,
    student_columns: &[usize],
    cfg: &SslfmConfig,
) -> Result<SslfmTrained> {
    cfg.validate()?;
    let d = student.arch.input_dim;
    if impression.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: impression.dim(),
        });
    }
    if student_columns.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: student_columns.len(),
        });
    }
    if consideration.cols() != teacher.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: teacher.input_dim(),
            got: consideration.cols(),
        });
    }
    let lambda_dep = if student.variant.has_dependent() {
        cfg.dependent_weight
    } else {
        0.0
    };
    let lambda_aux = if student.variant.has_auxiliary() {
        cfg.auxiliary_weight
    } else {
        0.0
    };
    let active = lambda_dep > 0.0 || lambda_aux > 0.0;
    let mut model = student.clone();
    let mut audit = Vec::new();
    if !active {
        let loss_history = fit(&mut model, impression, &cfg.train, |_, info, _| {
            audit.push(BatchAudit {
                step: info.step,
                kind: BatchKind::Labeled,
                rows: 0,
                head_losses: false,
            });
            Ok(0.0)
        })?;
        fill_labeled_rows(&mut audit, impression.len(), cfg.train.batch_size);
        return Ok(SslfmTrained {
            model,
            loss_history,
            audit,
        });
    }
    if consideration.rows() == 0 {
        return Err(Error::EmptyDataset(
            "consideration set is empty but a head loss is active".into(),
        ));
    }
    let unlabeled = UnlabeledBatches {
        features: consideration.select_cols(student_columns)?,
        teacher: teacher.predict_batch(consideration)?,
    };
    let heads = HeadWeights {
        dependent: lambda_dep,
        auxiliary: lambda_aux,
        dependent_gradient: cfg.dependent_gradient,
    };
    let mut schedule = ConsiderationSchedule::new(unlabeled.teacher.len(), cfg.train.seed);
    let loss_history = fit(&mut model, impression, &cfg.train, |m, info, grad| {
        audit.push(BatchAudit {
            step: info.step,
            kind: BatchKind::Labeled,
            rows: 0,
            head_losses: false,
        });
        let rows = schedule.next_batch(cfg.unlabeled_batch_size);
        audit.push(BatchAudit {
            step: info.step,
            kind: BatchKind::Unlabeled,
            rows: rows.len(),
            head_losses: true,
        });
        Ok(head_grad(m, &unlabeled, &rows, heads, Some(grad)))
    })?;
    fill_labeled_rows(&mut audit, impression.len(), cfg.train.batch_size);
    Ok(SslfmTrained {
        model,
        loss_history,
        audit,
    })
}

fn fill_labeled_rows(audit: &mut [BatchAudit], n: usize, batch: usize) {
    let per_epoch = n.div_ceil(batch);
    for (i, a) in audit.iter_mut().filter(|a| a.kind == BatchKind::Labeled).enumerate() {
        let pos = i % per_epoch;
        a.rows = if pos + 1 == per_epoch { n - pos * batch } else { batch };
    }
}

struct UnlabeledBatches {
    features: Matrix,
    teacher: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct HeadWeights {
    dependent: f64,
    auxiliary: f64,
    dependent_gradient: bool,
}

/// Weighted mean head losses on `rows`, adding their gradient when given.
fn head_grad(
    m: &MultiTaskStudent,
    data: &UnlabeledBatches,
    rows: &[usize],
    w: HeadWeights,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let n_main = m.main_len();
    let main = &m.params[..n_main];
    let aux = m.aux_range().map(|r| &m.params[r]);
    let dep = m.dep_range().map(|r| &m.params[r]);
    let aux_off = m.aux_range().map(|r| r.start - n_main);
    let dep_off = m.dep_range().map(|r| r.start - n_main);
    let rdim = m.arch.representation_dim();
    let scale = 1.0 / rows.len() as f64;
    let mut s = Scratch::new(&m.arch);
    let mut d_repr = vec![0.0; rdim];
    let mut h = [0.0; DEPENDENT_WIDTH];
    let mut loss = 0.0;
    for &i in rows {
        let target = data.teacher[i];
        let logit = forward(&m.arch, main, data.features.row(i), &mut s);
        let z = logistic(logit);
        let mut dlogit = 0.0;
        d_repr.iter_mut().for_each(|v| *v = 0.0);
        if let (Some(p), true) = (aux, w.auxiliary > 0.0) {
            let repr = s.representation();
            let u = aux_logit(p, repr);
            loss += w.auxiliary * bce_with_logit(target, u);
            if let Some(g) = grad.as_deref_mut() {
                let delta = w.auxiliary * scale * (logistic(u) - target);
                let off = n_main + aux_off.expect("aux present");
                for (k, r) in repr.iter().enumerate() {
                    g[off + k] += delta * r;
                    d_repr[k] += delta * p[k];
                }
                g[off + rdim] += delta;
            }
        }
        if let (Some(p), true) = (dep, w.dependent > 0.0) {
            let u = dep_logit(p, z, &mut h);
            loss += w.dependent * bce_with_logit(target, u);
            if let Some(g) = grad.as_deref_mut() {
                let delta = w.dependent * scale * (logistic(u) - target);
                let off = n_main + dep_off.expect("dep present");
                let (a, v) = (&p[..DEPENDENT_WIDTH], &p[2 * DEPENDENT_WIDTH..3 * DEPENDENT_WIDTH]);
                let mut dz = 0.0;
                for j in 0..DEPENDENT_WIDTH {
                    let dh = delta * v[j] * (1.0 - h[j] * h[j]);
                    g[off + j] += dh * z;
                    g[off + DEPENDENT_WIDTH + j] += dh;
                    g[off + 2 * DEPENDENT_WIDTH + j] += delta * h[j];
                    dz += dh * a[j];
                }
                g[off + 3 * DEPENDENT_WIDTH] += delta;
                if w.dependent_gradient {
                    dlogit += dz * z * (1.0 - z);
                }
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            if dlogit != 0.0 || d_repr.iter().any(|&v| v != 0.0) {
                backward(&m.arch, main, &mut s, dlogit, Some(&d_repr), &mut g[..n_main]);
            }
        }
    }
    loss * scale
}

/// Largest relative discrepancy between the analytic and central-difference
/// gradients of the weighted head losses against `teacher` on `features`.
pub fn head_grad_check(
    student: &MultiTaskStudent,
    features: &Matrix,
    teacher: &[f64],
    cfg: &SslfmConfig,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    if features.cols() != student.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: student.arch.input_dim,
            got: features.cols(),
        });
    }
    if features.rows() != teacher.len() || teacher.is_empty() {
        return Err(Error::Config(
            "need one teacher prediction per row, at least one row".into(),
        ));
    }
    let w = HeadWeights {
        dependent: if student.variant.has_dependent() {
            cfg.dependent_weight
        } else {
            0.0
        },
        auxiliary: if student.variant.has_auxiliary() {
            cfg.auxiliary_weight
        } else {
            0.0
        },
        dependent_gradient: cfg.dependent_gradient,
    };
    let data = UnlabeledBatches {
        features: features.clone(),
        teacher: teacher.to_vec(),
    };
    let rows: Vec<usize> = (0..teacher.len()).collect();
    let mut analytic = vec![0.0; student.num_parameters()];
    head_grad(student, &data, &rows, w, Some(&mut analytic));
    let mut probe = student.clone();
    let mut worst: f64 = 0.0;
    for (i, &ga) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + epsilon;
        let up = head_grad(&probe, &data, &rows, w, None);
        probe.params[i] = orig - epsilon;
        let down = head_grad(&probe, &data, &rows, w, None);
        probe.params[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        worst = worst.max((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// A foundation teacher that reads every pool column, a student that reads
/// `student_features`, and impressions from a two-stage cascade of noisy
/// oracles. The default pool adds ten informative columns that only the
/// teacher sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslfmExperiment {
    pub seed: u64,
    pub pool: PoolConfig,
    pub student_features: Vec<usize>,
    pub stage_sizes: Vec<usize>,
    /// Logit noise of the stage-1 and stage-2 oracles.
    pub stage_noise: Vec<f64>,
    pub train_requests: usize,
    pub teacher_requests: usize,
    pub eval_requests: usize,
    pub student_hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
    pub teacher_train: TrainConfig,
    pub sslfm: SslfmConfig,
    pub variants: Vec<Variant>,
}

impl Default for SslfmExperiment {
    fn default() -> Self {
        let mut w = PoolConfig::default().informative_weights;
        w.extend([0.5, -0.5, 0.4, -0.4, 0.4, 0.3, -0.3, 0.3, 0.3, -0.3]);
        let pool = PoolConfig {
            num_features: w.len(),
            informative_weights: w,
            bias: -7.0,
            ..PoolConfig::default()
        };
        let student_train = TrainConfig {
            learning_rate: 1e-2,
            epochs: 20,
            batch_size: 128,
            schedule: LrSchedule::LinearDecay,
            ..TrainConfig::adam(0)
        };
        Self {
            seed: 0,
            pool,
            student_features: (0..20).collect(),
            stage_sizes: vec![5000, 500],
            stage_noise: vec![1.5, 1.5],
            train_requests: 6,
            teacher_requests: 30,
            eval_requests: 10,
            student_hidden: vec![16],
            teacher_hidden: vec![64, 32],
            teacher_train: TrainConfig {
                learning_rate: 1e-3,
                ..student_train.clone()
            },
            sslfm: SslfmConfig {
                unlabeled_batch_size: 512,
                ..SslfmConfig::new(student_train)
            },
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Held-out impression NE of the main head, relative to baseline.
    pub impression_ne: NeReport,
}

impl VariantResult {
    pub fn ne_change(&self) -> f64 {
        self.impression_ne.ne_relative_change.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslfmOutcome {
    pub teacher_ne: f64,
    pub baseline_ne: f64,
    /// Baseline first.
    pub results: Vec<VariantResult>,
}

impl SslfmOutcome {
    /// The teacher beats the baseline student on held-out impressions.
    pub fn teacher_dominates(&self) -> bool {
        self.teacher_ne < self.baseline_ne
    }

    pub fn result(&self, variant: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == variant)
    }

    pub fn render_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .results
            .iter()
            .map(|r| vec![r.variant.title().to_string(), fmt_pct(r.ne_change(), 3)])
            .collect();
        render_table(&["Method", "NE relative change"], &rows)
    }
}

impl SslfmExperiment {
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        self.sslfm.validate()?;
        self.teacher_train.validate()?;
        if self.stage_sizes.len() != 2 || self.stage_noise.len() != 2 {
            return Err(Error::Config("the experiment uses a two-stage cascade".into()));
        }
        crate::synthgen::validate_stage_sizes(&self.stage_sizes, self.pool.num_candidates)?;
        if self.student_features.is_empty() || self.student_features.iter().any(|&c| c >= self.pool.num_features) {
            return Err(Error::Config(
                "student_features must be nonempty valid column indices".into(),
            ));
        }
        if self.student_hidden.is_empty() || self.teacher_hidden.is_empty() {
            return Err(Error::Config(
                "student and teacher need at least one hidden layer".into(),
            ));
        }
        let (s, t) = (self.student_arch(), self.teacher_arch());
        s.validate()?;
        t.validate()?;
        if t.num_parameters() <= s.num_parameters() || t.hidden_sizes[0] <= s.hidden_sizes[0] {
            return Err(Error::Config(
                "the foundation teacher must be strictly larger than the student".into(),
            ));
        }
        if self.train_requests == 0 || self.teacher_requests == 0 || self.eval_requests == 0 {
            return Err(Error::Config("request counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn student_arch(&self) -> PredictorArch {
        PredictorArch::feedforward(
            self.student_features.len(),
            self.student_hidden.clone(),
            Activation::Relu,
        )
    }

    pub fn teacher_arch(&self) -> PredictorArch {
        PredictorArch::feedforward(self.pool.num_features, self.teacher_hidden.clone(), Activation::Relu)
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

    fn logs(&self, label: &str, requests: usize) -> Result<(ImpressionSet, Matrix)> {
        let stages: Vec<NoisyOracle> = self
            .stage_noise
            .iter()
            .enumerate()
            .map(|(k, &noise)| NoisyOracle {
                noise,
                seed: self.sub_seed("scorer", k as u64),
            })
            .collect();
        let refs: Vec<&dyn StageScorer> = stages.iter().map(|s| s as &dyn StageScorer).collect();
        let mut imps = Vec::with_capacity(requests);
        let mut cons = Vec::with_capacity(requests);
        for r in 0..requests {
            let pool = generate_pool(&PoolConfig {
                seed: self.sub_seed(label, r as u64),
                ..self.pool.clone()
            })?;
            let trace = run_cascade(&pool, &refs, &self.stage_sizes)?;
            let (i, c) = make_splits(&trace, &pool);
            imps.push(i);
            cons.push(c.features);
        }
        let mut cons_all = cons
            .first()
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(0, self.pool.num_features));
        for c in &cons[1..] {
            cons_all = cons_all.vstack(c)?;
        }
        Ok((ImpressionSet::concat(&imps)?, cons_all))
    }

    /// Foundation teacher trained on its own labeled logs with every column.
    pub fn train_teacher(&self) -> Result<DifferentiablePredictor> {
        let (imp, _) = self.logs("pool:teacher", self.teacher_requests)?;
        let init = DifferentiablePredictor::new(self.teacher_arch(), self.sub_seed("init:teacher", 0))?;
        Ok(train(
            &init,
            &imp.to_dataset()?,
            &self.train_cfg(&self.teacher_train, "train:teacher"),
        )?
        .model)
    }

    pub fn run(&self) -> Result<SslfmOutcome> {
        self.validate()?;
        let teacher = self.train_teacher().map_err(Error::at_stage("foundation teacher"))?;
        let (imp, cons) = self
            .logs("pool:train", self.train_requests)
            .map_err(Error::at_stage("training logs"))?;
        let (eval, _) = self
            .logs("pool:eval", self.eval_requests)
            .map_err(Error::at_stage("evaluation logs"))?;
        let imp_data = imp.to_dataset()?.select_features(&self.student_features)?;
        let eval_x = eval.features.select_cols(&self.student_features)?;
        let teacher_ne = normalized_entropy(
            &eval.labels,
            &teacher.predict_batch(&eval.features)?,
            TargetKind::GroundTruth,
        )?
        .ne;
        let cfg = SslfmConfig {
            train: self.train_cfg(&self.sslfm.train, "train:student"),
            ..self.sslfm.clone()
        };
        let mut variants = vec![Variant::Baseline];
        variants.extend(self.variants.iter().copied().filter(|&v| v != Variant::Baseline));
        let mut results: Vec<VariantResult> = Vec::with_capacity(variants.len());
        for variant in variants {
            let student = build_multitask_student(&self.student_arch(), variant, self.sub_seed("init:student", 0))?;
            let trained = sslfm_train(&student, &teacher, &imp_data, &cons, &self.student_features, &cfg)
                .map_err(Error::at_stage("student training"))?;
            let ne = normalized_entropy(
                &eval.labels,
                &trained.model.predict_batch(&eval_x)?,
                TargetKind::GroundTruth,
            )?;
            let ne = match results.first() {
                Some(base) => ne.against("baseline", &base.impression_ne)?,
                None => NeReport {
                    ne_relative_change: Some(0.0),
                    baseline: Some("baseline".into()),
                    ..ne
                },
            };
            results.push(VariantResult {
                variant,
                impression_ne: ne,
            });
        }
        Ok(SslfmOutcome {
            teacher_ne,
            baseline_ne: results[0].impression_ne.ne,
            results,
        })
    }
}
