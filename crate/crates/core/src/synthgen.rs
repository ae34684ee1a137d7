//! Synthetic candidate pools with known ground truth, and the labeled /
//! unlabeled split a ranking cascade produces over them.
//!
//! A pool is drawn once, labels included, but labels stay private to the
//! pool. They leave it only through [`CascadeTrace::impression_labels`], for
//! candidates that survive every stage, so a consideration record has no way
//! to carry one.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{content_hash, Dataset, Matrix};
use crate::error::{Error, Result};
use crate::predictor::{clip_prob, logistic, DifferentiablePredictor};
use crate::rng;

/// Coefficient of the optional `x0 * x1` interaction in the true logit.
pub const INTERACTION_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub num_candidates: usize,
    pub num_features: usize,
    /// True logit weights; zeros mark nuisance features.
    pub informative_weights: Vec<f64>,
    pub bias: f64,
    pub feature_correlation: f64,
    #[serde(default)]
    pub nonlinearity: bool,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        let mut w = vec![0.0; 20];
        w[..8].copy_from_slice(&[0.9, -0.8, 0.7, 0.6, -0.5, 0.5, 0.4, 0.3]);
        Self {
            num_candidates: 100_000,
            num_features: 20,
            informative_weights: w,
            bias: -5.0,
            feature_correlation: 0.2,
            nonlinearity: false,
            seed: 0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 {
            return Err(Error::Config("num_features must be at least 1".into()));
        }
        if self.num_candidates == 0 {
            return Err(Error::Config("num_candidates must be at least 1".into()));
        }
        if self.informative_weights.len() != self.num_features {
            return Err(Error::Config(format!(
                "informative_weights has {} entries for {} features",
                self.informative_weights.len(),
                self.num_features
            )));
        }
        if self.informative_weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(Error::Config("weights and bias must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.feature_correlation) {
            return Err(Error::Config(format!(
                "feature_correlation must lie in [0, 1), got {}",
                self.feature_correlation
            )));
        }
        if self.nonlinearity && self.num_features < 2 {
            return Err(Error::Config("the interaction term needs at least 2 features".into()));
        }
        Ok(())
    }

    /// Indices of features with nonzero weight.
    pub fn informative_features(&self) -> Vec<usize> {
        (0..self.num_features)
            .filter(|&j| self.informative_weights[j] != 0.0)
            .collect()
    }

    /// Ground-truth logit of one feature vector.
    pub fn true_logit(&self, x: &[f64]) -> f64 {
        let mut s = self.bias + self.informative_weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        if self.nonlinearity {
            s += INTERACTION_WEIGHT * x[0] * x[1];
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    features: Matrix,
    true_prob: Vec<f64>,
    labels: Vec<u8>,
    candidate_id: Vec<u64>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.true_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_prob.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn true_prob(&self) -> &[f64] {
        &self.true_prob
    }

    pub fn candidate_ids(&self) -> &[u64] {
        &self.candidate_id
    }

    pub fn mean_true_prob(&self) -> f64 {
        self.true_prob.iter().sum::<f64>() / self.len() as f64
    }
}

/// Draws a pool; candidate `i` uses its own substream, so the result does not
/// depend on how generation is split across threads.
pub fn generate_pool(config: &PoolConfig) -> Result<CandidatePool> {
    config.validate()?;
    let (n, d) = (config.num_candidates, config.num_features);
    let shared = config.feature_correlation.sqrt();
    let own = (1.0 - config.feature_correlation).sqrt();
    let rows: Vec<(Vec<f64>, f64, u8)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(config.seed, "pool", i as u64);
            let g: f64 = StandardNormal.sample(&mut r);
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    shared * g + own * e
                })
                .collect();
            let p = clip_prob(logistic(config.true_logit(&x)));
            let y = u8::from(r.random::<f64>() < p);
            (x, p, y)
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut true_prob = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (x, p, y) in rows {
        data.extend_from_slice(&x);
        true_prob.push(p);
        labels.push(y);
    }
    Ok(CandidatePool {
        features: Matrix::new(n, d, data)?,
        true_prob,
        labels,
        candidate_id: (0..n as u64).collect(),
    })
}

// ---------------------------------------------------------------------------
// Stage scorers
// ---------------------------------------------------------------------------

/// A stage model: maps candidates to predicted probabilities.
pub trait StageScorer: Sync {
    fn score(&self, pool: &CandidatePool, idx: &[usize]) -> Result<Vec<f64>>;
}

impl StageScorer for DifferentiablePredictor {
    fn score(&self, pool: &CandidatePool, idx: &[usize]) -> Result<Vec<f64>> {
        if self.input_dim() != pool.num_features() {
            return Err(Error::DimensionMismatch {
                expected: pool.num_features(),
                got: self.input_dim(),
            });
        }
        idx.par_iter().map(|&i| self.predict(pool.features.row(i))).collect()
    }
}

/// A predictor that sees only some of the pool's feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScorer {
    pub model: DifferentiablePredictor,
    pub columns: Vec<usize>,
}

impl StageScorer for ColumnScorer {
    fn score(&self, pool: &CandidatePool, idx: &[usize]) -> Result<Vec<f64>> {
        if self.model.input_dim() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                got: self.model.input_dim(),
            });
        }
        if let Some(&c) = self.columns.iter().find(|&&c| c >= pool.num_features()) {
            return Err(Error::DimensionMismatch {
                expected: pool.num_features(),
                got: c + 1,
            });
        }
        idx.par_iter()
            .map(|&i| {
                let row = pool.features.row(i);
                let x: Vec<f64> = self.columns.iter().map(|&c| row[c]).collect();
                self.model.predict(&x)
            })
            .collect()
    }
}

/// The true probability with Gaussian noise of sd `noise` on the logit;
/// zero noise gives the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyOracle {
    pub noise: f64,
    pub seed: u64,
}

impl NoisyOracle {
    pub fn exact() -> Self {
        Self { noise: 0.0, seed: 0 }
    }
}

impl StageScorer for NoisyOracle {
    fn score(&self, pool: &CandidatePool, idx: &[usize]) -> Result<Vec<f64>> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("oracle noise must be >= 0, got {}", self.noise)));
        }
        Ok(idx
            .par_iter()
            .map(|&i| {
                let p = pool.true_prob[i];
                if self.noise == 0.0 {
                    return p;
                }
                let mut r = rng::stream(self.seed, "scorer", pool.candidate_id[i]);
                let z: f64 = StandardNormal.sample(&mut r);
                let logit = (p / (1.0 - p)).ln();
                clip_prob(logistic(logit + self.noise * z))
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Cascade
// ---------------------------------------------------------------------------

/// What a cascade logged. `stage_sets[0]` is the whole pool; `stage_sets[j]`
/// lists the survivors of stage `j` in its rank order, and
/// `stage_predictions[j - 1]` holds stage `j`'s scores aligned with
/// `stage_sets[j - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeTrace {
    pub stage_sets: Vec<Vec<usize>>,
    pub stage_predictions: Vec<Vec<f64>>,
    impression_labels: Vec<u8>,
}

impl CascadeTrace {
    pub fn num_stages(&self) -> usize {
        self.stage_predictions.len()
    }

    /// The final set `S_N`, the only candidates with observed feedback.
    pub fn impressions(&self) -> &[usize] {
        self.stage_sets.last().expect("S_0 always present")
    }

    /// Labels aligned with [`Self::impressions`].
    pub fn impression_labels(&self) -> &[u8] {
        &self.impression_labels
    }

    /// Stage `stage`'s logged prediction for candidate `idx`, if it scored it.
    pub fn prediction(&self, stage: usize, idx: usize) -> Option<f64> {
        let input = self.stage_sets.get(stage.checked_sub(1)?)?;
        let pos = input.iter().position(|&i| i == idx)?;
        Some(self.stage_predictions[stage - 1][pos])
    }

    fn prediction_lookup(&self, stage: usize, pool_len: usize) -> Vec<f64> {
        let mut out = vec![f64::NAN; pool_len];
        for (&i, &p) in self.stage_sets[stage - 1]
            .iter()
            .zip(&self.stage_predictions[stage - 1])
        {
            out[i] = p;
        }
        out
    }
}

pub fn validate_stage_sizes(stage_sizes: &[usize], pool_len: usize) -> Result<()> {
    if stage_sizes.is_empty() {
        return Err(Error::StageSizes("at least one stage is required".into()));
    }
    if stage_sizes[0] > pool_len {
        return Err(Error::StageSizes(format!(
            "first stage keeps {} of a {}-candidate pool",
            stage_sizes[0], pool_len
        )));
    }
    if stage_sizes.contains(&0) {
        return Err(Error::StageSizes("every stage must keep at least one candidate".into()));
    }
    if stage_sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::StageSizes(format!("{stage_sizes:?}")));
    }
    Ok(())
}

/// Each stage scores its input set and keeps its top `k`, ties going to the
/// lower candidate id.
pub fn run_cascade(pool: &CandidatePool, stages: &[&dyn StageScorer], stage_sizes: &[usize]) -> Result<CascadeTrace> {
    validate_stage_sizes(stage_sizes, pool.len())?;
    if stages.len() != stage_sizes.len() {
        return Err(Error::StageSizes(format!(
            "{} scorers for {} stage sizes",
            stages.len(),
            stage_sizes.len()
        )));
    }
    let mut stage_sets = vec![(0..pool.len()).collect::<Vec<_>>()];
    let mut stage_predictions = Vec::with_capacity(stages.len());
    for (scorer, &k) in stages.iter().zip(stage_sizes) {
        let input = stage_sets.last().expect("nonempty");
        let scores = scorer.score(pool, input)?;
        if scores.len() != input.len() {
            return Err(Error::DimensionMismatch {
                expected: input.len(),
                got: scores.len(),
            });
        }
        let mut order: Vec<usize> = (0..input.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .total_cmp(&scores[a])
                .then(pool.candidate_id[input[a]].cmp(&pool.candidate_id[input[b]]))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        let kept = order.iter().map(|&o| input[o]).collect();
        stage_predictions.push(scores);
        stage_sets.push(kept);
    }
    let impression_labels = stage_sets
        .last()
        .expect("nonempty")
        .iter()
        .map(|&i| pool.labels[i])
        .collect();
    Ok(CascadeTrace {
        stage_sets,
        stage_predictions,
        impression_labels,
    })
}

/// Shows every candidate: a single stage that keeps the whole pool, as for
/// randomized exploration traffic.
pub fn expose_all(pool: &CandidatePool) -> Result<CascadeTrace> {
    run_cascade(pool, &[&NoisyOracle::exact()], &[pool.len()])
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Shown candidates with their observed labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionSet {
    pub ids: Vec<u64>,
    pub features: Matrix,
    pub labels: Vec<f64>,
    /// Logged prediction of the teacher stage.
    pub teacher_pred: Vec<f64>,
}

/// Candidates scored but never shown. There is deliberately no label field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsiderationSet {
    pub ids: Vec<u64>,
    pub features: Matrix,
    pub teacher_pred: Vec<f64>,
}

impl ImpressionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.features.clone(), self.labels.clone())
    }

    pub fn content_hash(&self) -> String {
        let ids: Vec<f64> = self.ids.iter().map(|&i| i as f64).collect();
        content_hash([
            &ids[..],
            self.features.as_slice(),
            &self.labels[..],
            &self.teacher_pred[..],
        ])
    }

    /// Concatenates sets logged by independent cascades.
    pub fn concat(parts: &[ImpressionSet]) -> Result<Self> {
        let mut out = Self {
            ids: Vec::new(),
            features: Matrix::zeros(0, parts.first().map_or(0, |p| p.features.cols())),
            labels: Vec::new(),
            teacher_pred: Vec::new(),
        };
        for p in parts {
            out.ids.extend_from_slice(&p.ids);
            out.features = out.features.vstack(&p.features)?;
            out.labels.extend_from_slice(&p.labels);
            out.teacher_pred.extend_from_slice(&p.teacher_pred);
        }
        Ok(out)
    }
}

impl ConsiderationSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Logged teacher predictions as soft targets.
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.features.clone(), self.teacher_pred.clone())
    }

    pub fn content_hash(&self) -> String {
        let ids: Vec<f64> = self.ids.iter().map(|&i| i as f64).collect();
        content_hash([&ids[..], self.features.as_slice(), &self.teacher_pred[..]])
    }

    pub fn concat(parts: &[ConsiderationSet]) -> Result<Self> {
        let mut out = Self {
            ids: Vec::new(),
            features: Matrix::zeros(0, parts.first().map_or(0, |p| p.features.cols())),
            teacher_pred: Vec::new(),
        };
        for p in parts {
            out.ids.extend_from_slice(&p.ids);
            out.features = out.features.vstack(&p.features)?;
            out.teacher_pred.extend_from_slice(&p.teacher_pred);
        }
        Ok(out)
    }
}

/// Impression set `S_N` and consideration set `S_1 \ S_N`, with stage 2 as
/// the teacher (stage 1 for a single-stage cascade).
pub fn make_splits(trace: &CascadeTrace, pool: &CandidatePool) -> (ImpressionSet, ConsiderationSet) {
    make_splits_for_stage(trace, pool, 1).expect("stage 1 always exists")
}

/// Splits for training the model of `student_stage`: consideration is
/// `S_student \ S_N`, labelled by the logged predictions of the next stage.
pub fn make_splits_for_stage(
    trace: &CascadeTrace,
    pool: &CandidatePool,
    student_stage: usize,
) -> Result<(ImpressionSet, ConsiderationSet)> {
    let n = trace.num_stages();
    if student_stage == 0 || student_stage > n {
        return Err(Error::Config(format!("student stage {student_stage} outside 1..={n}")));
    }
    let teacher_stage = (student_stage + 1).min(n);
    let teacher = trace.prediction_lookup(teacher_stage, pool.len());
    let final_set = trace.impressions();
    let mut shown = vec![false; pool.len()];
    for &i in final_set {
        shown[i] = true;
    }
    let impression = ImpressionSet {
        ids: final_set.iter().map(|&i| pool.candidate_id[i]).collect(),
        features: pool.features.select_rows(final_set),
        labels: trace.impression_labels().iter().map(|&y| f64::from(y)).collect(),
        teacher_pred: final_set.iter().map(|&i| teacher[i]).collect(),
    };
    let unshown: Vec<usize> = if student_stage == n {
        Vec::new()
    } else {
        trace.stage_sets[student_stage]
            .iter()
            .copied()
            .filter(|&i| !shown[i])
            .collect()
    };
    let consideration = ConsiderationSet {
        ids: unshown.iter().map(|&i| pool.candidate_id[i]).collect(),
        features: pool.features.select_rows(&unshown),
        teacher_pred: unshown.iter().map(|&i| teacher[i]).collect(),
    };
    Ok((impression, consideration))
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub id: u64,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_pred: Option<f64>,
}

fn write_records(mut out: impl Write, records: impl Iterator<Item = CandidateRecord>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn io_err(e: std::io::Error) -> Error {
    Error::InvalidSpec(format!("i/o: {e}"))
}

pub fn write_impressions_jsonl(set: &ImpressionSet, out: impl Write) -> Result<()> {
    write_records(
        out,
        (0..set.len()).map(|i| CandidateRecord {
            id: set.ids[i],
            features: set.features.row(i).to_vec(),
            label: Some(set.labels[i] as u8),
            teacher_pred: Some(set.teacher_pred[i]),
        }),
    )
}

pub fn write_consideration_jsonl(set: &ConsiderationSet, out: impl Write) -> Result<()> {
    write_records(
        out,
        (0..set.len()).map(|i| CandidateRecord {
            id: set.ids[i],
            features: set.features.row(i).to_vec(),
            label: None,
            teacher_pred: Some(set.teacher_pred[i]),
        }),
    )
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<CandidateRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InvalidSpec(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Sidecar describing how a pair of JSONL files was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pool: PoolConfig,
    pub stage_sizes: Vec<usize>,
    pub impression_count: usize,
    pub consideration_count: usize,
    pub impression_hash: String,
    pub consideration_hash: String,
}
