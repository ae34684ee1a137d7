//! Monte Carlo simulation of one- and two-stage selection on Gaussian values.
//!
//! Each trial draws `n` true values, adds independent stage noise and keeps
//! the top candidates by predicted score. Trials are seeded independently
//! (truth, stage-1 noise and stage-2 noise each get their own substream) and
//! reduced in fixed chunks in trial order, so results are bit-identical for
//! any thread count and sweep points share common random numbers.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order_stats::GaussianRankingSpec;
use crate::report::fmt_sig;
use crate::rng;

const CHUNK: usize = 2048;
const BOOTSTRAP_RESAMPLES: usize = 200;
const DENOM_FLOOR: f64 = 1e-12;

/// Indices of the top `k` scores, best first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, u32)> = scores.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
    select_top(&mut order, k);
    order[..k].iter().map(|&(_, i)| i as usize).collect()
}

#[inline]
fn by_score_desc(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Partially sorts so `order[..k]` holds the top `k` entries in rank order.
fn select_top(order: &mut [(f64, u32)], k: usize) {
    if k < order.len() {
        order.select_nth_unstable_by(k, by_score_desc);
    }
    order[..k].sort_unstable_by(by_score_desc);
}

fn fill_normal(buf: &mut [f64], mut rng: rng::StreamRng, mean: f64, std: f64) {
    for v in buf.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = mean + std * z;
    }
}

// ---------------------------------------------------------------------------
// One stage
// ---------------------------------------------------------------------------

/// Rank-wise averages of a single selection stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStageReport {
    pub spec: GaussianRankingSpec,
    pub k: usize,
    pub trials: usize,
    /// Index 0 is rank 1.
    pub mean_pred: Vec<f64>,
    pub mean_true: Vec<f64>,
    pub stderr_pred: Vec<f64>,
    pub stderr_true: Vec<f64>,
    pub total_pred: f64,
    pub total_pred_stderr: f64,
    pub total_true: f64,
    pub total_true_stderr: f64,
}

#[derive(Clone)]
struct Moments {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sumsq: vec![0.0; len],
        }
    }

    #[inline]
    fn add(&mut self, idx: usize, x: f64) {
        self.sum[idx] += x;
        self.sumsq[idx] += x * x;
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
    }

    fn mean_and_stderr(&self, trials: usize) -> (Vec<f64>, Vec<f64>) {
        let t = trials as f64;
        self.sum
            .iter()
            .zip(&self.sumsq)
            .map(|(&s, &ss)| {
                let mean = s / t;
                let var = if trials > 1 {
                    ((ss - s * mean) / (t - 1.0)).max(0.0)
                } else {
                    0.0
                };
                (mean, (var / t).sqrt())
            })
            .unzip()
    }
}

/// Selects the top `k` of `n` noisy predictions per trial and averages each
/// rank's predicted score and true value across trials.
pub fn simulate_one_stage(spec: &GaussianRankingSpec, k: usize, trials: usize, seed: u64) -> Result<OneStageReport> {
    spec.validate()?;
    if k == 0 || k > spec.n {
        return Err(Error::InvalidSpec(format!("k must be in 1..={}, got {k}", spec.n)));
    }
    if trials == 0 {
        return Err(Error::InvalidSpec("trials must be at least 1".into()));
    }
    let n = spec.n;
    let chunks = trials.div_ceil(CHUNK);

    // pred ranks 0..k, true ranks k..2k, totals at 2k (pred) and 2k+1 (true)
    let partials: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Moments::new(2 * k + 2);
            let mut truth = vec![0.0; n];
            let mut noise = vec![0.0; n];
            let mut order: Vec<(f64, u32)> = Vec::with_capacity(n);
            for t in (c * CHUNK)..((c + 1) * CHUNK).min(trials) {
                let t = t as u64;
                fill_normal(&mut truth, rng::stream(seed, "trial:truth", t), spec.mu, spec.sigma);
                order.clear();
                if spec.sigma_model > 0.0 {
                    fill_normal(&mut noise, rng::stream(seed, "trial:stage1", t), 0.0, spec.sigma_model);
                    order.extend(
                        truth
                            .iter()
                            .zip(&noise)
                            .enumerate()
                            .map(|(i, (y, e))| (y + e, i as u32)),
                    );
                } else {
                    order.extend(truth.iter().enumerate().map(|(i, &y)| (y, i as u32)));
                }
                select_top(&mut order, k);
                let (mut tp, mut tt) = (0.0, 0.0);
                for (r, &(z, idx)) in order[..k].iter().enumerate() {
                    let y = truth[idx as usize];
                    acc.add(r, z);
                    acc.add(k + r, y);
                    tp += z;
                    tt += y;
                }
                acc.add(2 * k, tp);
                acc.add(2 * k + 1, tt);
            }
            acc
        })
        .collect();

    let mut total = Moments::new(2 * k + 2);
    for p in &partials {
        total.merge(p);
    }
    let (mut means, mut errs) = total.mean_and_stderr(trials);
    let total_true_stderr = errs.pop().unwrap();
    let total_pred_stderr = errs.pop().unwrap();
    let total_true = means.pop().unwrap();
    let total_pred = means.pop().unwrap();
    let mean_true = means.split_off(k);
    let stderr_true = errs.split_off(k);
    Ok(OneStageReport {
        spec: *spec,
        k,
        trials,
        mean_pred: means,
        mean_true,
        stderr_pred: errs,
        stderr_true,
        total_pred,
        total_pred_stderr,
        total_true,
        total_true_stderr,
    })
}

// ---------------------------------------------------------------------------
// Two stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageSpec {
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
    pub mu: f64,
    pub sigma: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub trials: usize,
    pub seed: u64,
}

impl TwoStageSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.k2 && self.k2 <= self.k1 && self.k1 <= self.n) {
            return Err(Error::InvalidSpec(format!(
                "need 1 <= k2 <= k1 <= n, got k2={} k1={} n={}",
                self.k2, self.k1, self.n
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidSpec("trials must be at least 1".into()));
        }
        for (name, v) in [("sigma", self.sigma), ("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidSpec(format!("mu must be finite, got {}", self.mu)));
        }
        Ok(())
    }

    /// The first stage viewed as a single Gaussian ranking problem.
    pub fn stage1(&self) -> GaussianRankingSpec {
        GaussianRankingSpec {
            n: self.n,
            mu: self.mu,
            sigma: self.sigma,
            sigma_model: self.sigma1,
        }
    }
}

/// One trial of the two-stage cascade with its selected sets.
#[derive(Debug, Clone)]
pub struct TwoStageTrial {
    pub truth: Vec<f64>,
    pub stage1_pred: Vec<f64>,
    pub stage2_pred: Vec<f64>,
    /// Top `k1` by stage-1 score, in rank order.
    pub stage1_set: Vec<usize>,
    /// Top `k2` of `stage1_set` by stage-2 score, in rank order.
    pub stage2_set: Vec<usize>,
}

struct TrialBuffers {
    truth: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    order: Vec<(f64, u32)>,
}

impl TrialBuffers {
    fn new(n: usize) -> Self {
        Self {
            truth: vec![0.0; n],
            e1: vec![0.0; n],
            e2: vec![0.0; n],
            order: Vec::with_capacity(n),
        }
    }

    /// Draws trial `t` and leaves the stage-1 selection in `order[..k1]`.
    fn draw(&mut self, spec: &TwoStageSpec, t: u64) {
        fill_normal(
            &mut self.truth,
            rng::stream(spec.seed, "trial:truth", t),
            spec.mu,
            spec.sigma,
        );
        fill_normal(
            &mut self.e1,
            rng::stream(spec.seed, "trial:stage1", t),
            0.0,
            spec.sigma1,
        );
        fill_normal(
            &mut self.e2,
            rng::stream(spec.seed, "trial:stage2", t),
            0.0,
            spec.sigma2,
        );
        self.order.clear();
        self.order.extend(
            self.truth
                .iter()
                .zip(&self.e1)
                .enumerate()
                .map(|(i, (y, e))| (y + e, i as u32)),
        );
        select_top(&mut self.order, spec.k1);
    }
}

/// Replays a single trial of `simulate_two_stage`, exposing both selected sets.
pub fn sample_two_stage_trial(spec: &TwoStageSpec, trial: u64) -> Result<TwoStageTrial> {
    spec.validate()?;
    let mut buf = TrialBuffers::new(spec.n);
    buf.draw(spec, trial);
    let stage1_pred: Vec<f64> = buf.truth.iter().zip(&buf.e1).map(|(y, e)| y + e).collect();
    let stage2_pred: Vec<f64> = buf.truth.iter().zip(&buf.e2).map(|(y, e)| y + e).collect();
    let stage1_set: Vec<usize> = buf.order[..spec.k1].iter().map(|&(_, i)| i as usize).collect();
    let s2_scores: Vec<f64> = stage1_set.iter().map(|&i| stage2_pred[i]).collect();
    // ties inside S1 fall back to candidate index, not position in S1
    let mut inner: Vec<(f64, u32)> = stage1_set
        .iter()
        .zip(&s2_scores)
        .map(|(&i, &s)| (s, i as u32))
        .collect();
    select_top(&mut inner, spec.k2);
    let stage2_set = inner[..spec.k2].iter().map(|&(_, i)| i as usize).collect();
    Ok(TwoStageTrial {
        truth: buf.truth,
        stage1_pred,
        stage2_pred,
        stage1_set,
        stage2_set,
    })
}

/// Calibration ratios on the stage-1 selected set; stage 0 is ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEstimate {
    pub cal_1_2: f64,
    pub cal_1_0: f64,
    pub cal_2_0: f64,
    pub stderr_1_2: f64,
    pub stderr_1_0: f64,
    pub stderr_2_0: f64,
    pub mean_true_topk: f64,
    pub mean_pred_stage1: f64,
    pub mean_pred_stage2: f64,
}

#[derive(Clone, Copy, Default)]
struct SelectedSums {
    truth: f64,
    pred1: f64,
    pred2: f64,
}

fn ratios(s: &SelectedSums) -> [f64; 3] {
    [s.pred1 / s.pred2, s.pred1 / s.truth, s.pred2 / s.truth]
}

/// Ratio-of-means calibration on `S1`, with bootstrap-over-trials errors.
pub fn simulate_two_stage(spec: &TwoStageSpec) -> Result<CalibrationEstimate> {
    spec.validate()?;
    let chunks = spec.trials.div_ceil(CHUNK);
    let per_trial: Vec<SelectedSums> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut buf = TrialBuffers::new(spec.n);
            ((c * CHUNK)..((c + 1) * CHUNK).min(spec.trials))
                .map(|t| {
                    buf.draw(spec, t as u64);
                    let mut s = SelectedSums::default();
                    for &(z1, idx) in &buf.order[..spec.k1] {
                        let i = idx as usize;
                        s.truth += buf.truth[i];
                        s.pred1 += z1;
                        s.pred2 += buf.truth[i] + buf.e2[i];
                    }
                    s
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut grand = SelectedSums::default();
    for s in &per_trial {
        grand.truth += s.truth;
        grand.pred1 += s.pred1;
        grand.pred2 += s.pred2;
    }
    let count = (spec.trials * spec.k1) as f64;
    let mean_true_topk = grand.truth / count;
    let mean_pred_stage1 = grand.pred1 / count;
    let mean_pred_stage2 = grand.pred2 / count;
    if mean_pred_stage2.abs() < DENOM_FLOOR || mean_true_topk.abs() < DENOM_FLOOR {
        return Err(Error::DegenerateDenominator(format!(
            "mean stage-2 prediction {mean_pred_stage2} or mean truth {mean_true_topk} on S1 is ~0"
        )));
    }
    let cal_1_2 = mean_pred_stage1 / mean_pred_stage2;
    let cal_1_0 = mean_pred_stage1 / mean_true_topk;
    let cal_2_0 = mean_pred_stage2 / mean_true_topk;
    let [stderr_1_2, stderr_1_0, stderr_2_0] = bootstrap_stderr(&per_trial, spec.seed);

    Ok(CalibrationEstimate {
        cal_1_2,
        cal_1_0,
        cal_2_0,
        stderr_1_2,
        stderr_1_0,
        stderr_2_0,
        mean_true_topk,
        mean_pred_stage1,
        mean_pred_stage2,
    })
}

fn bootstrap_stderr(per_trial: &[SelectedSums], seed: u64) -> [f64; 3] {
    let trials = per_trial.len();
    if trials < 2 {
        return [0.0; 3];
    }
    let mut rng = rng::stream(seed, "bootstrap", 0);
    let mut samples = [Vec::with_capacity(BOOTSTRAP_RESAMPLES), Vec::new(), Vec::new()];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut s = SelectedSums::default();
        for _ in 0..trials {
            let p = &per_trial[rng.random_range(0..trials)];
            s.truth += p.truth;
            s.pred1 += p.pred1;
            s.pred2 += p.pred2;
        }
        for (dst, r) in samples.iter_mut().zip(ratios(&s)) {
            dst.push(r);
        }
    }
    samples.map(|xs| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    K1,
    Sigma1,
    Sigma2,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::K1 => "k1",
            SweepParam::Sigma1 => "sigma1",
            SweepParam::Sigma2 => "sigma2",
        })
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k1" => Ok(SweepParam::K1),
            "sigma1" => Ok(SweepParam::Sigma1),
            "sigma2" => Ok(SweepParam::Sigma2),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (k1, sigma1, sigma2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub sweep_name: String,
    pub sweep_values: Vec<f64>,
    pub estimates: Vec<CalibrationEstimate>,
}

pub const CURVE_CSV_HEADER: &str = "sweep_value,cal_1_2,cal_1_0,cal_2_0,stderr_1_2,stderr_1_0,stderr_2_0";

impl CalibrationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CURVE_CSV_HEADER);
        out.push('\n');
        for (v, e) in self.sweep_values.iter().zip(&self.estimates) {
            let row = [
                *v,
                e.cal_1_2,
                e.cal_1_0,
                e.cal_2_0,
                e.stderr_1_2,
                e.stderr_1_0,
                e.stderr_2_0,
            ];
            out.push_str(&row.iter().map(|x| fmt_sig(*x, 6)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// Runs [`simulate_two_stage`] once per sweep value, reusing the base seed at
/// every point.
pub fn sweep_two_stage(base: &TwoStageSpec, param: SweepParam, values: &[f64]) -> Result<CalibrationCurve> {
    if values.is_empty() {
        return Err(Error::InvalidSpec("sweep needs at least one value".into()));
    }
    if values
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::InvalidSpec("sweep values must be strictly increasing".into()));
    }
    let estimates = values
        .iter()
        .map(|&v| {
            let mut spec = *base;
            let annotate = |e: Error| Error::SweepPoint {
                param: param.to_string(),
                value: v,
                source: Box::new(e),
            };
            match param {
                SweepParam::K1 => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(annotate(Error::InvalidSpec("k1 must be a positive integer".into())));
                    }
                    spec.k1 = v as usize;
                }
                SweepParam::Sigma1 => spec.sigma1 = v,
                SweepParam::Sigma2 => spec.sigma2 = v,
            }
            simulate_two_stage(&spec).map_err(annotate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationCurve {
        sweep_name: param.to_string(),
        sweep_values: values.to_vec(),
        estimates,
    })
}
