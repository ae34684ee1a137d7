//! Calibration ratio and normalized entropy.
//!
//! Normalized entropy (NE) divides the total cross-entropy of a predictor by
//! that of the constant predictor at the mean target, so 1.0 means "no better
//! than the base rate" and lower is better. Targets may be soft: on unlabeled
//! candidates a later stage's predictions serve as the label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::bce_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    GroundTruth,
    TeacherPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    GroundTruth,
    ReferenceModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeReport {
    pub ne: f64,
    /// Percent change against a named baseline; negative is better.
    pub ne_relative_change: Option<f64>,
    pub baseline: Option<String>,
    pub num_examples: usize,
    pub target_kind: TargetKind,
}

impl NeReport {
    /// Attaches the relative change against `baseline`.
    pub fn against(mut self, name: &str, baseline: &NeReport) -> Result<Self> {
        self.ne_relative_change = Some(relative_change(self.ne, baseline.ne)?);
        self.baseline = Some(name.to_string());
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ratio: f64,
    pub numerator_mean: f64,
    pub denominator_mean: f64,
    pub reference_kind: ReferenceKind,
}

/// Flat record with the field names used in JSON outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub ne: f64,
    pub ne_relative_change_pct: f64,
    pub calibration_ratio: f64,
    pub n: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn normalized_entropy(targets: &[f64], predictions: &[f64], target_kind: TargetKind) -> Result<NeReport> {
    if targets.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset(
            "normalized entropy needs at least one example".into(),
        ));
    }
    if let Some(p) = predictions.iter().chain(targets).find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let base_rate = mean(targets);
    if !(base_rate > 0.0 && base_rate < 1.0) {
        return Err(Error::DegenerateBaseRate(base_rate));
    }
    let model: f64 = targets.iter().zip(predictions).map(|(&y, &p)| bce_loss(y, p)).sum();
    let reference: f64 = targets.iter().map(|&y| bce_loss(y, base_rate)).sum();
    Ok(NeReport {
        ne: model / reference,
        ne_relative_change: None,
        baseline: None,
        num_examples: targets.len(),
        target_kind,
    })
}

/// Mean of `test` over mean of `reference`.
pub fn calibration_ratio(test: &[f64], reference: &[f64], reference_kind: ReferenceKind) -> Result<CalibrationReport> {
    if test.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: test.len(),
        });
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset("calibration needs at least one example".into()));
    }
    let numerator_mean = mean(test);
    let denominator_mean = mean(reference);
    if denominator_mean == 0.0 {
        return Err(Error::ZeroDenominator("reference mean is zero".into()));
    }
    Ok(CalibrationReport {
        ratio: numerator_mean / denominator_mean,
        numerator_mean,
        denominator_mean,
        reference_kind,
    })
}

/// `100 * (candidate - baseline) / baseline`.
pub fn relative_change(candidate: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::ZeroDenominator("baseline metric is zero".into()));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}
