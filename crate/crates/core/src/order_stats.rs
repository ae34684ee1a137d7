//! Expected order statistics of Gaussian predictions.
//!
//! A candidate's true value is `N(mu, sigma^2)` and an unbiased predictor
//! adds independent `N(0, sigma_model^2)` noise, so predictions are
//! `N(mu, sigma^2 + sigma_model^2)`. The expected `i`-th largest prediction
//! among `n` is approximated with Blom's plotting positions:
//!
//! ```text
//! E[z_(i)] = mu + sqrt(sigma^2 + sigma_model^2) * Phi^-1((n - i - alpha + 1) / (n - 2 alpha + 1))
//! ```
//!
//! Rank 1 is the largest value. Only `alpha` in `[0, 1)` keeps the quantile
//! argument inside `(0, 1)` for every rank; larger constants are accepted and
//! rejected rank by rank with [`Error::Domain`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Blom's plotting-position constant.
pub const BLOM_ALPHA: f64 = 0.375;

/// The population and predictor-noise parameters of a single ranking stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianRankingSpec {
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
    pub sigma_model: f64,
}

impl GaussianRankingSpec {
    pub fn new(n: usize, mu: f64, sigma: f64, sigma_model: f64) -> Result<Self> {
        let spec = Self {
            n,
            mu,
            sigma,
            sigma_model,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be at least 1".into()));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidSpec(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.sigma_model >= 0.0 && self.sigma_model.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "sigma_model must be >= 0, got {}",
                self.sigma_model
            )));
        }
        Ok(())
    }

    /// Standard deviation of a prediction, `sqrt(sigma^2 + sigma_model^2)`.
    pub fn prediction_std(&self) -> f64 {
        self.sigma.hypot(self.sigma_model)
    }

    /// The same population scored by a perfect predictor.
    pub fn noiseless(&self) -> Self {
        Self {
            sigma_model: 0.0,
            ..*self
        }
    }
}

/// Expected predictions of the top `k` ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStatTable {
    pub spec: GaussianRankingSpec,
    pub k: usize,
    pub alpha: f64,
    /// Index 0 holds rank 1 (the maximum).
    pub expected_prediction: Vec<f64>,
}

impl OrderStatTable {
    pub fn new(spec: GaussianRankingSpec, k: usize, alpha: f64) -> Result<Self> {
        check_k(&spec, k)?;
        let expected_prediction = (1..=k)
            .map(|i| expected_order_stat_with_alpha(&spec, i, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            k,
            alpha,
            expected_prediction,
        })
    }

    pub fn total(&self) -> f64 {
        self.expected_prediction.iter().sum()
    }
}

fn check_k(spec: &GaussianRankingSpec, k: usize) -> Result<()> {
    spec.validate()?;
    if k == 0 || k > spec.n {
        return Err(Error::InvalidSpec(format!("k must be in 1..={}, got {k}", spec.n)));
    }
    Ok(())
}

// Wichura (1988), algorithm AS 241, PPND16. Coefficients as published.
#[allow(clippy::excessive_precision)]
const A: [f64; 8] = [
    3.387_132_872_796_366_608,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
#[allow(clippy::excessive_precision)]
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
#[allow(clippy::excessive_precision)]
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
#[allow(clippy::excessive_precision)]
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
#[allow(clippy::excessive_precision)]
const E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
#[allow(clippy::excessive_precision)]
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

#[inline]
fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Quantile of the lower half, `p` in `(0, 0.5]`.
fn lower_quantile(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = (-p.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    -z
}

/// Inverse of the standard normal CDF.
///
/// Upper-half arguments are reflected through `1 - p`, which is exact for
/// `p >= 0.5`; hence `inv_norm_cdf(1 - p) == -inv_norm_cdf(p)` bit for bit
/// whenever `1 - p` is representable.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile requires 0 < p < 1, got {p}")));
    }
    if p > 0.5 {
        Ok(-lower_quantile(1.0 - p))
    } else {
        Ok(lower_quantile(p))
    }
}

/// Standard normal quantile offset of rank `i` among `n`.
///
/// Computed from the smaller of the two tail masses so that ranks `i` and
/// `n + 1 - i` get exactly opposite offsets.
fn rank_quantile(n: usize, i: usize, alpha: f64) -> Result<f64> {
    let upper_tail = i as f64 - alpha;
    let lower_tail = (n + 1 - i) as f64 - alpha;
    let denom = (n + 1) as f64 - 2.0 * alpha;
    if !(upper_tail > 0.0 && lower_tail > 0.0 && denom > 0.0) {
        return Err(Error::Domain(format!(
            "plotting position ({lower_tail}) / ({denom}) for rank {i} of {n} lies outside (0, 1) with alpha = {alpha}"
        )));
    }
    if upper_tail <= lower_tail {
        Ok(-inv_norm_cdf(upper_tail / denom)?)
    } else {
        inv_norm_cdf(lower_tail / denom)
    }
}

/// Expected prediction at rank `i` (1 = largest), using [`BLOM_ALPHA`].
pub fn expected_order_stat(spec: &GaussianRankingSpec, i: usize) -> Result<f64> {
    expected_order_stat_with_alpha(spec, i, BLOM_ALPHA)
}

pub fn expected_order_stat_with_alpha(spec: &GaussianRankingSpec, i: usize, alpha: f64) -> Result<f64> {
    spec.validate()?;
    if i == 0 || i > spec.n {
        return Err(Error::InvalidSpec(format!("rank must be in 1..={}, got {i}", spec.n)));
    }
    Ok(spec.mu + spec.prediction_std() * rank_quantile(spec.n, i, alpha)?)
}

/// Expected sum of the top `k` predictions.
///
/// With `sigma_model = 0` this is the optimal return of selecting `k` of `n`
/// candidates; with noise it is the expected total predicted score of the
/// selected set, which exceeds the optimal return.
pub fn expected_topk_sum(spec: &GaussianRankingSpec, k: usize) -> Result<f64> {
    check_k(spec, k)?;
    let offsets = (1..=k)
        .map(|i| rank_quantile(spec.n, i, BLOM_ALPHA))
        .collect::<Result<Vec<_>>>()?;
    Ok(k as f64 * spec.mu + spec.prediction_std() * offsets.iter().sum::<f64>())
}
