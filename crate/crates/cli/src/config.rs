//! Experiment configuration: one TOML file, one section per command.
//!
//! Each section starts from its defaults and the file overrides individual
//! keys, tables merging recursively and arrays replacing wholesale. Keys the
//! section does not know are errors.

use anyhow::{bail, Context, Result};
use cascade_lab::cascade_sim::TwoStageSpec;
use cascade_lab::distill::DistillExperiment;
use cascade_lab::predictor::{Activation, PredictorArch, TrainConfig};
use cascade_lab::ssfs::SsfsConfig;
use cascade_lab::sslfm::SslfmExperiment;
use cascade_lab::synthgen::{validate_stage_sizes, PoolConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub sigma1: f64,
    pub sigma2: f64,
}

/// Two-stage Gaussian cascade swept over `k1`, once per noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub k2: usize,
    pub mu: f64,
    pub sigma: f64,
    pub trials: usize,
    pub k1_values: Vec<usize>,
    pub noise: Vec<NoiseLevel>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n: 1000,
            k2: 10,
            mu: 5.0,
            sigma: 1.0,
            trials: 10_000,
            k1_values: vec![20, 50, 100, 200, 300, 500, 700, 1000],
            noise: vec![
                NoiseLevel {
                    sigma1: 0.8,
                    sigma2: 0.3,
                },
                NoiseLevel {
                    sigma1: 1.0,
                    sigma2: 0.3,
                },
                NoiseLevel {
                    sigma1: 0.8,
                    sigma2: 0.5,
                },
            ],
        }
    }
}

impl SimulateSection {
    pub fn spec(&self, k1: usize, noise: NoiseLevel, seed: u64) -> TwoStageSpec {
        TwoStageSpec {
            n: self.n,
            k1,
            k2: self.k2,
            mu: self.mu,
            sigma: self.sigma,
            sigma1: noise.sigma1,
            sigma2: noise.sigma2,
            trials: self.trials,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1_values.is_empty() || self.noise.is_empty() {
            bail!("simulate needs at least one k1 value and one noise level");
        }
        if self.k1_values.windows(2).any(|w| w[0] >= w[1]) {
            bail!("k1_values must be strictly increasing");
        }
        for &k1 in &self.k1_values {
            for &noise in &self.noise {
                self.spec(k1, noise, 0).validate()?;
            }
        }
        Ok(())
    }
}

/// A synthetic pool run through a cascade of noisy oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSection {
    pub pool: PoolConfig,
    pub stage_sizes: Vec<usize>,
    /// Logit noise of each stage's oracle scorer.
    pub stage_noise: Vec<f64>,
}

impl Default for GenDataSection {
    fn default() -> Self {
        Self {
            pool: PoolConfig::default(),
            stage_sizes: vec![5000, 500],
            stage_noise: vec![1.0, 0.3],
        }
    }
}

impl GenDataSection {
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        validate_stage_sizes(&self.stage_sizes, self.pool.num_candidates)?;
        if self.stage_noise.len() != self.stage_sizes.len() {
            bail!(
                "stage_noise has {} entries for {} stages",
                self.stage_noise.len(),
                self.stage_sizes.len()
            );
        }
        if self.stage_noise.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            bail!("stage_noise entries must be >= 0");
        }
        Ok(())
    }
}

/// Trains one predictor on impressions, from a JSONL file or freshly
/// generated, and scores it on a held-out share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Impression JSONL from `gen-data`; relative paths resolve against the
    /// config file. Without it the `gen_data` section produces the data.
    pub data: Option<String>,
    /// Columns the model reads; empty means all.
    pub features: Vec<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub holdout_fraction: f64,
    pub train: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: None,
            features: Vec::new(),
            hidden: vec![16],
            activation: Activation::Relu,
            holdout_fraction: 0.2,
            train: TrainConfig::adam(0),
        }
    }
}

impl TrainSection {
    pub fn arch(&self, input_dim: usize) -> PredictorArch {
        if self.hidden.is_empty() {
            PredictorArch::linear(input_dim)
        } else {
            PredictorArch::feedforward(input_dim, self.hidden.clone(), self.activation)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            bail!("holdout_fraction must lie in (0, 1)");
        }
        self.arch(1).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub simulate: SimulateSection,
    pub gen_data: GenDataSection,
    pub train: TrainSection,
    pub distill: DistillExperiment,
    pub ssfs: SsfsConfig,
    pub sslfm: SslfmExperiment,
}

const SECTIONS: [&str; 6] = ["simulate", "gen_data", "train", "distill", "ssfs", "sslfm"];

/// Tables carrying their own seed; unless set explicitly it follows the root.
const SEEDED: [&[&str]; 4] = [&["gen_data", "pool"], &["distill"], &["ssfs"], &["sslfm"]];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Table = text.parse().context("config is not valid TOML")?;
        for key in table.keys() {
            if key != "seed" && !SECTIONS.contains(&key.as_str()) {
                bail!("unknown top-level key `{key}`");
            }
        }
        let seed = match table.remove("seed") {
            None => 0,
            Some(Value::Integer(s)) if s >= 0 => s as u64,
            Some(other) => bail!("seed must be a non-negative integer, got {other}"),
        };
        for path in SEEDED {
            inherit_seed(&mut table, path, seed);
        }
        Ok(Self {
            seed,
            simulate: section(&mut table, "simulate")?,
            gen_data: section(&mut table, "gen_data")?,
            train: section(&mut table, "train")?,
            distill: section(&mut table, "distill")?,
            ssfs: section(&mut table, "ssfs")?,
            sslfm: section(&mut table, "sslfm")?,
        })
    }

    /// Forces every section onto the root seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gen_data.pool.seed = seed;
        self.distill.seed = seed;
        self.ssfs.seed = seed;
        self.sslfm.seed = seed;
        self
    }

    /// TOML for the named section's effective settings.
    pub fn section_toml(&self, name: &str) -> Result<String> {
        let value = match name {
            "simulate" => Value::try_from(&self.simulate)?,
            "gen_data" => Value::try_from(&self.gen_data)?,
            "train" => Value::try_from(&self.train)?,
            "distill" => Value::try_from(&self.distill)?,
            "ssfs" => Value::try_from(&self.ssfs)?,
            "sslfm" => Value::try_from(&self.sslfm)?,
            other => bail!("no section `{other}`"),
        };
        let mut root = Table::new();
        root.insert("seed".into(), Value::Integer(self.seed as i64));
        root.insert(name.into(), value);
        Ok(toml::to_string(&root)?)
    }
}

fn section<T: Default + Serialize + DeserializeOwned>(table: &mut Table, name: &str) -> Result<T> {
    let Some(overrides) = table.remove(name) else {
        return Ok(T::default());
    };
    if !overrides.is_table() {
        bail!("`{name}` must be a table");
    }
    let mut base = Value::try_from(T::default()).with_context(|| format!("serializing [{name}] defaults"))?;
    merge(&mut base, overrides);
    base.try_into().with_context(|| format!("in [{name}]"))
}

fn inherit_seed(table: &mut Table, path: &[&str], seed: u64) {
    let mut t = table;
    for key in path {
        let slot = t.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
        match slot {
            Value::Table(inner) => t = inner,
            // left for `section` to report
            _ => return,
        }
    }
    t.entry("seed").or_insert(Value::Integer(seed as i64));
}

fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
