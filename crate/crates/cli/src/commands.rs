use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _};
use cascade_lab::cascade_sim::{sweep_two_stage, CalibrationCurve, SweepParam};
use cascade_lab::data::{Dataset, Matrix};
use cascade_lab::metrics::{calibration_ratio, normalized_entropy, ReferenceKind, TargetKind};
use cascade_lab::predictor::{train, DifferentiablePredictor, TrainConfig};
use cascade_lab::report::{fmt_sig, render_table};
use cascade_lab::rng;
use cascade_lab::ssfs::{PlantedCheck, SsfsOutcome};
use cascade_lab::sslfm::SslfmOutcome;
use cascade_lab::synthgen::{
    generate_pool, make_splits, read_jsonl, run_cascade, write_consideration_jsonl, write_impressions_jsonl,
    ConsiderationSet, DatasetManifest, ImpressionSet, NoisyOracle, StageScorer,
};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{ExperimentConfig, GenDataSection, NoiseLevel};
pub use crate::output::Report;
use crate::output::{csv, OutputDir, Provenance};

/// Failures split by the exit code they map to.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

trait ConfigErr<T> {
    fn config(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> ConfigErr<T> for std::result::Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
}

trait RuntimeErr<T> {
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> RuntimeErr<T> for std::result::Result<T, E> {
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    /// Directory relative data paths resolve against.
    pub base_dir: PathBuf,
    pub out: &'a OutputDir,
    pub prov: &'a Provenance,
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimVariant<'a> {
    sigma1: f64,
    sigma2: f64,
    curve: &'a CalibrationCurve,
}

pub fn simulate(ctx: &Context) -> Outcome<Report> {
    let sim = &ctx.cfg.simulate;
    sim.validate().config()?;
    let k1: Vec<f64> = sim.k1_values.iter().map(|&k| k as f64).collect();
    let curves: Vec<(NoiseLevel, CalibrationCurve)> = sim
        .noise
        .iter()
        .enumerate()
        .map(|(v, &noise)| {
            let spec = sim.spec(
                sim.k1_values[0],
                noise,
                rng::derive_seed(ctx.cfg.seed, "simulate", v as u64),
            );
            sweep_two_stage(&spec, SweepParam::K1, &k1).map(|c| (noise, c))
        })
        .collect::<Result<_, _>>()
        .runtime()?;

    let lead = ["sigma1", "sigma2", "k1"];
    let mut panels: [Vec<Vec<String>>; 4] = Default::default();
    let mut table_rows = Vec::new();
    for (noise, curve) in &curves {
        for (&k, e) in sim.k1_values.iter().zip(&curve.estimates) {
            let head = vec![fmt_sig(noise.sigma1, 6), fmt_sig(noise.sigma2, 6), k.to_string()];
            let cell = |x: f64| fmt_sig(x, 6);
            for (p, (cal, se)) in [
                (e.cal_1_2, e.stderr_1_2),
                (e.cal_1_0, e.stderr_1_0),
                (e.cal_2_0, e.stderr_2_0),
            ]
            .into_iter()
            .enumerate()
            {
                panels[p].push([head.clone(), vec![cell(cal), cell(se)]].concat());
            }
            panels[3].push(
                [
                    head.clone(),
                    [
                        e.cal_1_2,
                        e.cal_1_0,
                        e.cal_2_0,
                        e.stderr_1_2,
                        e.stderr_1_0,
                        e.stderr_2_0,
                    ]
                    .map(cell)
                    .to_vec(),
                ]
                .concat(),
            );
            table_rows.push(vec![
                format!("{}/{}", noise.sigma1, noise.sigma2),
                k.to_string(),
                format!("{:.4}", e.cal_1_2),
                format!("{:.4}", e.cal_1_0),
                format!("{:.4}", e.cal_2_0),
            ]);
        }
    }
    let combined_header = [
        &lead[..],
        &[
            "cal_1_2",
            "cal_1_0",
            "cal_2_0",
            "stderr_1_2",
            "stderr_1_0",
            "stderr_2_0",
        ],
    ]
    .concat();
    let files = [
        ("panel_a_cal_1_2.csv", "cal_1_2", "stderr_1_2"),
        ("panel_b_cal_1_0.csv", "cal_1_0", "stderr_1_0"),
        ("panel_c_cal_2_0.csv", "cal_2_0", "stderr_2_0"),
    ];
    for (p, (name, cal, se)) in files.into_iter().enumerate() {
        let header = [&lead[..], &[cal, se]].concat();
        ctx.out.write_csv(name, ctx.prov, &csv(&header, &panels[p])).runtime()?;
    }
    let combined = csv(&combined_header, &panels[3]);
    ctx.out
        .write_csv("panel_d_combined.csv", ctx.prov, &combined)
        .runtime()?;
    let variants: Vec<SimVariant> = curves
        .iter()
        .map(|(n, c)| SimVariant {
            sigma1: n.sigma1,
            sigma2: n.sigma2,
            curve: c,
        })
        .collect();
    let json = serde_json::to_value(&variants).runtime()?;
    ctx.out
        .write_json(
            "summary.json",
            &serde_json::json!({ "provenance": ctx.prov, "variants": json }),
        )
        .runtime()?;
    Ok(Report {
        table: render_table(
            &["sigma1/sigma2", "k1", "cal(1,2)", "cal(1,0)", "cal(2,0)"],
            &table_rows,
        ),
        csv: combined,
        json,
    })
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cascade_logs(section: &GenDataSection, seed: u64) -> anyhow::Result<(ImpressionSet, ConsiderationSet)> {
    let pool = generate_pool(&section.pool)?;
    let scorers: Vec<NoisyOracle> = section
        .stage_noise
        .iter()
        .enumerate()
        .map(|(k, &noise)| NoisyOracle {
            noise,
            seed: rng::derive_seed(seed, "scorer", k as u64),
        })
        .collect();
    let stages: Vec<&dyn StageScorer> = scorers.iter().map(|s| s as &dyn StageScorer).collect();
    let trace = run_cascade(&pool, &stages, &section.stage_sizes)?;
    Ok(make_splits(&trace, &pool))
}

pub fn gen_data(ctx: &Context) -> Outcome<Report> {
    let section = &ctx.cfg.gen_data;
    section.validate().config()?;
    let (imp, cons) = cascade_logs(section, ctx.cfg.seed).runtime()?;
    let write = |name: &str, f: &dyn Fn(BufWriter<File>) -> cascade_lab::Result<()>| -> Outcome<()> {
        let path = ctx.out.path(name);
        let file = File::create(&path)
            .with_context(|| format!("creating {}", path.display()))
            .runtime()?;
        f(BufWriter::new(file)).runtime()
    };
    write("impressions.jsonl", &|w| write_impressions_jsonl(&imp, w))?;
    write("consideration.jsonl", &|w| write_consideration_jsonl(&cons, w))?;
    let manifest = DatasetManifest {
        pool: section.pool.clone(),
        stage_sizes: section.stage_sizes.clone(),
        impression_count: imp.len(),
        consideration_count: cons.len(),
        impression_hash: imp.content_hash(),
        consideration_hash: cons.content_hash(),
    };
    ctx.out
        .write_json(
            "manifest.json",
            &serde_json::json!({ "provenance": ctx.prov, "manifest": manifest }),
        )
        .runtime()?;
    let rows = vec![
        vec![
            "impressions.jsonl".to_string(),
            imp.len().to_string(),
            manifest.impression_hash.clone(),
        ],
        vec![
            "consideration.jsonl".to_string(),
            cons.len().to_string(),
            manifest.consideration_hash.clone(),
        ],
    ];
    let header = ["file", "records", "content_sha256"];
    Ok(Report {
        table: render_table(&header, &rows),
        csv: csv(&header, &rows),
        json: serde_json::to_value(&manifest).runtime()?,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_impressions(path: &Path) -> anyhow::Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_jsonl(BufReader::new(file))?;
    if records.is_empty() {
        bail!("{} holds no records", path.display());
    }
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.features.clone()).collect();
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .map(f64::from)
                .ok_or_else(|| anyhow!("record {} has no label", r.id))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Dataset::new(Matrix::from_rows(&rows)?, labels)?)
}

#[derive(Serialize)]
struct TrainSummary {
    train_examples: usize,
    holdout_examples: usize,
    holdout_ne: f64,
    holdout_calibration: f64,
    final_loss: f64,
}

pub fn train_cmd(ctx: &Context) -> Outcome<Report> {
    let section = &ctx.cfg.train;
    section.validate().config()?;
    let data = match &section.data {
        Some(p) => load_impressions(&ctx.base_dir.join(p)).runtime()?,
        None => {
            ctx.cfg.gen_data.validate().config()?;
            cascade_logs(&ctx.cfg.gen_data, ctx.cfg.seed)
                .and_then(|(imp, _)| Ok(imp.to_dataset()?))
                .runtime()?
        }
    };
    let data = if section.features.is_empty() {
        data
    } else {
        data.select_features(&section.features).config()?
    };
    let arch = section.arch(data.dim());
    arch.validate().config()?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(ctx.cfg.seed, "split", 0));
    let cut = ((data.len() as f64) * section.holdout_fraction).round() as usize;
    if cut == 0 || cut == data.len() {
        return Err(Failure::Runtime(anyhow!(
            "{} examples leave an empty split",
            data.len()
        )));
    }
    let (held, kept) = idx.split_at(cut);
    let (fit_data, holdout) = (data.subset(kept), data.subset(held));
    let init = DifferentiablePredictor::new(arch, rng::derive_seed(ctx.cfg.seed, "init", 0)).config()?;
    let cfg = TrainConfig {
        seed: rng::derive_seed(ctx.cfg.seed, "train", section.train.seed),
        ..section.train.clone()
    };
    let trained = train(&init, &fit_data, &cfg).runtime()?;
    let pred = trained.model.predict_batch(&holdout.features).runtime()?;
    let ne = normalized_entropy(&holdout.targets, &pred, TargetKind::GroundTruth).runtime()?;
    let cal = calibration_ratio(&pred, &holdout.targets, ReferenceKind::GroundTruth).runtime()?;
    ctx.out.write("model.json", trained.model.to_json() + "\n").runtime()?;
    let history: Vec<Vec<String>> = trained
        .loss_history
        .iter()
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), l.to_string()])
        .collect();
    ctx.out
        .write_csv("loss_history.csv", ctx.prov, &csv(&["epoch", "loss"], &history))
        .runtime()?;
    let summary = TrainSummary {
        train_examples: fit_data.len(),
        holdout_examples: holdout.len(),
        holdout_ne: ne.ne,
        holdout_calibration: cal.ratio,
        final_loss: *trained.loss_history.last().expect("history has the initial loss"),
    };
    let rows = vec![
        vec!["train_examples".into(), summary.train_examples.to_string()],
        vec!["holdout_examples".into(), summary.holdout_examples.to_string()],
        vec!["holdout_ne".into(), fmt_sig(summary.holdout_ne, 6)],
        vec!["holdout_calibration".into(), fmt_sig(summary.holdout_calibration, 6)],
        vec!["final_loss".into(), fmt_sig(summary.final_loss, 6)],
    ];
    Ok(Report {
        table: render_table(&["metric", "value"], &rows),
        csv: csv(&["metric", "value"], &rows),
        json: serde_json::to_value(&summary).runtime()?,
    })
}

// ---------------------------------------------------------------------------
// distill, ssfs, sslfm
// ---------------------------------------------------------------------------

pub fn distill(ctx: &Context) -> Outcome<Report> {
    let exp = &ctx.cfg.distill;
    exp.validate().config()?;
    let outcome = exp.run().runtime()?;
    let ev = &outcome.evaluation;
    ctx.out
        .write("baseline_model.json", outcome.baseline.to_json() + "\n")
        .runtime()?;
    ctx.out
        .write("distilled_model.json", outcome.distilled.to_json() + "\n")
        .runtime()?;
    let [ib, id] = ev.impression_calibration();
    let [cb, cd] = ev.consideration_calibration();
    let s = |x: f64| fmt_sig(x, 6);
    let rows = vec![
        vec!["impression".into(), "calibration".into(), s(ib), s(id)],
        vec!["consideration".into(), "calibration".into(), s(cb), s(cd)],
        vec![
            "impression".into(),
            "ne".into(),
            s(ev.impression.baseline_ne.ne),
            s(ev.impression.distilled_ne.ne),
        ],
        vec![
            "consideration".into(),
            "ne".into(),
            s(ev.consideration.baseline_ne.ne),
            s(ev.consideration.distilled_ne.ne),
        ],
        vec![
            "impression".into(),
            "ne_change_pct".into(),
            "0".into(),
            s(ev.impression_ne_change()),
        ],
        vec![
            "consideration".into(),
            "ne_change_pct".into(),
            "0".into(),
            s(ev.consideration_ne_change()),
        ],
    ];
    let json = serde_json::json!({
        "evaluation": ev,
        "consideration_gap_reduction": ev.consideration_gap_reduction(),
        "train_data": outcome.train_data,
        "eval_data": outcome.eval_data,
    });
    Ok(Report {
        table: ev.render_table(),
        csv: csv(&["data", "metric", "baseline", "distilled"], &rows),
        json,
    })
}

pub fn ssfs(ctx: &Context) -> Outcome<Report> {
    let cfg = &ctx.cfg.ssfs;
    cfg.validate().config()?;
    let check: Option<PlantedCheck> = match cfg.planted_feature {
        Some(_) => Some(cfg.planted_check().runtime()?),
        None => None,
    };
    let outcome: SsfsOutcome = cfg.run().runtime()?;
    for r in [&outcome.imp_report, &outcome.cd_report] {
        ctx.out
            .write(
                &format!("importance_{}.csv", r.regime),
                format!("{}\n{}", ctx.prov.comment(), r.to_csv()),
            )
            .runtime()?;
    }
    let rows: Vec<Vec<String>> = outcome
        .results
        .iter()
        .map(|r| {
            vec![
                r.strategy.name().to_string(),
                fmt_sig(r.impression_ne_change(), 6),
                fmt_sig(r.consideration_ne_change(), 6),
                r.selected.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            ]
        })
        .collect();
    let mut table = outcome.render_table();
    if let Some(c) = check {
        table.push_str(&format!(
            "\nplanted feature {}: true rank {} on impressions, {} on mixed data (top {}): {}\n",
            c.feature,
            c.impression_rank + 1,
            c.mixed_rank + 1,
            c.top_n,
            if c.holds() {
                "suppressed as planted"
            } else {
                "NOT suppressed as planted"
            }
        ));
    }
    Ok(Report {
        table,
        csv: csv(
            &[
                "method",
                "impression_ne_change_pct",
                "consideration_ne_change_pct",
                "selected",
            ],
            &rows,
        ),
        json: serde_json::json!({ "planted_check": check, "outcome": outcome }),
    })
}

pub fn sslfm(ctx: &Context) -> Outcome<Report> {
    let exp = &ctx.cfg.sslfm;
    exp.validate().config()?;
    let outcome: SslfmOutcome = exp.run().runtime()?;
    let rows: Vec<Vec<String>> = outcome
        .results
        .iter()
        .map(|r| {
            vec![
                r.variant.name().to_string(),
                fmt_sig(r.impression_ne.ne, 6),
                fmt_sig(r.ne_change(), 6),
            ]
        })
        .collect();
    let mut table = outcome.render_table();
    table.push_str(&format!(
        "\nteacher NE {:.4} vs baseline NE {:.4}{}\n",
        outcome.teacher_ne,
        outcome.baseline_ne,
        if outcome.teacher_dominates() {
            ""
        } else {
            " (teacher does not dominate)"
        }
    ));
    Ok(Report {
        table,
        csv: csv(&["variant", "impression_ne", "ne_change_pct"], &rows),
        json: serde_json::to_value(&outcome).runtime()?,
    })
}
