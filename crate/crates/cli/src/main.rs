mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};

use commands::{Context, Failure, Outcome, Report};
use config::ExperimentConfig;
use output::{Format, OutputDir, Provenance};

/// Simulations and experiments on cascade selection bias.
#[derive(Parser, Debug)]
#[command(name = "cascade-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Root seed; overrides the config's seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Report rendering for stdout and the report file.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Monte Carlo calibration curves of a two-stage cascade.
    Simulate,
    /// Generate a synthetic pool, run it through a cascade and write logs.
    GenData,
    /// Train one predictor on impressions and report holdout metrics.
    Train,
    /// Baseline vs cross-stage distillation.
    Distill,
    /// Feature selection with consideration-set importance.
    Ssfs,
    /// Multi-task student with dependent and auxiliary heads.
    Sslfm,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Distill => "distill",
            Command::Ssfs => "ssfs",
            Command::Sslfm => "sslfm",
        }
    }

    fn section(self) -> &'static str {
        match self {
            Command::GenData => "gen_data",
            other => other.name(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Outcome<(String, ExperimentConfig)> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(Failure::Config)?,
        None => String::new(),
    };
    let cfg = ExperimentConfig::parse(&text).map_err(Failure::Config)?;
    Ok((text, cfg))
}

fn run(cli: &Cli) -> Outcome<()> {
    let runtime = |e: anyhow::Error| Failure::Runtime(e);
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("building the thread pool")
        .map_err(runtime)?;

    let (text, mut cfg) = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let effective = if cli.config.is_some() {
        text
    } else {
        cfg.section_toml(cli.command.section()).map_err(runtime)?
    };
    let prov = Provenance::new(cli.command.name(), &effective, cfg.seed);
    let out = OutputDir::create(&cli.out).map_err(runtime)?;
    let base_dir = cli
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ctx = Context {
        cfg: &cfg,
        base_dir,
        out: &out,
        prov: &prov,
    };
    let report: Report = match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Distill => commands::distill(&ctx),
        Command::Ssfs => commands::ssfs(&ctx),
        Command::Sslfm => commands::sslfm(&ctx),
    }?;

    out.write("config.toml", &effective).map_err(runtime)?;
    out.write_json("provenance.json", &prov).map_err(runtime)?;
    let rendered = report.render(cli.format, &prov).map_err(runtime)?;
    out.write(&format!("report.{}", cli.format.extension()), &rendered)
        .map_err(runtime)?;
    print!("{rendered}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.exit_code())
        }
    }
}
