use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use oneshot_core::harness::{self, emit_report, ExperimentConfig, ExperimentReport, Workspace};

#[derive(Parser)]
#[command(name = "oneshot", version, about = "One-shot federated learning through latent distillates")]
struct Cli {
    /// Experiment config (flat TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run client stages sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into holdout, proxy sample and client shards.
    Partition,
    /// Train one model per client.
    TrainLocal,
    /// Select each client's core-set.
    Coreset,
    /// Fourier-perturb the core-sets.
    Perturb,
    /// Fit the autoencoder if needed and synthesize distillates.
    Synthesize,
    /// Aggregate distillates and train the global model.
    ServeTrain,
    /// Holdout accuracy of the global model.
    Evaluate,
    /// PSNR/SSIM of decoded distillates against core-set patches.
    PrivacyReport,
    /// Full pipeline with baselines, or a single stage with `--stage`.
    Run {
        #[arg(long)]
        stage: Option<String>,
    },
    /// Re-emit tables and plots from `reports/report.json`.
    Report,
    /// Print the effective config as TOML.
    Config,
}

fn load_config(cli: &Cli) -> oneshot_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= cli.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> oneshot_core::Result<()> {
    let cfg = load_config(cli)?;
    let stage = match &cli.command {
        Command::Partition => "partition",
        Command::TrainLocal => "train-local",
        Command::Coreset => "coreset",
        Command::Perturb => "perturb",
        Command::Synthesize => "synthesize",
        Command::ServeTrain => "serve-train",
        Command::Evaluate => "evaluate",
        Command::PrivacyReport => "privacy-report",
        Command::Run { stage: Some(s) } => s.as_str(),
        Command::Run { stage: None } => {
            let report = harness::run_pipeline(&cfg)?;
            print!("{}", report.methods_tsv());
            return Ok(());
        }
        Command::Report => {
            let dir = Workspace::new(cfg).reports_dir();
            let report = ExperimentReport::load(&dir.join("report.json"))?;
            for f in emit_report(&report, &dir)?.files {
                println!("{}", f.display());
            }
            return Ok(());
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    harness::run_stage(&cfg, stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
