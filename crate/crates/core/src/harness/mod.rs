//! Config-driven experiment runner: the full client/server pipeline plus
//! baselines and ablations on identical shards, with reports and plots.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! shards/       client_<i>.osfl, holdout.osfl, proxy.osfl, partition.json
//! models/       client_<i>.osfl, autoencoder.osfl, local.json
//! coresets/     scored/, random/, <selection>_lambda<λ>/ (perturbed patches)
//! distillates/  <method>/client_<i>.osfl
//! global/       <method>/model.osfl, trace.tsv, accuracy.json
//! reports/      report.json, config.toml, *.tsv, *.svg
//! ```

mod config;
mod report;
mod stages;

use std::time::Instant;

use log::info;

pub use config::ExperimentConfig;
pub use report::{emit_report, ClientDiagnostics, Emitted, ExperimentReport, MethodResult, PrivacySummary, StageTime};
pub use stages::{
    build_autoencoder, coreset, ensemble, evaluate_global, fedavg, fedmix, load_distillates, load_holdout, load_model,
    load_partition_index, load_shard, noise, noise_method, partition, perturb, privacy, serve_train, synthesize,
    train_local, LocalSummary, PartitionIndex, Selection, SynthesisSummary, Track, Workspace, ENSEMBLE_METHOD,
    FEDAVG_METHOD, FEDMIX_METHOD, MAIN_METHOD,
};

use crate::error::{Error, Result};
use crate::privacy::comm_cost;

pub const RANDOM_METHOD: &str = "random_selection";
pub const NO_AE_METHOD: &str = "no_ae";
/// Distillates synthesized without Fourier perturbation, the base the
/// latent-noise baseline perturbs.
pub const NOISE_BASE: &str = "noise_base";

/// Stage names accepted by [`run_stage`].
pub const STAGES: [&str; 8] =
    ["partition", "train-local", "coreset", "perturb", "synthesize", "serve-train", "evaluate", "privacy-report"];

fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => other.at_stage(stage, None),
    })
}

struct Clock {
    times: Vec<StageTime>,
}

impl Clock {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = in_stage(stage, f());
        let seconds = start.elapsed().as_secs_f64();
        info!("stage {stage}: {seconds:.1}s");
        self.times.push(StageTime { stage: stage.to_string(), seconds });
        out
    }
}

/// Runs one named stage of the main method against an existing run
/// directory.
pub fn run_stage(cfg: &ExperimentConfig, stage: &str) -> Result<()> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let main = Track::main(cfg);
    let r = match stage {
        "partition" => partition(&ws).map(drop),
        "train-local" => train_local(&ws).map(drop),
        "coreset" => coreset(&ws, Selection::Scored).map(drop),
        "perturb" => perturb(&ws, Selection::Scored, cfg.lambda),
        "synthesize" => {
            if !ws.autoencoder_path().exists() {
                build_autoencoder(&ws)?;
            }
            synthesize(&ws, &main).map(drop)
        }
        "serve-train" => serve_train(&ws, MAIN_METHOD).map(drop),
        "evaluate" => evaluate_global(&ws, MAIN_METHOD).map(|acc| info!("{MAIN_METHOD}: accuracy {acc:.4}")),
        "privacy-report" => privacy(&ws).map(drop),
        other => return Err(Error::Invalid(format!("unknown stage `{other}`; expected one of {STAGES:?}"))),
    };
    in_stage(stage, r)
}

/// Runs partition through evaluation for the main method and every
/// enabled baseline, then writes the report under `reports/`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let mut clock = Clock { times: Vec::new() };
    let mut methods = Vec::new();
    let mut record = |method: &str, accuracy: f64| {
        info!("{method}: accuracy {accuracy:.4}");
        methods.push(MethodResult { method: method.to_string(), accuracy });
    };

    let index = clock.run("partition", || partition(&ws))?;
    let local = clock.run("train-local", || train_local(&ws))?;
    let recon = clock.run("autoencoder", || build_autoencoder(&ws))?;
    let coresets = clock.run("coreset", || coreset(&ws, Selection::Scored))?;
    clock.run("perturb", || perturb(&ws, Selection::Scored, cfg.lambda))?;
    let main = Track::main(cfg);
    let synth = clock.run("synthesize", || synthesize(&ws, &main))?;
    clock.run("serve-train", || serve_train(&ws, MAIN_METHOD))?;
    record(MAIN_METHOD, clock.run("evaluate", || evaluate_global(&ws, MAIN_METHOD))?);

    if cfg.fedavg {
        record(FEDAVG_METHOD, clock.run(FEDAVG_METHOD, || fedavg(&ws))?);
    }
    if cfg.ensemble {
        record(ENSEMBLE_METHOD, clock.run(ENSEMBLE_METHOD, || ensemble(&ws))?);
    }
    let distil_baseline = |name: &str, prep: &dyn Fn() -> Result<()>, clock: &mut Clock| -> Result<f64> {
        clock.run(name, || {
            prep()?;
            serve_train(&ws, name)?;
            evaluate_global(&ws, name)
        })
    };
    if cfg.random_selection {
        let track = Track { method: RANDOM_METHOD.into(), selection: Selection::Random, ..main.clone() };
        let prep = || {
            coreset(&ws, Selection::Random)?;
            perturb(&ws, Selection::Random, cfg.lambda)?;
            synthesize(&ws, &track).map(drop)
        };
        record(RANDOM_METHOD, distil_baseline(RANDOM_METHOD, &prep, &mut clock)?);
    }
    if cfg.no_ae {
        let track = Track { method: NO_AE_METHOD.into(), identity_ae: true, ..main.clone() };
        let prep = || synthesize(&ws, &track).map(drop);
        record(NO_AE_METHOD, distil_baseline(NO_AE_METHOD, &prep, &mut clock)?);
    }
    if cfg.noise && !cfg.noise_levels.is_empty() {
        let base = Track { method: NOISE_BASE.into(), lambda: 0.0, ..main.clone() };
        clock.run(NOISE_BASE, || {
            perturb(&ws, Selection::Scored, 0.0)?;
            synthesize(&ws, &base).map(drop)
        })?;
        for &p in &cfg.noise_levels {
            let name = noise_method(p);
            let prep = || noise(&ws, NOISE_BASE, p).map(drop);
            record(&name, distil_baseline(&name, &prep, &mut clock)?);
        }
    }
    if cfg.fedmix {
        let prep = || fedmix(&ws);
        record(FEDMIX_METHOD, distil_baseline(FEDMIX_METHOD, &prep, &mut clock)?);
    }
    let privacy = clock.run("privacy-report", || privacy(&ws))?;

    let payloads: Vec<u64> = synth.iter().flatten().map(|s| s.payload_bytes).collect();
    let model_bytes = (0..cfg.n_clients)
        .find_map(|c| load_model(&ws, c).transpose())
        .transpose()?
        .map(|m| m.checkpoint_bytes())
        .transpose()?;
    let comm = model_bytes.map(|b| comm_cost(&payloads, b));

    let report = ExperimentReport {
        config: cfg.clone(),
        methods,
        privacy,
        comm,
        autoencoder_recon_error: Some(recon),
        stage_times: clock.times,
        clients: stages::client_diagnostics(&index, &local, &coresets, &synth),
    };
    in_stage("report", emit_report(&report, &ws.reports_dir()))?;
    Ok(report)
}
