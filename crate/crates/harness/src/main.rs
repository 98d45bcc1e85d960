use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hypca::checks::{self, Scope};
use hypca::count_params_macs;
use hypca_harness::config::seed_from_env;
use hypca_harness::results::{self, write_json, CHECKPOINT};
use hypca_harness::{
    evaluate_checkpoint, linear_probe, run_ablation, synth_dataset, train, Checkpoint, ExperimentConfig,
    ProbeConfig, RunStatus, SynthSpec,
};
use serde_json::json;

/// Exit code of a run whose loss diverged; results are still written.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "hypca", version, about = "Train, evaluate, ablate and verify the hypca network")]
struct Cli {
    /// Overrides the seed from the config and the HYPCA_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the config's synthetic dataset and write results and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the module, component and wiring grids.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print parameter and per-sample MAC counts.
    Count {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: ScopeArg,
    },
    /// Generate a synthetic dataset file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also fit a linear probe on raw pixels and report its test accuracy.
        #[arg(long)]
        probe: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Blocks,
    Network,
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.resolve_seed(seed)?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let ds = synth_dataset(&cfg.data)?;
            let trained = train(&cfg, &ds)?;
            let r = &trained.result;
            results::write_train_outputs(&out, r)?;
            trained.checkpoint().save(&out.join(CHECKPOINT))?;
            let m = &r.summary;
            println!(
                "status={} best_epoch={} accuracy={:.4} macro_f1={:.4} auc={} params={} macs={} seconds={:.1}",
                results::status_label(&r.status),
                r.best_epoch,
                m.accuracy,
                m.macro_f1,
                m.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                r.params,
                r.macs,
                r.wall_clock_seconds
            );
            if let RunStatus::Diverged { epoch, step } = r.status {
                eprintln!("training diverged at epoch {epoch}, step {step}");
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(&config, cli.seed)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            if ckpt.config_digest != cfg.digest() {
                eprintln!("warning: checkpoint was written for a different config digest");
            }
            let ds = synth_dataset(&cfg.data)?;
            let (heads, summary) = evaluate_checkpoint(&cfg, &ds, &ckpt)?;
            print_json(&json!({
                "config_digest": cfg.digest(),
                "config": cfg,
                "test": heads,
                "summary": summary,
            }))?;
        }
        Command::Ablate { config, out, threads } => {
            let cfg = load_config(&config, cli.seed)?;
            let ds = synth_dataset(&cfg.data)?;
            let threads = threads
                .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
                .unwrap_or(1);
            let start = Instant::now();
            let records = run_ablation(&cfg, &ds, threads);
            results::write_ablation_outputs(&out, &cfg, &records, start.elapsed().as_secs_f64())?;
            print!("{}", results::ablation_table(&records));
        }
        Command::Count { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let s = cfg.data.image_size;
            let cost = count_params_macs(&cfg.model, s, s)?;
            print_json(&json!({
                "config_digest": cfg.digest(),
                "config": cfg,
                "height": s,
                "width": s,
                "params": cost.params,
                "macs": cost.macs,
            }))?;
        }
        Command::Gradcheck { scope } => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Blocks => Scope::Blocks,
                ScopeArg::Network => Scope::Network,
            };
            let outcomes = checks::run_scope(scope)?;
            let mut failed = 0;
            for o in &outcomes {
                let verdict = if o.passed() { "ok" } else { "FAILED" };
                let worst = o
                    .report
                    .worst
                    .as_ref()
                    .map(|(w, i)| format!(" at {w}[{i}]"))
                    .unwrap_or_default();
                println!(
                    "{verdict:<6} {:<28} max_rel_error={:.3e} tolerance={:.0e} coords={}{worst}",
                    o.name, o.report.max_rel_error, o.tolerance, o.report.coords
                );
                failed += usize::from(!o.passed());
            }
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { spec, out, probe } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut spec: SynthSpec = serde_json::from_str(&text)?;
            if let Some(s) = cli.seed.map(Ok).or_else(|| seed_from_env().transpose()).transpose()? {
                spec.seed = s;
            }
            let ds = synth_dataset(&spec)?;
            std::fs::create_dir_all(&out)?;
            ds.save(&out.join("dataset.bin"))?;
            let (tr, va, te) = spec.split();
            let mut summary = json!({
                "spec": spec,
                "split": { "train": [tr.start, tr.end], "val": [va.start, va.end], "test": [te.start, te.end] },
            });
            if probe {
                summary["linear_probe"] = serde_json::to_value(linear_probe(&ds, ProbeConfig::default())?)?;
            }
            write_json(&out.join("dataset.json"), &summary)?;
            print_json(&summary)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
