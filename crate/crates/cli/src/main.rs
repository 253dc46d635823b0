//! Command-line front end: probe, train, evaluate, generate, analyze,
//! sweep, and paramcount over one config document. Artifacts land in the
//! run directory (`--out`, the config's `out_dir`, or a timestamped
//! default under `runs/`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use laylora_core::experiments::{
    self, load_config, RecommenderSection, RunConfig,
};

#[derive(Parser)]
#[command(name = "laylora", version, about = "Multi-branch low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's out_dir, then a
    /// timestamped directory under runs/).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recommendation source: oracle | sim:<accuracy> | exec:<command>.
    #[arg(long)]
    recommender: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-layer probes and select the semantic layer set.
    Probe(Common),
    /// Train adapters per the config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from an exact training state directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Additionally write an exact f64 training state for resuming.
        #[arg(long, default_value_t = false)]
        save_state: bool,
    },
    /// Generate on the test split and score it.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory produced by train.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate on the test split without scoring.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Semantic-shift analyses: projection clouds, correlation matrices,
    /// cosine summary, confusion matrix.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for the with/without-constraint comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train and evaluate across a sweep axis from the config.
    Sweep(Common),
    /// Trainable-parameter accounting for every scheme.
    Paramcount(Common),
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) -> Result<()> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = &common.recommender {
        cfg.recommender = parse_recommender(spec)?;
    }
    Ok(())
}

fn parse_recommender(spec: &str) -> Result<RecommenderSection> {
    if spec == "oracle" {
        return Ok(RecommenderSection { kind: "oracle".into(), accuracy: None, command: None });
    }
    if let Some(p) = spec.strip_prefix("sim:") {
        let accuracy: f64 = p.parse().with_context(|| format!("bad sim accuracy {p:?}"))?;
        return Ok(RecommenderSection { kind: "sim".into(), accuracy: Some(accuracy), command: None });
    }
    if let Some(cmd) = spec.strip_prefix("exec:") {
        return Ok(RecommenderSection {
            kind: "exec".into(),
            accuracy: None,
            command: Some(cmd.to_string()),
        });
    }
    bail!("recommender must be oracle, sim:<p>, or exec:<command>, got {spec:?}")
}

fn out_dir(cfg: &RunConfig, common: &Common, command: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(out) = &cfg.out_dir {
        return out.clone();
    }
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    Path::new("runs").join(format!("{stamp}-{command}"))
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    apply_overrides(&mut cfg, common)?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Probe(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common, "probe");
            let report = experiments::run_probe(&cfg, &out)?;
            println!("probe report written to {}", out.join(experiments::PROBE_REPORT_FILE).display());
            for (layer, acc) in report.accuracies.iter().enumerate() {
                let mark = if report.selected.contains(&layer) { " *" } else { "" };
                println!("layer {layer}: accuracy {acc:.4}{mark}");
            }
        }
        Command::Train { common, resume, save_state } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common, "train");
            let outcome = experiments::run_train(&cfg, &out, resume.as_deref(), save_state)?;
            println!(
                "trained {} steps; final lm loss {:.6}; checkpoint at {}",
                outcome.steps,
                outcome.final_lm_loss,
                outcome.checkpoint_dir.display()
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common, "evaluate");
            let outcome = experiments::run_evaluate(&cfg, &out, &checkpoint)?;
            print!("{}", experiments::metrics_to_tsv(&outcome.rows));
            println!("metrics written to {}", out.join(experiments::METRICS_FILE).display());
        }
        Command::Generate { common, checkpoint } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common, "generate");
            let records = experiments::run_generate(&cfg, &out, &checkpoint)?;
            println!(
                "{} generations written to {}",
                records.len(),
                out.join(experiments::GENERATIONS_FILE).display()
            );
        }
        Command::Analyze { common, checkpoint, compare } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common, "analyze");
            let outcome = experiments::run_analyze(&cfg, &out, &checkpoint, compare.as_deref())?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("mean expert-lay cosine under A: {:.6}", outcome.mean_cosine);
            if let Some(c) = outcome.compare_mean_cosine {
                println!("comparison checkpoint cosine:   {c:.6}");
            }
            println!("analysis bundle written to {}", out.display());
        }
        Command::Sweep(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common, "sweep");
            let rows = experiments::run_sweep(&cfg, &out)?;
            println!("{} sweep points written to {}", rows.len(), out.join(experiments::SWEEP_FILE).display());
        }
        Command::Paramcount(common) => {
            let cfg = load(&common)?;
            let out = common.out.clone().or_else(|| cfg.out_dir.clone());
            let tsv = experiments::run_paramcount(&cfg, out.as_deref())?;
            print!("{tsv}");
        }
    }
    Ok(())
}
