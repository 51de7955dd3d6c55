//! CLI for the segmentation pipeline: scene synthesis, training,
//! evaluation, inference, the ablation table, the K sweep and gradient
//! checks. Config and reports are JSON; any contract violation exits
//! nonzero with the error on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mcnet::cloud::{load_ply, save_ply, synth_scene, SceneSpec};
use mcnet::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig};
use mcnet::train::{ablate, evaluate, ksweep, predict, train};

#[derive(Parser)]
#[command(name = "mcnet", about = "Point-cloud semantic segmentation pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scene from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a JSON checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled cloud and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Label a cloud with a checkpoint and write the predictions as a
    /// `pred` property.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the five-row ablation table (A-E) and write it as JSON.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train/evaluate across neighborhood sizes and write the table.
    Ksweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated K values.
        #[arg(long, default_value = "9,16,25,36")]
        ks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients against central finite differences.
    Gradcheck {
        /// Restrict to one module: tensor, encoder, decoder, harness, model.
        #[arg(long)]
        module: Option<String>,
    },
}

fn read_config(path: &PathBuf) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config: ModelConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading scene spec {}", spec.display()))?;
            let spec: SceneSpec = serde_json::from_str(&text).context("parsing scene spec")?;
            let cloud = synth_scene(&spec)?;
            save_ply(&cloud, &out, None)?;
            println!(
                "wrote {} points across {} classes to {}",
                cloud.len(),
                spec.classes.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let config = read_config(&config)?;
            let cloud = load_ply(&data)?;
            let mut model = build_model(&config)?;
            eprintln!(
                "training {} parameters for {} epochs (batch {})",
                model.param_count(),
                config.epochs,
                config.batch_size
            );
            let report = train(&mut model, &cloud)?;
            save_checkpoint(&model, &out)?;
            println!(
                "final loss {:.6}, OA {:.4}, mIoU {:.4}, {:.1}s; checkpoint at {}",
                report.epoch_loss.last().copied().unwrap_or(f64::NAN),
                report.final_metrics.oa,
                report.final_metrics.miou,
                report.wall_clock_seconds,
                out.display()
            );
        }
        Command::Eval { ckpt, data, report } => {
            let mut model = load_checkpoint(&ckpt)?;
            let cloud = load_ply(&data)?;
            let metrics = evaluate(&mut model, &cloud, None)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            std::fs::write(&report, &text)?;
            println!("OA {:.4}, mIoU {:.4}; report at {}", metrics.oa, metrics.miou, report.display());
        }
        Command::Infer { ckpt, data, out } => {
            let mut model = load_checkpoint(&ckpt)?;
            let cloud = load_ply(&data)?;
            let labels = predict(&mut model, &cloud)?;
            save_ply(&cloud, &out, Some(&labels))?;
            println!("labeled {} points; wrote {}", cloud.len(), out.display());
        }
        Command::Ablate { config, data, out } => {
            let config = read_config(&config)?;
            let cloud = load_ply(&data)?;
            let table = ablate(&cloud, &config)?;
            std::fs::write(&out, serde_json::to_string_pretty(&table)?)?;
            for row in &table.rows {
                println!("{}: OA {:.4}, mIoU {:.4}", row.model, row.oa, row.miou);
            }
        }
        Command::Ksweep { config, data, ks, out } => {
            let config = read_config(&config)?;
            let cloud = load_ply(&data)?;
            let ks: Vec<usize> = ks
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("parsing --ks"))
                .collect::<Result<_>>()?;
            let table = ksweep(&cloud, &config, &ks)?;
            std::fs::write(&out, serde_json::to_string_pretty(&table)?)?;
            for row in &table.rows {
                println!("K={}: OA {:.4}, mIoU {:.4}", row.k, row.oa, row.miou);
            }
        }
        Command::Gradcheck { module } => {
            let outcomes = mcnet::gradcheck::run(module.as_deref())?;
            if outcomes.is_empty() {
                bail!("no gradient checks match module filter");
            }
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status}  {:<8} {:<26} max rel err {:.3e} (tol {:.0e}, {} seeds)",
                    o.module, o.name, o.max_rel_err, o.tolerance, o.seeds
                );
                if !o.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} gradient check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
