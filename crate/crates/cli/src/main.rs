use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moct_core::model::load_checkpoint;
use moct_core::pipeline::{evaluate, predict_volume, train_variant, RunConfig};
use moct_core::synthdata::{generate_suite, Scale};
use moct_core::verify::{run_battery, BatteryOptions};
use moct_core::{Error, Variant};

#[derive(Parser)]
#[command(name = "moctrans", version, about = "Task-token conditioned segmentation on partially labelled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset suite and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        scale: String,
    },
    /// Train one variant on one cross-validation fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        /// mo_ctrans, base_single or base_multi; defaults to the config's variant.
        #[arg(long)]
        variant: Option<String>,
        /// Dataset for base_single; defaults to the config's dataset.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Evaluate checkpoints on their test subjects and write report CSVs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        /// Defaults to `<output>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-slice binary masks of one task as PGM images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Exit status and short machine-readable kind of an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (1, "usage"),
        Error::NonFiniteLoss { .. } | Error::CheckFailed(_) => (3, "numerical"),
        _ => (2, "data"),
    }
}

fn fail(e: Error) -> ExitCode {
    let (code, kind) = classify(&e);
    eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
    ExitCode::from(code)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate { out, seed, scale } => {
            let scale: Scale = scale.parse()?;
            let manifest = generate_suite(&out, seed, scale)?;
            println!("{}", out.join(moct_core::synthdata::MANIFEST_FILE).display());
            let subjects: usize = manifest.datasets.iter().map(|d| d.subjects.len()).sum();
            println!("{} datasets, {subjects} subjects", manifest.datasets.len());
        }
        Command::Train { config, fold, variant, dataset } => {
            let cfg = RunConfig::load(&config)?;
            let variant: Variant = match variant {
                Some(v) => v.parse()?,
                None => cfg.variant.ok_or_else(|| Error::Config("no variant given on the command line or in the config".into()))?,
            };
            let dataset = dataset.or_else(|| cfg.dataset.clone());
            let art = train_variant(&cfg, variant, dataset.as_deref(), fold)?;
            println!("checkpoint {}", art.checkpoint.display());
            println!("history {}", art.history.display());
            println!("best epoch {}", art.outcome.best_epoch);
            if let Some(last) = art.outcome.history.last() {
                for (task, dice) in &last.val_dice {
                    println!("final val_dice task {task}: {dice:.4}");
                }
            }
        }
        Command::Eval { config, checkpoints, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.data.output.join("eval"));
            let art = evaluate(&cfg, &checkpoints, &out)?;
            println!("report {}", art.report.display());
            if let Some(p) = &art.pairwise {
                println!("pairwise {}", p.display());
            }
            for r in &art.metrics.rows {
                let assd = r.mean_assd_mm.map_or("NA".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{} {} task {}{}: dice {:.4} assd {assd} empty {}",
                    r.method,
                    r.dataset,
                    r.task_id,
                    if r.eval_only { " (eval-only)" } else { "" },
                    r.mean_dice,
                    r.empty_predictions
                );
            }
        }
        Command::Predict { checkpoint, image, task, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let files = predict_volume(&ckpt, &image, task, &out)?;
            println!("{} slices written to {}", files.len(), out.display());
        }
        Command::Gradcheck { seeds, inject_fault } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let results = run_battery(&BatteryOptions { seeds, inject_fault })?;
            let mut failed = Vec::new();
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<22} {:.3e} (< {:.0e}) {verdict}", r.name, r.max_relative_error, r.tolerance);
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::CheckFailed(format!("gradcheck failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
