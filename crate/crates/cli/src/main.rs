//! Command-line front end for the collaborative labeling pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
//! 4 numeric failure (NaN/inf during training), 1 anything else.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use colabseg::config::ExperimentConfig;
use colabseg::error::Error;
use colabseg::pipeline::{Pipeline, StageOutcome};

/// Environment variable overriding the configured output root.
const OUT_ENV: &str = "COLABSEG_OUT";

#[derive(Parser)]
#[command(
    name = "colabseg",
    version,
    about = "Sparse-annotation collaborative labeling for volumetric segmentation"
)]
struct Cli {
    /// Experiment configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Restrict per-fold commands to one fold (default: all folds).
    #[arg(long, global = true)]
    fold: Option<usize>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Skip stages whose recorded inputs are unchanged. This is also the
    /// default; the flag exists so scripts can state it explicitly.
    #[arg(long, global = true)]
    resume: bool,

    /// Re-run stages even when their run records are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset (MetaImage pairs + manifest).
    Synth,
    /// Warm-up + joint semi-supervised training; writes y_SEMI labels.
    TrainSemi,
    /// Train the slice-pair registration network (images only).
    TrainReg,
    /// Propagate central-slice labels outward; writes y_SSL labels.
    Propagate,
    /// Intersect y_SEMI with y_SSL into y_final.
    Fuse,
    /// Train the final segmentation network on manual + fused labels.
    TrainFinal,
    /// Train the FS-LCS baseline (labeled central slices only).
    TrainBaseline,
    /// Evaluate final and baseline networks on the validation fold.
    Evaluate,
    /// Run every stage for every fold and aggregate the summary tables.
    Crossval,
    /// Print the effective configuration as TOML and exit.
    PrintConfig,
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::MissingPrerequisite(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn outcome_str(o: StageOutcome) -> &'static str {
    match o {
        StageOutcome::Ran => "ran",
        StageOutcome::SkippedUpToDate => "skip (up to date)",
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Ok(out) = std::env::var(OUT_ENV) {
        if !out.is_empty() {
            cfg.out_dir = PathBuf::from(out);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn clear_stage_records(cfg: &ExperimentConfig) -> std::io::Result<()> {
    // --force: drop run records so every stage re-executes.
    let walk = |dir: PathBuf| -> std::io::Result<()> {
        if !dir.exists() {
            return Ok(());
        }
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let p = entry.path();
            if p.is_dir() {
                let record = p.join("run.json");
                if record.exists() {
                    std::fs::remove_file(record)?;
                }
                for sub in std::fs::read_dir(&p)? {
                    let sub = sub?.path();
                    let record = sub.join("run.json");
                    if sub.is_dir() && record.exists() {
                        std::fs::remove_file(record)?;
                    }
                }
            }
        }
        Ok(())
    };
    walk(cfg.out_dir.clone())
}

fn for_each_fold(
    cli: &Cli,
    cfg: &ExperimentConfig,
    mut f: impl FnMut(usize) -> Result<StageOutcome, Error>,
    name: &str,
) -> Result<(), Error> {
    let folds: Vec<usize> = match cli.fold {
        Some(k) => vec![k],
        None => (0..cfg.folds).collect(),
    };
    for fold in folds {
        let started = std::time::Instant::now();
        let outcome = f(fold)?;
        println!(
            "[{}] {name} fold {fold} ({:.1}s)",
            outcome_str(outcome),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let threads = cfg.threads;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();
    if cli.force {
        clear_stage_records(&cfg)?;
    }
    let pipeline = Pipeline::new(cfg.clone())?;
    match cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
        }
        Command::Synth => {
            let started = std::time::Instant::now();
            let outcome = pipeline.synth()?;
            println!(
                "[{}] synth ({:.1}s)",
                outcome_str(outcome),
                started.elapsed().as_secs_f64()
            );
        }
        Command::TrainSemi => {
            for_each_fold(cli, &cfg, |f| pipeline.train_semi(f), "train-semi")?
        }
        Command::TrainReg => for_each_fold(cli, &cfg, |f| pipeline.train_reg(f), "train-reg")?,
        Command::Propagate => for_each_fold(cli, &cfg, |f| pipeline.propagate(f), "propagate")?,
        Command::Fuse => for_each_fold(cli, &cfg, |f| pipeline.fuse(f), "fuse")?,
        Command::TrainFinal => {
            for_each_fold(cli, &cfg, |f| pipeline.train_final(f), "train-final")?
        }
        Command::TrainBaseline => {
            for_each_fold(cli, &cfg, |f| pipeline.train_baseline(f), "train-baseline")?
        }
        Command::Evaluate => for_each_fold(
            cli,
            &cfg,
            |f| {
                let (outcome, eval) = pipeline.evaluate(f)?;
                let ours = colabseg::metrics::aggregate(&eval.ours)?;
                let fslcs = colabseg::metrics::aggregate(&eval.fslcs)?;
                println!(
                    "fold {f}: ours dice {:.4} +/- {:.4}, fs-lcs dice {:.4} +/- {:.4}",
                    ours.dice_mean, ours.dice_sd, fslcs.dice_mean, fslcs.dice_sd
                );
                Ok(outcome)
            },
            "evaluate",
        )?,
        Command::Crossval => {
            let started = std::time::Instant::now();
            let summary = pipeline.crossval()?;
            println!(
                "crossval finished in {:.1}s over {} folds",
                started.elapsed().as_secs_f64(),
                cfg.folds
            );
            print!("{}", summary.table_csv());
            println!(
                "tables written to {} (metrics_ours.csv, metrics_fslcs.csv, table1.csv)",
                cfg.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}
