//! `evp`: drive the text-conditioned depth pipeline from the shell.
//!
//! Exit codes: 0 on success, 1 for validation/usage/i-o problems, and 2
//! for numerical failures (non-finite values, aborted training, failed
//! gradient checks). All model work runs in f32; gradient checking is
//! f64 internally by construction.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evp_core::backbone::{compute_latent_std, latent_of_image};
use evp_core::config::RunConfig;
use evp_core::data::{gen_split, load_split, save_split, Sample, Split};
use evp_core::error::{Error, Result};
use evp_core::evpt;
use evp_core::suite::run_gradient_suite;
use evp_core::tensor::Tensor;
use evp_core::text::{aggregate, load_embeddings, save_embeddings, AggregationStrategy};
use evp_core::train::{check_dataset_compat, evaluate, load_checkpoint, train, Model, Predictor};

#[derive(Parser)]
#[command(name = "evp", version, about = "Desk-scale text-conditioned depth estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train and eval splits for a config
    GenData {
        /// Run config JSON (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Receives train/ and eval/ subdirectories
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Compute per-channel latent std over a saved split
    LatentStd {
        /// Run config JSON (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding one saved split
        #[arg(long)]
        data: PathBuf,
        /// Output EVPT file (rank-1 std vector)
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate embedding sets listed in a manifest
    Aggregate {
        /// One of: i, v, d, vd
        #[arg(long)]
        strategy: AggregationStrategy,
        /// One `id<TAB>path.evpt` line per image
        #[arg(long)]
        manifest: PathBuf,
        /// Receives the aggregated sets plus their manifest
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference sweep over every graph op and model stack
    Gradcheck {
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// Finite-difference probe step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train from a config and leave a checkpoint directory
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a saved split and write the report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors by default, which collides
            // with the numerical-failure code; remap to 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => gen_data(&load_config(config)?, &out),
        Cmd::LatentStd { config, data, out } => latent_std(&load_config(config)?, &data, &out),
        Cmd::Aggregate { strategy, manifest, out } => aggregate_sets(strategy, &manifest, &out),
        Cmd::Gradcheck { seed, eps } => gradcheck(seed, eps),
        Cmd::Train { config, out } => train_run(&RunConfig::load(config)?, &out),
        Cmd::Eval { checkpoint, data, report } => eval_run(&checkpoint, &data, &report),
    }
}

fn load_config(path: Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let spec = cfg.data_spec();
    for (split, count, sub) in [
        (Split::Train, cfg.data.train_count, "train"),
        (Split::Eval, cfg.data.eval_count, "eval"),
    ] {
        let dir = out.join(sub);
        let samples: Vec<Sample<f32>> = gen_split(&spec, split, count)?;
        save_split(&dir, &spec, split, &samples)?;
        println!("{sub}: {count} samples -> {}", dir.display());
    }
    Ok(())
}

fn latent_std(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (meta, samples) = load_split::<f32>(data)?;
    check_dataset_compat(cfg, &meta)?;
    // Model::init is the single source of truth for extractor wiring
    // and seeding; the unused heads cost nothing at this scale.
    let model: Model<f32> = Model::init(cfg)?;
    let latents = samples
        .iter()
        .map(|s| latent_of_image(&model.store, &model.stub, &s.image))
        .collect::<Result<Vec<Tensor<f32>>>>()?;
    let stats = compute_latent_std(&latents)?;
    evpt::write_file(out, &stats.std)?;
    println!("latent std over {} samples -> {}", samples.len(), out.display());
    Ok(())
}

fn aggregate_sets(strategy: AggregationStrategy, manifest: &Path, out: &Path) -> Result<()> {
    let sets = load_embeddings::<f32>(manifest)?;
    let outputs = aggregate(&sets, strategy)?;
    let mpath = save_embeddings(&outputs, out)?;
    println!("{} -> {} set(s), manifest {}", sets.len(), outputs.len(), mpath.display());
    Ok(())
}

fn gradcheck(seed: u64, eps: f64) -> Result<()> {
    let report = run_gradient_suite(seed, eps, &mut |line| println!("{line}"))?;
    println!(
        "{} entries, {} probes, {:.2}s",
        report.entries.len(),
        report.total_probes(),
        report.seconds
    );
    if !report.all_passed() {
        let worst = report
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| format!("{} ({:.3e})", e.name, e.max_rel_err))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::GradientMismatch(worst));
    }
    Ok(())
}

fn train_run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (_, outcome) = train::<f32>(cfg, out, &mut |line| println!("{line}"))?;
    println!("checkpoint -> {}", outcome.checkpoint.display());
    Ok(())
}

fn eval_run(checkpoint: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let (meta, samples) = load_split::<f32>(data)?;
    check_dataset_compat(&model.cfg, &meta)?;
    let report = evaluate(&Predictor::Model(&model), &samples, &model.cfg)?;
    let text = report.to_text();
    std::fs::write(report_path, &text).map_err(|e| Error::io(report_path, e))?;
    print!("{text}");
    Ok(())
}
