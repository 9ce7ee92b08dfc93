//! `bankart <subcommand> --config run.json [--seed N] [--modality M] [--out DIR]`
//!
//! Exit codes: 0 success, 1 invalid input or missing prerequisite, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use bankart::data::Modality;
use bankart::pipeline::{self, Context, PipelineConfig, PipelineError};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bankart",
    version,
    about = "Slice-based shoulder MRI lesion classification pipeline"
)]
struct Cli {
    #[command(subcommand)]
    step: Step,
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cohort for train, predict, calibrate and evaluate.
    #[arg(long, global = true, value_enum)]
    modality: Option<ModalityArg>,
    /// Overrides the config's output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Step {
    /// Generate the synthetic phantom cohort.
    Synth,
    /// Patient-level stratified train/val/test split.
    Split,
    /// Fit intensity statistics on the training split.
    FitStats,
    /// Normalize and crop every series; persist augmented training copies.
    Preprocess,
    /// Train one model per view (optional pretrain, then fine-tune).
    Train,
    /// Pick the operating threshold on validation predictions.
    Calibrate,
    /// Score validation and test scans with every view model.
    Predict,
    /// Test-set metrics, bootstrap intervals and ROC curves.
    Evaluate,
    /// Cohort summary across modalities.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModalityArg {
    Standard,
    Arthrogram,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Standard => Modality::Standard,
            ModalityArg::Arthrogram => Modality::Arthrogram,
        }
    }
}

fn run(cli: &Cli) -> Result<String, PipelineError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::Config("--config <path> is required".into()))?;
    let config = PipelineConfig::read(path).map_err(|e| match e {
        PipelineError::Io { path, source } => {
            PipelineError::Config(format!("cannot read {}: {source}", path.display()))
        }
        other => other,
    })?;
    let ctx = Context::new(config, cli.seed, cli.out.clone(), cli.modality.map(Into::into))?;
    let root = ctx.layout.root.display().to_string();
    Ok(match cli.step {
        Step::Synth => format!("synth: {} studies under {root}", pipeline::synth(&ctx)?.records.len()),
        Step::Split => format!("split: {} studies assigned", pipeline::split(&ctx)?.records.len()),
        Step::FitStats => {
            pipeline::fit_stats(&ctx)?;
            format!("fit-stats: {}", ctx.layout.stats().display())
        }
        Step::Preprocess => format!("preprocess: {} studies", pipeline::preprocess(&ctx)?.records.len()),
        Step::Train => {
            let logs = pipeline::train(&ctx)?;
            let views: Vec<_> = logs
                .iter()
                .filter_map(|(v, logs)| logs.last().map(|l| (v, l)))
                .map(|(v, l)| {
                    format!(
                        "{} selected epoch {} of {}",
                        v.as_str(),
                        l.selected_epoch,
                        l.epochs.len()
                    )
                })
                .collect();
            format!("train: {}", views.join(", "))
        }
        Step::Predict => {
            let (val, test) = pipeline::predict(&ctx)?;
            format!("predict: {} val and {} test predictions", val.len(), test.len())
        }
        Step::Calibrate => {
            let t = pipeline::calibrate(&ctx)?;
            format!(
                "calibrate: threshold {} (sens {:.4}, spec {:.4})",
                t.value, t.sens_at_threshold, t.spec_at_threshold
            )
        }
        Step::Evaluate => {
            let r = pipeline::evaluate(&ctx)?;
            format!(
                "evaluate: n={} auc={:.4} [{:.4}, {:.4}]",
                r.n, r.auc, r.auc_ci_95.0, r.auc_ci_95.1
            )
        }
        Step::Report => {
            let summary = pipeline::report(&ctx)?;
            format!(
                "report: {} evaluations in {}",
                summary.evaluations.len(),
                ctx.layout.summary().display()
            )
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
