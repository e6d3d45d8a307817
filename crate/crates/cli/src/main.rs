//! Pipeline driver: each processing stage is a subcommand; `run` executes
//! the full configured pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ivkit_cli::config::{FeatureChoice, PipelineConfig};
use ivkit_cli::init_workers;
use ivkit_cli::stages::{self, Ctx};

#[derive(Parser)]
#[command(
    name = "ivkit",
    about = "Speaker-verification pipeline: features, UBM, i-vectors, PLDA, scoring, metrics",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "ivkit.toml")]
    config: PathBuf,

    /// Worker threads for per-utterance stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, clap::Args)]
struct SubsystemArg {
    /// Subsystem name from the config ([[subsystem]] entries).
    #[arg(long)]
    subsystem: String,
}

#[derive(Clone, clap::Args)]
struct KindArg {
    /// Feature stream to process (mfcc|plp).
    #[arg(long, value_parser = parse_kind)]
    kind: String,
}

fn parse_kind(s: &str) -> Result<String, String> {
    match s {
        "mfcc" | "plp" => Ok(s.to_string()),
        other => Err(format!("unknown feature kind '{other}' (mfcc|plp)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic i-vector corpus and trial key.
    Synth,
    /// Compute MFCC or PLP features (deltas + CMN) for every utterance.
    ExtractFeatures(KindArg),
    /// Energy-based voice activity detection over stored features.
    Vad(KindArg),
    /// Train the full-covariance UBM for one feature stream.
    TrainUbm(KindArg),
    /// Estimate the coupled MFCC UBM from PLP-UBM responsibilities.
    CoupleUbm,
    /// Accumulate Baum-Welch statistics for a subsystem.
    Stats(SubsystemArg),
    /// Train the total-variability matrix.
    TrainTv(SubsystemArg),
    /// Extract i-vectors for every data set.
    ExtractIvec(SubsystemArg),
    /// Fit the within-class whitening (LW) transform.
    FitLw(SubsystemArg),
    /// Apply LW normalization to every data set.
    ApplyLw(SubsystemArg),
    /// Fit the inter-dataset variability subspace.
    FitIdvc(SubsystemArg),
    /// Remove the IDVC subspace and re-length-normalize.
    ApplyIdvc(SubsystemArg),
    /// Fit the development mean and shift test vectors.
    MeanShift(SubsystemArg),
    /// Train the PLDA between/within covariances.
    TrainPlda(SubsystemArg),
    /// Fit the diagonalizing post-normalization and transform trial sides.
    Postnorm(SubsystemArg),
    /// Score every trial in the key file.
    Score(SubsystemArg),
    /// Mean-fuse the configured member systems' scores.
    Fuse,
    /// Compute EER and minC_primary for a score file.
    Evaluate {
        /// Subsystem whose scores to evaluate; "fusion" evaluates the
        /// fused score file.
        #[arg(long)]
        subsystem: String,
    },
    /// Execute the full configured pipeline.
    Run {
        /// Run a single named stage instead of the whole pipeline
        /// (e.g. "train-plda:sys1", "vad:mfcc", "synth", "fuse").
        #[arg(long)]
        stage: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };

    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(classify_error(&e))
        }
    }
}

/// Map failures onto the documented exit codes.
fn classify_error(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<ivkit_core::Error>() {
            return if core.is_numerical() { 3 } else { 2 };
        }
    }
    let text = format!("{e:#}");
    if text.contains("config") || text.contains("unknown subsystem") || text.contains("stage") {
        1
    } else {
        2
    }
}

fn kind_of(arg: &KindArg) -> FeatureChoice {
    match arg.kind.as_str() {
        "plp" => FeatureChoice::Plp,
        _ => FeatureChoice::Mfcc,
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    init_workers(config.workers);
    let ctx = Ctx::new(config);

    match cli.command {
        Command::Synth => stages::stage_synth(&ctx),
        Command::ExtractFeatures(kind) => stages::stage_extract_features(&ctx, kind_of(&kind)),
        Command::Vad(kind) => stages::stage_vad(&ctx, kind_of(&kind)),
        Command::TrainUbm(kind) => stages::stage_train_ubm(&ctx, kind_of(&kind)),
        Command::CoupleUbm => stages::stage_couple_ubm(&ctx),
        Command::Stats(arg) => with_sub(&ctx, &arg, stages::stage_stats),
        Command::TrainTv(arg) => with_sub(&ctx, &arg, stages::stage_train_tv),
        Command::ExtractIvec(arg) => with_sub(&ctx, &arg, stages::stage_extract_ivec),
        Command::FitLw(arg) => with_sub(&ctx, &arg, stages::stage_fit_lw),
        Command::ApplyLw(arg) => with_sub(&ctx, &arg, stages::stage_apply_lw),
        Command::FitIdvc(arg) => with_sub(&ctx, &arg, stages::stage_fit_idvc),
        Command::ApplyIdvc(arg) => with_sub(&ctx, &arg, stages::stage_apply_idvc),
        Command::MeanShift(arg) => with_sub(&ctx, &arg, stages::stage_mean_shift),
        Command::TrainPlda(arg) => with_sub(&ctx, &arg, stages::stage_train_plda),
        Command::Postnorm(arg) => with_sub(&ctx, &arg, stages::stage_postnorm),
        Command::Score(arg) => with_sub(&ctx, &arg, stages::stage_score),
        Command::Fuse => stages::stage_fuse(&ctx),
        Command::Evaluate { subsystem } => {
            let path = if subsystem == "fusion" {
                ctx.work().join("fused.scores.txt")
            } else {
                ctx.config.subsystem(&subsystem)?;
                ctx.work().join(format!("sub-{subsystem}")).join("scores.txt")
            };
            stages::stage_evaluate(&ctx, &subsystem, &path)?;
            Ok(())
        }
        Command::Run { stage } => match stage {
            None => {
                stages::run_pipeline(&ctx)?;
                Ok(())
            }
            Some(spec) => run_single_stage(&ctx, &spec),
        },
    }
}

fn with_sub(
    ctx: &Ctx,
    arg: &SubsystemArg,
    stage: fn(&Ctx, &ivkit_cli::config::Subsystem) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let sub = ctx.config.subsystem(&arg.subsystem)?.clone();
    stage(ctx, &sub)
}

/// Dispatch "stage" or "stage:qualifier" names used by `run --stage`.
fn run_single_stage(ctx: &Ctx, spec: &str) -> anyhow::Result<()> {
    let (stage, qualifier) = match spec.split_once(':') {
        Some((s, q)) => (s, Some(q)),
        None => (spec, None),
    };
    let kind = |q: Option<&str>| -> anyhow::Result<FeatureChoice> {
        match q {
            Some("plp") => Ok(FeatureChoice::Plp),
            Some("mfcc") | None => Ok(FeatureChoice::Mfcc),
            Some(other) => anyhow::bail!("unknown feature kind '{other}'"),
        }
    };
    let sub = |q: Option<&str>| -> anyhow::Result<ivkit_cli::config::Subsystem> {
        let name = q.ok_or_else(|| anyhow::anyhow!("stage '{stage}' needs ':<subsystem>'"))?;
        Ok(ctx.config.subsystem(name)?.clone())
    };
    match stage {
        "synth" => stages::stage_synth(ctx),
        "extract-features" => stages::stage_extract_features(ctx, kind(qualifier)?),
        "vad" => stages::stage_vad(ctx, kind(qualifier)?),
        "train-ubm" => stages::stage_train_ubm(ctx, kind(qualifier)?),
        "couple-ubm" => stages::stage_couple_ubm(ctx),
        "stats" => stages::stage_stats(ctx, &sub(qualifier)?),
        "train-tv" => stages::stage_train_tv(ctx, &sub(qualifier)?),
        "extract-ivec" => stages::stage_extract_ivec(ctx, &sub(qualifier)?),
        "fit-lw" => stages::stage_fit_lw(ctx, &sub(qualifier)?),
        "apply-lw" => stages::stage_apply_lw(ctx, &sub(qualifier)?),
        "fit-idvc" => stages::stage_fit_idvc(ctx, &sub(qualifier)?),
        "apply-idvc" => stages::stage_apply_idvc(ctx, &sub(qualifier)?),
        "mean-shift" => stages::stage_mean_shift(ctx, &sub(qualifier)?),
        "no-shift" => stages::stage_no_shift(ctx, &sub(qualifier)?),
        "train-plda" => stages::stage_train_plda(ctx, &sub(qualifier)?),
        "postnorm" => stages::stage_postnorm(ctx, &sub(qualifier)?),
        "score" => stages::stage_score(ctx, &sub(qualifier)?),
        "fuse" => stages::stage_fuse(ctx),
        "evaluate" => {
            let name = qualifier.unwrap_or("fusion");
            let path = if name == "fusion" {
                ctx.work().join("fused.scores.txt")
            } else {
                ctx.work().join(format!("sub-{name}")).join("scores.txt")
            };
            stages::stage_evaluate(ctx, name, &path)?;
            Ok(())
        }
        other => anyhow::bail!("unknown stage '{other}'"),
    }
}
