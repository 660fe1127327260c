//! Command-line entry points: training, evaluation, side-by-side
//! architecture ablations, and a CPU inference benchmark.
//!
//! Every command writes machine-parseable JSON to stdout and line-oriented
//! human logs to stderr. Exit codes: 0 success, 2 usage error, 3 data error,
//! 4 checkpoint error, 1 anything else.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ferlite::bench::{run_bench, BenchOptions};
use ferlite::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
use ferlite::data::{load_dataset, DataError, Dataset, PreprocessSpec};
use ferlite::model::{build, count_params, EcaPlacement, ModelConfig, ParamCount};
use ferlite::training::{
    evaluate, train_epoch, AdamaxState, LossReduction, MirrorTrain, TrainConfig, TrainError,
};
use ferlite::ShapeError;

#[derive(Parser)]
#[command(
    name = "ferlite",
    version,
    about = "Lightweight facial-expression recognition: train, evaluate, ablate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a labeled manifest and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled manifest.
    Eval(EvalArgs),
    /// Benchmark single-image inference throughput on this machine.
    Bench(BenchArgs),
    /// Train and evaluate the architecture variants under a shared budget.
    Ablate(AblateArgs),
}

/// Architecture switches shared by every subcommand.
#[derive(Args)]
struct ModelFlags {
    /// Number of expression classes.
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    /// Width of each head's feature vector.
    #[arg(long, default_value_t = 256)]
    feature_dim: usize,
    /// Disable channel attention.
    #[arg(long)]
    no_eca: bool,
    /// One attention block on the full map before partitioning, instead of
    /// one per branch after it.
    #[arg(long, conflicts_with = "no_eca")]
    eca_before_partition: bool,
    /// Classify from the global map alone (no patch ensemble).
    #[arg(long)]
    no_ensemble: bool,
    /// Drop the global branch, keeping only the four local patches.
    #[arg(long, conflicts_with = "no_ensemble")]
    no_global: bool,
}

impl ModelFlags {
    fn to_config(&self) -> Result<ModelConfig, CliError> {
        let config = ModelConfig {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            eca_enabled: !self.no_eca,
            eca_placement: if self.eca_before_partition {
                EcaPlacement::BeforePartition
            } else {
                EcaPlacement::AfterPartition
            },
            global_head: !self.no_global,
            ensemble: !self.no_ensemble,
            ..ModelConfig::default()
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MirrorTrainArg {
    Augment,
    Double,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossReductionArg {
    Sum,
    Mean,
}

#[derive(Args)]
struct TrainArgs {
    /// CSV manifest of training records, one `image_path,label` per line.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional manifest evaluated (mirrored) after every epoch.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Initialize parameters from an existing checkpoint before training.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Let --init-from cover only a subset of parameters (e.g. a pretrained
    /// base without heads); the rest keep their fresh initialization.
    #[arg(long, requires = "init_from")]
    init_partial: bool,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Learning rate for the shared convolutional base.
    #[arg(long, default_value_t = 0.001)]
    lr_base: f32,
    /// Learning rate for attention and head parameters.
    #[arg(long, default_value_t = 0.01)]
    lr_head: f32,
    #[arg(long, default_value_t = 4e-5)]
    weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable class-balancing oversampling.
    #[arg(long)]
    no_oversample: bool,
    /// Horizontal-flip handling during training.
    #[arg(long, value_enum, default_value_t = MirrorTrainArg::Augment)]
    mirror_train: MirrorTrainArg,
    /// How per-head losses combine.
    #[arg(long, value_enum, default_value_t = LossReductionArg::Sum)]
    loss_reduction: LossReductionArg,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV manifest of labeled records to evaluate.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to evaluate; must match the model flags.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Predict from the image alone instead of averaging with its mirror.
    #[arg(long)]
    no_mirror: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; freshly initialized weights are used when absent
    /// (weights do not affect timing).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Timed frames per lane.
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    /// Untimed frames run first to settle caches and the allocator.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Concurrent inference lanes sharing the same frozen parameters.
    #[arg(long, default_value_t = 1)]
    lanes: usize,
    /// Time bare forward passes instead of the mirrored two-forward protocol.
    #[arg(long)]
    no_mirror: bool,
    /// Seed for the fixed random benchmark input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// CSV manifest the variants train on.
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest the variants are scored on; defaults to the training one.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Shared training budget per variant.
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr_base: f32,
    #[arg(long, default_value_t = 0.01)]
    lr_head: f32,
    #[arg(long, default_value_t = 4e-5)]
    weight_decay: f32,
    /// Shared seed: every variant initializes and shuffles identically.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of expression classes.
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    /// Width of each head's feature vector.
    #[arg(long, default_value_t = 256)]
    feature_dim: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(DataError),
    Checkpoint(CheckpointError),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Checkpoint(e) => write!(f, "{e}"),
            CliError::Internal(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e)
    }
}

impl From<ShapeError> for CliError {
    fn from(e: ShapeError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Data(d),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn emit_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_labeled(manifest: &Path, num_classes: usize) -> Result<Dataset, CliError> {
    Ok(load_dataset(manifest, num_classes, &PreprocessSpec::default())?)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a Path,
    epochs_run: usize,
    epoch_loss: Vec<f64>,
    final_loss: Option<f64>,
    val_accuracy: Option<Vec<f64>>,
    params: ParamCount,
    config: &'a ModelConfig,
    train_config: &'a TrainConfig,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = args.model.to_config()?;
    let train_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        lr_base: args.lr_base,
        lr_rest: args.lr_head,
        weight_decay: args.weight_decay,
        oversample: !args.no_oversample,
        mirror_train: match args.mirror_train {
            MirrorTrainArg::Augment => MirrorTrain::Augment,
            MirrorTrainArg::Double => MirrorTrain::Double,
            MirrorTrainArg::Off => MirrorTrain::Off,
        },
        loss_reduction: match args.loss_reduction {
            LossReductionArg::Sum => LossReduction::Sum,
            LossReductionArg::Mean => LossReduction::Mean,
        },
    };
    if train_config.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be >= 1".into()));
    }
    eprintln!(
        "train: epochs={} batch={} lr-base={} lr-head={} wd={:e} seed={}",
        train_config.epochs,
        train_config.batch_size,
        train_config.lr_base,
        train_config.lr_rest,
        train_config.weight_decay,
        train_config.seed,
    );

    let mut params = build(&config, args.seed)?;
    if let Some(init) = &args.init_from {
        apply_checkpoint(&mut params, init, args.init_partial)?;
        eprintln!("initialized from {}", init.display());
    }

    let dataset = load_labeled(&args.manifest, config.num_classes)?;
    eprintln!("loaded {} training samples", dataset.len());
    let eval_set = match &args.eval_manifest {
        Some(path) => Some(load_labeled(path, config.num_classes)?),
        None => None,
    };

    let mut state = AdamaxState::new();
    let mut epoch_loss = Vec::with_capacity(train_config.epochs);
    let mut val_accuracy = eval_set.as_ref().map(|_| Vec::with_capacity(train_config.epochs));
    for epoch in 0..train_config.epochs {
        let loss = train_epoch(&mut params, &mut state, &dataset, &config, &train_config, epoch)?;
        epoch_loss.push(loss);
        let mut line = format!("epoch {:>3}/{}: loss {loss:.6}", epoch + 1, train_config.epochs);
        if let (Some(set), Some(accs)) = (&eval_set, val_accuracy.as_mut()) {
            let report = evaluate(&params, &config, set, true)?;
            accs.push(report.accuracy);
            line.push_str(&format!("  val-accuracy {:.4}", report.accuracy));
        }
        eprintln!("{line}");
    }

    save_checkpoint(&params, &args.checkpoint)?;
    eprintln!("wrote {}", args.checkpoint.display());
    emit_json(&TrainSummary {
        checkpoint: &args.checkpoint,
        epochs_run: train_config.epochs,
        final_loss: epoch_loss.last().copied(),
        epoch_loss,
        val_accuracy,
        params: count_params(&params),
        config: &config,
        train_config: &train_config,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let config = args.model.to_config()?;
    let params = load_checkpoint(&args.checkpoint, &config)?;
    let dataset = load_labeled(&args.manifest, config.num_classes)?;
    eprintln!(
        "evaluating {} samples ({})",
        dataset.len(),
        if args.no_mirror { "plain" } else { "mirrored" }
    );
    let report = evaluate(&params, &config, &dataset, !args.no_mirror)?;
    eprintln!("accuracy {:.4}", report.accuracy);
    emit_json(&report)
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let config = args.model.to_config()?;
    let params = match &args.checkpoint {
        Some(path) => load_checkpoint(path, &config)?,
        None => {
            eprintln!("no checkpoint given; timing freshly initialized weights");
            build(&config, args.seed)?
        }
    };
    let options = BenchOptions {
        iterations: args.iterations,
        warmup: args.warmup,
        lanes: args.lanes,
        mirror: !args.no_mirror,
        seed: args.seed,
        ..BenchOptions::default()
    };
    if options.iterations == 0 || options.lanes == 0 {
        return Err(CliError::Usage("--iterations and --lanes must be >= 1".into()));
    }
    let report = run_bench(&params, &config, &options)?;
    eprintln!(
        "single lane {:.1} fps, {} lanes aggregate {:.1} fps (published i7 reference: {} fps)",
        report.single_lane_fps, report.lanes, report.aggregate_fps, report.reference_fps_intel_i7,
    );
    emit_json(&report)
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    accuracy: f64,
    final_loss: Option<f64>,
    params: usize,
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let base = ModelConfig {
        num_classes: args.num_classes,
        feature_dim: args.feature_dim,
        ..ModelConfig::default()
    };
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if args.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be >= 1".into()));
    }
    let variants: [(&'static str, ModelConfig); 5] = [
        ("default", base.clone()),
        ("no-eca", ModelConfig { eca_enabled: false, ..base.clone() }),
        ("no-ensemble", ModelConfig { ensemble: false, ..base.clone() }),
        ("no-global", ModelConfig { global_head: false, ..base.clone() }),
        (
            "eca-before-partition",
            ModelConfig { eca_placement: EcaPlacement::BeforePartition, ..base.clone() },
        ),
    ];
    let train_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        lr_base: args.lr_base,
        lr_rest: args.lr_head,
        weight_decay: args.weight_decay,
        ..TrainConfig::default()
    };

    let train_set = load_labeled(&args.manifest, args.num_classes)?;
    let eval_set = match &args.eval_manifest {
        Some(path) => Some(load_labeled(path, args.num_classes)?),
        None => None,
    };
    let score_set = eval_set.as_ref().unwrap_or(&train_set);
    eprintln!(
        "ablation: {} variants, {} epochs each, {} train / {} eval samples",
        variants.len(),
        train_config.epochs,
        train_set.len(),
        score_set.len(),
    );

    let mut rows = Vec::with_capacity(variants.len());
    for (name, config) in &variants {
        let mut params = build(config, args.seed)?;
        let mut state = AdamaxState::new();
        let mut last_loss = None;
        for epoch in 0..train_config.epochs {
            last_loss =
                Some(train_epoch(&mut params, &mut state, &train_set, config, &train_config, epoch)?);
        }
        let report = evaluate(&params, config, score_set, true)?;
        eprintln!(
            "{name}: accuracy {:.4}{}",
            report.accuracy,
            last_loss.map_or(String::new(), |l| format!(", final loss {l:.6}")),
        );
        rows.push(AblationRow {
            variant: name,
            accuracy: report.accuracy,
            final_loss: last_loss,
            params: count_params(&params).total,
        });
    }
    emit_json(&rows)
}
