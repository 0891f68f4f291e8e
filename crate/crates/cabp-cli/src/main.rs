//! `cabp` command line: train runs, the static memory model, single-batch
//! memory characterization, and gradient-sensitivity reports.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data or format error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cabp::analysis::{epoch_similarity, first_batch, first_step_similarity, ReportMeta};
use cabp::checkpoint;
use cabp::config::{parse_kernel, parse_kernel_flag, RunConfig};
use cabp::data::{load_dataset, synthetic_dataset, Dataset, DatasetKind};
use cabp::ledger::{footprint_report, MemoryLedger, PointsOfInterest, Snapshot, MIB};
use cabp::memmodel::static_model;
use cabp::model::resnet::{Arch, ResNetConfig};
use cabp::model::Network;
use cabp::scalar::{Dtype, Scalar};
use cabp::tensor::AllocCategory;
use cabp::train::{train, GradSnapshotMode, TrainConfig};
use cabp::Error;

const DATA_DIR_ENV: &str = "CABP_DATA_DIR";

#[derive(Parser)]
#[command(name = "cabp", version, about = "CNN training with pooled activation storage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, ledger trace, and a checkpoint.
    Train(TrainArgs),
    /// Per-layer W/X/Z byte table for an architecture, without running it.
    MemoryModel(MemoryModelArgs),
    /// Run one mini-batch and report the five memory points of interest.
    Characterize(CharacterizeArgs),
    /// Compare weight gradients of a baseline and a compressed run.
    Sensitivity(SensitivityArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (default: config path, else $CABP_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for metrics.csv, ledger.csv, checkpoint_final.cabp.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Pooling kernel KxK (or KhxKw), or `off` for the baseline.
    #[arg(long)]
    compress: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MemoryModelArgs {
    /// resnet18, resnet18c, or resnet8c.
    #[arg(long, default_value = "resnet18")]
    arch: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Input resolution HxW (default: the architecture's native size).
    #[arg(long)]
    res: Option<String>,
    /// Comma-separated pooling kernels for the Z columns.
    #[arg(long, default_value = "2x2,4x4")]
    compress: String,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CharacterizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pooling kernel override, as in `train --compress`.
    #[arg(long)]
    compress: Option<String>,
    /// Device capacities in GB for the fit verdicts.
    #[arg(long, default_value = "8,12,16,24")]
    devices: String,
    /// Also write the full allocation trace here (ledger.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pooling kernel for the compressed run (default from config, else 2x2).
    #[arg(long)]
    compress: Option<String>,
    #[arg(long, value_enum, default_value_t = Mode::FirstStep)]
    mode: Mode,
    /// In one-epoch mode, accumulate gradients over the epoch instead of
    /// taking the final mini-batch.
    #[arg(long)]
    accumulate: bool,
    /// Output directory for similarity.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    FirstStep,
    OneEpoch,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("error: usage: {}", e.kind());
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::MemoryModel(args) => cmd_memory_model(args),
        Command::Characterize(args) => cmd_characterize(args),
        Command::Sensitivity(args) => cmd_sensitivity(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArch(_) => 1,
        Error::Io(_) | Error::DataFormat(_) | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn resolve_dataset(config: &RunConfig, flag_path: &Option<PathBuf>) -> Result<Dataset, Error> {
    let dataset = match config.data.kind {
        DatasetKind::Synthetic => synthetic_dataset(&config.data.synthetic),
        kind => {
            let path = flag_path
                .clone()
                .or_else(|| config.data.path.clone())
                .or_else(|| std::env::var(DATA_DIR_ENV).ok().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "dataset kind needs a path: pass --data, set [data] path, or ${DATA_DIR_ENV}"
                    ))
                })?;
            load_dataset(&path, kind)?
        }
    };
    Ok(dataset.truncated(config.data.limit))
}

fn build_network<S: Scalar>(
    config: &RunConfig,
    policy: cabp::model::CompressionPolicy,
    ledger: &mut MemoryLedger,
) -> Result<Network<S>, Error> {
    let (h, w) = config.resolution();
    let rc = ResNetConfig {
        classes: config.model.classes,
        input_channels: config.model.input_channels,
        input_hw: (h, w),
        policy,
        seed: config.train.seed,
    };
    config.model.arch.build(&rc, ledger)
}

fn apply_train_overrides(config: &mut RunConfig, args: &TrainArgs) -> Result<(), Error> {
    if let Some(compress) = &args.compress {
        config.compression.kernel = parse_kernel_flag(compress)?;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(data) = &args.data {
        config.data.path = Some(data.clone());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut config = load_config(&args.config)?;
    apply_train_overrides(&mut config, &args)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("effective_config"), config.to_effective_string())?;
    let dataset = resolve_dataset(&config, &args.data)?;
    match config.dtype {
        Dtype::F32 => run_train::<f32>(&config, &dataset, &args.out),
        Dtype::F64 => run_train::<f64>(&config, &dataset, &args.out),
    }
}

fn run_train<S: Scalar>(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<(), Error> {
    let norm = config.normalization(dataset.channels)?;
    let mut ledger = MemoryLedger::new();
    let mut net = build_network::<S>(config, config.policy(), &mut ledger)?;
    let result = train(&mut net, dataset, &norm, &config.train, &mut ledger, None)?;

    let mut metrics = Vec::new();
    cabp::train::write_metrics_csv(&result.metrics, &mut metrics)?;
    fs::write(out.join("metrics.csv"), metrics)?;
    let mut trace = Vec::new();
    ledger.write_trace(&mut trace)?;
    fs::write(out.join("ledger.csv"), trace)?;
    checkpoint::save_params(out.join("checkpoint_final.cabp"), &net.params)?;

    for (epoch, loss) in result.epoch_mean_loss.iter().enumerate() {
        println!("epoch {epoch}: mean loss {loss:.6}");
    }
    if let Some(points) = result.epoch_points.last() {
        println!("forward peak: {:.2} MiB", points.forward_peak.total as f64 / MIB);
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn cmd_memory_model(args: MemoryModelArgs) -> Result<(), Error> {
    let arch = Arch::parse(&args.arch)?;
    let (h, w) = match &args.res {
        Some(r) => parse_kernel(r).map_err(|_| Error::Config(format!("bad resolution '{r}'")))?,
        None => arch.default_input_hw(),
    };
    let mut kernels = Vec::new();
    for part in args.compress.split(',').filter(|s| !s.trim().is_empty()) {
        kernels.push(parse_kernel(part.trim())?);
    }
    if kernels.is_empty() {
        return Err(Error::Config("--compress needs at least one kernel".into()));
    }
    let classes = if arch == Arch::ResNet18 { 1000 } else { 10 };
    let mut ledger = MemoryLedger::new();
    let rc = ResNetConfig {
        classes,
        input_channels: 3,
        input_hw: (h, w),
        policy: cabp::model::CompressionPolicy::off(),
        seed: 0,
    };
    let net: Network<f32> = arch.build(&rc, &mut ledger)?;
    let model = static_model(&net, args.batch, (3, h, w), &kernels)?;
    let mut csv = Vec::new();
    model.write_csv(&mut csv)?;
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}

fn print_points(points: &PointsOfInterest) {
    let cat = |s: &Snapshot, c: AllocCategory| s.category(c) as f64 / MIB;
    println!("point,total_mib,parameter_mib,activation_mib,gradient_mib,optimizer_state_mib,input_mib,scratch_mib");
    for (label, snap) in points.labeled() {
        println!(
            "{label},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            snap.total as f64 / MIB,
            cat(snap, AllocCategory::Parameter),
            cat(snap, AllocCategory::Activation),
            cat(snap, AllocCategory::Gradient),
            cat(snap, AllocCategory::OptimizerState),
            cat(snap, AllocCategory::Input),
            cat(snap, AllocCategory::Scratch),
        );
    }
}

fn cmd_characterize(args: CharacterizeArgs) -> Result<(), Error> {
    let mut config = load_config(&args.config)?;
    if let Some(compress) = &args.compress {
        config.compression.kernel = parse_kernel_flag(compress)?;
    }
    let mut devices = Vec::new();
    for part in args.devices.split(',').filter(|s| !s.trim().is_empty()) {
        devices.push(
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad device capacity '{part}'")))?,
        );
    }
    let dataset = resolve_dataset(&config, &None)?;
    let points = match config.dtype {
        Dtype::F32 => run_characterize::<f32>(&config, &dataset, args.out.as_deref())?,
        Dtype::F64 => run_characterize::<f64>(&config, &dataset, args.out.as_deref())?,
    };
    print_points(&points);
    let report = footprint_report(&points, &devices)?;
    println!("activation_share,{:.4}", report.activation_share);
    for v in &report.verdicts {
        println!(
            "device_fit,{} GB,{}",
            v.capacity_gb,
            if v.fits { "yes" } else { "no" }
        );
    }
    Ok(())
}

fn run_characterize<S: Scalar>(
    config: &RunConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<PointsOfInterest, Error> {
    let norm = config.normalization(dataset.channels)?;
    let mut ledger = MemoryLedger::new();
    let mut net = build_network::<S>(config, config.policy(), &mut ledger)?;
    let model_init = ledger.snapshot();
    let (input, labels) = first_batch::<S>(dataset, config.train.batch_size, &norm)?;
    ledger.alloc(AllocCategory::Input, input.byte_size(), "input_batch");
    let input_init = ledger.snapshot();
    let mut optimizer = cabp::train::SgdMomentum::new(config.train.momentum);
    let outcome = cabp::train::train_step(
        &mut net,
        &input,
        &labels,
        &mut optimizer,
        config.train.base_lr,
        &mut ledger,
        0,
        0,
        None,
    )?;
    ledger.free(AllocCategory::Input, input.byte_size(), "input_batch")?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut trace = Vec::new();
        ledger.write_trace(&mut trace)?;
        fs::write(dir.join("ledger.csv"), trace)?;
    }
    Ok(PointsOfInterest {
        model_init,
        input_init,
        forward_peak: outcome.forward_peak,
        after_backward: outcome.after_backward,
        optimizer_peak: outcome.optimizer_peak,
    })
}

fn cmd_sensitivity(args: SensitivityArgs) -> Result<(), Error> {
    let mut config = load_config(&args.config)?;
    if let Some(compress) = &args.compress {
        config.compression.kernel = parse_kernel_flag(compress)?;
    }
    if config.compression.kernel.is_none() {
        config.compression.kernel = Some((2, 2));
    }
    let dataset = resolve_dataset(&config, &None)?;
    let report = match config.dtype {
        Dtype::F32 => run_sensitivity::<f32>(&config, &dataset, args.mode, args.accumulate)?,
        Dtype::F64 => run_sensitivity::<f64>(&config, &dataset, args.mode, args.accumulate)?,
    };
    fs::create_dir_all(&args.out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(args.out.join("similarity.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn run_sensitivity<S: Scalar>(
    config: &RunConfig,
    dataset: &Dataset,
    mode: Mode,
    accumulate: bool,
) -> Result<cabp::analysis::GradSimilarityReport, Error> {
    let norm = config.normalization(dataset.channels)?;
    let mut ledger_a = MemoryLedger::new();
    let mut ledger_b = MemoryLedger::new();
    let baseline_policy = cabp::model::CompressionPolicy {
        default: cabp::ops::SavePolicy::Full,
        exempt_patterns: config.compression.exempt.clone(),
        overrides: Vec::new(),
    };
    let mut baseline = build_network::<S>(config, baseline_policy, &mut ledger_a)?;
    let mut compressed = build_network::<S>(config, config.policy(), &mut ledger_b)?;
    let kernel = config.compression.kernel.expect("kernel resolved");
    let meta = ReportMeta {
        policy: format!("pooled{}x{}", kernel.0, kernel.1),
        seed: config.train.seed,
        epochs: if mode == Mode::OneEpoch { 1 } else { 0 },
        mode: match (mode, accumulate) {
            (Mode::FirstStep, _) => "first-step".into(),
            (Mode::OneEpoch, false) => "one-epoch".into(),
            (Mode::OneEpoch, true) => "one-epoch-accumulated".into(),
        },
    };
    match mode {
        Mode::FirstStep => {
            let (input, labels) = first_batch::<S>(dataset, config.train.batch_size, &norm)?;
            first_step_similarity(&mut baseline, &mut compressed, &input, &labels, meta)
        }
        Mode::OneEpoch => {
            let mut train_cfg = TrainConfig { epochs: 1, ..config.train.clone() };
            train_cfg.fixed_order = true;
            train_cfg.augment = false;
            let snapshot = if accumulate {
                GradSnapshotMode::Accumulate
            } else {
                GradSnapshotMode::FinalBatch
            };
            epoch_similarity(&mut baseline, &mut compressed, dataset, &norm, &train_cfg, snapshot, meta)
        }
    }
}
