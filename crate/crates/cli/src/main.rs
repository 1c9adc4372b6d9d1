//! `lpr`: cost reports, gradient checks, distillation and ablation studies,
//! toy training and weights-file round trips.
//!
//! Reports go to stdout as TSV, diagnostics to stderr. Exit codes: 0 success,
//! 1 check failure, 2 usage or input error, 3 numeric error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lprnet::arch::{parse_arch, ArchitectureSpec, FeatureShape, WidthMult};
use lprnet::cost::cost_network;
use lprnet::experiments::{
    ablate, ablation_train_config, distill, synthetic_task, AblationVariant, DistillConfig,
};
use lprnet::layers::Layer;
use lprnet::network::Network;
use lprnet::train::{
    gradcheck_suite, load_cifar10_bin, synthetic_blobs, train, Dataset, EpochStats, FineTune,
    GradCheckOptions, OptimizerChoice, Schedule, TrainConfig,
};
use lprnet::weights::WeightsFile;
use lprnet::{Element, Error, Tensor4};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "lpr", version, about = "Low-rank pointwise residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer MACs and parameter counts of an architecture file
    Cost {
        arch: PathBuf,
        /// Derive LPR ranks as max(1, m / D)
        #[arg(long)]
        rank_div: Option<usize>,
        /// Channel width multiplier, e.g. 0.75 or 3/4
        #[arg(long)]
        width: Option<String>,
        /// Replace every stride-1, equal-channel conv/dsc block by an LPR block
        #[arg(long)]
        replace_lpr: bool,
        /// Add a batch-norm parameter column
        #[arg(long)]
        include_bn: bool,
    },
    /// Finite-difference gradient checks in float64
    Gradcheck {
        /// `all` or one case name
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradient of this tensor to exercise the failure path
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Fit LPR variants to a frozen separable convolution and report MSEs
    Distill {
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Rank of the target's perturbation (defaults to --rank)
        #[arg(long)]
        target_rank: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy network with one block variant
    Ablate {
        #[arg(long, value_parser = parse_variant)]
        variant: AblationVariant,
        /// CIFAR-10 binary batch; synthetic blobs when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network described by an architecture file
    Train {
        arch: PathBuf,
        /// CIFAR-10 binary batch; synthetic blobs when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the trained weights
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
        optimizer: OptimizerArg,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
        schedule: ScheduleArg,
        /// Random horizontal flips during the main stage
        #[arg(long)]
        augment: bool,
        /// Epochs of a final stage without augmentation
        #[arg(long, default_value_t = 0)]
        fine_tune_epochs: usize,
        /// Learning-rate multiplier for the fine-tune stage
        #[arg(long, default_value_t = 0.1)]
        fine_tune_lr_scale: f64,
        /// Synthetic samples when no --data is given
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write freshly initialised weights and print a forward probe
    Export {
        arch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
        dtype: DTypeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the probe input
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Load weights into a network and print the same forward probe
    Import {
        arch: PathBuf,
        weights: PathBuf,
        #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
        dtype: DTypeArg,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

/// Prints a line to stdout; a closed pipe ends the process quietly, as the
/// reader has stopped listening.
macro_rules! out {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*))
    };
}

fn emit(args: std::fmt::Arguments) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout
        .write_fmt(args)
        .and_then(|()| stdout.write_all(b"\n"))
    {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing to stdout: {e}");
        std::process::exit(EXIT_USAGE.into());
    }
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    AblationVariant::parse(s).map_err(|e| e.to_string())
}

/// An error already reported on stdout/stderr that only sets the exit code.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Numeric { .. })));
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Cost {
            arch,
            rank_div,
            width,
            replace_lpr,
            include_bn,
        } => {
            let mut spec = load_arch(&arch)?;
            if let Some(w) = width {
                spec = spec.with_width(WidthMult::parse(&w)?);
            }
            if let Some(d) = rank_div {
                spec = spec.with_rank_div(d);
            }
            if replace_lpr {
                spec = spec.replace_with_lpr()?;
            }
            let report = cost_network(&spec).with_context(|| arch.display().to_string())?;
            out!("{}", report.to_tsv(include_bn).trim_end());
        }
        Command::Gradcheck {
            module,
            seed,
            inject_fault,
        } => {
            let opts = GradCheckOptions {
                seed,
                inject_fault,
                ..Default::default()
            };
            let reports = gradcheck_suite(&module, &opts)?;
            out!("case\ttensor\tmax_rel_err\tstatus");
            let mut failed = Vec::new();
            for (case, report) in &reports {
                for line in report.to_tsv().lines().skip(1) {
                    out!("{case}\t{line}");
                }
                failed.extend(report.failures().map(|(t, _)| format!("{case}/{t}")));
            }
            if !failed.is_empty() {
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Err(CheckFailed.into());
            }
            eprintln!("{} cases passed", reports.len());
        }
        Command::Distill {
            channels,
            rank,
            target_rank,
            steps,
            seed,
        } => {
            let cfg = DistillConfig {
                channels,
                rank,
                target_rank,
                steps,
                seed,
                ..Default::default()
            };
            let report = distill(&cfg)?;
            out!("{}", report.to_tsv().trim_end());
        }
        Command::Ablate {
            variant,
            data,
            epochs,
            seed,
        } => {
            let (train_set, eval_set) = match data {
                Some(path) => (load_cifar(&path)?, None),
                None => {
                    let (t, e) = synthetic_task(1000, 200, seed)?;
                    (t, Some(e))
                }
            };
            let cfg = ablation_train_config(epochs, seed);
            out!("{}", EpochStats::TSV_HEADER);
            let run = ablate(variant, &train_set, eval_set.as_ref(), &cfg, |e| {
                out!("{}", e.tsv_row())
            })?;
            eprintln!(
                "{}: {} weights, loss {:.6} -> {:.6}",
                variant.name(),
                run.num_weights,
                run.initial_loss,
                run.final_loss
            );
        }
        Command::Train {
            arch,
            data,
            out,
            epochs,
            batch,
            lr,
            optimizer,
            momentum,
            schedule,
            augment,
            fine_tune_epochs,
            fine_tune_lr_scale,
            samples,
            seed,
        } => {
            let spec = load_arch(&arch)?;
            let mut net = Network::<f32>::from_spec(&spec, seed)?;
            let data = match data {
                Some(path) => load_cifar(&path)?,
                None => synthetic_for(&spec, samples, seed)?,
            };
            check_classifier(&spec, &data)?;
            let cfg = TrainConfig {
                optimizer: match optimizer {
                    OptimizerArg::Sgd => OptimizerChoice::SgdMomentum,
                    OptimizerArg::Adam => OptimizerChoice::Adam,
                },
                lr0: lr,
                schedule: match schedule {
                    ScheduleArg::Cosine => Schedule::Cosine,
                    ScheduleArg::Constant => Schedule::Constant,
                },
                epochs,
                batch_size: batch,
                momentum,
                seed,
                augment,
                fine_tune: (fine_tune_epochs > 0).then_some(FineTune {
                    epochs: fine_tune_epochs,
                    lr_scale: fine_tune_lr_scale,
                }),
            };
            out!("{}", EpochStats::TSV_HEADER);
            train(&mut net, &data, None, &cfg, |e| out!("{}", e.tsv_row()))?;
            let file = WeightsFile::from_network(&net);
            file.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} tensors to {}", file.tensors.len(), out.display());
        }
        Command::Export {
            arch,
            out,
            dtype,
            seed,
            probe_seed,
        } => {
            let spec = load_arch(&arch)?;
            match dtype {
                DTypeArg::F32 => export::<f32>(&spec, &out, seed, probe_seed)?,
                DTypeArg::F64 => export::<f64>(&spec, &out, seed, probe_seed)?,
            }
        }
        Command::Import {
            arch,
            weights,
            dtype,
            probe_seed,
        } => {
            let spec = load_arch(&arch)?;
            let file = WeightsFile::load(&weights)
                .with_context(|| format!("reading {}", weights.display()))?;
            match dtype {
                DTypeArg::F32 => import::<f32>(&spec, &file, probe_seed)?,
                DTypeArg::F64 => import::<f64>(&spec, &file, probe_seed)?,
            }
        }
    }
    Ok(())
}

fn load_arch(path: &Path) -> Result<ArchitectureSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_arch(&text).with_context(|| path.display().to_string())
}

fn load_cifar(path: &Path) -> Result<Dataset<f32>> {
    load_cifar10_bin(path).with_context(|| path.display().to_string())
}

fn classes_of(spec: &ArchitectureSpec) -> Result<usize> {
    let out = spec.output_shape()?;
    if out.h != 1 || out.w != 1 {
        bail!("network output {out} is not a class vector; end the file with avgpool and fc");
    }
    Ok(out.c)
}

/// Blob images matching a single-channel square input.
fn synthetic_for(spec: &ArchitectureSpec, samples: usize, seed: u64) -> Result<Dataset<f32>> {
    let FeatureShape { c, h, w } = spec.input;
    if c != 1 || h != w {
        bail!(
            "synthetic data needs a 1xNxN input, the architecture takes {c}x{h}x{w}; pass --data"
        );
    }
    Ok(synthetic_blobs(samples, classes_of(spec)?, h, seed)?)
}

fn check_classifier(spec: &ArchitectureSpec, data: &Dataset<f32>) -> Result<()> {
    let classes = classes_of(spec)?;
    let s = data.sample_shape();
    let input = FeatureShape::new(s.c, s.h, s.w);
    if input != spec.input {
        bail!(
            "data samples are {input}, the architecture takes {}",
            spec.input
        );
    }
    if classes != data.classes {
        bail!(
            "network has {classes} outputs, data has {} classes",
            data.classes
        );
    }
    Ok(())
}

/// Forward pass of one seeded standard-normal sample, printed with bit
/// patterns so two runs can be compared exactly.
fn print_probe<T: Element>(net: &Network<T>, probe_seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let x = Tensor4::<T>::randn(net.input_shape(1), 1.0, &mut rng);
    let y = net.infer(&x)?;
    out!("index\tvalue\tbits");
    for (i, &v) in y.data().iter().enumerate() {
        let mut bytes = Vec::new();
        v.write_le(&mut bytes);
        let hex: String = bytes.iter().rev().map(|b| format!("{b:02x}")).collect();
        out!("{i}\t{:e}\t{hex}", v.as_f64());
    }
    Ok(())
}

fn export<T: Element>(
    spec: &ArchitectureSpec,
    out: &Path,
    seed: u64,
    probe_seed: u64,
) -> Result<()> {
    let net = Network::<T>::from_spec(spec, seed)?;
    let file = WeightsFile::from_network(&net);
    file.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} tensors to {}", file.tensors.len(), out.display());
    print_probe(&net, probe_seed)
}

fn import<T: Element>(spec: &ArchitectureSpec, file: &WeightsFile, probe_seed: u64) -> Result<()> {
    let mut net = Network::<T>::from_spec(spec, 0)?;
    file.apply_to(&mut net)?;
    print_probe(&net, probe_seed)
}
