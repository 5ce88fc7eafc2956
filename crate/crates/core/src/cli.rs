//! The `potaccel` command line: `train`, `quantize`, `simulate` and `sweep`.
//!
//! Every subcommand writes its report to the given writer; errors surface as
//! [`Error`] and map to exit status 2 in [`main`].

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mlp::{classify, MlpModel, QuantizedMlp, DEFAULT_LAYER_SIZES};
use crate::pipeline_sim::{schedule_gemv, PipelineConfig, SimReport};
use crate::quant::{parse_u32_list, Codebook, QuantScheme};
use crate::shift_arith::ArithMode;
use crate::train::{train, TrainConfig};

/// Exit status for any validation or I/O failure.
pub const FAILURE_EXIT: i32 = 2;

/// Auto-selected scales are rounded up to a multiple of this step so that
/// every level stays an exact dyadic rational.
pub const ALPHA_STEP: f64 = 1.0 / 256.0;

#[derive(Debug, Parser)]
#[command(name = "potaccel", version, about = "Power-of-two quantized MLP accelerator simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float 784-128-10 sigmoid MLP with minibatch SGD.
    Train(TrainArgs),
    /// Project a model's weights onto a codebook.
    Quantize(QuantizeArgs),
    /// Run the test set through the simulated accelerator.
    Simulate(SimulateArgs),
    /// Evaluate a grid of codebooks and bandwidths; prints TSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on the first N samples only.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Pot,
    Spx,
}

#[derive(Debug, Clone, Args)]
pub struct SchemeArgs {
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Total bits of a PoT codebook.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Per-branch bits of an SPx codebook, e.g. `3,3`.
    #[arg(long)]
    pub branches: Option<String>,
    /// Scale factor; defaults to the smallest multiple of 1/256 whose top
    /// level covers the largest weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Read the codebook from a file instead of building one.
    #[arg(long, conflicts_with_all = ["scheme", "bits", "branches", "alpha"])]
    pub codebook: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Model file with every weight replaced by its level.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub codebook_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// key=value pipeline config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Load clock period, ns.
    #[arg(long)]
    pub load_period: Option<f64>,
    /// Compute clock period, ns.
    #[arg(long)]
    pub compute_period: Option<f64>,
    /// Words loaded into the input buffer per load cycle.
    #[arg(long)]
    pub bandwidth: Option<usize>,
    /// Input buffer capacity in words.
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Number of processing units.
    #[arg(long)]
    pub pus: Option<usize>,
    /// Keep weights in the buffer and load only the data vector.
    #[arg(long)]
    pub weights_resident: bool,
    /// Drop low-order bits instead of widening on right shifts.
    #[arg(long)]
    pub truncate: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Evaluate the first N samples only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Print the cycle trace of the first layer.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// PoT bit widths, e.g. `2,3,4`.
    #[arg(long)]
    pub pot_bits: Option<String>,
    /// SPx branch sets separated by `;`, e.g. `2,1;3,3`.
    #[arg(long)]
    pub spx_branches: Option<String>,
    /// Load bandwidths in words; defaults to the configured one.
    #[arg(long)]
    pub bandwidths: Option<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    execute(cli.command, out)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Quantize(a) => cmd_quantize(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
    }
}

/// Entry point for the binary; returns the process exit status.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { FAILURE_EXIT } else { 0 };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            FAILURE_EXIT
        }
    }
}

fn write_out(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|()| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

macro_rules! outln {
    ($out:expr, $($arg:tt)*) => {
        write_out($out, format_args!($($arg)*))
    };
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut dataset = LabeledDataset::load(&args.images, &args.labels)?;
    if let Some(n) = args.limit {
        dataset = dataset.take(n);
    }
    let test = match (&args.test_images, &args.test_labels) {
        (Some(i), Some(l)) => Some(LabeledDataset::load(i, l)?),
        _ => None,
    };
    let config = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.lr,
        epochs: args.epochs,
        seed: args.seed,
    };
    let mut lines = Vec::new();
    let mut write_err = None;
    let outcome = train(&DEFAULT_LAYER_SIZES, &dataset, test.as_ref(), &config, |entry| {
        if write_err.is_none() {
            write_err = outln!(&mut *out, "{entry}").err();
        }
        lines.push(entry.to_string());
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    outcome.model.save(&args.out)?;
    if let Some(log) = &args.log {
        write_file(log, &(lines.join("\n") + "\n"))?;
    }
    outln!(out, "model written to {}", args.out.display())
}

/// Smallest multiple of [`ALPHA_STEP`] whose top level covers `max_abs`.
pub fn auto_alpha(scheme: &QuantScheme, max_abs: f64) -> Result<f64> {
    let unit = match scheme.kind() {
        crate::quant::SchemeKind::PoT => QuantScheme::pot(scheme.total_bits(), 1.0)?,
        crate::quant::SchemeKind::SPx => QuantScheme::spx(scheme.branch_bits(), 1.0)?,
    }
    .build()?;
    let top = unit.levels().last().copied().unwrap_or(1.0);
    if !max_abs.is_finite() {
        return Err(Error::NonFinite(max_abs));
    }
    let steps = (max_abs / top / ALPHA_STEP).ceil().max(1.0);
    Ok(steps * ALPHA_STEP)
}

fn scheme_from_args(args: &SchemeArgs, alpha: f64) -> Result<QuantScheme> {
    match args.scheme {
        None => Err(Error::InvalidScheme(
            "pass --scheme pot|spx or --codebook".into(),
        )),
        Some(SchemeArg::Pot) => {
            if args.branches.is_some() {
                return Err(Error::InvalidScheme("--branches applies to spx only".into()));
            }
            let bits = args
                .bits
                .ok_or_else(|| Error::InvalidScheme("pot needs --bits".into()))?;
            QuantScheme::pot(bits, alpha)
        }
        Some(SchemeArg::Spx) => {
            let text = args
                .branches
                .as_deref()
                .ok_or_else(|| Error::InvalidScheme("spx needs --branches".into()))?;
            let branches = parse_u32_list(text).map_err(Error::InvalidScheme)?;
            let scheme = QuantScheme::spx(&branches, alpha)?;
            if let Some(bits) = args.bits {
                if bits != scheme.total_bits() {
                    return Err(Error::InvalidScheme(format!(
                        "--bits {bits} disagrees with branches {text} ({} bits)",
                        scheme.total_bits()
                    )));
                }
            }
            Ok(scheme)
        }
    }
}

/// Codebook from `--codebook` or from the scheme flags, sized to `model`.
pub fn resolve_codebook(args: &SchemeArgs, model: &MlpModel) -> Result<Codebook> {
    if let Some(path) = &args.codebook {
        return fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .parse();
    }
    let alpha = match args.alpha {
        Some(a) => a,
        None => auto_alpha(&scheme_from_args(args, 1.0)?, model.max_abs_weight())?,
    };
    scheme_from_args(args, alpha)?.build()
}

pub fn cmd_quantize(args: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let model = MlpModel::load(&args.model)?;
    let codebook = resolve_codebook(&args.scheme, &model)?;
    let quantized = model.quantized(&codebook)?;
    let scheme = codebook.scheme();

    outln!(
        out,
        "scheme={} bits={} branches={} alpha={} levels={}",
        scheme.kind(),
        scheme.total_bits(),
        join(scheme.branch_bits()),
        codebook.alpha(),
        codebook.len()
    )?;
    for (i, (orig, q)) in model.layers().iter().zip(quantized.layers()).enumerate() {
        let err: f64 = orig
            .weights
            .iter()
            .zip(&q.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / orig.weights.len().max(1) as f64;
        outln!(out, "layer={} weights={} mean_abs_error={err:.9}", i + 1, orig.weights.len())?;
    }
    outln!(out, "# tail gap profile: level gap_to_next")?;
    for (level, gap) in codebook.tail_gap_profile() {
        outln!(out, "{level:.9} {gap:.9}")?;
    }
    if let Some(path) = &args.out {
        quantized.save(path)?;
    }
    if let Some(path) = &args.codebook_out {
        write_file(path, &codebook.to_string())?;
    }
    Ok(())
}

fn join(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// Config file (if any) with flag overrides applied.
pub fn resolve_pipeline(args: &PipelineArgs) -> Result<(PipelineConfig, ArithMode)> {
    let mut config = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .parse()?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.load_period {
        config.load_clock_period_ns = v;
    }
    if let Some(v) = args.compute_period {
        config.compute_clock_period_ns = v;
    }
    if let Some(v) = args.bandwidth {
        config.load_bandwidth_words = v;
    }
    if let Some(v) = args.capacity {
        config.buffer_capacity_words = v;
    }
    if let Some(v) = args.pus {
        config.pu_count = v;
    }
    if args.weights_resident {
        config.weights_resident = true;
    }
    config.validate()?;
    let mode = if args.truncate {
        ArithMode::Truncate
    } else {
        ArithMode::Exact
    };
    Ok((config, mode))
}

/// Paired float/simulated evaluation over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub samples: usize,
    pub float_correct: usize,
    pub simulated_correct: usize,
    pub total: SimReport,
}

impl Evaluation {
    pub fn float_accuracy(&self) -> f64 {
        self.float_correct as f64 / self.samples.max(1) as f64
    }

    pub fn simulated_accuracy(&self) -> f64 {
        self.simulated_correct as f64 / self.samples.max(1) as f64
    }

    pub fn per_sample(&self, total: u64) -> f64 {
        total as f64 / self.samples.max(1) as f64
    }
}

pub fn evaluate(
    model: &MlpModel,
    codebook: &Arc<Codebook>,
    config: &PipelineConfig,
    mode: ArithMode,
    dataset: &LabeledDataset,
) -> Result<Evaluation> {
    let sim = QuantizedMlp::new(model, codebook, config, mode)?;
    let mut eval = Evaluation {
        samples: dataset.len(),
        float_correct: 0,
        simulated_correct: 0,
        total: SimReport::default(),
    };
    for (x, y) in dataset.iter() {
        if classify(&model.forward_float(x)?) == y {
            eval.float_correct += 1;
        }
        let (output, report) = sim.infer(x)?;
        if classify(&output) == y {
            eval.simulated_correct += 1;
        }
        eval.total += report;
    }
    Ok(eval)
}

fn load_eval_set(images: &Path, labels: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let data = LabeledDataset::load(images, labels)?;
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let model = MlpModel::load(&args.model)?;
    let codebook = Arc::new(resolve_codebook(&args.scheme, &model)?);
    let (config, mode) = resolve_pipeline(&args.pipeline)?;
    let data = load_eval_set(&args.images, &args.labels, args.limit)?;

    if args.trace {
        let first = &model.layers()[0];
        let schedule = schedule_gemv(first.rows, first.cols, &config, true)?;
        outln!(out, "# trace of layer 1 ({}x{})", first.rows, first.cols)?;
        for entry in &schedule.trace {
            outln!(out, "{entry}")?;
        }
    }

    let eval = evaluate(&model, &codebook, &config, mode, &data)?;
    let t = &eval.total;
    outln!(out, "samples={}", eval.samples)?;
    outln!(out, "float_accuracy={:.4}", eval.float_accuracy())?;
    outln!(out, "simulated_accuracy={:.4}", eval.simulated_accuracy())?;
    outln!(
        out,
        "accuracy_delta={:.4}",
        eval.simulated_accuracy() - eval.float_accuracy()
    )?;
    outln!(out, "total {t}")?;
    outln!(out, "compute_cycles_per_sample={:.1}", eval.per_sample(t.compute_cycles))?;
    outln!(out, "stall_cycles_per_sample={:.1}", eval.per_sample(t.stall_cycles))?;
    outln!(
        out,
        "wall_time_ns_per_sample={:.3}",
        t.wall_time_ns / eval.samples.max(1) as f64
    )
}

/// Parses `2,1;3,3` into branch sets.
fn parse_branch_sets(text: &str) -> Result<Vec<Vec<u32>>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_u32_list(s).map_err(Error::InvalidScheme))
        .collect()
}

pub const SWEEP_HEADER: &str =
    "scheme\tbits\tbranches\tbandwidth\taccuracy\tcycles_per_sample\tstalls_per_sample\tshift_adds_per_sample";

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let mut schemes: Vec<SchemeArgs> = Vec::new();
    if let Some(text) = &args.pot_bits {
        for bits in parse_u32_list(text).map_err(Error::InvalidScheme)? {
            schemes.push(SchemeArgs {
                scheme: Some(SchemeArg::Pot),
                bits: Some(bits),
                branches: None,
                alpha: None,
                codebook: None,
            });
        }
    }
    if let Some(text) = &args.spx_branches {
        for set in parse_branch_sets(text)? {
            schemes.push(SchemeArgs {
                scheme: Some(SchemeArg::Spx),
                bits: None,
                branches: Some(join(&set)),
                alpha: None,
                codebook: None,
            });
        }
    }
    let (base, mode) = resolve_pipeline(&args.pipeline)?;
    let bandwidths = match &args.bandwidths {
        Some(text) => parse_u32_list(text)
            .map_err(Error::InvalidConfig)?
            .into_iter()
            .map(|b| b as usize)
            .collect(),
        None => vec![base.load_bandwidth_words],
    };
    if schemes.is_empty() || bandwidths.is_empty() {
        return Err(Error::InvalidConfig(
            "empty sweep grid: pass --pot-bits and/or --spx-branches".into(),
        ));
    }

    let model = MlpModel::load(&args.model)?;
    let data = load_eval_set(&args.images, &args.labels, args.limit)?;
    outln!(out, "{SWEEP_HEADER}")?;
    for scheme_args in &schemes {
        let codebook = Arc::new(resolve_codebook(scheme_args, &model)?);
        let scheme = codebook.scheme().clone();
        for &bandwidth in &bandwidths {
            let config = PipelineConfig {
                load_bandwidth_words: bandwidth,
                ..base.clone()
            };
            let eval = evaluate(&model, &codebook, &config, mode, &data)?;
            let t = &eval.total;
            outln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.1}\t{:.1}\t{:.1}",
                scheme.kind(),
                scheme.total_bits(),
                join(scheme.branch_bits()),
                bandwidth,
                eval.simulated_accuracy(),
                eval.per_sample(t.compute_cycles),
                eval.per_sample(t.stall_cycles),
                eval.per_sample(t.ops.shifts + t.ops.adds)
            )?;
        }
    }
    Ok(())
}
