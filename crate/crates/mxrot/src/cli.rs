//! The `mxrot` command line.
//!
//! Exit codes: `0` success, `2` usage or validation error (bad flag, unknown
//! format, missing seed, incompatible rotation dim), `1` computation or file
//! error. JSON reports go to `--report` when given and to stdout otherwise;
//! every file is written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mxrot_core::analysis::{
    abs_percentile, block_error_report, block_scale_distribution, classify_blocks,
    regular_block_loss_delta, rotation_dim_sweep, scale_inflation_count, threshold_fractions,
    DEFAULT_OUTLIER_QUANTILE,
};
use mxrot_core::formats::{pot_rounding_error_curve, qsnr};
use mxrot_core::gptq::{
    accumulate_hessian, dequantize_weights, gptq_quantize, quantize_weights, GptqParams,
    HessianAccumulator,
};
use mxrot_core::pipeline::{matrix_cells, run_layer_against, LayerResult, Method, QuantScheme};
use mxrot_core::rotopt::{optimize, GradientEstimator, DEFAULT_STEP_SIZE};
use mxrot_core::transforms::{online_rotation_flops, rotate_activations};
use mxrot_core::{
    build_rotation, generate_synthetic, quantize, QuantConfig, RotationMatrix, RotationScope,
    RotationSpec, SyntheticSpec, Tensor,
};
use rayon::prelude::*;
use thiserror::Error;

use crate::io::{read_tensor, write_tensor};
use crate::report::{
    block_report_json, block_table, loss_delta_json, threshold_table, LayerRecord, Report, Table,
};

pub const THREADS_ENV: &str = "MXROT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Compute(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "mxrot",
    version,
    about = "Microscaling 4-bit quantization and rotation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic channel-outlier tensor.
    Gen(GenArgs),
    /// Quantize a tensor and report its reconstruction error.
    Quantize(QuantizeArgs),
    /// Block, threshold, sweep, scale, PoT-curve and loss-delta diagnostics.
    Analyze(AnalyzeArgs),
    /// Rotation-dimension sweep (same as `analyze --mode sweep`).
    Sweep(SweepArgs),
    /// GPTQ-quantize a weight matrix against calibration activations.
    Gptq(GptqArgs),
    /// Refine a rotation with Cayley steps on the activation quantization loss.
    Optimize(OptimizeArgs),
    /// Run the method x format grid on one linear layer.
    Matrix(MatrixArgs),
    /// Online rotation cost, global against block-diagonal.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RotationKind {
    None,
    Global,
    Block,
}

#[derive(Debug, Args)]
pub struct RotationArgs {
    /// Rotation applied to the tensor first.
    #[arg(long, visible_alias = "rot", value_enum, default_value_t = RotationKind::None)]
    pub rotation: RotationKind,
    /// Block width of a block rotation (power of two dividing the width).
    #[arg(long, default_value_t = 32)]
    pub rot_dim: usize,
    /// Plain Hadamard blocks without random sign flips.
    #[arg(long)]
    pub no_random_signs: bool,
}

impl RotationArgs {
    /// The rotation these flags describe, validated against `width`.
    fn spec(&self, seed: Option<u64>, width: usize) -> CliResult<Option<RotationSpec>> {
        let base = match self.rotation {
            RotationKind::None => return Ok(None),
            RotationKind::Global => RotationSpec::global(width, 0),
            RotationKind::Block => RotationSpec::block(self.rot_dim, 0),
        };
        let spec = if self.no_random_signs {
            base.deterministic()
        } else {
            let seed =
                seed.ok_or_else(|| usage("--seed is required with a randomized --rotation"))?;
            RotationSpec { seed, ..base }
        };
        spec.validate(width)
            .map_err(|e| usage(format!("--rot-dim {}: {e}", self.rot_dim)))?;
        Ok(Some(spec))
    }

    fn check_seed(&self, seed: Option<u64>) -> CliResult<()> {
        if self.rotation != RotationKind::None && !self.no_random_signs && seed.is_none() {
            return Err(usage("--seed is required with a randomized --rotation"));
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 2048)]
    pub rows: usize,
    #[arg(long, default_value_t = 1024)]
    pub cols: usize,
    /// Standard deviation of regular channels.
    #[arg(long, default_value_t = 1.0)]
    pub std: f32,
    /// Fraction of channels scaled into outliers.
    #[arg(long, default_value_t = 0.01)]
    pub outlier_frac: f32,
    /// Scale applied to outlier channels.
    #[arg(long, default_value_t = 20.0)]
    pub gain: f32,
    #[arg(long)]
    pub seed: u64,
    /// Output tensor file.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub report: ReportArgs,
}

fn parse_scheme(s: &str) -> Result<QuantScheme, String> {
    s.parse().map_err(|e: mxrot_core::Error| e.to_string())
}

fn parse_config(s: &str) -> Result<QuantConfig, String> {
    s.parse().map_err(|e: mxrot_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// mxfp4, mxint4, bfp4, bint4, int4 (per-row) or none.
    #[arg(long, default_value = "mxfp4", value_parser = parse_scheme)]
    pub format: QuantScheme,
    /// Override the block size of a block format.
    #[arg(long)]
    pub block_size: Option<usize>,
    #[command(flatten)]
    pub rotation: RotationArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the dequantized tensor here.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Blocks,
    Thresholds,
    Sweep,
    Scales,
    Pot,
    LossDelta,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub mode: AnalyzeMode,
    /// Input tensor (every mode except pot).
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "mxfp4", value_parser = parse_config)]
    pub format: QuantConfig,
    /// Second format for per-block error ratios (blocks mode).
    #[arg(long, value_parser = parse_config)]
    pub baseline: Option<QuantConfig>,
    /// Share of largest magnitudes that count as outliers.
    #[arg(long, default_value_t = DEFAULT_OUTLIER_QUANTILE)]
    pub quantile: f64,
    /// Ascending thresholds (thresholds mode); default 64 points up to max |x|.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Rotation widths (sweep mode); default powers of two from 8 to the width.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Relative growth that counts as scale inflation (scales mode).
    #[arg(long, default_value_t = 0.25)]
    pub inflation: f32,
    /// PoT curve range and resolution (pot mode).
    #[arg(long, default_value_t = 0.5)]
    pub x_min: f64,
    #[arg(long, default_value_t = 16.0)]
    pub x_max: f64,
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[command(flatten)]
    pub rotation: RotationArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV table path (blocks, thresholds, sweep, scales, pot).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long, default_value = "mxfp4", value_parser = parse_config)]
    pub format: QuantConfig,
    /// Rotation widths; default powers of two from 8 to the width.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub struct GptqArgs {
    /// Weights, `in_features x out_features`.
    #[arg(short, long)]
    pub weights: PathBuf,
    /// Calibration activations, `samples x in_features`.
    #[arg(short = 'x', long)]
    pub calib: PathBuf,
    #[arg(long, default_value = "mxfp4", value_parser = parse_config)]
    pub format: QuantConfig,
    /// Dampening as a fraction of the mean Hessian diagonal.
    #[arg(long, default_value_t = 0.01)]
    pub damping: f64,
    #[arg(long, default_value_t = 128)]
    pub lazy_block: usize,
    /// Quantize input dimensions by descending Hessian diagonal.
    #[arg(long)]
    pub act_order: bool,
    /// Write the dequantized weights here (`in_features x out_features`).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    FrozenCodes,
    StraightThrough,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long, default_value = "mxfp4", value_parser = parse_config)]
    pub format: QuantConfig,
    #[command(flatten)]
    pub rotation: RotationArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Cayley step size.
    #[arg(long, default_value_t = DEFAULT_STEP_SIZE)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Estimator::FrozenCodes)]
    pub estimator: Estimator,
    #[arg(long)]
    pub seed: u64,
    /// Write the optimized rotation as a dense `width x width` tensor.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Activations, `tokens x in_features`.
    #[arg(short = 'x', long)]
    pub activations: PathBuf,
    /// Weights, `in_features x out_features`.
    #[arg(short, long)]
    pub weights: PathBuf,
    /// rtn, smoothquant, gptq, quarot, quarot+, brq, brq_spin.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "rtn,smoothquant,gptq,quarot,quarot+,brq,brq_spin"
    )]
    pub methods: Vec<String>,
    /// Formats used for both activations and weights.
    #[arg(long, value_delimiter = ',', default_value = "mxfp4", value_parser = parse_scheme)]
    pub formats: Vec<QuantScheme>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Hidden width N (power of two).
    #[arg(long)]
    pub width: u64,
    /// Block width g of the block-diagonal rotation.
    #[arg(long, default_value_t = 32)]
    pub rot_dim: u64,
    /// Tokens rotated.
    #[arg(long, default_value_t = 1)]
    pub tokens: u64,
    #[command(flatten)]
    pub report: ReportArgs,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            e.exit_code()
        }
    }
}

/// Builds the global rayon pool from `MXROT_THREADS` (0 or unset = auto).
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => gen(a, stdout),
        Command::Quantize(a) => quantize_cmd(a, stdout),
        Command::Analyze(a) => analyze(a, stdout),
        Command::Sweep(a) => {
            let x = load(&a.input)?;
            let (report, table) = sweep(&x, &a.format, a.dims.as_deref(), a.seed)?;
            finish(
                &report,
                a.report.report.as_deref(),
                Some((&table, a.csv.as_deref())),
                stdout,
            )
        }
        Command::Gptq(a) => gptq_cmd(a, stdout),
        Command::Optimize(a) => optimize_cmd(a, stdout),
        Command::Matrix(a) => matrix(a, stdout),
        Command::Flops(a) => flops(a, stdout),
    }
}

fn load(path: &Path) -> CliResult<Tensor> {
    read_tensor(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Compute)
}

fn save(path: &Path, t: &Tensor) -> CliResult<()> {
    write_tensor(path, t)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Compute)
}

fn compute<T>(r: mxrot_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Compute(e.into()))
}

/// Writes the report (to `path` or stdout) and the optional CSV table.
fn finish(
    report: &Report,
    path: Option<&Path>,
    csv: Option<(&Table, Option<&Path>)>,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    if let Some((table, Some(p))) = csv {
        table
            .write(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    match path {
        Some(p) => report
            .write(p)
            .with_context(|| format!("writing {}", p.display()))?,
        None => stdout
            .write_all(report.to_json_string().as_bytes())
            .context("writing stdout")?,
    }
    Ok(())
}

fn gen(a: GenArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let spec = SyntheticSpec {
        rows: a.rows,
        cols: a.cols,
        base_std: a.std,
        outlier_channel_fraction: a.outlier_frac,
        outlier_gain: a.gain,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let t = compute(generate_synthetic(&spec))?;
    save(&a.output, &t)?;
    let report = Report::new("gen")
        .param("rows", a.rows)
        .param("cols", a.cols)
        .param("std", a.std)
        .param("outlier_frac", a.outlier_frac)
        .param("gain", a.gain)
        .param("seed", a.seed)
        .field("output", a.output.display().to_string())
        .array(
            "outlier_channels",
            spec.outlier_channels().into_iter().map(|c| c as f64),
        );
    finish(&report, a.report.report.as_deref(), None, stdout)
}

fn rotated(x: &Tensor, spec: Option<RotationSpec>) -> CliResult<(Tensor, Option<RotationMatrix>)> {
    match spec {
        None => Ok((x.clone(), None)),
        Some(s) => {
            let r = compute(build_rotation(&s, x.cols()))?;
            Ok((compute(rotate_activations(x, &r))?, Some(r)))
        }
    }
}

fn rotation_params(report: Report, spec: Option<RotationSpec>) -> Report {
    match spec {
        None => report.param("rotation", "none"),
        Some(s) => report
            .param(
                "rotation",
                match s.scope {
                    RotationScope::Global => "global",
                    RotationScope::BlockDiagonal => "block",
                },
            )
            .param("rot_dim", s.dim)
            .param("random_signs", s.randomized)
            .param("seed", s.seed),
    }
}

fn quantize_cmd(a: QuantizeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    a.rotation.check_seed(a.seed)?;
    let scheme = match (a.format, a.block_size) {
        (QuantScheme::Block(cfg), Some(bs)) => {
            let cfg = cfg.with_block_size(bs);
            cfg.validate()
                .map_err(|e| usage(format!("--block-size: {e}")))?;
            QuantScheme::Block(cfg)
        }
        (_, Some(_)) => return Err(usage("--block-size applies only to block formats")),
        (s, None) => s,
    };
    let x = load(&a.input)?;
    let spec = a.rotation.spec(a.seed, x.cols())?;
    let (t, _) = rotated(&x, spec)?;
    let (deq, scales) = match scheme.config_for_width(t.cols()) {
        None => (t.clone(), Vec::new()),
        Some(cfg) => {
            let q = compute(quantize(&t, &cfg))?;
            (q.dequantize(), q.scales)
        }
    };
    if let Some(p) = &a.output {
        save(p, &deq)?;
    }
    let report = rotation_params(Report::new("quantize"), spec)
        .param("input", a.input.display().to_string())
        .param("format", scheme.name())
        .param(
            "block_size",
            scheme.config_for_width(t.cols()).map(|c| c.block_size),
        )
        .field("rows", t.rows())
        .field("cols", t.cols())
        .number("qsnr_db", compute(qsnr(&t, &deq))?)
        .number("mse", compute(deq.mse(&t))?)
        .array("scales", scales.iter().map(|&s| s as f64));
    finish(&report, a.report.report.as_deref(), None, stdout)
}

fn default_dims(width: usize) -> Vec<usize> {
    (3..)
        .map(|k| 1usize << k)
        .take_while(|&d| d <= width)
        .filter(|d| width % d == 0)
        .collect()
}

fn sweep(
    x: &Tensor,
    cfg: &QuantConfig,
    dims: Option<&[usize]>,
    seed: u64,
) -> CliResult<(Report, Table)> {
    let dims = dims
        .map(<[usize]>::to_vec)
        .unwrap_or_else(|| default_dims(x.cols()));
    if dims.is_empty() {
        return Err(usage("--dims is empty"));
    }
    for &d in &dims {
        RotationSpec::block(d, seed)
            .validate(x.cols())
            .map_err(|e| usage(format!("--dims {d}: {e}")))?;
    }
    let results = compute(rotation_dim_sweep(x, cfg, &dims, seed))?;
    let best = results
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|r| r.0);
    let mut table = Table::new(&["dim", "mse"]);
    for (d, m) in &results {
        table.push(vec![d.to_string(), m.to_string()]);
    }
    let report = Report::new("sweep")
        .param("format", cfg.to_string())
        .param("seed", seed)
        .field("best_dim", best)
        .array("dims", results.iter().map(|r| r.0 as f64))
        .array("mse", results.iter().map(|r| r.1));
    Ok((report, table))
}

fn analyze(a: AnalyzeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    a.format
        .validate()
        .map_err(|e| usage(format!("--format: {e}")))?;
    if !(0.0..=1.0).contains(&a.quantile) {
        return Err(usage(format!(
            "--quantile must be in [0, 1], got {}",
            a.quantile
        )));
    }
    if let Some(th) = &a.thresholds {
        if th.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(usage("--thresholds must be ascending"));
        }
    }
    if a.mode == AnalyzeMode::Pot {
        let curve = pot_rounding_error_curve(a.x_min, a.x_max, a.points)
            .map_err(|e| usage(e.to_string()))?;
        let mut table = Table::new(&["x", "relative_error"]);
        for (x, e) in &curve {
            table.push(vec![x.to_string(), e.to_string()]);
        }
        let report = Report::new("pot_curve")
            .param("x_min", a.x_min)
            .param("x_max", a.x_max)
            .param("points", a.points)
            .array("x", curve.iter().map(|p| p.0))
            .array("relative_error", curve.iter().map(|p| p.1));
        return finish(
            &report,
            a.report.report.as_deref(),
            Some((&table, a.csv.as_deref())),
            stdout,
        );
    }
    let input = a
        .input
        .as_deref()
        .ok_or_else(|| usage(format!("--input is required for --mode {:?}", a.mode)))?;
    match a.mode {
        AnalyzeMode::Sweep => {
            let seed = a
                .seed
                .ok_or_else(|| usage("--seed is required for --mode sweep"))?;
            let x = load(input)?;
            let (report, table) = sweep(&x, &a.format, a.dims.as_deref(), seed)?;
            return finish(
                &report,
                a.report.report.as_deref(),
                Some((&table, a.csv.as_deref())),
                stdout,
            );
        }
        AnalyzeMode::LossDelta if a.rotation.rotation == RotationKind::None => {
            return Err(usage("--mode loss-delta needs --rotation global|block"));
        }
        _ => {}
    }
    a.rotation.check_seed(a.seed)?;
    let x = load(input)?;
    let spec = a.rotation.spec(a.seed, x.cols())?;
    let base = |r: Report| {
        rotation_params(r, spec)
            .param("input", input.display().to_string())
            .param("format", a.format.to_string())
            .param("quantile", a.quantile)
    };
    match a.mode {
        AnalyzeMode::Blocks => {
            let (t, _) = rotated(&x, spec)?;
            let classification = compute(classify_blocks(&t, a.format.block_size, a.quantile))?;
            let rep = compute(block_error_report(
                &t,
                &a.format,
                &classification,
                a.baseline.as_ref(),
            ))?;
            let report = base(block_report_json(&rep));
            finish(
                &report,
                a.report.report.as_deref(),
                Some((&block_table(&rep), a.csv.as_deref())),
                stdout,
            )
        }
        AnalyzeMode::Thresholds => {
            let thresholds = match &a.thresholds {
                Some(t) => t.clone(),
                None => {
                    let top = x.max_abs() as f64;
                    (0..64).map(|i| top * i as f64 / 63.0).collect()
                }
            };
            let before = compute(threshold_fractions(&x, &thresholds))?;
            let (t, r) = rotated(&x, spec)?;
            let after = r.map(|_| threshold_fractions(&t, &thresholds)).transpose();
            let after = compute(after)?;
            let mut report = base(Report::new("thresholds"))
                .number("p95", compute(abs_percentile(&x, 0.95))? as f64)
                .number("p999", compute(abs_percentile(&x, 0.999))? as f64)
                .array("thresholds", thresholds.iter().copied())
                .array("fractions", before.fractions.iter().copied());
            if let Some(af) = &after {
                report = report.array("fractions_after", af.fractions.iter().copied());
            }
            let table = threshold_table(&before, after.as_ref());
            finish(
                &report,
                a.report.report.as_deref(),
                Some((&table, a.csv.as_deref())),
                stdout,
            )
        }
        AnalyzeMode::Scales => {
            let bs = a.format.block_size;
            let before = compute(block_scale_distribution(&x, bs))?;
            let (t, r) = rotated(&x, spec)?;
            let after = match r {
                Some(_) => Some(compute(block_scale_distribution(&t, bs))?),
                None => None,
            };
            let mut report = base(Report::new("scales"))
                .param("block_size", bs)
                .array("amax", before.iter().map(|&v| v as f64));
            let mut table = match &after {
                Some(_) => Table::new(&["index", "amax_before", "amax_after"]),
                None => Table::new(&["index", "amax"]),
            };
            for (i, &b) in before.iter().enumerate() {
                let mut row = vec![i.to_string(), b.to_string()];
                if let Some(af) = &after {
                    row.push(af[i].to_string());
                }
                table.push(row);
            }
            if let Some(af) = &after {
                report = report
                    .param("inflation", a.inflation)
                    .field(
                        "inflated_blocks",
                        scale_inflation_count(&before, af, a.inflation),
                    )
                    .array("amax_after", af.iter().map(|&v| v as f64));
            }
            finish(
                &report,
                a.report.report.as_deref(),
                Some((&table, a.csv.as_deref())),
                stdout,
            )
        }
        AnalyzeMode::LossDelta => {
            let (_, r) = rotated(&x, spec)?;
            let r = r.expect("rotation checked above");
            let d = compute(regular_block_loss_delta(&x, &a.format, &r, a.quantile))?;
            let mut report = loss_delta_json(&d);
            report.params = base(Report::new("")).params;
            finish(&report, a.report.report.as_deref(), None, stdout)
        }
        AnalyzeMode::Pot | AnalyzeMode::Sweep => unreachable!("handled above"),
    }
}

fn gptq_cmd(a: GptqArgs, stdout: &mut dyn Write) -> CliResult<()> {
    a.format
        .validate()
        .map_err(|e| usage(format!("--format: {e}")))?;
    if !(a.damping >= 0.0 && a.damping.is_finite()) {
        return Err(usage(format!(
            "--damping must be non-negative, got {}",
            a.damping
        )));
    }
    if a.lazy_block == 0 {
        return Err(usage("--lazy-block must be positive"));
    }
    let w = load(&a.weights)?;
    let x = load(&a.calib)?;
    if x.cols() != w.rows() {
        return Err(usage(format!(
            "--calib width {} does not match --weights input dimension {}",
            x.cols(),
            w.rows()
        )));
    }
    let params = GptqParams {
        damping_fraction: a.damping,
        lazy_block: a.lazy_block,
        act_order: a.act_order,
    };
    let acc = compute(accumulate_hessian(HessianAccumulator::new(w.rows()), &x))?;
    let gq = dequantize_weights(&compute(gptq_quantize(&w, &acc, &a.format, &params))?);
    let rq = dequantize_weights(&compute(quantize_weights(&w, &a.format))?);
    let y = compute(x.matmul(&w))?;
    let gptq_mse = compute(compute(x.matmul(&gq))?.mse(&y))?;
    let rtn_mse = compute(compute(x.matmul(&rq))?.mse(&y))?;
    if let Some(p) = &a.output {
        save(p, &gq)?;
    }
    let report = Report::new("gptq")
        .param("weights", a.weights.display().to_string())
        .param("calib", a.calib.display().to_string())
        .param("format", a.format.to_string())
        .param("damping", a.damping)
        .param("lazy_block", a.lazy_block)
        .param("act_order", a.act_order)
        .number("gptq_mse", gptq_mse)
        .number("rtn_mse", rtn_mse)
        .number("weight_mse_gptq", compute(gq.mse(&w))?)
        .number("weight_mse_rtn", compute(rq.mse(&w))?);
    finish(&report, a.report.report.as_deref(), None, stdout)
}

fn optimize_cmd(a: OptimizeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    a.format
        .validate()
        .map_err(|e| usage(format!("--format: {e}")))?;
    if a.rotation.rotation == RotationKind::None {
        return Err(usage("optimize needs --rotation global|block"));
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(usage(format!("--lr must be positive, got {}", a.lr)));
    }
    let x = load(&a.input)?;
    let spec = a
        .rotation
        .spec(Some(a.seed), x.cols())?
        .expect("rotation checked above");
    let init = compute(build_rotation(&spec, x.cols()))?;
    let estimator = match a.estimator {
        Estimator::FrozenCodes => GradientEstimator::FrozenCodes,
        Estimator::StraightThrough => GradientEstimator::StraightThrough,
    };
    let state = compute(optimize(&x, init, &a.format, a.steps, a.lr, estimator))?;
    if let Some(p) = &a.output {
        save(p, &state.rotation.to_dense())?;
    }
    let h = &state.loss_history;
    let report = rotation_params(Report::new("optimize"), Some(spec))
        .param("input", a.input.display().to_string())
        .param("format", a.format.to_string())
        .param("steps", a.steps)
        .param("lr", a.lr)
        .param("estimator", format!("{:?}", a.estimator))
        .number("initial_loss", h[0])
        .number("final_loss", h[h.len() - 1])
        .number("min_loss", h.iter().copied().fold(f64::INFINITY, f64::min))
        .number("orthogonality_error", state.rotation.orthogonality_error())
        .array("loss_history", h.iter().copied());
    finish(&report, a.report.report.as_deref(), None, stdout)
}

fn matrix(a: MatrixArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| {
            m.parse::<Method>()
                .map_err(|e| usage(format!("--methods: {e}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let x = load(&a.activations)?;
    let w = load(&a.weights)?;
    if x.cols() != w.rows() {
        return Err(usage(format!(
            "activation width {} does not match weight input dimension {}",
            x.cols(),
            w.rows()
        )));
    }
    let cells = matrix_cells(&methods, &a.formats, a.seed);
    for c in &cells {
        if let Some(r) = c.rotation {
            let spec = match r {
                mxrot_core::pipeline::RotationChoice::Global { seed } => {
                    RotationSpec::global(x.cols(), seed)
                }
                mxrot_core::pipeline::RotationChoice::Block { dim, seed }
                | mxrot_core::pipeline::RotationChoice::OptimizedBlock { dim, seed, .. } => {
                    RotationSpec::block(dim, seed)
                }
            };
            spec.validate(x.cols())
                .map_err(|e| usage(format!("method {}: {e}", c.name)))?;
        }
    }
    let reference = compute(x.matmul(&w))?;
    let results: Vec<LayerResult> = compute(
        cells
            .par_iter()
            .map(|c| run_layer_against(&x, &w, c, &reference))
            .collect(),
    )?;
    let records: Vec<LayerRecord> = results.iter().map(LayerRecord::from).collect();
    let mut table = Table::new(&[
        "method",
        "act_format",
        "weight_format",
        "mse",
        "qsnr_db",
        "rotation_flops",
        "matmul_flops",
    ]);
    for r in &records {
        table.push(vec![
            r.method.clone(),
            r.act_format.clone(),
            r.weight_format.clone(),
            r.mse.to_string(),
            r.qsnr_db.map(|v| v.to_string()).unwrap_or_default(),
            r.flops.rotation.to_string(),
            r.flops.matmul.to_string(),
        ]);
    }
    let report = Report::new("matrix")
        .param("activations", a.activations.display().to_string())
        .param("weights", a.weights.display().to_string())
        .param(
            "methods",
            methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        )
        .param(
            "formats",
            a.formats.iter().map(|f| f.name()).collect::<Vec<_>>(),
        )
        .param("seed", a.seed)
        .field("records", &records);
    finish(
        &report,
        a.report.report.as_deref(),
        Some((&table, a.csv.as_deref())),
        stdout,
    )
}

fn flops(a: FlopsArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if !a.width.is_power_of_two() {
        return Err(usage(format!("--width {} is not a power of two", a.width)));
    }
    if !a.rot_dim.is_power_of_two() || a.rot_dim > a.width {
        return Err(usage(format!(
            "--rot-dim {} must be a power of two no larger than --width",
            a.rot_dim
        )));
    }
    let g = online_rotation_flops(a.width, RotationScope::Global, a.width);
    let b = online_rotation_flops(a.width, RotationScope::BlockDiagonal, a.rot_dim);
    let report = Report::new("flops")
        .param("width", a.width)
        .param("rot_dim", a.rot_dim)
        .param("tokens", a.tokens)
        .field("global_flops", g.saturating_mul(a.tokens))
        .field("block_flops", b.saturating_mul(a.tokens))
        .number("ratio", b as f64 / g as f64);
    finish(&report, a.report.report.as_deref(), None, stdout)
}
