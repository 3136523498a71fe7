//! `gemmsim` command-line front end: run inferences, sweep systolic array
//! sizes, compare two accelerator configurations and evaluate the
//! development-time cost model.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gemmsim::accel::AccelConfig;
use gemmsim::cost::{evaluate, CostModelParams, CostReport};
use gemmsim::model::{input_from_bytes, load_model, random_input, run_inference, Backend, InferenceReport, ModelSpec};
use gemmsim::par::{try_par_map, Execution};
use gemmsim::quant::QuantTensor;
use serde::Serialize;
use serde_json::Value;

/// Process exit statuses.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const MISMATCH: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("output digest mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Mismatch(_) => exit::MISMATCH,
        }
    }
}

impl From<gemmsim::Error> for CliError {
    fn from(e: gemmsim::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gemmsim", version, about = "Simulate int8 GEMM accelerators on small quantized CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one inference and write its report.
    Run(RunArgs),
    /// Run the model on square systolic arrays of several sizes.
    Sweep(SweepArgs),
    /// Run the model under two configurations and diff the counters.
    Compare(CompareArgs),
    /// Evaluate the development-time cost model.
    #[command(allow_negative_numbers = true)]
    Cost(CostArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Cpu,
    Vm,
    Sa,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Cpu => Backend::Cpu,
            BackendArg::Vm => Backend::Vm,
            BackendArg::Sa => Backend::Sa,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model description (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Weights file; defaults to the model path with a `.weights` extension.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Raw NHWC input bytes.
    #[arg(long, conflicts_with = "seed")]
    pub input: Option<PathBuf>,
    /// Seed for a uniformly random input (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Defaults to the design named by the config.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Accelerator config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "sa")]
    pub backend: BackendArg,
    /// Square array sizes.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub config_a: PathBuf,
    #[arg(long)]
    pub config_b: PathBuf,
    /// Overrides the design named by each config.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub num_sim: f64,
    #[arg(long)]
    pub num_synth: f64,
    /// Simulator compile time per iteration (s).
    #[arg(long)]
    pub compile_time: f64,
    /// Simulated inference time per iteration (s).
    #[arg(long)]
    pub sim_inference_time: f64,
    /// Logic synthesis time per iteration (s).
    #[arg(long)]
    pub synth_time: f64,
    /// On-hardware inference time per iteration (s).
    #[arg(long)]
    pub hw_inference_time: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Where the input tensor came from.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    Seed(u64),
    File(String),
}

#[derive(Debug, Serialize)]
pub struct RunOutput {
    pub input: InputSource,
    pub config: AccelConfig,
    pub report: InferenceReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub size: usize,
    pub overall_cycles: u64,
    pub accelerator_cycles: u64,
    pub compute_cycles: u64,
    pub mac_window_cycles: u64,
    pub mac_ops: u64,
    /// MACs per cycle over the MAC activity window.
    pub mac_throughput: f64,
    pub pe_utilization: f64,
    pub stall_cycles: u64,
    pub output_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricDiff {
    pub metric: String,
    pub a: u64,
    pub b: u64,
    pub delta: i128,
    /// `a / b`, absent when `b` is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct CompareOutput {
    pub config_a: AccelConfig,
    pub config_b: AccelConfig,
    pub backend_a: Backend,
    pub backend_b: Backend,
    pub digest_a: String,
    pub digest_b: String,
    pub digest_equal: bool,
    pub metrics: Vec<MetricDiff>,
}

/// Parse `args` (including the program name), execute, and write the report
/// to `--out` or `stdout`.
pub fn execute<I, T>(args: I, stdout: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        Command::Run(a) => cmd_run(&a, stdout),
        Command::Sweep(a) => cmd_sweep(&a, stdout),
        Command::Compare(a) => cmd_compare(&a, stdout),
        Command::Cost(a) => cmd_cost(&a, stdout),
    }
}

/// Entry point used by the binary: returns the exit status.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match Cli::try_parse_from(&args) {
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return exit::SUCCESS;
        }
        _ => {}
    }
    match execute(args, stdout) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            let _ = match &e {
                CliError::Usage(msg) => write!(stderr, "{msg}"),
                _ => writeln!(stderr, "error: {e}"),
            };
            e.code()
        }
    }
}

pub fn load_config(path: Option<&Path>) -> CliResult<AccelConfig> {
    let Some(path) = path else {
        return Ok(AccelConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let config: AccelConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
    Ok(config)
}

fn load(args: &ModelArgs) -> CliResult<(ModelSpec, QuantTensor, InputSource)> {
    let weights = args.weights.clone().unwrap_or_else(|| args.model.with_extension("weights"));
    let model = load_model(&args.model, &weights)?;
    let (input, source) = match &args.input {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Validation(format!("cannot read input {}: {e}", path.display())))?;
            (input_from_bytes(&model, bytes)?, InputSource::File(path.display().to_string()))
        }
        None => {
            let seed = args.seed.unwrap_or(0);
            (random_input(&model, seed)?, InputSource::Seed(seed))
        }
    };
    Ok((model, input, source))
}

fn backend_for(config: &AccelConfig, arg: Option<BackendArg>) -> Backend {
    arg.map(Backend::from).unwrap_or(match config.kind {
        gemmsim::accel::DesignKind::Vm => Backend::Vm,
        gemmsim::accel::DesignKind::Sa => Backend::Sa,
    })
}

fn emit(out: &OutputArgs, stdout: &mut dyn Write, bytes: &[u8]) -> CliResult<()> {
    match &out.out {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display()))),
        None => stdout
            .write_all(bytes)
            .map_err(|e| CliError::Validation(format!("cannot write to stdout: {e}"))),
    }
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("reports serialize");
    s.push(b'\n');
    s
}

fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Validation(e.to_string()))
}

#[derive(Serialize)]
struct LayerRow<'a> {
    layer: &'a str,
    kind: &'a str,
    category: &'a str,
    offloaded: bool,
    elapsed_cycles: u64,
    cpu_cycles: u64,
    accelerator_cycles: u64,
    compute_cycles: u64,
    mac_ops: u64,
    dma_bytes_in: u64,
    dma_bytes_out: u64,
}

fn run_csv(report: &InferenceReport) -> CliResult<Vec<u8>> {
    let rows: Vec<LayerRow> = report
        .layers
        .iter()
        .map(|l| LayerRow {
            layer: &l.name,
            kind: &l.kind,
            category: match l.category {
                gemmsim::model::LayerCategory::Conv => "conv",
                gemmsim::model::LayerCategory::NonConv => "non_conv",
            },
            offloaded: l.offloaded,
            elapsed_cycles: l.elapsed_cycles,
            cpu_cycles: l.cpu_cycles,
            accelerator_cycles: l.accelerator_cycles,
            compute_cycles: l.compute_cycles,
            mac_ops: l.counters.mac_ops_issued,
            dma_bytes_in: l.counters.dma_bytes_in,
            dma_bytes_out: l.counters.dma_bytes_out,
        })
        .collect();
    to_csv(&rows)
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut config = load_config(args.config.as_deref())?;
    let (model, input, source) = load(&args.model)?;
    let backend = backend_for(&config, args.backend);
    if let Some(kind) = backend.design() {
        config.kind = kind;
    }
    let (_, report) = run_inference(&model, &input, backend, &config)?;
    let bytes = match args.output.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&RunOutput {
            input: source,
            config,
            report,
        }),
        Format::Csv => run_csv(&report)?,
    };
    emit(&args.output, stdout, &bytes)
}

pub fn cmd_sweep(args: &SweepArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if args.backend != BackendArg::Sa {
        return Err(CliError::Validation("sweep varies the systolic array and needs --backend sa".into()));
    }
    let base = load_config(args.config.as_deref())?;
    let (model, input, _) = load(&args.model)?;
    let mut configs = Vec::with_capacity(args.sizes.len());
    for &size in &args.sizes {
        let mut c = base.clone();
        c.kind = gemmsim::accel::DesignKind::Sa;
        (c.sa.rows, c.sa.cols, c.sa.num_queues) = (size, size, 2 * size);
        c.validate()
            .map_err(|e| CliError::Validation(format!("invalid size {size}: {e}")))?;
        configs.push((size, c));
    }
    let rows = try_par_map(&configs, Execution::default(), |(size, c)| {
        let (_, r) = run_inference(&model, &input, Backend::Sa, c)?;
        let pes = c.num_pes();
        Ok::<_, gemmsim::Error>(SweepRow {
            size: *size,
            overall_cycles: r.overall_cycles,
            accelerator_cycles: r.accelerator_cycles,
            compute_cycles: r.compute_cycles,
            mac_window_cycles: r.mac_window_cycles,
            mac_ops: r.counters.mac_ops_issued,
            mac_throughput: if r.mac_window_cycles == 0 {
                0.0
            } else {
                r.counters.mac_ops_issued as f64 / r.mac_window_cycles as f64
            },
            pe_utilization: r.counters.pe_utilization(pes, r.mac_window_cycles),
            stall_cycles: r.counters.stall_cycles,
            output_digest: r.output_digest,
        })
    })?;
    let bytes = match args.output.format.unwrap_or(Format::Csv) {
        Format::Json => to_json(&rows),
        Format::Csv => to_csv(&rows)?,
    };
    emit(&args.output, stdout, &bytes)?;
    if let Some(bad) = rows.iter().find(|r| r.output_digest != rows[0].output_digest) {
        return Err(CliError::Mismatch(format!(
            "size {} produced {} but size {} produced {}",
            bad.size, bad.output_digest, rows[0].size, rows[0].output_digest
        )));
    }
    Ok(())
}

/// Flatten the numeric leaves of a JSON value into dotted paths.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, u64>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::Number(n) => {
            if let Some(n) = n.as_u64() {
                out.insert(prefix.to_string(), n);
            }
        }
        _ => {}
    }
}

fn report_metrics(r: &InferenceReport) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for (k, v) in [
        ("overall_cycles", r.overall_cycles),
        ("conv_cycles", r.conv_cycles),
        ("non_conv_cycles", r.non_conv_cycles),
        ("accelerator_cycles", r.accelerator_cycles),
        ("compute_cycles", r.compute_cycles),
        ("mac_window_cycles", r.mac_window_cycles),
    ] {
        m.insert(k.to_string(), v);
    }
    flatten("counters", &serde_json::to_value(&r.counters).expect("counters serialize"), &mut m);
    m
}

pub fn diff_reports(a: &InferenceReport, b: &InferenceReport) -> Vec<MetricDiff> {
    let (ma, mb) = (report_metrics(a), report_metrics(b));
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let (a, b) = (ma.get(k).copied().unwrap_or(0), mb.get(k).copied().unwrap_or(0));
            MetricDiff {
                metric: k.clone(),
                a,
                b,
                delta: b as i128 - a as i128,
                ratio: (b != 0).then(|| a as f64 / b as f64),
            }
        })
        .collect()
}

pub fn cmd_compare(args: &CompareArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut config_a = load_config(Some(&args.config_a))?;
    let mut config_b = load_config(Some(&args.config_b))?;
    let (model, input, _) = load(&args.model)?;
    let (backend_a, backend_b) = (backend_for(&config_a, args.backend), backend_for(&config_b, args.backend));
    for (c, b) in [(&mut config_a, backend_a), (&mut config_b, backend_b)] {
        if let Some(kind) = b.design() {
            c.kind = kind;
        }
    }
    let pair = [(backend_a, &config_a), (backend_b, &config_b)];
    let mut reports = try_par_map(&pair, Execution::default(), |(b, c)| run_inference(&model, &input, *b, c))?;
    let (_, rb) = reports.pop().expect("two runs");
    let (_, ra) = reports.pop().expect("two runs");
    let out = CompareOutput {
        metrics: diff_reports(&ra, &rb),
        digest_equal: ra.output_digest == rb.output_digest,
        digest_a: ra.output_digest,
        digest_b: rb.output_digest,
        backend_a,
        backend_b,
        config_a,
        config_b,
    };
    let bytes = match args.output.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&out),
        Format::Csv => to_csv(&out.metrics)?,
    };
    emit(&args.output, stdout, &bytes)?;
    if !out.digest_equal {
        return Err(CliError::Mismatch(format!(
            "config A produced {} but config B produced {}",
            out.digest_a, out.digest_b
        )));
    }
    Ok(())
}

fn cost_rows(r: &CostReport) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("et_secda", Some(r.et_secda)),
        ("et_synth_only", Some(r.et_synth_only)),
        ("et_fullsim_only", Some(r.et_fullsim_only)),
        ("synth_only_over_secda", r.synth_only_over_secda),
        ("fullsim_only_over_secda", r.fullsim_only_over_secda),
        ("synth_only_over_fullsim_only", r.synth_only_over_fullsim_only),
        ("per_iteration_ratio", r.per_iteration_ratio),
        ("compile_ratio", r.compile_ratio),
    ]
}

pub fn cmd_cost(args: &CostArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let params = CostModelParams {
        num_sim: args.num_sim,
        num_synth: args.num_synth,
        compile_time: args.compile_time,
        sim_inference_time: args.sim_inference_time,
        synth_time: args.synth_time,
        hw_inference_time: args.hw_inference_time,
    };
    let report = evaluate(&params)?;
    let bytes = match args.output.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => {
            #[derive(Serialize)]
            struct Row {
                metric: &'static str,
                value: Option<f64>,
            }
            let rows: Vec<Row> = cost_rows(&report)
                .into_iter()
                .map(|(metric, value)| Row { metric, value })
                .collect();
            to_csv(&rows)?
        }
    };
    emit(&args.output, stdout, &bytes)
}
