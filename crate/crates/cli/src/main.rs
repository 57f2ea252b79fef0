#![forbid(unsafe_code)]

//! sinet: cost analysis, gradient checking, desk-scale training, ablations,
//! and per-layer shape traces for the SI-unit network family.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or I/O error. Data goes to
//! stdout, diagnostics to stderr. `SINET_SEED` overrides the seed of
//! `gradcheck` and `train` (the only environment variable read).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sinet_core::analyzer;
use sinet_core::arch::{self, ModelSpec};
use sinet_core::gradcheck;
use sinet_core::train::{self, Dataset, DatasetDescriptor, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sinet",
    version,
    about = "SI-unit network toolkit",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static parameter / multiply-add report for a model spec.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks for every operator and block path.
    Gradcheck(GradcheckArgs),
    /// Train on a generated dataset; writes history.csv and history.json.
    Train(TrainArgs),
    /// Cost and accuracy table across the G/EX and attention ablations.
    Ablate(AblateArgs),
    /// Per-layer output shape table.
    Trace(TraceArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args)]
struct SpecSource {
    /// Model spec JSON file (as written by this tool's JSON outputs).
    #[arg(long, conflicts_with = "width")]
    spec: Option<PathBuf>,
    /// Width multiplier for the standard architecture table.
    #[arg(long)]
    width: Option<f64>,
    /// Class count for --width builds.
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Input resolution for --width builds (must divide by 32).
    #[arg(long, default_value_t = 224)]
    input: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    src: SpecSource,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Model spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Dataset descriptor JSON file.
    #[arg(long)]
    data: PathBuf,
    /// Train config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for history.csv / history.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    src: SpecSource,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }

    fn check(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<sinet_core::Error> for Failure {
    fn from(e: sinet_core::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("cannot parse {what} {}: {e}", path.display())))
}

impl SpecSource {
    fn load(&self) -> Result<ModelSpec, Failure> {
        match (&self.spec, self.width) {
            (Some(path), None) => read_json(path, "spec"),
            (None, Some(width)) => Ok(arch::build_sinet(width, self.classes, self.input)?),
            (None, None) => Err(Failure::usage(
                "provide either --spec FILE or --width W".to_string(),
            )),
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        }
    }
}

fn seed_override(seed: u64) -> u64 {
    match std::env::var("SINET_SEED") {
        Ok(v) => v.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

/// Print data to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(data: std::fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    if out.write_fmt(data).is_err() {
        std::process::exit(0);
    }
}

macro_rules! data {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

macro_rules! dataln {
    ($($arg:tt)*) => { emit(format_args!("{}\n", format_args!($($arg)*))) };
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let spec = args.src.load()?;
    let report = analyzer::analyze(&spec)?;
    match args.format {
        Format::Json => dataln!("{}", report.to_json()),
        Format::Table => data!("{}", report.to_table()),
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let seed = seed_override(args.seed);
    let results = gradcheck::run_all(seed, args.tol);
    let mut failures = 0;
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        dataln!(
            "{status}  {:<20} max_rel_err {:.3e}  (tol {:.1e})",
            r.name,
            r.max_rel_err,
            args.tol
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Failure::check(format!(
            "{failures}/{} gradient checks failed",
            results.len()
        )));
    }
    eprintln!("all {} checks passed (seed {seed})", results.len());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let spec: ModelSpec = read_json(&args.spec, "spec")?;
    let desc: DatasetDescriptor = read_json(&args.data, "dataset descriptor")?;
    let mut cfg: TrainConfig = read_json(&args.config, "train config")?;
    cfg.seed = seed_override(cfg.seed);

    let data = Dataset::generate(&desc)?;
    eprintln!(
        "training width {} on {} samples ({} classes) for {} epochs",
        spec.width,
        data.len(),
        desc.classes,
        cfg.epochs
    );
    let history = train::train(&spec, &data, &cfg)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", args.out.display())))?;
    let json = serde_json::to_string_pretty(&history).expect("history serializes");
    fs::write(args.out.join("history.json"), &json)
        .map_err(|e| Failure::usage(format!("cannot write history.json: {e}")))?;
    fs::write(args.out.join("history.csv"), history.to_csv())
        .map_err(|e| Failure::usage(format!("cannot write history.csv: {e}")))?;
    dataln!("{json}");
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), Failure> {
    let spec: ModelSpec = read_json(&args.spec, "spec")?;
    let desc: DatasetDescriptor = read_json(&args.data, "dataset descriptor")?;
    let mut cfg: TrainConfig = read_json(&args.config, "train config")?;
    cfg.seed = seed_override(cfg.seed);
    let data = Dataset::generate(&desc)?;
    let report = train::run_ablation(&spec, &data, &cfg)?;
    match args.format {
        Format::Json => {
            dataln!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            )
        }
        Format::Table => data!("{}", report.to_table()),
    }
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<(), Failure> {
    let spec = args.src.load()?;
    let rows = arch::trace(&spec)?;
    match args.format {
        Format::Json => dataln!(
            "{}",
            serde_json::to_string_pretty(&rows).expect("rows serialize")
        ),
        Format::Table => {
            dataln!("{:<22} {:>9} {:>6}", "layer", "channels", "hw");
            for r in &rows {
                dataln!("{:<22} {:>9} {:>6}", r.layer, r.out_channels, r.out_hw);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Trace(args) => cmd_trace(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
