//! Subcommands of the `deltashare` binary, callable in-process.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltashare::calibration::{
    calibrate, decode_dataset, encode_dataset, generate_synth, CalibConfig, CalibrationReport,
    Dataset, SynthTaskSpec,
};
use deltashare::evaluate::{evaluate, Report};
use deltashare::planner::{plan_from_densities, report_costs, CostEstimate, ReusePlan, Strategy, SubTaskPlan};
use deltashare::reuse::{measure_densities, DensityStats, Runtime};
use deltashare::store::{decode_bundle, encode_bundle, ModelBundle};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod render;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "DELTASHARE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] deltashare::Error),

    #[error("{path}:{line}:{column}: {message}")]
    ConfigSyntax { path: String, line: usize, column: usize, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

impl CliError {
    /// 2 for configuration, 3 for data and files, 4 for training divergence.
    pub fn exit_code(&self) -> i32 {
        use deltashare::Error as E;
        match self {
            CliError::ConfigSyntax { .. } | CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Parse { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument(_) | E::Schedule(_) => 2,
                E::Divergence { .. } => 4,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "deltashare", version, about = "Multi-task activation reuse toolkit")]
pub struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-task video dataset and print its digest.
    Generate(GenerateArgs),
    /// Train a base task and sparse sub-task deltas, then pick thresholds.
    Calibrate(CalibrateArgs),
    /// Measure densities on a calibration clip and choose reuse boundaries.
    Plan(PlanArgs),
    /// Execute a reuse plan over every clip and write a report.
    Run(RunArgs),
    /// Render a run report as tables, JSON or CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 0.95)]
    pub correlation: f64,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.1)]
    pub perturbation: f64,
    #[arg(long, default_value_t = 0.25)]
    pub motion_fraction: f64,
    #[arg(long, default_value_t = 12)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

impl GenerateArgs {
    pub fn spec(&self) -> SynthTaskSpec {
        SynthTaskSpec {
            seed: self.seed,
            tasks: self.tasks,
            correlation: self.correlation,
            frames: self.frames,
            perturbation: self.perturbation,
            motion_fraction: self.motion_fraction,
            clips: self.clips,
            tokens: self.tokens,
            patch_dim: self.patch_dim,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file of calibration settings; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration report (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Clip whose frames are measured.
    #[arg(long, default_value_t = 0)]
    pub clip: usize,
    #[arg(long, default_value_t = deltashare::planner::DEFAULT_KEYFRAME_PERIOD)]
    pub keyframe_period: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Dense,
    TaskOnly,
    Combined,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Dense => Strategy::Dense,
            StrategyArg::TaskOnly => Strategy::TaskOnly,
            StrategyArg::Combined => Strategy::Combined,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Plan file from `plan`; takes precedence over --strategy.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Combined)]
    pub strategy: StrategyArg,
    /// Comma-separated boundaries, one per sub-task, for a combined run without a plan file.
    #[arg(long, value_delimiter = ',')]
    pub boundaries: Vec<usize>,
    /// Overrides the plan's keyframe period.
    #[arg(long)]
    pub keyframe_period: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Output of `plan`: the plan, the densities it came from and its estimated cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub plan: ReusePlan,
    pub source: serde_json::Value,
    pub densities: Vec<DensityStats>,
    pub costs: CostEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub run: serde_json::Value,
    pub calibration: CalibrationReport,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Parse { path: path.display().to_string(), message: e.to_string() })
}

/// Parses a TOML calibration config, reporting syntax and schema errors with
/// their line and column.
pub fn parse_calib_config(text: &str, path: &str) -> CliResult<CalibConfig> {
    let cfg: CalibConfig = toml::from_str(text).map_err(|e| {
        let start = e.span().map_or(0, |s| s.start).min(text.len());
        let before = &text[..start];
        let line = before.matches('\n').count() + 1;
        let column = start - before.rfind('\n').map_or(0, |i| i + 1) + 1;
        CliError::ConfigSyntax {
            path: path.to_string(),
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset_digest(path: &Path) -> CliResult<(Dataset, String)> {
    let bytes = read(path)?;
    Ok((decode_dataset(&bytes)?, sha256_hex(&bytes)))
}

fn load_bundle_digest(path: &Path) -> CliResult<(ModelBundle, String)> {
    let bytes = read(path)?;
    Ok((decode_bundle(&bytes)?, sha256_hex(&bytes)))
}

/// Writes the dataset and returns its sha256.
pub fn cmd_generate(args: &GenerateArgs) -> CliResult<String> {
    let data = generate_synth(&args.spec())?;
    let bytes = encode_dataset(&data);
    write(&args.out, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Writes the bundle and calibration report and returns the bundle's sha256.
pub fn cmd_calibrate(args: &CalibrateArgs) -> CliResult<String> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|e| CliError::ConfigSyntax {
                path: p.display().to_string(),
                line: 1,
                column: 1,
                message: e.to_string(),
            })?;
            parse_calib_config(&text, &p.display().to_string())?
        }
        None => CalibConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (data, data_digest) = load_dataset_digest(&args.data)?;
    let outcome = calibrate(&data, &cfg)?;
    let bytes = encode_bundle(&outcome.bundle)?;
    let digest = sha256_hex(&bytes);
    write(&args.out, &bytes)?;
    let file = CalibrationFile {
        run: serde_json::json!({
            "command": "calibrate",
            "seed": cfg.seed,
            "dataset": data.spec,
            "dataset_sha256": data_digest,
            "bundle_sha256": digest,
        }),
        calibration: outcome.report,
    };
    write(&args.report, to_json(&file).as_bytes())?;
    Ok(digest)
}

pub fn cmd_plan(args: &PlanArgs) -> CliResult<PlanFile> {
    let (bundle, bundle_digest) = load_bundle_digest(&args.bundle)?;
    let (data, data_digest) = load_dataset_digest(&args.data)?;
    let clip = data.clips.get(args.clip).ok_or_else(|| {
        CliError::Usage(format!("clip {} out of range ({} clips)", args.clip, data.clips.len()))
    })?;
    let rt = Runtime::new(&bundle)?;
    let densities = measure_densities(&rt, &clip.frames)?;
    let mut plan = plan_from_densities(&densities, args.keyframe_period)?;
    for (sub, name) in plan.sub_tasks.iter_mut().zip(bundle.task_names().into_iter().skip(1)) {
        sub.task = name;
    }
    let costs = report_costs(&plan, &densities, &bundle.config)?;
    let file = PlanFile {
        plan,
        source: serde_json::json!({
            "command": "plan",
            "bundle_sha256": bundle_digest,
            "dataset_sha256": data_digest,
            "clip": args.clip,
        }),
        densities,
        costs,
    };
    write(&args.out, to_json(&file).as_bytes())?;
    Ok(file)
}

/// The plan to run, where it came from, and the clip it was measured on when
/// that clip belongs to the dataset being evaluated.
struct ResolvedPlan {
    plan: ReusePlan,
    source: serde_json::Value,
    planning_clip: Option<usize>,
}

fn resolve_plan(args: &RunArgs, bundle: &ModelBundle, data_digest: &str) -> CliResult<ResolvedPlan> {
    let layers = bundle.config.layers;
    let names: Vec<String> = bundle.task_names().into_iter().skip(1).collect();
    let mut planning_clip = None;
    let (mut plan, source) = match &args.plan {
        Some(p) => {
            let file: PlanFile = from_json(p)?;
            let digest = sha256_hex(&read(p)?);
            if file.source["dataset_sha256"] == data_digest {
                planning_clip = file.source["clip"].as_u64().map(|c| c as usize);
            }
            (file.plan, serde_json::json!({ "plan_sha256": digest }))
        }
        None => {
            let strategy = Strategy::from(args.strategy);
            let boundaries = match strategy {
                Strategy::Combined if args.boundaries.is_empty() => {
                    return Err(CliError::Usage(
                        "a combined run needs --plan or --boundaries".into(),
                    ))
                }
                Strategy::Combined => args.boundaries.clone(),
                _ => vec![layers; names.len()],
            };
            if boundaries.len() != names.len() {
                return Err(CliError::Usage(format!(
                    "{} boundaries for {} sub-tasks",
                    boundaries.len(),
                    names.len()
                )));
            }
            let subs = names
                .iter()
                .zip(&boundaries)
                .map(|(n, &b)| SubTaskPlan { task: n.clone(), boundary: b })
                .collect();
            let period = args.keyframe_period.unwrap_or(deltashare::planner::DEFAULT_KEYFRAME_PERIOD);
            (ReusePlan::new(strategy, period, layers, subs)?, serde_json::json!("flags"))
        }
    };
    if let Some(period) = args.keyframe_period {
        plan.keyframe_period = period;
    }
    plan.validate()?;
    Ok(ResolvedPlan { plan, source, planning_clip })
}

pub fn cmd_run(args: &RunArgs) -> CliResult<Report> {
    let (bundle, bundle_digest) = load_bundle_digest(&args.bundle)?;
    let (mut data, data_digest) = load_dataset_digest(&args.data)?;
    let ResolvedPlan { plan, source: plan_source, planning_clip } = resolve_plan(args, &bundle, &data_digest)?;
    // densities that chose the plan must not come from an evaluated clip
    if let Some(c) = planning_clip.filter(|&c| c < data.clips.len()) {
        if data.clips.len() == 1 {
            return Err(CliError::Usage("the plan was measured on the only clip; nothing is left to evaluate".into()));
        }
        data.clips.remove(c);
    }
    let rt = Runtime::new(&bundle)?;
    let run = serde_json::json!({
        "command": "run",
        "seed": data.spec.seed,
        "dataset": data.spec,
        "dataset_sha256": data_digest,
        "bundle_sha256": bundle_digest,
        "backbone": bundle.config,
        "plan_source": plan_source,
        "held_out_clip": planning_clip,
    });
    let report = evaluate(&rt, &plan, &data, run)?;
    write(&args.out, to_json(&report).as_bytes())?;
    Ok(report)
}

/// Loads a report, checks its totals and percentages against its raw counts,
/// and renders it.
pub fn cmd_report(args: &ReportArgs) -> CliResult<String> {
    let text = String::from_utf8_lossy(&read(&args.input)?).into_owned();
    if text.trim().is_empty() {
        return Err(CliError::Parse { path: args.input.display().to_string(), message: "empty report".into() });
    }
    let report = Report::from_json(&text)?;
    render::check_consistency(&report)?;
    let out = match args.format {
        Format::Text => render::render_text(&report),
        Format::Json => to_json(&report),
        Format::Csv => render::render_csv(&report),
    };
    if let Some(p) = &args.out {
        write(p, out.as_bytes())?;
    }
    Ok(out)
}

/// Sets the global worker pool size. Only the first call takes effect.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs a parsed command line and returns what it prints on stdout.
pub fn run_cli(cli: &Cli) -> CliResult<String> {
    init_threads(cli.threads);
    match &cli.command {
        Command::Generate(a) => Ok(format!("{}  {}\n", cmd_generate(a)?, a.out.display())),
        Command::Calibrate(a) => Ok(format!("{}  {}\n", cmd_calibrate(a)?, a.out.display())),
        Command::Plan(a) => Ok(render::render_plan(&cmd_plan(a)?)),
        Command::Run(a) => Ok(render::render_text(&cmd_run(a)?)),
        Command::Report(a) => {
            let out = cmd_report(a)?;
            Ok(if a.out.is_some() { String::new() } else { out })
        }
    }
}
