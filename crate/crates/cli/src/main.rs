use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use truncox::data::{LoadOptions, Schema};
use truncox::em::EMConfig;
use truncox::inference::bootstrap_around;
use truncox::simulation::{grid_scenarios, write_long_csv, write_replicates_csv, write_report_csv, GridCell, Grid};
use truncox::{
    build_fit_report, conditional_kendall_tau, exec, fit_estimator, load_dataset, run_study, BootstrapOptions,
    Estimator, ExecMode, SimulationScenario, StudyOptions, Ties,
};

const MANIFEST_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "truncox", version, about = "Cox regression under dependent double truncation")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run replications and resamples on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Fit a Cox model to a truncated-data CSV.
    Fit(FitArgs),
    /// Run a Monte Carlo study from a scenario file.
    Simulate(SimulateArgs),
    /// Conditional Kendall's tau test of quasi-independence.
    TestIndependence(IndependenceArgs),
    /// List the bundled scenarios.
    Scenarios,
}

#[derive(Args, Debug, Serialize)]
struct InputArgs {
    /// CSV with event time, truncation bounds and covariates.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "left")]
    left_col: String,
    #[arg(long, default_value = "right")]
    right_col: String,
    /// Comma-separated covariate columns; default is every column starting with `z`.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Drop rows with time outside [left, right] instead of failing.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
enum TiesArg {
    Breslow,
    Efron,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value = "em", value_parser = parse_estimator)]
    method: Estimator,
    /// Bootstrap resamples for standard errors (0 disables).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// EM convergence threshold on the parameter change.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value = "efron")]
    ties: TiesArg,
    /// Report path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Scenario TOML file.
    #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
    scenario: Option<PathBuf>,
    /// Name of a bundled scenario (see `truncox scenarios`).
    #[arg(long)]
    bundled: Option<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Vec<Estimator>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Bootstrap resamples per replicate.
    #[arg(long = "bootstrap")]
    bootstrap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Left truncation targets for a grid run.
    #[arg(long, value_delimiter = ',')]
    grid_left: Vec<f64>,
    /// Right truncation targets for a grid run.
    #[arg(long, value_delimiter = ',')]
    grid_right: Vec<f64>,
    /// Left dependence coefficients for a grid run.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grid_beta_l1: Vec<f64>,
    /// Ignore the scenario's grid and run a single cell.
    #[arg(long)]
    no_grid: bool,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct IndependenceArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1000)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    s.parse().map_err(|e: truncox::Error| e.to_string())
}

/// Sidecar describing how an output was produced. Timestamps live only
/// here so the outputs themselves stay byte-identical across runs.
#[derive(Serialize)]
struct RunManifest<'a> {
    manifest_version: u32,
    tool: &'static str,
    tool_version: &'static str,
    command: &'a Command,
    seed: Option<u64>,
    input_digest: String,
    outputs: Vec<String>,
    started_at: u64,
    finished_at: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
enum CliError {
    Lib(truncox::Error),
    Io(String),
}

impl From<truncox::Error> for CliError {
    fn from(e: truncox::Error) -> Self {
        Self::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Lib(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        if self.exit_code() == 3 {
            "numerical"
        } else {
            "validation"
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Lib(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        exec::set_threads(t)?;
    }
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    let started = unix_now();
    match &cli.command {
        Command::Fit(args) => cmd_fit(&cli.command, args, mode, started),
        Command::Simulate(args) => cmd_simulate(&cli.command, args, mode, started),
        Command::TestIndependence(args) => cmd_test_independence(&cli.command, args, started),
        Command::Scenarios => {
            for name in SimulationScenario::bundled_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn load(args: &InputArgs) -> Result<(truncox::data::LoadOutcome, String), CliError> {
    let bytes = fs::read(&args.input).map_err(|e| CliError::Io(format!("{}: {e}", args.input.display())))?;
    let options = LoadOptions {
        schema: Schema {
            time: args.time_col.clone(),
            left: args.left_col.clone(),
            right: args.right_col.clone(),
            covariates: args.covariates.clone(),
        },
        skip_invalid: args.skip_invalid,
        ..LoadOptions::default()
    };
    let outcome = load_dataset(&args.input, &options)?;
    if !outcome.skipped_rows.is_empty() {
        log::warn!("skipped {} rows violating left <= time <= right: {:?}", outcome.skipped_rows.len(), outcome.skipped_rows);
    }
    Ok((outcome, sha256_hex(&bytes)))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn manifest<'a>(command: &'a Command, seed: Option<u64>, digest: String, outputs: Vec<String>, started: u64) -> RunManifest<'a> {
    RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool: "truncox",
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        input_digest: digest,
        outputs,
        started_at: started,
        finished_at: unix_now(),
    }
}

fn cmd_fit(command: &Command, args: &FitArgs, mode: ExecMode, started: u64) -> Result<(), CliError> {
    let (loaded, digest) = load(&args.input)?;
    let em = EMConfig {
        epsilon: args.epsilon,
        max_iter: args.max_iter,
        ties: match args.ties {
            TiesArg::Breslow => Ties::Breslow,
            TiesArg::Efron => Ties::Efron,
        },
        ..EMConfig::default()
    };
    em.validate()?;
    let ds = &loaded.dataset;
    let fit = fit_estimator(ds, args.method, &em)?;
    let boot = if args.bootstrap > 0 {
        Some(bootstrap_around(ds, args.method, &fit, args.bootstrap, args.seed, &BootstrapOptions { em, exec: mode })?)
    } else {
        None
    };
    let report = build_fit_report(ds, &loaded.covariate_names, args.method, &fit, boot.as_ref())?;
    write_output(args.output.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if let Some(out) = &args.output {
        let m = manifest(command, Some(args.seed), digest, vec![out.display().to_string()], started);
        write_manifest(&sidecar(out), &m)?;
    }
    Ok(())
}

fn cmd_simulate(command: &Command, args: &SimulateArgs, mode: ExecMode, started: u64) -> Result<(), CliError> {
    let text = match (&args.scenario, &args.bundled) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        (None, Some(name)) => SimulationScenario::bundled(name)?.to_toml()?,
        (None, None) => unreachable!("clap requires one of --scenario/--bundled"),
    };
    let mut sc = SimulationScenario::from_toml(&text)?;
    if !args.estimators.is_empty() {
        sc.estimators = args.estimators.clone();
    }
    if let Some(r) = args.reps {
        sc.reps = r;
    }
    if let Some(n) = args.n {
        sc.n = n;
    }
    if let Some(b) = args.bootstrap {
        sc.bootstrap = b;
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    let overrides = Grid { target_left: args.grid_left.clone(), target_right: args.grid_right.clone(), beta_l1: args.grid_beta_l1.clone() };
    let grid = if args.no_grid {
        None
    } else if overrides != Grid::default() {
        Some(overrides)
    } else {
        sc.grid.clone()
    };
    sc.validate()?;
    let mut options = StudyOptions::from_scenario(&sc);
    options.exec = mode;
    let cells = match &grid {
        Some(g) => grid_scenarios(&sc, g),
        None => vec![sc.clone()],
    };
    let mut grid_cells = Vec::with_capacity(cells.len());
    for cell in cells {
        log::info!("running {}", cell.name);
        let report = run_study(&cell, &options)?;
        grid_cells.push(GridCell { target_left: cell.target_left, target_right: cell.target_right, beta_l1: cell.beta_l[0], report });
    }

    fs::create_dir_all(&args.output_dir)?;
    let dir = &args.output_dir;
    let mut report_csv = Vec::new();
    let mut replicate_csv = Vec::new();
    for (k, cell) in grid_cells.iter().enumerate() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_report_csv(&mut a, &cell.report)?;
        write_replicates_csv(&mut b, &cell.report)?;
        // Keep only the first header line.
        let skip = |buf: Vec<u8>| if k == 0 { buf } else { buf.splitn(2, |&c| c == b'\n').nth(1).unwrap_or_default().to_vec() };
        report_csv.extend(skip(a));
        replicate_csv.extend(skip(b));
    }
    let mut long = Vec::new();
    write_long_csv(&mut long, &grid_cells)?;
    let files = [("report.csv", report_csv), ("replicates.csv", replicate_csv), ("figure.csv", long)];
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
    }
    let resolved = sc.to_toml()?;
    fs::write(dir.join("scenario.toml"), &resolved)?;
    let outputs = files.iter().map(|(n, _)| n.to_string()).chain(["scenario.toml".to_string()]).collect();
    let m = manifest(command, Some(sc.seed), sha256_hex(text.as_bytes()), outputs, started);
    write_manifest(&dir.join("manifest.json"), &m)
}

#[derive(Serialize)]
struct IndependenceReport {
    version: u32,
    n: usize,
    tau_left: f64,
    tau_right: f64,
    comparable_pairs_left: usize,
    comparable_pairs_right: usize,
    permutations: usize,
    p_value: f64,
}

fn cmd_test_independence(command: &Command, args: &IndependenceArgs, started: u64) -> Result<(), CliError> {
    let (loaded, digest) = load(&args.input)?;
    let r = conditional_kendall_tau(&loaded.dataset, args.permutations, args.seed)?;
    let report = IndependenceReport {
        version: 1,
        n: loaded.dataset.n(),
        tau_left: r.tau.0,
        tau_right: r.tau.1,
        comparable_pairs_left: r.comparable_pairs.0,
        comparable_pairs_right: r.comparable_pairs.1,
        permutations: r.permutations,
        p_value: r.p_value,
    };
    write_output(args.output.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if let Some(out) = &args.output {
        let m = manifest(command, Some(args.seed), digest, vec![out.display().to_string()], started);
        write_manifest(&sidecar(out), &m)?;
    }
    Ok(())
}
