//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime or data error,
//! 3 verification failure. Timestamps only ever go to `run.log`; every
//! other output is a pure function of the inputs and seed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assignment::{solve_assignments, verify_solver, ConstraintSpec, SolveProblem, SolverError};
use crate::bounds::{verify_coverage_grid, verify_upper_bound, DEFAULT_P_STAR};
use crate::data::{counts_table, read_dataset, write_dataset, DataConfig, DataError, Split, Splits};
use crate::evaluation::{
    ablate_epsilon, ablate_labeled_fraction, nvp_select, run_on_splits, write_ablation_csv, ExperimentOutcome,
    RunRecord, SweepEntry, SweepResult,
};
use crate::group_weights::GroupWeights;
use crate::trainers::{TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "wdro", version, about = "Worst-off DRO experiments")]
pub struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the data and training seeds of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps, ablations and Monte Carlo runs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test dataset files.
    GenData,
    /// Train one model and write its metrics and parameters.
    Train,
    /// Run a hyper-parameter grid and select a model with NVP.
    Sweep,
    /// Run the solver, bound and upper-bound property checks.
    Verify(VerifyArgs),
    /// Solve a single assignment problem and print the matrix as CSV.
    Assign(AssignArgs),
    /// Seed-averaged accuracies over labeled fractions.
    AblateFraction,
    /// Seed-averaged accuracies over constraint slacks.
    AblateEps,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Greedy solver against the simplex oracle on random instances.
    #[arg(long)]
    pub solver: bool,
    /// Monte Carlo coverage of the marginal constraint set.
    #[arg(long)]
    pub bounds: bool,
    /// Solver optimum against the group DRO objective at ground truth.
    #[arg(long)]
    pub upper_bound: bool,
    /// Random instances for --solver and --upper-bound.
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    /// Monte Carlo trials per grid cell for --bounds.
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    /// File of per-sample losses separated by commas, spaces or newlines.
    #[arg(long)]
    pub losses: PathBuf,
    /// Comma-separated group marginals.
    #[arg(long, value_delimiter = ',', required = true)]
    pub marginals: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    /// Comma-separated group weights (default uniform).
    #[arg(long, value_delimiter = ',')]
    pub q: Vec<f64>,
    /// Pinned rows as `row:group`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub pins: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "error: {e:#}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
            CliError::Verification(s) => write!(f, "verification failed: {s}"),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn from_train(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Data(DataError::InvalidConfig(_)) => usage(e),
        e => runtime(e),
    }
}

fn from_data(e: DataError) -> CliError {
    match e {
        DataError::InvalidConfig(_) => usage(e),
        e => runtime(e),
    }
}

/// Where the data of an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    /// A directory written by `gen-data`.
    Files {
        dir: PathBuf,
        #[serde(default)]
        num_groups: Option<usize>,
    },
    Generate(DataConfig),
}

impl DataSource {
    fn load(&self) -> Result<Splits, CliError> {
        match self {
            DataSource::Generate(cfg) => cfg.generate().map_err(from_data),
            DataSource::Files { dir, num_groups } => {
                let read = |name: &str, split| {
                    read_dataset(&dir.join(name), split, *num_groups)
                        .with_context(|| format!("reading {}", dir.join(name).display()))
                        .map_err(runtime)
                };
                let train = read("train.csv", Split::Train)?;
                let g = Some(train.num_groups);
                let read_eval = |name: &str, split| {
                    read_dataset(&dir.join(name), split, num_groups.or(g))
                        .with_context(|| format!("reading {}", dir.join(name).display()))
                        .map_err(runtime)
                };
                Ok(Splits {
                    val: read_eval("val.csv", Split::Val)?,
                    test: read_eval("test.csv", Split::Test)?,
                    train,
                })
            }
        }
    }

    fn reseed(&mut self, seed: u64) {
        if let DataSource::Generate(cfg) = self {
            cfg.seed = seed;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
}

/// Base config plus named axes; runs are the Cartesian product with the
/// last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: DataSource,
    pub base: TrainConfig,
    #[serde(default)]
    pub grid: serde_json::Map<String, Value>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];
pub const DEFAULT_EPS_GRID: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

/// Expand a sweep grid into configs, in order.
pub fn expand_grid(base: &TrainConfig, grid: &serde_json::Map<String, Value>) -> Result<Vec<TrainConfig>, CliError> {
    let base_value = serde_json::to_value(base).map_err(usage)?;
    let mut points: Vec<Value> = vec![base_value];
    for (key, values) in grid {
        let values = values
            .as_array()
            .ok_or_else(|| usage(anyhow!("grid axis `{key}` must be a list")))?;
        if values.is_empty() {
            return Err(usage(anyhow!("grid axis `{key}` is empty")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut p = p.clone();
                    p[key.as_str()] = v.clone();
                    p
                })
            })
            .collect();
    }
    points
        .into_iter()
        .map(|p| {
            let cfg: TrainConfig = serde_json::from_value(p).map_err(|e| usage(anyhow!("grid point: {e}")))?;
            cfg.validate().map_err(from_train)?;
            Ok(cfg)
        })
        .collect()
}

fn read_config<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T, CliError> {
    let path = path.ok_or_else(|| usage(anyhow!("this command needs --config PATH")))?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(usage)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn append_log(dir: &Path, msg: &str) -> Result<(), CliError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))
        .map_err(runtime)?;
    writeln!(f, "{} {msg}", chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)).map_err(runtime)
}

/// Write `metrics.jsonl` and `params.json` for one finished run.
pub fn write_run(dir: &Path, outcome: &ExperimentOutcome) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    let mut lines = String::new();
    let records: Vec<&RunRecord> = outcome
        .run
        .records
        .iter()
        .chain([&outcome.val, &outcome.test])
        .collect();
    for r in records {
        lines.push_str(&serde_json::to_string(r).map_err(runtime)?);
        lines.push('\n');
    }
    fs::write(dir.join("metrics.jsonl"), lines).map_err(runtime)?;
    write_json(&dir.join("params.json"), &outcome.run.params)
}

fn cmd_gen_data(cli: &Cli) -> Result<(), CliError> {
    let mut cfg: DataConfig = match &cli.config {
        Some(p) => read_config(Some(p))?,
        None => DataConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let dir = out_dir(cli)?;
    let splits = cfg.generate().map_err(from_data)?;
    for (name, ds) in [("train.csv", &splits.train), ("val.csv", &splits.val), ("test.csv", &splits.test)] {
        write_dataset(ds, &dir.join(name)).map_err(runtime)?;
    }
    write_json(&dir.join("data_config.json"), &cfg)?;
    print!("{}", counts_table("train", &splits.train));
    append_log(&dir, &format!("gen-data wrote {} train rows", splits.train.len()))
}

fn cmd_train(cli: &Cli) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.data.reseed(s);
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(from_train)?;
    let dir = out_dir(cli)?;
    let splits = cfg.data.load()?;
    append_log(&dir, &format!("train {} started", cfg.train.algorithm.as_str()))?;
    let outcome = run_on_splits(&splits, &cfg.train).map_err(from_train)?;
    write_run(&dir, &outcome)?;
    write_json(&dir.join("config.json"), &cfg)?;
    for w in &outcome.run.warnings {
        append_log(&dir, &format!("warning: {w}"))?;
    }
    let t = &outcome.test;
    println!(
        "test acc_overall {:.4} minority (group {}) {:.4}",
        t.acc_overall, outcome.minority_group, t.acc_group[outcome.minority_group]
    );
    append_log(&dir, "train finished")
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let mut cfg: SweepConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.data.reseed(s);
        cfg.base.seed = s;
    }
    let configs = expand_grid(&cfg.base, &cfg.grid)?;
    let dir = out_dir(cli)?;
    let splits = cfg.data.load()?;
    append_log(&dir, &format!("sweep over {} configs started", configs.len()))?;
    let width = configs.len().to_string().len();
    let entries: Vec<SweepEntry> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let run_dir = dir.join("runs").join(format!("{i:0width$}"));
            let res = run_on_splits(&splits, c)
                .map_err(|e| e.to_string())
                .and_then(|o| write_run(&run_dir, &o).map(|_| o).map_err(|e| e.to_string()));
            match res {
                Ok(o) => SweepEntry { config: c.clone(), val: Some(o.val), test: Some(o.test), error: None },
                Err(e) => SweepEntry { config: c.clone(), val: None, test: None, error: Some(e) },
            }
        })
        .collect();
    let sweep = SweepResult { minority_group: splits.train.minority_group(), entries };
    write_sweep_csv(&sweep, &cfg.grid, &dir.join("sweep.csv"))?;
    for (i, e) in sweep.entries.iter().enumerate() {
        if let Some(err) = &e.error {
            append_log(&dir, &format!("run {i} failed: {err}"))?;
        }
    }
    let selected = nvp_select(&sweep, cfg.top_k);
    let selection = serde_json::json!({
        "index": selected,
        "minority_group": sweep.minority_group,
        "top_k": cfg.top_k,
        "config": selected.map(|i| &sweep.entries[i].config),
        "val": selected.and_then(|i| sweep.entries[i].val.as_ref()),
        "test": selected.and_then(|i| sweep.entries[i].test.as_ref()),
    });
    write_json(&dir.join("selection.json"), &selection)?;
    append_log(&dir, "sweep finished")?;
    match selected {
        Some(i) => {
            println!("selected config {i} of {}", sweep.entries.len());
            Ok(())
        }
        None => Err(runtime(anyhow!("every run in the sweep failed"))),
    }
}

fn write_sweep_csv(sweep: &SweepResult, grid: &serde_json::Map<String, Value>, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    let mut header = vec!["config_id".to_string(), "algorithm".to_string()];
    header.extend(grid.keys().cloned());
    header.extend(
        ["val_acc_overall", "val_acc_min", "test_acc_overall", "test_acc_min", "error"]
            .map(String::from),
    );
    w.write_record(&header).map_err(runtime)?;
    let mg = sweep.minority_group;
    let fmt = |r: &Option<RunRecord>, f: &dyn Fn(&RunRecord) -> f64| r.as_ref().map(|r| f(r).to_string()).unwrap_or_default();
    for (i, e) in sweep.entries.iter().enumerate() {
        let cfg = serde_json::to_value(&e.config).map_err(runtime)?;
        let mut row = vec![i.to_string(), e.config.algorithm.as_str().to_string()];
        row.extend(grid.keys().map(|k| match &cfg[k.as_str()] {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        }));
        row.push(fmt(&e.val, &|r| r.acc_overall));
        row.push(fmt(&e.val, &|r| r.acc_group[mg]));
        row.push(fmt(&e.test, &|r| r.acc_overall));
        row.push(fmt(&e.test, &|r| r.acc_group[mg]));
        row.push(e.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> Result<(), CliError> {
    if !(args.solver || args.bounds || args.upper_bound) {
        return Err(usage(anyhow!("verify needs at least one of --solver, --bounds, --upper-bound")));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut failures = Vec::new();
    let mut emit = |name: &str, passed: bool, value: Value| -> Result<(), CliError> {
        println!("{}", serde_json::to_string_pretty(&serde_json::json!({ name: value })).map_err(runtime)?);
        if let Some(dir) = &cli.out {
            fs::create_dir_all(dir).map_err(runtime)?;
            write_json(&dir.join(format!("verify_{name}.json")), &value)?;
        }
        if !passed {
            failures.push(name.to_string());
        }
        Ok(())
    };
    if args.solver {
        let r = verify_solver(args.instances, seed);
        emit("solver", r.passed, serde_json::to_value(&r).map_err(runtime)?)?;
    }
    if args.bounds {
        let r = verify_coverage_grid(&DEFAULT_P_STAR, args.trials.max(100), seed);
        emit("bounds", r.passed, serde_json::to_value(&r).map_err(runtime)?)?;
    }
    if args.upper_bound {
        let r = verify_upper_bound(args.instances.max(1), seed);
        emit("upper_bound", r.passed, serde_json::to_value(&r).map_err(runtime)?)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failures.join(", ")))
    }
}

fn parse_losses(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| usage(anyhow!("loss `{t}`: {e}"))))
        .collect()
}

fn parse_pin(s: &str) -> Result<(usize, usize), CliError> {
    let (i, j) = s
        .split_once(':')
        .ok_or_else(|| usage(anyhow!("pin `{s}` must look like row:group")))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| usage(anyhow!("pin `{s}`: {e}")));
    Ok((p(i)?, p(j)?))
}

fn cmd_assign(args: &AssignArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.losses)
        .with_context(|| format!("reading {}", args.losses.display()))
        .map_err(usage)?;
    let losses = parse_losses(&text)?;
    let m = args.marginals.len();
    let q = if args.q.is_empty() {
        GroupWeights::uniform(m)
    } else {
        GroupWeights::from_unnormalized(&args.q).map_err(usage)?
    };
    let pins = args.pins.iter().map(|s| parse_pin(s)).collect::<Result<Vec<_>, _>>()?;
    let problem = SolveProblem::new(losses, q, ConstraintSpec::new(args.marginals.clone(), args.eps, pins));
    let sol = solve_assignments(&problem).map_err(|e| match e {
        SolverError::InvalidProblem(_) | SolverError::DegenerateMarginal { .. } => usage(e),
        e => runtime(e),
    })?;
    let mut out = std::io::stdout().lock();
    let header: Vec<String> = (0..m).map(|j| format!("g{j}")).collect();
    let write = |out: &mut std::io::StdoutLock, s: String| writeln!(out, "{s}").map_err(runtime);
    write(&mut out, header.join(","))?;
    for i in 0..sol.assignment.rows() {
        let row: Vec<String> = sol.assignment.row(i).iter().map(|v| v.to_string()).collect();
        write(&mut out, row.join(","))?;
    }
    eprintln!("objective {}", sol.objective);
    Ok(())
}

fn cmd_ablate(cli: &Cli, fraction: bool) -> Result<(), CliError> {
    let mut cfg: AblationConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.train.validate().map_err(from_train)?;
    let dir = out_dir(cli)?;
    let (rows, name, file) = if fraction {
        let values = cfg.values.clone().unwrap_or(DEFAULT_FRACTIONS.to_vec());
        (ablate_labeled_fraction(&cfg.data, &cfg.train, &values, &cfg.seeds), "fraction", "ablate_fraction.csv")
    } else {
        let values = cfg.values.clone().unwrap_or(DEFAULT_EPS_GRID.to_vec());
        (ablate_epsilon(&cfg.data, &cfg.train, &values, &cfg.seeds), "epsilon", "ablate_eps.csv")
    };
    let rows = rows.map_err(from_train)?;
    write_ablation_csv(&rows, name, &dir.join(file)).map_err(runtime)?;
    print!("{}", fs::read_to_string(dir.join(file)).map_err(runtime)?);
    append_log(&dir, &format!("{file} written with {} rows", rows.len()))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let go = || match &cli.command {
        Command::GenData => cmd_gen_data(cli),
        Command::Train => cmd_train(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::Verify(a) => cmd_verify(cli, a),
        Command::Assign(a) => cmd_assign(a),
        Command::AblateFraction => cmd_ablate(cli, true),
        Command::AblateEps => cmd_ablate(cli, false),
    };
    match cli.jobs {
        Some(0) => Err(usage(anyhow!("--jobs must be positive"))),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(runtime)?
            .install(go),
        None => go(),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
