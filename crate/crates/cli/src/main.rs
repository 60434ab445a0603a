//! `provkit` binary: select a system config and a dataset, apply flags and
//! dotted overrides, then run the cached pipeline (or a sweep / instability
//! experiment over it) in the foreground with a plain log file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use provkit_core::cache::Stage;
use provkit_core::config::{
    apply_overrides, load_config, merge_trees, validate_config, ConfigError, ConfigTree,
    ConfigValue, OverrideSet, Schema,
};
use provkit_core::experiments::{
    load_sweep_spec, resolve_tuned, run_n_times, run_sweep, write_instability_report,
    ExperimentError, RunStatus, SWEEP_REPORT_FILE,
};
use provkit_core::ingest::{generate_synthetic, IngestError, SynthParams};
use provkit_core::pipeline::{run_pipeline, PipelineError, PipelineOptions};
use provkit_core::Real;

const USAGE: &str = "\
provkit: provenance-based intrusion detection pipelines

USAGE:
  provkit run <system> <dataset> [FLAGS] [--<dotted.key>=<value> ...]
  provkit synth <dataset-id> [--seed=N] [--benign-events=N]
                             [--attack-chains=N] [--span-hours=N]

RUN FLAGS:
  --tuned                        overlay config/tuned/<system>_<dataset>.yml
  --experiment=run_n_times       multi-seed instability measurement
  --tuning_mode=hyperparameters  grid sweep; requires --tuning_file
  --tuning_file=<path>           sweep spec file (method: grid)
  --force_restart=<stage>        re-execute from this stage even on cache hits
  --restart_from_scratch         run under a fresh scratch cache root
  --cpu                          accepted for script compatibility (no-op)

Dotted overrides like --training.lr=0.0001 take precedence over both the
system config and a tuned overlay.

ENVIRONMENT:
  PROVKIT_ARTIFACTS    cache root           (default ./artifacts)
  PROVKIT_CONFIG_DIR   system config dir    (default ./config)
  PROVKIT_DATA_DIR     dataset dir          (default ./datasets)

EXIT CODES: 0 success, 1 configuration error, 2 runtime error
";

const STAGE_NAMES: &str =
    "construction, transformation, featurization (feat_training), batching, \
     training (gnn_training), evaluation, triage";

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("run") => cmd_run(&args[1..]),
        Some("synth") => cmd_synth(&args[1..]),
        Some("help") | Some("-h") | Some("--help") => {
            print!("{USAGE}");
            0
        }
        Some(other) => {
            eprintln!("error: unknown command {other:?}\n\n{USAGE}");
            1
        }
        None => {
            eprint!("{USAGE}");
            1
        }
    }
}

// ── Errors and exit codes ────────────────────────────────────────────────

enum CliError {
    /// Bad invocation, unknown system/dataset, config violations: exit 1.
    Config(String),
    /// Failures while executing a valid configuration: exit 2.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::InvalidConfig { .. }
            | PipelineError::BadConfig { .. }
            | PipelineError::Config(_)
            | PipelineError::Ingest(IngestError::UnknownDataset { .. })
            | PipelineError::Ingest(IngestError::DatasetNotFetched { .. }) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match &e {
            ExperimentError::BadSpec { .. }
            | ExperimentError::BadParam { .. }
            | ExperimentError::MissingTuned { .. }
            | ExperimentError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

// ── Logging ──────────────────────────────────────────────────────────────

/// Mirrors every record to stderr and, when available, to the run log.
struct DualLogger {
    file: Option<Mutex<std::fs::File>>,
}

impl log::Log for DualLogger {
    fn enabled(&self, meta: &log::Metadata) -> bool {
        meta.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let secs =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let line = format!("[{secs}] {:<5} {}: {}", record.level(), record.target(), record.args());
        eprintln!("{line}");
        if let Some(file) = &self.file {
            if let Ok(mut f) = file.lock() {
                let _ = writeln!(f, "{line}");
            }
        }
    }

    fn flush(&self) {}
}

/// Install the process logger; returns the log path when the file opened.
fn install_logger(log_path: Option<PathBuf>) -> Option<PathBuf> {
    let file = log_path.as_ref().and_then(|p| {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).ok()?;
        }
        std::fs::File::create(p).ok()
    });
    let opened = file.is_some();
    let logger = DualLogger { file: file.map(Mutex::new) };
    if log::set_boxed_logger(Box::new(logger)).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
    if opened {
        log_path
    } else {
        if let Some(p) = log_path {
            eprintln!("warning: could not open run log at {}", p.display());
        }
        None
    }
}

// ── Environment ──────────────────────────────────────────────────────────

struct Dirs {
    artifacts: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn dirs_from_env() -> Dirs {
    let get = |key: &str, default: &str| {
        std::env::var_os(key).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(default))
    };
    Dirs {
        artifacts: get("PROVKIT_ARTIFACTS", "./artifacts"),
        config: get("PROVKIT_CONFIG_DIR", "./config"),
        data: get("PROVKIT_DATA_DIR", "./datasets"),
    }
}

// ── run ──────────────────────────────────────────────────────────────────

struct RunInvocation {
    system: String,
    dataset: String,
    tuned: bool,
    experiment: Option<String>,
    tuning_mode: Option<String>,
    tuning_file: Option<PathBuf>,
    force_restart: Option<Stage>,
    restart_from_scratch: bool,
    overrides: OverrideSet,
}

fn parse_run(args: &[String]) -> Result<RunInvocation, String> {
    let mut positionals: Vec<&str> = Vec::new();
    let mut inv = RunInvocation {
        system: String::new(),
        dataset: String::new(),
        tuned: false,
        experiment: None,
        tuning_mode: None,
        tuning_file: None,
        force_restart: None,
        restart_from_scratch: false,
        overrides: OverrideSet::new(),
    };
    for arg in args {
        if let Some(rest) = arg.strip_prefix("--") {
            match rest {
                "tuned" => inv.tuned = true,
                "restart_from_scratch" => inv.restart_from_scratch = true,
                "cpu" => log::info!("--cpu accepted; execution is always CPU-bound"),
                _ => {
                    let (key, value) = rest
                        .split_once('=')
                        .ok_or_else(|| format!("flag --{rest} expects --{rest}=<value>"))?;
                    match key {
                        "experiment" => inv.experiment = Some(value.to_string()),
                        "tuning_mode" => {
                            if value != "hyperparameters" {
                                return Err(format!(
                                    "unsupported tuning mode {value:?} (only hyperparameters)"
                                ));
                            }
                            inv.tuning_mode = Some(value.to_string());
                        }
                        "tuning_file" => inv.tuning_file = Some(PathBuf::from(value)),
                        "force_restart" => {
                            inv.force_restart = Some(Stage::from_cli_name(value).ok_or_else(
                                || format!("unknown stage {value:?}; stages: {STAGE_NAMES}"),
                            )?);
                        }
                        _ if key.contains('.') => {
                            let (path, raw) = OverrideSet::parse_flag(arg)
                                .map_err(|e| e.to_string())?;
                            inv.overrides.push(path, raw);
                        }
                        _ => return Err(format!("unknown flag --{key} (see provkit --help)")),
                    }
                }
            }
        } else {
            positionals.push(arg);
        }
    }
    match positionals.as_slice() {
        [system, dataset] => {
            inv.system = system.to_string();
            inv.dataset = dataset.to_string();
        }
        _ => {
            return Err(format!(
                "run takes exactly two positionals <system> <dataset>, got {}",
                positionals.len()
            ))
        }
    }
    if inv.experiment.is_some() && inv.tuning_mode.is_some() {
        return Err("--experiment and --tuning_mode are mutually exclusive".into());
    }
    if inv.tuning_file.is_some() && inv.tuning_mode.is_none() {
        return Err("--tuning_file requires --tuning_mode=hyperparameters".into());
    }
    Ok(inv)
}

fn cmd_run(args: &[String]) -> i32 {
    let inv = match parse_run(args) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let dirs = dirs_from_env();
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let log_path = install_logger(Some(
        dirs.artifacts.join("logs").join(format!("run_{}_{}_{nanos}.log", inv.system, inv.dataset)),
    ));

    let code = match run_dispatch(&inv, &dirs) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e.message());
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    };
    if let Some(p) = log_path {
        println!("run log: {}", p.display());
    }
    code
}

fn run_dispatch(inv: &RunInvocation, dirs: &Dirs) -> Result<(), CliError> {
    let config_path = dirs.config.join(format!("{}.yml", inv.system));
    if !config_path.is_file() {
        return Err(CliError::Config(format!(
            "unknown system {:?}: no config at {}",
            inv.system,
            config_path.display()
        )));
    }
    let mut cfg = load_config(&config_path, &dirs.config)?;
    if inv.tuned {
        let overlay = resolve_tuned(&dirs.config, &inv.system, &inv.dataset)?;
        cfg = merge_trees(cfg, overlay);
    }
    // The dataset positional lands in the config before user overrides so
    // an explicit --construction.dataset=... still wins.
    cfg.set("construction.dataset", ConfigValue::Str(inv.dataset.clone()));
    let cfg = apply_overrides(&cfg, &inv.overrides)?;
    let violations = validate_config(&cfg, &Schema::reference());
    if !violations.is_empty() {
        let text =
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n");
        return Err(CliError::Config(format!("invalid config:\n{text}")));
    }

    let opts = PipelineOptions {
        force_from: inv.force_restart,
        fresh_root: inv.restart_from_scratch,
    };

    if inv.tuning_mode.is_some() {
        let file = inv
            .tuning_file
            .as_ref()
            .ok_or_else(|| CliError::Config("--tuning_mode requires --tuning_file=<path>".into()))?;
        return dispatch_sweep(&cfg, inv, dirs, file, &opts);
    }
    if let Some(name) = &inv.experiment {
        return dispatch_experiment(&cfg, inv, dirs, name);
    }

    let outcome = run_pipeline(&cfg, &dirs.data, &dirs.artifacts, &opts)?;
    for s in &outcome.stages {
        println!(
            "stage {:<14} {} {}",
            s.stage.name(),
            if s.reused { "hit " } else { "miss" },
            &s.digest[..12]
        );
    }
    println!("metrics: {}", outcome.metrics_path.display());
    println!("report: {}", outcome.report_path.display());
    println!("triage: {}", outcome.triage_path.display());
    print_metrics(&outcome.final_metrics);
    Ok(())
}

fn print_metrics(metrics: &BTreeMap<String, Real>) {
    for (name, value) in metrics {
        println!("  {name} = {value}");
    }
}

fn dispatch_sweep(
    cfg: &ConfigTree,
    inv: &RunInvocation,
    dirs: &Dirs,
    file: &Path,
    opts: &PipelineOptions,
) -> Result<(), CliError> {
    let spec = load_sweep_spec(file)?;
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let sweep_dir =
        dirs.artifacts.join("sweeps").join(format!("{}_{}_{stem}", inv.system, inv.dataset));
    let mut exec = |cell: &ConfigTree| {
        run_pipeline(cell, &dirs.data, &dirs.artifacts, opts)
            .map(|o| o.final_metrics)
            .map_err(|e| e.to_string())
    };
    let records = run_sweep(cfg, &spec, &sweep_dir, &mut exec)?;
    for r in &records {
        let status = match r.status {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        };
        let cell = r
            .overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("run {:>3} {status}  {cell}", r.idx);
    }
    println!("sweep report: {}", sweep_dir.join(SWEEP_REPORT_FILE).display());
    Ok(())
}

fn dispatch_experiment(
    cfg: &ConfigTree,
    inv: &RunInvocation,
    dirs: &Dirs,
    name: &str,
) -> Result<(), CliError> {
    if name != "run_n_times" {
        return Err(CliError::Config(format!(
            "unknown experiment {name:?} (known: run_n_times)"
        )));
    }
    let iterations = match cfg.get("experiment.uncertainty.deep_ensemble.iterations") {
        None => 5,
        Some(_) => cfg.get_int("experiment.uncertainty.deep_ensemble.iterations")? as u64,
    };
    let restart_name = match cfg.get("experiment.uncertainty.deep_ensemble.restart_from") {
        None => "feat_training".to_string(),
        Some(_) => cfg.get_str("experiment.uncertainty.deep_ensemble.restart_from")?.to_string(),
    };
    let restart = Stage::from_cli_name(&restart_name).ok_or_else(|| {
        CliError::Config(format!("unknown restart stage {restart_name:?}; stages: {STAGE_NAMES}"))
    })?;
    let mut exec = |cell: &ConfigTree, from: Stage| {
        let opts = PipelineOptions { force_from: Some(from), fresh_root: false };
        run_pipeline(cell, &dirs.data, &dirs.artifacts, &opts)
            .map(|o| o.final_metrics)
            .map_err(|e| e.to_string())
    };
    let aggregates = run_n_times(cfg, iterations, restart, &mut exec)?;
    let out_dir = dirs.artifacts.join("experiments").join(format!("{}_{}", inv.system, inv.dataset));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", out_dir.display())))?;
    let path = write_instability_report(&out_dir, &aggregates)?;
    for a in &aggregates {
        let rel = a
            .std_rel
            .map(|r| format!("{r:.3}%"))
            .unwrap_or_else(|| "n/a".to_string());
        println!("  {} mean {:.6} std {:.6} std_rel {rel}", a.metric_name, a.mean, a.std);
    }
    println!("instability report: {}", path.display());
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────────

fn cmd_synth(args: &[String]) -> i32 {
    let mut id: Option<&str> = None;
    let mut params = SynthParams::default();
    for arg in args {
        if let Some(rest) = arg.strip_prefix("--") {
            let parsed = (|| -> Result<(), String> {
                let (key, value) =
                    rest.split_once('=').ok_or_else(|| format!("flag --{rest} expects a value"))?;
                let num =
                    |v: &str| v.parse::<u64>().map_err(|_| format!("--{key} expects an integer"));
                match key {
                    "seed" => params.seed = num(value)?,
                    "benign-events" => params.n_benign_events = num(value)?,
                    "attack-chains" => params.n_attack_chains = num(value)? as u32,
                    "span-hours" => params.span_hours = num(value)? as u32,
                    _ => return Err(format!("unknown flag --{key}")),
                }
                Ok(())
            })();
            if let Err(msg) = parsed {
                eprintln!("error: {msg}");
                return 1;
            }
        } else if id.is_none() {
            id = Some(arg);
        } else {
            eprintln!("error: synth takes one positional <dataset-id>");
            return 1;
        }
    }
    let Some(id) = id else {
        eprintln!("error: synth requires a dataset id, e.g. provkit synth demo --seed=1");
        return 1;
    };
    install_logger(None);
    let dirs = dirs_from_env();
    let out_dir = dirs.data.join(id);
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("error: create {}: {e}", out_dir.display());
        return 2;
    }
    match generate_synthetic(&params, &out_dir) {
        Ok(report) => {
            println!("dataset: {}", out_dir.display());
            println!(
                "events: {} benign + {} attack, {} labeled nodes",
                report.benign_events, report.attack_events, report.labeled_nodes
            );
            println!("run it with: provkit run <system> {id}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
