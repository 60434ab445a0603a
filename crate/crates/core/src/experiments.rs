//! Grid sweeps, repeated-run instability measurement, and tuned-config
//! resolution.
//!
//! Pipeline execution is injected as a closure so these orchestrators stay
//! independent of the stage runner: sweeps and repeats only decide which
//! configs run and how results are recorded.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::Stage;
use crate::config::{
    apply_overrides, load_config, ConfigError, ConfigTree, ConfigValue, OverrideSet,
};
use crate::Real;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("bad sweep spec: {what}")]
    BadSpec { what: String },
    #[error("bad experiment parameter: {what}")]
    BadParam { what: String },
    #[error("experiment io at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("no tuned config for this system and dataset, expected {path}")]
    MissingTuned { path: PathBuf },
    #[error("iteration {iteration} failed: {message}")]
    RunFailed { iteration: u64, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path, e: impl ToString) -> ExperimentError {
    ExperimentError::Io { path: path.to_path_buf(), message: e.to_string() }
}

// ── Grid sweeps ──────────────────────────────────────────────────────────

/// Grid search over dotted config paths. The only supported method.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Dotted path → candidate values; keys iterate lexicographically.
    pub parameters: BTreeMap<String, Vec<ConfigValue>>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.parameters.is_empty() {
            return Err(ExperimentError::BadSpec { what: "no parameters".into() });
        }
        for (path, values) in &self.parameters {
            if values.is_empty() {
                return Err(ExperimentError::BadSpec {
                    what: format!("parameter {path} has an empty value list"),
                });
            }
        }
        Ok(())
    }
}

/// Render one candidate value as the raw string an override carries.
fn raw_value(path: &str, v: &ConfigValue) -> Result<String, ExperimentError> {
    match v {
        ConfigValue::Int(i) => Ok(i.to_string()),
        ConfigValue::Float(f) => Ok(f.to_string()),
        ConfigValue::Bool(b) => Ok(b.to_string()),
        ConfigValue::Str(s) => Ok(s.clone()),
        ConfigValue::List(items) => {
            let parts = items
                .iter()
                .map(|item| match item {
                    ConfigValue::List(_) | ConfigValue::Map(_) => Err(ExperimentError::BadSpec {
                        what: format!("parameter {path}: nested collections not sweepable"),
                    }),
                    other => raw_value(path, other),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(parts.join(","))
        }
        ConfigValue::Map(_) => Err(ExperimentError::BadSpec {
            what: format!("parameter {path}: map values are not sweepable"),
        }),
    }
}

/// Load a sweep file: `method: grid` plus a `parameters` map whose entries
/// are either a plain list or a `{values: [...]}` block.
pub fn load_sweep_spec(path: &Path) -> Result<SweepSpec, ExperimentError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tree = load_config(path, dir)?;
    match tree.get_str("method") {
        Ok("grid") => {}
        Ok(other) => {
            return Err(ExperimentError::BadSpec { what: format!("unknown method {other:?}") })
        }
        Err(_) => return Err(ExperimentError::BadSpec { what: "missing method key".into() }),
    }
    let params = tree
        .section("parameters")
        .ok_or_else(|| ExperimentError::BadSpec { what: "missing parameters map".into() })?;
    let mut parameters = BTreeMap::new();
    for (key, node) in params {
        let values = match node {
            ConfigValue::List(items) => items.clone(),
            ConfigValue::Map(m) => match m.get("values") {
                Some(ConfigValue::List(items)) => items.clone(),
                _ => {
                    return Err(ExperimentError::BadSpec {
                        what: format!("parameter {key} needs a values list"),
                    })
                }
            },
            _ => {
                return Err(ExperimentError::BadSpec {
                    what: format!("parameter {key} needs a value list"),
                })
            }
        };
        parameters.insert(key.clone(), values);
    }
    let spec = SweepSpec { parameters };
    spec.validate()?;
    Ok(spec)
}

/// Cartesian product in row-major order over the lexicographic key order:
/// the last key's values cycle fastest.
pub fn expand_grid(spec: &SweepSpec) -> Result<Vec<OverrideSet>, ExperimentError> {
    spec.validate()?;
    let keys: Vec<&String> = spec.parameters.keys().collect();
    let lens: Vec<usize> = keys.iter().map(|k| spec.parameters[*k].len()).collect();
    let total: usize = lens.iter().product();
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut picks = vec![0usize; keys.len()];
        for pos in (0..keys.len()).rev() {
            picks[pos] = idx % lens[pos];
            idx /= lens[pos];
        }
        let mut ov = OverrideSet::new();
        for (pos, key) in keys.iter().enumerate() {
            let value = &spec.parameters[*key][picks[pos]];
            ov.push((*key).clone(), raw_value(key, value)?);
        }
        out.push(ov);
    }
    Ok(out)
}

// ── Sweep execution ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunRecord {
    pub idx: usize,
    pub overrides: Vec<(String, String)>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: BTreeMap<String, Real>,
}

pub const SWEEP_REPORT_FILE: &str = "report.jsonl";

fn claim_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join(format!("run_{idx}.claim"))
}

fn result_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join(format!("run_{idx}.json"))
}

/// Execute every grid cell once across any number of cooperating
/// processes sharing `sweep_dir`: an atomically created claim file marks a
/// cell as owned, a result file marks it finished. Finished cells are
/// reused verbatim, claimed-but-unfinished cells are skipped, and a failed
/// run is recorded without aborting the sweep. Returns the records this
/// process can see, idx-ascending, and rewrites `report.jsonl` from them.
pub fn run_sweep(
    base: &ConfigTree,
    spec: &SweepSpec,
    sweep_dir: &Path,
    exec: &mut dyn FnMut(&ConfigTree) -> Result<BTreeMap<String, Real>, String>,
) -> Result<Vec<SweepRunRecord>, ExperimentError> {
    fs::create_dir_all(sweep_dir).map_err(|e| io_err(sweep_dir, e))?;
    let cells = expand_grid(spec)?;
    let mut records: Vec<SweepRunRecord> = Vec::new();

    for (idx, ov) in cells.iter().enumerate() {
        let result = result_path(sweep_dir, idx);
        if result.exists() {
            let text = fs::read_to_string(&result).map_err(|e| io_err(&result, e))?;
            let rec: SweepRunRecord =
                serde_json::from_str(&text).map_err(|e| io_err(&result, e))?;
            records.push(rec);
            continue;
        }
        let claim = claim_path(sweep_dir, idx);
        match fs::OpenOptions::new().write(true).create_new(true).open(&claim) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                log::info!("sweep cell {idx} claimed elsewhere, skipping");
                continue;
            }
            Err(e) => return Err(io_err(&claim, e)),
        }

        let rec = match apply_overrides(base, ov) {
            Err(e) => SweepRunRecord {
                idx,
                overrides: ov.entries.clone(),
                status: RunStatus::Failed,
                error: Some(e.to_string()),
                metrics: BTreeMap::new(),
            },
            Ok(cfg) => match exec(&cfg) {
                Ok(metrics) => SweepRunRecord {
                    idx,
                    overrides: ov.entries.clone(),
                    status: RunStatus::Ok,
                    error: None,
                    metrics,
                },
                Err(message) => SweepRunRecord {
                    idx,
                    overrides: ov.entries.clone(),
                    status: RunStatus::Failed,
                    error: Some(message),
                    metrics: BTreeMap::new(),
                },
            },
        };
        let text = serde_json::to_string(&rec).expect("record serializes");
        fs::write(&result, text).map_err(|e| io_err(&result, e))?;
        records.push(rec);
    }

    records.sort_by_key(|r| r.idx);
    let report = sweep_dir.join(SWEEP_REPORT_FILE);
    let mut w = fs::File::create(&report).map_err(|e| io_err(&report, e))?;
    for rec in &records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(&report, e))?;
    }
    Ok(records)
}

// ── Repeated runs ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub metric_name: String,
    pub mean: Real,
    /// Population standard deviation: the run set is the full population
    /// of interest, not a sample from one.
    pub std: Real,
    /// 100·std/mean; absent when the mean is zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_rel: Option<Real>,
}

pub fn aggregate_metrics(runs: &[BTreeMap<String, Real>]) -> Vec<MetricAggregate> {
    let mut by_name: BTreeMap<&str, Vec<Real>> = BTreeMap::new();
    for run in runs {
        for (name, &value) in run {
            by_name.entry(name).or_default().push(value);
        }
    }
    by_name
        .into_iter()
        .map(|(name, values)| {
            let n = values.len() as Real;
            let mean = values.iter().sum::<Real>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
            let std = var.sqrt();
            let std_rel = if mean == 0.0 { None } else { Some(100.0 * std / mean) };
            MetricAggregate { metric_name: name.to_string(), mean, std, std_rel }
        })
        .collect()
}

/// Run the pipeline `iterations` times varying only the model seed
/// (seed_i = base seed + i), forcing recomputation from `restart_from`
/// onward, and aggregate every metric across the runs.
pub fn run_n_times(
    cfg: &ConfigTree,
    iterations: u64,
    restart_from: Stage,
    exec: &mut dyn FnMut(&ConfigTree, Stage) -> Result<BTreeMap<String, Real>, String>,
) -> Result<Vec<MetricAggregate>, ExperimentError> {
    if iterations < 2 {
        return Err(ExperimentError::BadParam {
            what: format!("iterations must be >= 2, got {iterations}"),
        });
    }
    if restart_from < Stage::Featurization {
        log::warn!(
            "restart_from={} re-derives embeddings on every iteration; this is allowed but slow",
            restart_from.name()
        );
    }
    let base_seed = cfg.get_int("training.seed")?;
    let mut runs = Vec::with_capacity(iterations as usize);
    for i in 0..iterations {
        let mut ov = OverrideSet::new();
        ov.push("training.seed", (base_seed + i as i64).to_string());
        let cfg_i = apply_overrides(cfg, &ov)?;
        let metrics = exec(&cfg_i, restart_from)
            .map_err(|message| ExperimentError::RunFailed { iteration: i, message })?;
        runs.push(metrics);
    }
    Ok(aggregate_metrics(&runs))
}

pub const INSTABILITY_REPORT_FILE: &str = "instability.jsonl";

pub fn write_instability_report(
    dir: &Path,
    aggregates: &[MetricAggregate],
) -> Result<PathBuf, ExperimentError> {
    let path = dir.join(INSTABILITY_REPORT_FILE);
    let mut w = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    for agg in aggregates {
        let line = serde_json::to_string(agg).expect("aggregate serializes");
        writeln!(w, "{line}").map_err(|e| io_err(&path, e))?;
    }
    Ok(path)
}

// ── Tuned overlays ───────────────────────────────────────────────────────

/// Load `<config_dir>/tuned/<system>_<dataset>.yml`, the overlay the
/// `--tuned` flag merges over the base system config.
pub fn resolve_tuned(
    config_dir: &Path,
    system: &str,
    dataset: &str,
) -> Result<ConfigTree, ExperimentError> {
    let path = config_dir.join("tuned").join(format!("{system}_{dataset}.yml"));
    if !path.is_file() {
        return Err(ExperimentError::MissingTuned { path });
    }
    let dir = path.parent().expect("tuned path has a parent").to_path_buf();
    Ok(load_config(&path, &dir)?)
}
