//! Stage orchestration: runs the seven-stage pipeline through the
//! content-addressed cache, wiring each stage's artifacts to the next.
//!
//! Every stage reads its inputs from the previous stage's committed
//! outputs directory, never from in-memory state, so a cache hit and a
//! fresh build are indistinguishable downstream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{
    build_neighbor_index, from_window, global_batch, inter_batch, intra_batch, merge_batches,
    Batch, BatchError, BatchOrigin, ChunkMode, NeighborIndex,
};
use crate::cache::{
    canonical_args, CacheError, CacheState, Stage, StageCache, ROOT_PARENT,
};
use crate::config::{validate_config, ConfigError, ConfigTree, ConfigValue, Schema};
use crate::evaluate::{
    append_metrics_jsonl, compute_metrics, export_plot_data, per_attack_recall,
    score_nodes, threshold_fixed, threshold_kmeans, threshold_max_val, EvalError, Reducer,
    ScoreReport,
};
use crate::featurize::{
    build_corpus, embed_node, parse_method, train_skipgram, EmbedMethod, EmbeddingTable,
    FeatureSpec, FeaturizeError, SkipgramParams, KIND_ONE_HOT,
};
use crate::ingest::{
    build_windows, load_ground_truth, parse_events_file, read_windows_jsonl,
    resolve_dataset_dir, split_dataset, write_windows_jsonl, EntityId, IngestError, ProvGraph,
    EVENTS_FILE, LABELS_FILE,
};
use crate::model::{
    build_tgn_context, train, update_feature_cache, Activation, Checkpoint, DecoderKind,
    EncoderKind, FeatureCache, Matrix, ModelConfig, ModelError, Objective, TrainItem,
};
use crate::transform::{apply_transforms, TransformError};
use crate::triage::{triage_by_score, write_triage_table, TriageError, TRIAGE_FILE};
use crate::Real;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n{what}")]
    InvalidConfig { what: String },
    #[error("bad pipeline config: {what}")]
    BadConfig { what: String },
    #[error("missing artifact {path}")]
    MissingArtifact { path: PathBuf },
    #[error("pipeline io at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Triage(#[from] TriageError),
}

fn io_err(path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    /// Force re-execution from this stage onward even on cache hits.
    pub force_from: Option<Stage>,
    /// Run under a new timestamped cache root so nothing is reused.
    pub fresh_root: bool,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub digest: String,
    /// True when the stage's outputs were served from the cache.
    pub reused: bool,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    /// Effective cache root (a fresh scratch root when requested).
    pub root: PathBuf,
    pub stages: Vec<StageReport>,
    /// Final-epoch metrics, flattened to name → value.
    pub final_metrics: BTreeMap<String, Real>,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
    pub triage_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PlannedStage {
    pub stage: Stage,
    pub digest: String,
    pub parent: String,
    pub forced: bool,
    /// What resolution would find right now; forced stages rebuild anyway.
    pub would_hit: bool,
}

/// The subtree that keys a stage's digest: the config section named after
/// the stage. Anything a stage reads from another section is covered by
/// that section's own digest upstream in the chain.
fn stage_args(cfg: &ConfigTree, stage: Stage) -> Result<ConfigValue, PipelineError> {
    match cfg.root().get(stage.name()) {
        Some(v @ ConfigValue::Map(_)) => Ok(v.clone()),
        Some(other) => Err(PipelineError::BadConfig {
            what: format!("section {} must be a map, got {}", stage.name(), other.kind_name()),
        }),
        None => Err(PipelineError::BadConfig {
            what: format!("config is missing the {} section", stage.name()),
        }),
    }
}

/// Read-only plan: digests down the chain and the current hit/miss state
/// of each slot, without executing or mutating anything.
pub fn plan_pipeline(
    cache: &StageCache,
    cfg: &ConfigTree,
    force_from: Option<Stage>,
) -> Result<Vec<PlannedStage>, PipelineError> {
    let mut parent = ROOT_PARENT.to_string();
    let mut out = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        let args = stage_args(cfg, stage)?;
        let (digest, state) = cache.peek(stage, &args, &parent);
        let forced = force_from.is_some_and(|f| stage >= f);
        out.push(PlannedStage {
            stage,
            digest: digest.clone(),
            parent: parent.clone(),
            forced,
            would_hit: !forced && state == CacheState::Hit,
        });
        parent = digest;
    }
    Ok(out)
}

// ── Config readers ───────────────────────────────────────────────────────

fn opt_int(cfg: &ConfigTree, path: &str, default: i64) -> Result<i64, PipelineError> {
    match cfg.get(path) {
        None => Ok(default),
        Some(_) => Ok(cfg.get_int(path)?),
    }
}

fn opt_float(cfg: &ConfigTree, path: &str, default: f64) -> Result<f64, PipelineError> {
    match cfg.get(path) {
        None => Ok(default),
        Some(_) => Ok(cfg.get_float(path)?),
    }
}

fn opt_str<'a>(cfg: &'a ConfigTree, path: &str, default: &'a str) -> Result<&'a str, PipelineError> {
    match cfg.get(path) {
        None => Ok(default),
        Some(_) => Ok(cfg.get_str(path)?),
    }
}

fn opt_bool(cfg: &ConfigTree, path: &str, default: bool) -> Result<bool, PipelineError> {
    match cfg.get(path) {
        None => Ok(default),
        Some(_) => Ok(cfg.get_bool(path)?),
    }
}

fn positive(value: i64, what: &str) -> Result<i64, PipelineError> {
    if value < 1 {
        return Err(PipelineError::BadConfig { what: format!("{what} must be >= 1, got {value}") });
    }
    Ok(value)
}

fn feature_spec_from(cfg: &ConfigTree) -> Result<FeatureSpec, PipelineError> {
    Ok(FeatureSpec {
        subject: cfg.get_str_list("construction.node_features.subject")?,
        file: cfg.get_str_list("construction.node_features.file")?,
        netflow: cfg.get_str_list("construction.node_features.netflow")?,
    })
}

/// Exactly one entry from a `used_methods` list, after dropping "none".
fn single_method(
    cfg: &ConfigTree,
    path: &str,
) -> Result<Option<String>, PipelineError> {
    let mut picked: Vec<String> = cfg
        .get_str_list(path)?
        .into_iter()
        .filter(|m| m != "none")
        .collect();
    match picked.len() {
        0 => Ok(None),
        1 => Ok(Some(picked.pop().expect("one element"))),
        _ => Err(PipelineError::BadConfig {
            what: format!("{path} selects more than one method: {picked:?}"),
        }),
    }
}

pub fn model_config_from(cfg: &ConfigTree) -> Result<ModelConfig, PipelineError> {
    let encoder_name = single_method(cfg, "training.encoder.used_methods")?
        .unwrap_or_else(|| "none".to_string());
    let encoder = EncoderKind::parse(&encoder_name)?;
    let decoder_name = single_method(cfg, "training.decoder.used_methods")?
        .ok_or_else(|| PipelineError::BadConfig { what: "no decoder selected".into() })?;
    let decoder = DecoderKind::parse(&decoder_name)?;
    let objective = Objective::parse(cfg.get_str("training.objective.used_method")?)?;

    let (layers_key, act_key) = match encoder {
        EncoderKind::Sage => ("training.encoder.sage.num_layers", "training.encoder.sage.activation"),
        EncoderKind::Tgn => ("training.encoder.tgn.num_layers", "training.encoder.tgn.activation"),
        EncoderKind::Linear => ("", "training.encoder.linear.activation"),
        EncoderKind::None => ("", ""),
    };
    let sage_layers = if layers_key.is_empty() { 1 } else { opt_int(cfg, layers_key, 1)? as usize };
    // One activation drives both the encoder layers and the decoder's
    // hidden layer; the encoder-specific key wins when present.
    let act_name = if !act_key.is_empty() && cfg.get(act_key).is_some() {
        cfg.get_str(act_key)?.to_string()
    } else {
        opt_str(cfg, "training.decoder.mlp.activation", "relu")?.to_string()
    };
    let activation = Activation::parse(&act_name)?;

    if let Some(hid) = cfg.get("training.decoder.mlp.hid_dim") {
        let want = cfg.get_int("training.node_hid_dim")?;
        if !matches!(hid, ConfigValue::Int(v) if *v == want) {
            log::warn!("training.decoder.mlp.hid_dim is tied to node_hid_dim; ignoring override");
        }
    }

    let mc = ModelConfig {
        encoder,
        sage_layers,
        activation,
        decoder,
        objective,
        node_hid_dim: positive(cfg.get_int("training.node_hid_dim")?, "training.node_hid_dim")?
            as usize,
        lr: cfg.get_float("training.lr")?,
        epochs: positive(cfg.get_int("training.epochs")?, "training.epochs")? as u64,
        seed: cfg.get_int("training.seed")? as u64,
    };
    mc.validate()?;
    Ok(mc)
}

// ── Artifact helpers ─────────────────────────────────────────────────────

const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "embeddings.tbl";
pub const NEIGHBOR_INDEX_FILE: &str = "neighbor_index.json";

fn windows_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

fn batches_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}_batches.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact { path: path.to_path_buf() });
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

// ── Stage builders ───────────────────────────────────────────────────────

fn build_construction(
    cfg: &ConfigTree,
    data_dir: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let dataset = match cfg.get("construction.dataset") {
        Some(_) => cfg.get_str("construction.dataset")?.to_string(),
        None => {
            return Err(PipelineError::BadConfig {
                what: "construction.dataset is not set (pass a dataset id)".into(),
            })
        }
    };
    let dir = resolve_dataset_dir(data_dir, &dataset)?;
    let (events, _summary) = parse_events_file(&dir.join(EVENTS_FILE))?;
    let gt = load_ground_truth(&dir.join(LABELS_FILE), &dataset)?;
    let window_minutes = positive(cfg.get_int("construction.window_minutes")?, "window_minutes")?;
    let windows = build_windows(events, window_minutes)?;

    let train_ratio = cfg.get_float("construction.split.train_ratio")?;
    let val_ratio = cfg.get_float("construction.split.val_ratio")?;
    if !(train_ratio > 0.0 && val_ratio > 0.0 && train_ratio + val_ratio < 1.0) {
        return Err(PipelineError::BadConfig {
            what: format!(
                "split ratios must be positive with train+val < 1, got {train_ratio}+{val_ratio}"
            ),
        });
    }
    let span_start = windows[0].window_start;
    let span_end = windows.last().expect("non-empty").window_end;
    let len = span_end - span_start;
    // Window spans stay far below 2^53 ns, so the ratio arithmetic is exact
    // enough; boundaries land inside the span because both ratios are > 0.
    let train_end = span_start + (len as f64 * train_ratio) as i64;
    let val_end = span_start + (len as f64 * (train_ratio + val_ratio)) as i64;
    let split = split_dataset(windows, &gt, train_end, val_end)?;

    for (name, windows) in
        [("train", &split.train), ("val", &split.val), ("test", &split.test)]
    {
        write_windows_jsonl(windows, &windows_file(out, name))?;
    }
    write_json(&out.join("labels.json"), &gt.malicious)?;
    let (n_train, n_val, n_test) = split.window_counts();
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "dataset": dataset,
            "windows": [n_train, n_val, n_test],
            "boundaries": [train_end, val_end],
            "span": [span_start, span_end],
        }),
    )
}

fn build_transformation(
    cfg: &ConfigTree,
    construction_out: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let methods = cfg.get_str_list("transformation.used_methods")?;
    let mut totals = serde_json::Map::new();
    for split in SPLITS {
        let windows = read_windows_jsonl(&windows_file(construction_out, split))?;
        let (transformed, stats) = apply_transforms(windows, &methods)?;
        write_windows_jsonl(&transformed, &windows_file(out, split))?;
        totals.insert(
            split.to_string(),
            serde_json::json!({
                "redundant_removed": stats.redundant_removed,
                "reverse_edges_added": stats.reverse_edges_added,
                "versions_minted": stats.versions_minted,
                "pseudo_edges_added": stats.pseudo_edges_added,
            }),
        );
    }
    write_json(&out.join("stats.json"), &serde_json::Value::Object(totals))
}

fn build_featurization(
    cfg: &ConfigTree,
    transformation_out: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let method_name = cfg.get_str("featurization.used_method")?.to_string();
    let method = parse_method(&method_name)?;
    let emb_dim = positive(cfg.get_int("featurization.emb_dim")?, "emb_dim")? as usize;
    match method {
        EmbedMethod::Hash => write_json(
            &out.join("meta.json"),
            &serde_json::json!({ "method": method_name, "dim": emb_dim }),
        ),
        EmbedMethod::Skipgram => {
            let spec = feature_spec_from(cfg)?;
            let sub = format!("featurization.{method_name}");
            let min_count = opt_int(cfg, &format!("{sub}.min_count"), 1)?.max(1) as u64;
            let params = SkipgramParams {
                dim: emb_dim,
                epochs: positive(cfg.get_int("featurization.epochs")?, "epochs")? as u64,
                alpha: opt_float(cfg, &format!("{sub}.alpha"), 0.025)?,
                window: opt_int(cfg, &format!("{sub}.window_size"), 5)?.max(1) as usize,
                negative: opt_int(cfg, &format!("{sub}.negative"), 5)?.max(1) as usize,
                seed: cfg.get_int("featurization.seed")? as u64,
            };
            let train = read_windows_jsonl(&windows_file(transformation_out, "train"))?;
            let corpus = build_corpus(&train, &spec, min_count);
            let trained = train_skipgram(&corpus, &params)?;
            trained.table.save(&out.join(TABLE_FILE))?;
            write_json(
                &out.join("meta.json"),
                &serde_json::json!({
                    "method": method_name,
                    "dim": emb_dim,
                    "vocab_size": trained.table.vocab.len(),
                    "epoch_losses": trained.epoch_losses,
                }),
            )
        }
    }
}

/// Which chunker a `used_methods` list picks, if any.
fn chunker_of(methods: &[String]) -> Result<Option<ChunkMode>, PipelineError> {
    let mut found = None;
    for m in methods {
        let mode = match m.as_str() {
            "edges" => ChunkMode::Edges,
            "minutes" => ChunkMode::Minutes,
            _ => continue,
        };
        if found.is_some() {
            return Err(PipelineError::BadConfig {
                what: "more than one chunking method selected".into(),
            });
        }
        found = Some(mode);
    }
    Ok(found)
}

fn build_batching(
    cfg: &ConfigTree,
    transformation_out: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let global = cfg.get_str_list("batching.global_batching.used_methods")?;
    let intra = cfg.get_str_list("batching.intra_graph_batching.used_methods")?;
    let inter = cfg.get_str_list("batching.inter_graph_batching.used_methods")?;
    let global_mode = chunker_of(&global)?;
    let intra_mode = chunker_of(&intra)?;
    let want_tgn = intra.iter().any(|m| m == "tgn_last_neighbor");
    let want_merge = inter.iter().any(|m| m == "merge");

    if global_mode.is_some() && intra_mode.is_some() {
        return Err(PipelineError::BadConfig {
            what: "global and intra-graph chunking are mutually exclusive".into(),
        });
    }
    if global_mode.is_some() && want_merge {
        return Err(PipelineError::BadConfig {
            what: "inter-graph merging applies to per-window batches, not global chunks".into(),
        });
    }

    let chunk_size = |scope: &str, mode: ChunkMode| -> Result<i64, PipelineError> {
        let key = match mode {
            ChunkMode::Edges => format!("batching.{scope}.edges.size"),
            ChunkMode::Minutes => format!("batching.{scope}.minutes.size"),
        };
        match cfg.get(&key) {
            Some(_) => positive(cfg.get_int(&key)?, &key),
            None => Err(PipelineError::BadConfig { what: format!("{key} is required") }),
        }
    };
    let merge_size = if want_merge {
        positive(opt_int(cfg, "batching.inter_graph_batching.merge.batch_size", 2)?, "batch_size")?
            as usize
    } else {
        0
    };

    let mut per_split: Vec<Vec<Batch>> = Vec::with_capacity(SPLITS.len());
    for split in SPLITS {
        let windows: Vec<ProvGraph> = read_windows_jsonl(&windows_file(transformation_out, split))?;
        let batches = if let Some(mode) = global_mode {
            global_batch(&windows, mode, chunk_size("global_batching", mode)?)?
        } else if let Some(mode) = intra_mode {
            let size = chunk_size("intra_graph_batching", mode)?;
            let mut all = Vec::new();
            for (i, w) in windows.iter().enumerate() {
                if w.edges.is_empty() {
                    continue;
                }
                all.extend(intra_batch(w, i, mode, size)?);
            }
            if want_merge { merge_batches(&all, merge_size)? } else { all }
        } else if want_merge {
            inter_batch(&windows, merge_size)?
        } else {
            windows
                .iter()
                .enumerate()
                .map(|(i, w)| from_window(w, i, BatchOrigin::Intra))
                .collect()
        };
        write_json(&batches_file(out, split), &batches)?;
        per_split.push(batches);
    }

    if want_tgn {
        let k = positive(
            opt_int(cfg, "batching.intra_graph_batching.tgn_last_neighbor.k", 20)?,
            "tgn_last_neighbor.k",
        )? as usize;
        let all: Vec<Batch> = per_split.concat();
        let index = build_neighbor_index(&all, k)?;
        write_json(&out.join(NEIGHBOR_INDEX_FILE), &index)?;
    }
    let counts: Vec<usize> = per_split.iter().map(|b| b.len()).collect();
    write_json(&out.join("meta.json"), &serde_json::json!({ "batches": counts }))
}

/// Per-split training items with features (and TGN contexts when the
/// encoder needs them), replaying the feature cache over the whole
/// chronological batch stream so every split sees the same neighbor state
/// a single pass would have produced.
fn assemble_items(
    cfg: &ConfigTree,
    model_cfg: &ModelConfig,
    featurization_out: &Path,
    batching_out: &Path,
) -> Result<(Vec<TrainItem>, Vec<TrainItem>, Vec<TrainItem>), PipelineError> {
    let method = parse_method(cfg.get_str("featurization.used_method")?)?;
    let emb_dim = cfg.get_int("featurization.emb_dim")? as usize;
    let spec = feature_spec_from(cfg)?;
    let table = match method {
        EmbedMethod::Hash => None,
        EmbedMethod::Skipgram => {
            let t = EmbeddingTable::load(&featurization_out.join(TABLE_FILE))?;
            if t.dim != emb_dim {
                return Err(PipelineError::BadConfig {
                    what: format!("embedding table dim {} != emb_dim {}", t.dim, emb_dim),
                });
            }
            Some(t)
        }
    };

    let splits: Vec<Vec<Batch>> = SPLITS
        .iter()
        .map(|split| read_json(&batches_file(batching_out, split)))
        .collect::<Result<_, _>>()?;
    let index: Option<NeighborIndex> = if model_cfg.encoder == EncoderKind::Tgn {
        let path = batching_out.join(NEIGHBOR_INDEX_FILE);
        if !path.is_file() {
            return Err(PipelineError::BadConfig {
                what: "tgn encoder requires tgn_last_neighbor in intra-graph batching".into(),
            });
        }
        Some(read_json(&path)?)
    } else {
        None
    };

    let bounds = (splits[0].len(), splits[0].len() + splits[1].len());
    let all: Vec<Batch> = splits.concat();
    if let Some(ix) = &index {
        if ix.snapshots.len() != all.len() {
            return Err(PipelineError::BadConfig {
                what: format!(
                    "neighbor index covers {} batches, stream has {}",
                    ix.snapshots.len(),
                    all.len()
                ),
            });
        }
    }

    let mut cache: FeatureCache = FeatureCache::new();
    let mut out: [Vec<TrainItem>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, batch) in all.into_iter().enumerate() {
        let width = emb_dim + KIND_ONE_HOT;
        let mut data = Vec::with_capacity(batch.nodes.len() * width);
        for row in &batch.nodes {
            data.extend(embed_node(&row.entity, method, table.as_ref(), emb_dim, &spec)?);
        }
        let x = Matrix { rows: batch.nodes.len(), cols: width, data };

        let tgn = match &index {
            Some(ix) => {
                let ctx = build_tgn_context(&batch, &x, &ix.snapshots[i], &cache)?;
                update_feature_cache(&mut cache, &batch, &x);
                Some(ctx)
            }
            None => None,
        };

        if batch.nodes.is_empty() {
            continue;
        }
        if batch.edges.is_empty() && model_cfg.objective == Objective::EdgeType {
            continue;
        }
        let slot = if i < bounds.0 { 0 } else if i < bounds.1 { 1 } else { 2 };
        out[slot].push(TrainItem { batch, x, tgn });
    }
    let [train_items, val_items, test_items] = out;
    Ok((train_items, val_items, test_items))
}

fn checkpoint_paths(training_out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(training_out)
        .map_err(|e| io_err(training_out, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint_") && n.ends_with(".bin"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::MissingArtifact { path: training_out.join("checkpoint_*.bin") });
    }
    Ok(paths)
}

fn build_training(
    cfg: &ConfigTree,
    featurization_out: &Path,
    batching_out: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let model_cfg = model_config_from(cfg)?;
    let (train_items, val_items, _) =
        assemble_items(cfg, &model_cfg, featurization_out, batching_out)?;
    let checkpoints = train(&model_cfg, &train_items, &val_items)?;
    let mut log_rows = Vec::with_capacity(checkpoints.len());
    for c in &checkpoints {
        c.save(&out.join(format!("checkpoint_{:03}.bin", c.epoch)))?;
        log_rows.push(serde_json::json!({
            "epoch": c.epoch,
            "train_loss": c.train_loss,
            "val_loss": c.val_loss,
        }));
    }
    write_json(&out.join("train_log.json"), &serde_json::Value::Array(log_rows))
}

fn build_evaluation(
    cfg: &ConfigTree,
    construction_out: &Path,
    featurization_out: &Path,
    batching_out: &Path,
    training_out: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let model_cfg = model_config_from(cfg)?;
    let reduce = Reducer::parse(opt_str(cfg, "evaluation.node_evaluation.reduce", "max")?)?;
    let method = cfg.get_str("evaluation.node_evaluation.threshold_method")?.to_string();
    if opt_bool(cfg, "evaluation.node_evaluation.use_kmeans", false)? && method != "kmeans" {
        log::warn!("evaluation.node_evaluation.use_kmeans is ignored; threshold_method decides");
    }
    let (_, val_items, test_items) =
        assemble_items(cfg, &model_cfg, featurization_out, batching_out)?;
    let all_labels: BTreeMap<EntityId, u32> = read_json(&construction_out.join("labels.json"))?;

    let metrics_path = out.join(METRICS_FILE);
    let mut last: Option<ScoreReport> = None;
    for path in checkpoint_paths(training_out)? {
        let ckpt = Checkpoint::load(&path)?;
        let params = ckpt.param_set();
        let scores = score_nodes(&model_cfg, &params, &test_items, reduce)?;
        if scores.is_empty() {
            return Err(PipelineError::BadConfig {
                what: "test span produced no scores (no eligible batches)".into(),
            });
        }
        let threshold = match method.as_str() {
            "fixed" => threshold_fixed(cfg.get_float("evaluation.node_evaluation.fixed.value")?)?,
            "max_val_loss" => {
                threshold_max_val(&score_nodes(&model_cfg, &params, &val_items, reduce)?)?
            }
            "kmeans" => {
                let iters =
                    positive(opt_int(cfg, "evaluation.node_evaluation.kmeans.iters", 100)?, "iters")?;
                threshold_kmeans(&scores, iters as usize)?
            }
            other => {
                return Err(PipelineError::BadConfig {
                    what: format!("unknown threshold method {other:?}"),
                })
            }
        };
        let labels: BTreeMap<EntityId, u32> = all_labels
            .iter()
            .filter(|(id, _)| scores.contains_key(id))
            .map(|(&id, &a)| (id, a))
            .collect();
        let report = ScoreReport { scores, labels, threshold, epoch: ckpt.epoch };
        report
            .check_invariants()
            .map_err(|what| PipelineError::BadConfig { what })?;
        let m = compute_metrics(&report);
        append_metrics_jsonl(&metrics_path, ckpt.epoch, &m, &per_attack_recall(&report))?;
        last = Some(report);
    }

    let report = last.expect("checkpoint_paths guarantees at least one");
    let top_k = positive(opt_int(cfg, "evaluation.node_evaluation.top_k", 200)?, "top_k")? as usize;
    export_plot_data(&report, out, top_k)?;
    write_json(&out.join(REPORT_FILE), &report)
}

fn build_triage(cfg: &ConfigTree, evaluation_out: &Path, out: &Path) -> Result<(), PipelineError> {
    let method = cfg.get_str("triage.used_method")?;
    if method == "depimpact" {
        log::warn!("depimpact triage is not implemented; falling back to score ranking");
    }
    if opt_bool(cfg, "triage.use_kmeans", false)? {
        log::warn!("triage.use_kmeans is accepted but ignored");
    }
    let report: ScoreReport = read_json(&evaluation_out.join(REPORT_FILE))?;
    let result = triage_by_score(&report);
    write_triage_table(&result, out)?;
    Ok(())
}

// ── Orchestration ────────────────────────────────────────────────────────

fn read_final_metrics(path: &Path) -> Result<BTreeMap<String, Real>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut best_epoch = 0u64;
    let mut rows: Vec<(u64, String, Real)> = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| io_err(path, e))?;
        let epoch = v["epoch"].as_u64().unwrap_or(0);
        let metric = v["metric"].as_str().unwrap_or("").to_string();
        let value = v["value"].as_f64().unwrap_or(Real::NAN);
        best_epoch = best_epoch.max(epoch);
        rows.push((epoch, metric, value));
    }
    Ok(rows
        .into_iter()
        .filter(|(e, _, _)| *e == best_epoch)
        .map(|(_, m, v)| (m, v))
        .collect())
}

pub fn run_pipeline(
    cfg: &ConfigTree,
    data_dir: &Path,
    cache_root: &Path,
    opts: &PipelineOptions,
) -> Result<PipelineOutcome, PipelineError> {
    let violations = validate_config(cfg, &Schema::reference());
    if !violations.is_empty() {
        let what = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n");
        return Err(PipelineError::InvalidConfig { what });
    }

    let root = if opts.fresh_root {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        cache_root.join(format!("scratch-{nanos}"))
    } else {
        cache_root.to_path_buf()
    };
    let cache = StageCache::new(&root);

    let mut stages = Vec::with_capacity(Stage::ALL.len());
    let mut outputs: BTreeMap<Stage, PathBuf> = BTreeMap::new();
    let mut parent = ROOT_PARENT.to_string();
    for stage in Stage::ALL {
        let args = stage_args(cfg, stage)?;
        let snapshot = canonical_args(&args);
        let forced = opts.force_from.is_some_and(|f| stage >= f);
        let prior = &outputs;
        let run = cache.ensure::<PipelineError, _>(
            stage,
            &args,
            &parent,
            forced,
            &snapshot,
            |out| match stage {
                Stage::Construction => build_construction(cfg, data_dir, out),
                Stage::Transformation => {
                    build_transformation(cfg, &prior[&Stage::Construction], out)
                }
                Stage::Featurization => {
                    build_featurization(cfg, &prior[&Stage::Transformation], out)
                }
                Stage::Batching => build_batching(cfg, &prior[&Stage::Transformation], out),
                Stage::Training => build_training(
                    cfg,
                    &prior[&Stage::Featurization],
                    &prior[&Stage::Batching],
                    out,
                ),
                Stage::Evaluation => build_evaluation(
                    cfg,
                    &prior[&Stage::Construction],
                    &prior[&Stage::Featurization],
                    &prior[&Stage::Batching],
                    &prior[&Stage::Training],
                    out,
                ),
                Stage::Triage => build_triage(cfg, &prior[&Stage::Evaluation], out),
            },
        )?;
        log::info!(
            "stage {} {} ({})",
            stage.name(),
            if run.reused { "hit" } else { "miss" },
            &run.digest[..12]
        );
        outputs.insert(stage, run.outputs.clone());
        parent = run.digest.clone();
        stages.push(StageReport { stage, digest: run.digest, reused: run.reused });
    }

    let metrics_path = outputs[&Stage::Evaluation].join(METRICS_FILE);
    let final_metrics = read_final_metrics(&metrics_path)?;
    Ok(PipelineOutcome {
        root,
        stages,
        final_metrics,
        metrics_path,
        report_path: outputs[&Stage::Evaluation].join(REPORT_FILE),
        triage_path: outputs[&Stage::Triage].join(TRIAGE_FILE),
    })
}
