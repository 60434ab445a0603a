//! Pipeline stage 6: node anomaly scores from prediction losses,
//! thresholding, node-level metrics, and plot-data exports.
//!
//! Scores are per entity id: versioned node refs from the dag transform and
//! namespaced batch rows all collapse back to the base entity before
//! reduction, because ground truth labels plain entities.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EntityId;
use crate::model::{forward_loss, LossItem, ModelConfig, ModelError, ParamSet, TrainItem};
use crate::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation score set is empty")]
    EmptyValScores,
    #[error("degenerate score set: {what}")]
    DegenerateScores { what: String },
    #[error("bad evaluation parameter: {what}")]
    BadParam { what: String },
    #[error("evaluation io at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    Max,
    Mean,
}

impl Reducer {
    pub fn parse(s: &str) -> Result<Reducer, EvalError> {
        match s {
            "max" => Ok(Reducer::Max),
            "mean" => Ok(Reducer::Mean),
            other => Err(EvalError::BadParam { what: format!("unknown reducer {other:?}") }),
        }
    }
}

/// Scores plus labels restricted to the scored span, with the applied
/// threshold. Detection rule everywhere: score > threshold, strictly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: BTreeMap<EntityId, Real>,
    pub labels: BTreeMap<EntityId, u32>,
    pub threshold: Real,
    pub epoch: u64,
}

impl ScoreReport {
    pub fn check_invariants(&self) -> Result<(), String> {
        for id in self.labels.keys() {
            if !self.scores.contains_key(id) {
                return Err(format!("labeled node {id} has no score"));
            }
        }
        for (id, s) in &self.scores {
            if !s.is_finite() {
                return Err(format!("non-finite score for {id}"));
            }
        }
        Ok(())
    }

    pub fn detections(&self) -> Vec<(EntityId, Real)> {
        self.scores
            .iter()
            .filter(|(_, &s)| s > self.threshold)
            .map(|(&id, &s)| (id, s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSet {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    /// Ranking metrics are absent when labels are degenerate (no positive
    /// or no negative in the scored span).
    pub average_precision: Option<Real>,
    pub auc_roc: Option<Real>,
    pub discrimination: Option<Real>,
}

/// Collect each entity's losses: per-edge losses land on both endpoints,
/// per-node losses on their row's entity. Exposed for the oracle tests.
pub fn accumulate_losses(
    batch: &crate::batching::Batch,
    items: &[LossItem],
    losses: &[Real],
    acc: &mut BTreeMap<EntityId, Vec<Real>>,
) {
    debug_assert_eq!(items.len(), losses.len());
    for (item, &loss) in items.iter().zip(losses) {
        match *item {
            LossItem::Edge { src_row, dst_row } => {
                acc.entry(batch.nodes[src_row].node.id).or_default().push(loss);
                acc.entry(batch.nodes[dst_row].node.id).or_default().push(loss);
            }
            LossItem::Node { row } => {
                acc.entry(batch.nodes[row].node.id).or_default().push(loss);
            }
        }
    }
}

/// Forward every batch through the model and reduce each entity's losses
/// across the whole span into one anomaly score.
pub fn score_nodes(
    cfg: &ModelConfig,
    params: &ParamSet,
    items: &[TrainItem],
    reduce: Reducer,
) -> Result<BTreeMap<EntityId, Real>, EvalError> {
    let mut acc: BTreeMap<EntityId, Vec<Real>> = BTreeMap::new();
    for item in items {
        let fwd = forward_loss(cfg, params, &item.batch, &item.x, item.tgn.as_ref())?;
        accumulate_losses(&item.batch, &fwd.items, &fwd.per_item, &mut acc);
    }
    Ok(acc
        .into_iter()
        .map(|(id, losses)| {
            let score = match reduce {
                Reducer::Max => losses.iter().cloned().fold(Real::NEG_INFINITY, Real::max),
                Reducer::Mean => losses.iter().sum::<Real>() / losses.len() as Real,
            };
            (id, score)
        })
        .collect())
}

pub fn threshold_fixed(v: Real) -> Result<Real, EvalError> {
    if v < 0.0 || !v.is_finite() {
        return Err(EvalError::BadParam { what: format!("fixed threshold must be >= 0, got {v}") });
    }
    Ok(v)
}

/// Highest validation score; downstream detection is strictly greater, so
/// a model that scores the validation span perfectly flags nothing there.
pub fn threshold_max_val(val_scores: &BTreeMap<EntityId, Real>) -> Result<Real, EvalError> {
    val_scores
        .values()
        .cloned()
        .fold(None, |m: Option<Real>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(EvalError::EmptyValScores)
}

/// 1-D two-means on the test scores: centroids start at min and max, Lloyd
/// iterations until the assignment stops moving, threshold is the midpoint
/// of the final centroids.
pub fn threshold_kmeans(scores: &BTreeMap<EntityId, Real>, max_iters: usize) -> Result<Real, EvalError> {
    let values: Vec<Real> = scores.values().cloned().collect();
    let mut distinct = values.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(EvalError::DegenerateScores {
            what: format!("k-means needs >= 2 distinct scores, got {}", distinct.len()),
        });
    }
    let (mut lo, mut hi) = (distinct[0], *distinct.last().expect("non-empty"));
    let mut assignment: Vec<bool> = vec![false; values.len()];
    for _ in 0..max_iters.max(1) {
        let next: Vec<bool> = values.iter().map(|v| (v - lo).abs() > (v - hi).abs()).collect();
        let (mut sum_lo, mut n_lo, mut sum_hi, mut n_hi) = (0.0, 0u64, 0.0, 0u64);
        for (v, &in_hi) in values.iter().zip(&next) {
            if in_hi {
                sum_hi += v;
                n_hi += 1;
            } else {
                sum_lo += v;
                n_lo += 1;
            }
        }
        // Min/max init guarantees both clusters are non-empty.
        if n_lo > 0 {
            lo = sum_lo / n_lo as Real;
        }
        if n_hi > 0 {
            hi = sum_hi / n_hi as Real;
        }
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok((lo + hi) / 2.0)
}

/// Descending-score ranking with ties broken by ascending id, the order
/// used for AP, the top-K export, and triage.
pub fn ranked(scores: &BTreeMap<EntityId, Real>) -> Vec<(EntityId, Real)> {
    let mut v: Vec<(EntityId, Real)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    v
}

fn average_precision(ranking: &[(EntityId, Real)], labels: &BTreeMap<EntityId, u32>) -> Real {
    let total_pos = ranking.iter().filter(|(id, _)| labels.contains_key(id)).count();
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, (id, _)) in ranking.iter().enumerate() {
        if labels.contains_key(id) {
            hits += 1;
            ap += hits as Real / (k + 1) as Real / total_pos as Real;
        }
    }
    ap
}

/// Mann-Whitney form via average ranks; ties count one half.
fn auc_roc(scores: &BTreeMap<EntityId, Real>, labels: &BTreeMap<EntityId, u32>) -> Real {
    let mut asc: Vec<(Real, bool)> =
        scores.iter().map(|(id, &s)| (s, labels.contains_key(id))).collect();
    asc.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n_pos = asc.iter().filter(|(_, p)| *p).count() as Real;
    let n_neg = asc.len() as Real - n_pos;
    let mut rank_sum_pos = 0.0;
    let mut i = 0usize;
    while i < asc.len() {
        let mut j = i;
        while j < asc.len() && asc[j].0 == asc[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie group.
        let avg_rank = (i + 1 + j) as Real / 2.0;
        for item in &asc[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

fn min_max_normalized(scores: &BTreeMap<EntityId, Real>) -> Option<BTreeMap<EntityId, Real>> {
    let lo = scores.values().cloned().fold(Real::INFINITY, Real::min);
    let hi = scores.values().cloned().fold(Real::NEG_INFINITY, Real::max);
    if !(hi > lo) {
        return None;
    }
    Some(scores.iter().map(|(&id, &s)| (id, (s - lo) / (hi - lo))).collect())
}

pub fn compute_metrics(report: &ScoreReport) -> MetricSet {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (id, &s) in &report.scores {
        let detected = s > report.threshold;
        let malicious = report.labels.contains_key(id);
        match (detected, malicious) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as Real / den as Real };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    let n_pos = report.labels.len();
    let n_neg = report.scores.len() - report
        .scores
        .keys()
        .filter(|id| report.labels.contains_key(id))
        .count();
    let degenerate = n_pos == 0 || n_neg == 0;

    let (average_precision_v, auc, discrimination) = if degenerate {
        (None, None, None)
    } else {
        let ap = average_precision(&ranked(&report.scores), &report.labels);
        let auc = auc_roc(&report.scores, &report.labels);
        let disc = min_max_normalized(&report.scores).map(|norm| {
            let pos_mean = norm
                .iter()
                .filter(|(id, _)| report.labels.contains_key(id))
                .map(|(_, &s)| s)
                .sum::<Real>()
                / n_pos as Real;
            let neg_mean = norm
                .iter()
                .filter(|(id, _)| !report.labels.contains_key(id))
                .map(|(_, &s)| s)
                .sum::<Real>()
                / n_neg as Real;
            pos_mean - neg_mean
        });
        (Some(ap), Some(auc), disc)
    };

    MetricSet {
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1,
        average_precision: average_precision_v,
        auc_roc: auc,
        discrimination,
    }
}

/// Detection recall per attack id.
pub fn per_attack_recall(report: &ScoreReport) -> BTreeMap<u32, Real> {
    let mut total: BTreeMap<u32, u64> = BTreeMap::new();
    let mut hit: BTreeMap<u32, u64> = BTreeMap::new();
    for (id, &attack) in &report.labels {
        *total.entry(attack).or_insert(0) += 1;
        if report.scores.get(id).is_some_and(|&s| s > report.threshold) {
            *hit.entry(attack).or_insert(0) += 1;
        }
    }
    total
        .into_iter()
        .map(|(attack, n)| (attack, *hit.get(&attack).unwrap_or(&0) as Real / n as Real))
        .collect()
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    epoch: u64,
    metric: &'a str,
    value: Real,
}

/// Flatten a metric set into (name, value) rows; absent ranking metrics
/// are dropped rather than emitted as null.
pub fn metric_rows(metrics: &MetricSet, per_attack: &BTreeMap<u32, Real>) -> Vec<(String, Real)> {
    let mut rows: Vec<(String, Real)> = vec![
        ("tp".into(), metrics.tp as Real),
        ("fp".into(), metrics.fp as Real),
        ("tn".into(), metrics.tn as Real),
        ("fn".into(), metrics.fn_ as Real),
        ("precision".into(), metrics.precision),
        ("recall".into(), metrics.recall),
        ("f1".into(), metrics.f1),
    ];
    if let Some(v) = metrics.average_precision {
        rows.push(("average_precision".into(), v));
    }
    if let Some(v) = metrics.auc_roc {
        rows.push(("auc_roc".into(), v));
    }
    if let Some(v) = metrics.discrimination {
        rows.push(("discrimination".into(), v));
    }
    for (attack, v) in per_attack {
        rows.push((format!("recall_attack_{attack}"), *v));
    }
    rows
}

/// Append one line per metric: {"epoch":…,"metric":…,"value":…}.
pub fn append_metrics_jsonl(
    path: &Path,
    epoch: u64,
    metrics: &MetricSet,
    per_attack: &BTreeMap<u32, Real>,
) -> Result<(), EvalError> {
    let fail = |message: String| EvalError::Io { path: path.to_path_buf(), message };
    let mut w = BufWriter::new(
        File::options().create(true).append(true).open(path).map_err(|e| fail(e.to_string()))?,
    );
    for (metric, value) in metric_rows(metrics, per_attack) {
        let rec = MetricRecord { epoch, metric: &metric, value };
        serde_json::to_writer(&mut w, &rec).map_err(|e| fail(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(|e| fail(e.to_string()))
}

pub const HISTOGRAM_FILE: &str = "score_histograms.csv";
pub const TOP_NODES_FILE: &str = "top_nodes.csv";
pub const HISTOGRAM_BINS: usize = 50;

/// Plot tables: per-series histograms of min-max-normalized scores (a
/// "benign" series plus one per attack id), and the top-K ranked nodes.
pub fn export_plot_data(report: &ScoreReport, out_dir: &Path, top_k: usize) -> Result<(), EvalError> {
    let fail = |path: &Path, e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    // All-equal scores normalize to zero so the exports stay well-defined.
    let norm = min_max_normalized(&report.scores)
        .unwrap_or_else(|| report.scores.keys().map(|&id| (id, 0.0)).collect());

    let hist_path = out_dir.join(HISTOGRAM_FILE);
    let mut series: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    series.insert("benign".into(), vec![0; HISTOGRAM_BINS]);
    for attack in report.labels.values() {
        series.entry(format!("attack_{attack}")).or_insert_with(|| vec![0; HISTOGRAM_BINS]);
    }
    for (id, &s) in &norm {
        let name = match report.labels.get(id) {
            Some(attack) => format!("attack_{attack}"),
            None => "benign".into(),
        };
        let bin = ((s * HISTOGRAM_BINS as Real) as usize).min(HISTOGRAM_BINS - 1);
        series.get_mut(&name).expect("series pre-created")[bin] += 1;
    }
    let mut w = BufWriter::new(File::create(&hist_path).map_err(|e| fail(&hist_path, e))?);
    writeln!(w, "series,bin,bin_lo,bin_hi,count").map_err(|e| fail(&hist_path, e))?;
    for (name, bins) in &series {
        for (i, count) in bins.iter().enumerate() {
            let lo = i as Real / HISTOGRAM_BINS as Real;
            let hi = (i + 1) as Real / HISTOGRAM_BINS as Real;
            writeln!(w, "{name},{i},{lo},{hi},{count}").map_err(|e| fail(&hist_path, e))?;
        }
    }
    w.flush().map_err(|e| fail(&hist_path, e))?;

    let top_path = out_dir.join(TOP_NODES_FILE);
    let mut w = BufWriter::new(File::create(&top_path).map_err(|e| fail(&top_path, e))?);
    writeln!(w, "rank,node_id,normalized_score,label").map_err(|e| fail(&top_path, e))?;
    for (rank, (id, _)) in ranked(&report.scores).iter().take(top_k).enumerate() {
        let label = report
            .labels
            .get(id)
            .map(|a| format!("attack_{a}"))
            .unwrap_or_else(|| "benign".into());
        writeln!(w, "{},{},{},{}", rank + 1, id, norm[id], label).map_err(|e| fail(&top_path, e))?;
    }
    w.flush().map_err(|e| fail(&top_path, e))
}
