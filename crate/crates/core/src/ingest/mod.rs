//! Provenance domain model and dataset ingestion (pipeline stage 1).
//!
//! Events arrive as line-delimited JSON records in a normalized format (one
//! syscall-level interaction per line). This module parses them, assembles
//! time-windowed provenance graphs, loads node-level ground truth, splits a
//! dataset in time, and can generate a synthetic desk-scale dataset with
//! planted attack chains.

mod labels;
mod parse;
mod split;
mod synth;
mod window;

pub use labels::{load_ground_truth, GroundTruth};
pub use parse::{parse_events, parse_events_file, ParseSummary};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{generate_synthetic, SynthParams, SynthReport, BASE_TS};
pub use window::build_windows;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const NS_PER_MINUTE: i64 = 60_000_000_000;

/// Dataset identifiers the CLI resolves to data directories.
pub const DATASET_IDS: [&str; 13] = [
    "CADETS_E3",
    "THEIA_E3",
    "CLEARSCOPE_E3",
    "FIVEDIRECTIONS_E3",
    "TRACE_E3",
    "CADETS_E5",
    "THEIA_E5",
    "CLEARSCOPE_E5",
    "FIVEDIRECTIONS_E5",
    "TRACE_E5",
    "optc_h201",
    "optc_h501",
    "optc_h051",
];

/// Files every dataset directory must contain.
pub const EVENTS_FILE: &str = "events.jsonl";
pub const LABELS_FILE: &str = "labels.csv";

/// Map a dataset id to `<data_dir>/<id>`. A directory that exists is always
/// accepted (synthetic datasets use arbitrary ids); a missing directory gets
/// a pointed message depending on whether the id is a known dataset.
pub fn resolve_dataset_dir(data_dir: &Path, id: &str) -> Result<PathBuf, IngestError> {
    let dir = data_dir.join(id);
    if dir.is_dir() {
        return Ok(dir);
    }
    if DATASET_IDS.contains(&id) {
        Err(IngestError::DatasetNotFetched { id: id.to_string(), dir })
    } else {
        Err(IngestError::UnknownDataset { id: id.to_string(), dir })
    }
}

// ── Identifiers ──────────────────────────────────────────────────────────

/// 128-bit entity identifier, rendered as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u128);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for EntityId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        if s.is_empty() || s.len() > 32 {
            return Err(());
        }
        u128::from_str_radix(s, 16).map(EntityId).map_err(|_| ())
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|()| serde::de::Error::custom(format!("bad entity id {s:?}")))
    }
}

/// A node in a (possibly versioned) provenance graph. Versions start at 0
/// and only the DAG transform mints higher ones; version 0 renders as the
/// bare hex id so untransformed graphs keep the on-disk format of their
/// inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub id: EntityId,
    pub version: u32,
}

impl NodeRef {
    pub fn base(id: EntityId) -> NodeRef {
        NodeRef { id, version: 0 }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.version == 0 {
            write!(f, "{}", self.id)
        } else {
            write!(f, "{}#{}", self.id, self.version)
        }
    }
}

impl FromStr for NodeRef {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.split_once('#') {
            Some((id, v)) => Ok(NodeRef {
                id: id.parse()?,
                version: v.parse().map_err(|_| ())?,
            }),
            None => Ok(NodeRef::base(s.parse()?)),
        }
    }
}

impl Serialize for NodeRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|()| serde::de::Error::custom(format!("bad node ref {s:?}")))
    }
}

// ── Entities ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Subject,
    File,
    Netflow,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Subject, EntityKind::File, EntityKind::Netflow];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Subject => "subject",
            EntityKind::File => "file",
            EntityKind::Netflow => "netflow",
        }
    }

    pub fn from_token(s: &str) -> Option<EntityKind> {
        match s {
            "subject" => Some(EntityKind::Subject),
            "file" => Some(EntityKind::File),
            "netflow" => Some(EntityKind::Netflow),
            _ => None,
        }
    }

    /// Stable index for one-hot encodings.
    pub fn index(self) -> usize {
        match self {
            EntityKind::Subject => 0,
            EntityKind::File => 1,
            EntityKind::Netflow => 2,
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-entity attributes. Which keys are populated depends on the kind
/// (subjects carry path and cmd_line, files carry path, netflows carry
/// remote_ip and remote_port); `type` is always present in valid data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrs {
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub type_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cmd_line: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_ip: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_port: Option<String>,
}

impl Attrs {
    /// Last-writer-wins merge, per attribute: only keys the newer observation
    /// actually carries overwrite.
    pub fn merge_from(&mut self, newer: &Attrs) {
        if newer.type_name.is_some() {
            self.type_name = newer.type_name.clone();
        }
        if newer.path.is_some() {
            self.path = newer.path.clone();
        }
        if newer.cmd_line.is_some() {
            self.cmd_line = newer.cmd_line.clone();
        }
        if newer.remote_ip.is_some() {
            self.remote_ip = newer.remote_ip.clone();
        }
        if newer.remote_port.is_some() {
            self.remote_port = newer.remote_port.clone();
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        match key {
            "type" => self.type_name.as_deref(),
            "path" => self.path.as_deref(),
            "cmd_line" => self.cmd_line.as_deref(),
            "remote_ip" => self.remote_ip.as_deref(),
            "remote_port" => self.remote_port.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub kind: EntityKind,
    #[serde(flatten)]
    pub attrs: Attrs,
}

// ── Events and operations ────────────────────────────────────────────────

/// Syscall-level operation. `PseudoRoot` never appears in input data; the
/// pseudo-root transform mints it for synthetic provenance edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Read,
    Write,
    Execute,
    Fork,
    Open,
    Close,
    Unlink,
    Connect,
    Send,
    Recv,
    Mmap,
    Clone,
    PseudoRoot,
}

impl OpType {
    /// The operations real events may carry, in stable index order.
    pub const REAL: [OpType; 12] = [
        OpType::Read,
        OpType::Write,
        OpType::Execute,
        OpType::Fork,
        OpType::Open,
        OpType::Close,
        OpType::Unlink,
        OpType::Connect,
        OpType::Send,
        OpType::Recv,
        OpType::Mmap,
        OpType::Clone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Read => "read",
            OpType::Write => "write",
            OpType::Execute => "execute",
            OpType::Fork => "fork",
            OpType::Open => "open",
            OpType::Close => "close",
            OpType::Unlink => "unlink",
            OpType::Connect => "connect",
            OpType::Send => "send",
            OpType::Recv => "recv",
            OpType::Mmap => "mmap",
            OpType::Clone => "clone",
            OpType::PseudoRoot => "pseudo_root",
        }
    }

    pub fn from_token(s: &str) -> Option<OpType> {
        OpType::REAL.into_iter().find(|op| op.as_str() == s)
    }

    /// Class index among the real operations. `None` for `PseudoRoot`.
    pub fn class_index(self) -> Option<usize> {
        OpType::REAL.iter().position(|&op| op == self)
    }

    /// Self-interactions are legal only for address-space operations.
    pub fn allows_self_loop(self) -> bool {
        matches!(self, OpType::Mmap | OpType::Clone)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed provenance event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvEvent {
    #[serde(rename = "id")]
    pub event_id: u64,
    pub ts: i64,
    pub op: OpType,
    pub src: Entity,
    pub dst: Entity,
}

/// One edge of a windowed graph. `synthetic` marks transform-minted edges
/// (currently only pseudo-root provenance); they carry no training signal
/// for edge-type objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub op: OpType,
    pub ts: i64,
    pub event_id: u64,
    pub synthetic: bool,
}

impl Edge {
    /// Sort key used everywhere edges are ordered.
    pub fn time_key(&self) -> (i64, u64) {
        (self.ts, self.event_id)
    }
}

// ── Graphs ───────────────────────────────────────────────────────────────

/// One time window of provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvGraph {
    pub window_start: i64,
    pub window_end: i64,
    pub directed: bool,
    pub nodes: BTreeMap<NodeRef, Entity>,
    pub edges: Vec<Edge>,
}

impl ProvGraph {
    pub fn empty(window_start: i64, window_end: i64) -> ProvGraph {
        ProvGraph {
            window_start,
            window_end,
            directed: true,
            nodes: BTreeMap::new(),
            edges: Vec::new(),
        }
    }

    pub fn sort_edges(&mut self) {
        self.edges.sort_by_key(Edge::time_key);
    }

    /// Check the structural invariants every construction and transform must
    /// maintain. Test helper and debug guard, not a hot-path check.
    pub fn check_invariants(&self) -> Result<(), String> {
        for e in &self.edges {
            if !self.nodes.contains_key(&e.src) || !self.nodes.contains_key(&e.dst) {
                return Err(format!("edge {}->{} has endpoint missing from nodes", e.src, e.dst));
            }
            if e.ts < self.window_start || e.ts >= self.window_end {
                return Err(format!(
                    "edge ts {} outside window [{}, {})",
                    e.ts, self.window_start, self.window_end
                ));
            }
        }
        for w in self.edges.windows(2) {
            if w[0].time_key() > w[1].time_key() {
                return Err("edges not sorted by (ts, event_id)".to_string());
            }
        }
        for (nref, ent) in &self.nodes {
            if nref.id != ent.id {
                return Err(format!("node key {} disagrees with entity id {}", nref, ent.id));
            }
        }
        Ok(())
    }
}

/// Write windows as JSON lines in list order.
pub fn write_windows_jsonl(windows: &[ProvGraph], path: &Path) -> Result<(), IngestError> {
    use std::io::Write as _;
    let file = std::fs::File::create(path)
        .map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })?;
    let mut w = std::io::BufWriter::new(file);
    for g in windows {
        let line = serde_json::to_string(g)
            .map_err(|e| IngestError::Serde { path: path.to_path_buf(), message: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })?;
    }
    w.flush().map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_windows_jsonl(path: &Path) -> Result<Vec<ProvGraph>, IngestError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| IngestError::Serde { path: path.to_path_buf(), message: e.to_string() })
        })
        .collect()
}

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization at {path}: {message}")]
    Serde { path: PathBuf, message: String },
    #[error("{skipped} of {total} event lines malformed (>1%); input is likely the wrong format")]
    MalformedRate { skipped: u64, total: u64 },
    #[error("event {event_id} at ts {ts} arrives {lag_secs}s after later events; exceeds the 60s reorder slack")]
    TimeDisorder { event_id: u64, ts: i64, lag_secs: i64 },
    #[error("no events in stream")]
    EmptyStream,
    #[error("entity {id} observed as both {first} and {second}")]
    KindConflict { id: EntityId, first: EntityKind, second: EntityKind },
    #[error("label line {line_no}: cannot parse {line:?} (expected <hex-id>,<attack-id>)")]
    LabelSyntax { line_no: usize, line: String },
    #[error("node {id} labeled with conflicting attacks {first} and {second}")]
    LabelConflict { id: EntityId, first: u32, second: u32 },
    #[error("bad split boundaries: {detail}")]
    SplitBounds { detail: String },
    #[error("{which} split is empty; move the boundaries")]
    EmptySplit { which: &'static str },
    #[error("attack node {node} (attack {attack_id}) appears in {split} window starting {window_start}; training data must be benign")]
    AttackLeakage { node: EntityId, attack_id: u32, split: &'static str, window_start: i64 },
    #[error("bad generator parameter: {what}")]
    BadParam { what: String },
    #[error("dataset {id} is recognized but not present; expected events at {dir}/{}", EVENTS_FILE)]
    DatasetNotFetched { id: String, dir: PathBuf },
    #[error("unknown dataset {id:?} and no directory at {dir}")]
    UnknownDataset { id: String, dir: PathBuf },
}

// ── Tests ────────────────────────────────────────────────────────────────
