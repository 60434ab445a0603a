//! System configuration: YAML-subset files, inheritance, overrides, validation.
//!
//! A system is described by one YAML file per system name. A file may name a
//! base system with the reserved `_include_yml` key; the child is deep-merged
//! over the base (maps merge recursively, scalars and lists replace). Dotted
//! command-line overrides rewrite existing leaves only and are coerced to the
//! leaf's prior kind, so typos fail instead of silently forking the digest
//! chain.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Reserved key naming the base system a config inherits from.
pub const INCLUDE_KEY: &str = "_include_yml";

// ── Values and trees ─────────────────────────────────────────────────────

/// One YAML-subset value. Maps use `BTreeMap` so every iteration order in the
/// crate (canonicalization, serialization, digests) is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<ConfigValue>),
    Map(BTreeMap<String, ConfigValue>),
}

impl ConfigValue {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ConfigValue::Int(_) => "int",
            ConfigValue::Float(_) => "float",
            ConfigValue::Bool(_) => "bool",
            ConfigValue::Str(_) => "string",
            ConfigValue::List(_) => "list",
            ConfigValue::Map(_) => "map",
        }
    }

    pub fn is_leaf(&self) -> bool {
        !matches!(self, ConfigValue::Map(_))
    }
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Int(v) => write!(f, "{v}"),
            ConfigValue::Float(v) => write!(f, "{v}"),
            ConfigValue::Bool(v) => write!(f, "{v}"),
            ConfigValue::Str(v) => write!(f, "{v}"),
            ConfigValue::List(vs) => {
                let parts: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
                write!(f, "{}", parts.join(", "))
            }
            ConfigValue::Map(_) => write!(f, "<map>"),
        }
    }
}

/// A fully merged configuration plus the file paths it came from, deepest
/// base first. The chain doubles as the include-cycle detector.
#[derive(Debug, Clone)]
pub struct ConfigTree {
    root: BTreeMap<String, ConfigValue>,
    pub source_chain: Vec<PathBuf>,
}

impl ConfigTree {
    pub fn from_root(root: BTreeMap<String, ConfigValue>) -> Self {
        ConfigTree { root, source_chain: Vec::new() }
    }

    pub fn root(&self) -> &BTreeMap<String, ConfigValue> {
        &self.root
    }

    /// Top-level section, if present and a map.
    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, ConfigValue>> {
        match self.root.get(name) {
            Some(ConfigValue::Map(m)) => Some(m),
            _ => None,
        }
    }

    pub fn get(&self, dotted: &str) -> Option<&ConfigValue> {
        let mut cur: &ConfigValue = self.root.get(dotted.split('.').next()?)?;
        for seg in dotted.split('.').skip(1) {
            match cur {
                ConfigValue::Map(m) => cur = m.get(seg)?,
                _ => return None,
            }
        }
        Some(cur)
    }

    pub fn get_int(&self, dotted: &str) -> Result<i64, ConfigError> {
        match self.require(dotted)? {
            ConfigValue::Int(v) => Ok(*v),
            other => Err(ConfigError::WrongKind {
                path: dotted.to_string(),
                want: "int",
                got: other.kind_name(),
            }),
        }
    }

    /// Float accessor; integer leaves widen.
    pub fn get_float(&self, dotted: &str) -> Result<f64, ConfigError> {
        match self.require(dotted)? {
            ConfigValue::Float(v) => Ok(*v),
            ConfigValue::Int(v) => Ok(*v as f64),
            other => Err(ConfigError::WrongKind {
                path: dotted.to_string(),
                want: "float",
                got: other.kind_name(),
            }),
        }
    }

    pub fn get_bool(&self, dotted: &str) -> Result<bool, ConfigError> {
        match self.require(dotted)? {
            ConfigValue::Bool(v) => Ok(*v),
            other => Err(ConfigError::WrongKind {
                path: dotted.to_string(),
                want: "bool",
                got: other.kind_name(),
            }),
        }
    }

    pub fn get_str(&self, dotted: &str) -> Result<&str, ConfigError> {
        match self.require(dotted)? {
            ConfigValue::Str(v) => Ok(v),
            other => Err(ConfigError::WrongKind {
                path: dotted.to_string(),
                want: "string",
                got: other.kind_name(),
            }),
        }
    }

    /// Method lists are written either as YAML lists or as comma-joined
    /// strings (`used_methods: edges, tgn_last_neighbor`); both normalize to
    /// the same token vector here.
    pub fn get_str_list(&self, dotted: &str) -> Result<Vec<String>, ConfigError> {
        match self.require(dotted)? {
            ConfigValue::Str(v) => Ok(split_comma_list(v)),
            ConfigValue::List(vs) => Ok(vs.iter().map(|v| v.to_string()).collect()),
            other => Err(ConfigError::WrongKind {
                path: dotted.to_string(),
                want: "list or comma string",
                got: other.kind_name(),
            }),
        }
    }

    fn require(&self, dotted: &str) -> Result<&ConfigValue, ConfigError> {
        self.get(dotted).ok_or_else(|| ConfigError::MissingKey { path: dotted.to_string() })
    }

    /// Insert or replace a leaf, creating intermediate maps. Internal wiring
    /// only (e.g. the CLI injecting the dataset id); user overrides go
    /// through [`apply_overrides`] and fail closed instead.
    pub fn set(&mut self, dotted: &str, value: ConfigValue) {
        let segs: Vec<&str> = dotted.split('.').collect();
        let mut cur = &mut self.root;
        for seg in &segs[..segs.len() - 1] {
            let entry = cur
                .entry((*seg).to_string())
                .or_insert_with(|| ConfigValue::Map(BTreeMap::new()));
            if !matches!(entry, ConfigValue::Map(_)) {
                *entry = ConfigValue::Map(BTreeMap::new());
            }
            match entry {
                ConfigValue::Map(m) => cur = m,
                _ => unreachable!(),
            }
        }
        cur.insert(segs[segs.len() - 1].to_string(), value);
    }
}

pub fn split_comma_list(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported YAML in {path}: {what}")]
    Unsupported { path: PathBuf, what: String },
    #[error("include cycle: {chain}")]
    IncludeCycle { chain: String },
    #[error("{path} names unknown base system {name:?} (looked for {searched})")]
    IncludeMissing { path: PathBuf, name: String, searched: PathBuf },
    #[error("override addresses unknown config path {path:?}")]
    UnknownPath { path: String },
    #[error("override path {path:?} addresses a section, not a leaf")]
    NotALeaf { path: String },
    #[error("cannot coerce {raw:?} to {want} for {path:?}")]
    Coercion { path: String, want: &'static str, raw: String },
    #[error("bad override syntax {arg:?} (expected --section.key=value)")]
    BadOverrideSyntax { arg: String },
    #[error("missing config key {path:?}")]
    MissingKey { path: String },
    #[error("config key {path:?} has kind {got}, expected {want}")]
    WrongKind { path: String, want: &'static str, got: &'static str },
}

// ── Loading and merging ──────────────────────────────────────────────────

/// Load a config file, resolving `_include_yml` inheritance against
/// `search_dir` (`<search_dir>/<name>.yml`).
pub fn load_config(path: &Path, search_dir: &Path) -> Result<ConfigTree, ConfigError> {
    load_config_chained(path, search_dir, &mut Vec::new())
}

fn load_config_chained(
    path: &Path,
    search_dir: &Path,
    visiting: &mut Vec<PathBuf>,
) -> Result<ConfigTree, ConfigError> {
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    if visiting.contains(&canon) {
        let mut chain: Vec<String> =
            visiting.iter().map(|p| p.display().to_string()).collect();
        chain.push(canon.display().to_string());
        return Err(ConfigError::IncludeCycle { chain: chain.join(" -> ") });
    }
    visiting.push(canon);

    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut root = parse_yaml_subset(&text, path)?;

    let tree = match root.remove(INCLUDE_KEY) {
        Some(ConfigValue::Str(base_name)) => {
            let base_path = search_dir.join(format!("{base_name}.yml"));
            if !base_path.is_file() {
                visiting.pop();
                return Err(ConfigError::IncludeMissing {
                    path: path.to_path_buf(),
                    name: base_name,
                    searched: base_path,
                });
            }
            let base = load_config_chained(&base_path, search_dir, visiting)?;
            let mut merged = base;
            merged.root = merge_maps(merged.root, root);
            merged.source_chain.push(path.to_path_buf());
            merged
        }
        Some(other) => {
            visiting.pop();
            return Err(ConfigError::Parse {
                path: path.to_path_buf(),
                message: format!("{INCLUDE_KEY} must be a system name string, got {}", other.kind_name()),
            });
        }
        None => {
            let mut tree = ConfigTree::from_root(root);
            tree.source_chain.push(path.to_path_buf());
            tree
        }
    };
    visiting.pop();
    Ok(tree)
}

/// Deep merge: maps merge recursively, anything else in `over` replaces.
pub fn merge_value(base: ConfigValue, over: ConfigValue) -> ConfigValue {
    match (base, over) {
        (ConfigValue::Map(b), ConfigValue::Map(o)) => ConfigValue::Map(merge_maps(b, o)),
        (_, o) => o,
    }
}

fn merge_maps(
    mut base: BTreeMap<String, ConfigValue>,
    over: BTreeMap<String, ConfigValue>,
) -> BTreeMap<String, ConfigValue> {
    for (k, ov) in over {
        match base.remove(&k) {
            Some(bv) => {
                base.insert(k, merge_value(bv, ov));
            }
            None => {
                base.insert(k, ov);
            }
        }
    }
    base
}

/// Merge a loaded overlay over a base tree (tuned overlays, experiment
/// overlays). Same semantics as `_include_yml`.
pub fn merge_trees(base: ConfigTree, overlay: ConfigTree) -> ConfigTree {
    let mut chain = base.source_chain;
    chain.extend(overlay.source_chain);
    ConfigTree { root: merge_maps(base.root, overlay.root), source_chain: chain }
}

fn parse_yaml_subset(
    text: &str,
    path: &Path,
) -> Result<BTreeMap<String, ConfigValue>, ConfigError> {
    let doc: serde_yaml::Value = serde_yaml::from_str(text)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    match yaml_to_value(doc, path)? {
        ConfigValue::Map(m) => Ok(m),
        other => Err(ConfigError::Parse {
            path: path.to_path_buf(),
            message: format!("top level must be a map, got {}", other.kind_name()),
        }),
    }
}

fn yaml_to_value(v: serde_yaml::Value, path: &Path) -> Result<ConfigValue, ConfigError> {
    use serde_yaml::Value as Y;
    Ok(match v {
        Y::Bool(b) => ConfigValue::Bool(b),
        Y::Number(n) => {
            if let Some(i) = n.as_i64() {
                ConfigValue::Int(i)
            } else if let Some(f) = n.as_f64() {
                ConfigValue::Float(f)
            } else {
                return Err(ConfigError::Unsupported {
                    path: path.to_path_buf(),
                    what: format!("numeric literal {n} out of range"),
                });
            }
        }
        Y::String(s) => ConfigValue::Str(s),
        Y::Sequence(vs) => ConfigValue::List(
            vs.into_iter().map(|v| yaml_to_value(v, path)).collect::<Result<_, _>>()?,
        ),
        Y::Mapping(m) => {
            let mut out = BTreeMap::new();
            for (k, v) in m {
                let key = match k {
                    Y::String(s) => s,
                    other => {
                        return Err(ConfigError::Unsupported {
                            path: path.to_path_buf(),
                            what: format!("non-string map key {other:?}"),
                        })
                    }
                };
                out.insert(key, yaml_to_value(v, path)?);
            }
            ConfigValue::Map(out)
        }
        Y::Null => {
            return Err(ConfigError::Unsupported {
                path: path.to_path_buf(),
                what: "null value (every key needs an int, float, bool, string, list or map)".into(),
            })
        }
        Y::Tagged(t) => {
            return Err(ConfigError::Unsupported {
                path: path.to_path_buf(),
                what: format!("YAML tag {}", t.tag),
            })
        }
    })
}

// ── Overrides ────────────────────────────────────────────────────────────

/// Ordered dotted-path overrides, raw values still unparsed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverrideSet {
    pub entries: Vec<(String, String)>,
}

impl OverrideSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, path: impl Into<String>, raw: impl Into<String>) {
        self.entries.push((path.into(), raw.into()));
    }

    /// Parse one `--section.key=value` argument.
    pub fn parse_flag(arg: &str) -> Result<(String, String), ConfigError> {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| ConfigError::BadOverrideSyntax { arg: arg.to_string() })?;
        let (path, raw) = body
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverrideSyntax { arg: arg.to_string() })?;
        if path.is_empty() || path.split('.').any(|seg| seg.is_empty()) {
            return Err(ConfigError::BadOverrideSyntax { arg: arg.to_string() });
        }
        Ok((path.to_string(), raw.to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Apply overrides in order. Each path must address an existing leaf; the raw
/// value is coerced to the leaf's prior kind. Unknown paths fail closed.
pub fn apply_overrides(cfg: &ConfigTree, ov: &OverrideSet) -> Result<ConfigTree, ConfigError> {
    let mut out = cfg.clone();
    for (path, raw) in &ov.entries {
        let prior = match out.get(path) {
            Some(v) => v.clone(),
            None => return Err(ConfigError::UnknownPath { path: path.clone() }),
        };
        let new = coerce_to_kind(&prior, raw, path)?;
        out.set(path, new);
    }
    Ok(out)
}

fn coerce_to_kind(prior: &ConfigValue, raw: &str, path: &str) -> Result<ConfigValue, ConfigError> {
    let raw = raw.trim();
    match prior {
        ConfigValue::Int(_) => raw
            .parse::<i64>()
            .map(ConfigValue::Int)
            .map_err(|_| ConfigError::Coercion { path: path.into(), want: "int", raw: raw.into() }),
        ConfigValue::Float(_) => raw
            .parse::<f64>()
            .map(ConfigValue::Float)
            .map_err(|_| ConfigError::Coercion { path: path.into(), want: "float", raw: raw.into() }),
        ConfigValue::Bool(_) => {
            if raw.eq_ignore_ascii_case("true") {
                Ok(ConfigValue::Bool(true))
            } else if raw.eq_ignore_ascii_case("false") {
                Ok(ConfigValue::Bool(false))
            } else {
                Err(ConfigError::Coercion { path: path.into(), want: "bool", raw: raw.into() })
            }
        }
        ConfigValue::Str(_) => Ok(ConfigValue::Str(raw.to_string())),
        ConfigValue::List(prior_items) => {
            let elem_kind = prior_items.first().cloned().unwrap_or(ConfigValue::Str(String::new()));
            let items = split_comma_list(raw)
                .into_iter()
                .map(|item| coerce_to_kind(&elem_kind, &item, path))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ConfigValue::List(items))
        }
        ConfigValue::Map(_) => Err(ConfigError::NotALeaf { path: path.into() }),
    }
}

// ── Validation ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Int,
    Float,
    Bool,
    Str,
    /// List of strings or a comma-joined string.
    StrList,
}

pub struct LeafRule {
    pub path: &'static str,
    pub kind: LeafKind,
    /// Allowed values; for `StrList` every element must be allowed.
    pub allowed: Option<&'static [&'static str]>,
    pub required: bool,
}

const fn req(path: &'static str, kind: LeafKind) -> LeafRule {
    LeafRule { path, kind, allowed: None, required: true }
}
const fn opt(path: &'static str, kind: LeafKind) -> LeafRule {
    LeafRule { path, kind, allowed: None, required: false }
}
const fn req_enum(path: &'static str, kind: LeafKind, allowed: &'static [&'static str]) -> LeafRule {
    LeafRule { path, kind, allowed: Some(allowed), required: true }
}
const fn opt_enum(path: &'static str, kind: LeafKind, allowed: &'static [&'static str]) -> LeafRule {
    LeafRule { path, kind, allowed: Some(allowed), required: false }
}

pub const TRANSFORM_METHODS: &[&str] = &["none", "undirected", "remove_redundant", "dag", "pseudo_root"];
pub const FEATURIZATION_METHODS: &[&str] = &["hfh", "word2vec", "fasttext"];
pub const ENCODER_METHODS: &[&str] = &["none", "linear", "sage", "tgn"];
pub const DECODER_METHODS: &[&str] = &["mlp"];
pub const OBJECTIVE_METHODS: &[&str] = &["edge_type", "node_type", "feat_recon"];
pub const THRESHOLD_METHODS: &[&str] = &["fixed", "max_val_loss", "kmeans"];
pub const TRIAGE_METHODS: &[&str] = &["score_rank", "depimpact"];
pub const GLOBAL_BATCH_METHODS: &[&str] = &["none", "edges", "minutes"];
pub const INTRA_BATCH_METHODS: &[&str] = &["none", "edges", "minutes", "tgn_last_neighbor"];
pub const INTER_BATCH_METHODS: &[&str] = &["none", "merge"];
pub const ACTIVATIONS: &[&str] = &["relu", "tanh"];
pub const REDUCERS: &[&str] = &["max", "mean"];
pub const NODE_ATTRS: &[&str] = &["type", "path", "cmd_line", "remote_ip", "remote_port"];

/// What a complete pipeline config must look like.
pub struct Schema {
    pub required_sections: &'static [&'static str],
    pub rules: Vec<LeafRule>,
}

impl Schema {
    /// Schema for the shipped component registry.
    pub fn reference() -> Schema {
        Schema {
            required_sections: &[
                "construction",
                "transformation",
                "featurization",
                "batching",
                "training",
                "evaluation",
                "triage",
            ],
            rules: vec![
                opt("construction.dataset", LeafKind::Str),
                req("construction.window_minutes", LeafKind::Int),
                req("construction.split.train_ratio", LeafKind::Float),
                req("construction.split.val_ratio", LeafKind::Float),
                req_enum("construction.node_features.subject", LeafKind::StrList, NODE_ATTRS),
                req_enum("construction.node_features.file", LeafKind::StrList, NODE_ATTRS),
                req_enum("construction.node_features.netflow", LeafKind::StrList, NODE_ATTRS),
                req_enum("transformation.used_methods", LeafKind::StrList, TRANSFORM_METHODS),
                req_enum("featurization.used_method", LeafKind::Str, FEATURIZATION_METHODS),
                req("featurization.emb_dim", LeafKind::Int),
                req("featurization.epochs", LeafKind::Int),
                req("featurization.seed", LeafKind::Int),
                opt("featurization.word2vec.alpha", LeafKind::Float),
                opt("featurization.word2vec.window_size", LeafKind::Int),
                opt("featurization.word2vec.negative", LeafKind::Int),
                opt("featurization.word2vec.min_count", LeafKind::Int),
                opt("featurization.word2vec.num_workers", LeafKind::Int),
                opt("featurization.fasttext.alpha", LeafKind::Float),
                opt("featurization.fasttext.window_size", LeafKind::Int),
                opt("featurization.fasttext.negative", LeafKind::Int),
                opt("featurization.fasttext.min_count", LeafKind::Int),
                opt("featurization.fasttext.num_workers", LeafKind::Int),
                req_enum("batching.global_batching.used_methods", LeafKind::StrList, GLOBAL_BATCH_METHODS),
                opt("batching.global_batching.edges.size", LeafKind::Int),
                opt("batching.global_batching.minutes.size", LeafKind::Int),
                req_enum("batching.intra_graph_batching.used_methods", LeafKind::StrList, INTRA_BATCH_METHODS),
                opt("batching.intra_graph_batching.edges.size", LeafKind::Int),
                opt("batching.intra_graph_batching.minutes.size", LeafKind::Int),
                opt("batching.intra_graph_batching.tgn_last_neighbor.k", LeafKind::Int),
                req_enum("batching.inter_graph_batching.used_methods", LeafKind::StrList, INTER_BATCH_METHODS),
                opt("batching.inter_graph_batching.merge.batch_size", LeafKind::Int),
                req("training.lr", LeafKind::Float),
                req("training.epochs", LeafKind::Int),
                req("training.seed", LeafKind::Int),
                req("training.node_hid_dim", LeafKind::Int),
                req_enum("training.encoder.used_methods", LeafKind::StrList, ENCODER_METHODS),
                opt_enum("training.encoder.linear.activation", LeafKind::Str, ACTIVATIONS),
                opt("training.encoder.sage.num_layers", LeafKind::Int),
                opt_enum("training.encoder.sage.activation", LeafKind::Str, ACTIVATIONS),
                opt("training.encoder.tgn.num_layers", LeafKind::Int),
                opt_enum("training.encoder.tgn.activation", LeafKind::Str, ACTIVATIONS),
                req_enum("training.decoder.used_methods", LeafKind::StrList, DECODER_METHODS),
                opt("training.decoder.mlp.hid_dim", LeafKind::Int),
                opt_enum("training.decoder.mlp.activation", LeafKind::Str, ACTIVATIONS),
                req_enum("training.objective.used_method", LeafKind::Str, OBJECTIVE_METHODS),
                req_enum("evaluation.used_method", LeafKind::Str, &["node_evaluation"]),
                req_enum(
                    "evaluation.node_evaluation.threshold_method",
                    LeafKind::Str,
                    THRESHOLD_METHODS,
                ),
                opt("evaluation.node_evaluation.fixed.value", LeafKind::Float),
                opt("evaluation.node_evaluation.kmeans.iters", LeafKind::Int),
                opt_enum("evaluation.node_evaluation.reduce", LeafKind::Str, REDUCERS),
                opt("evaluation.node_evaluation.top_k", LeafKind::Int),
                opt("evaluation.node_evaluation.use_kmeans", LeafKind::Bool),
                req_enum("triage.used_method", LeafKind::Str, TRIAGE_METHODS),
                opt("triage.use_kmeans", LeafKind::Bool),
                // Experiment overlays.
                opt("experiment.uncertainty.deep_ensemble.iterations", LeafKind::Int),
                opt("experiment.uncertainty.deep_ensemble.restart_from", LeafKind::Str),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

/// Validate a config against a schema. Returns every violation rather than
/// stopping at the first so a bad config is fixable in one pass. Unknown
/// extra keys are tolerated (the override path is the fail-closed surface).
pub fn validate_config(cfg: &ConfigTree, schema: &Schema) -> Vec<Violation> {
    let mut out = Vec::new();
    for section in schema.required_sections {
        match cfg.root.get(*section) {
            Some(ConfigValue::Map(_)) => {}
            Some(other) => out.push(Violation {
                path: (*section).to_string(),
                reason: format!("must be a section map, got {}", other.kind_name()),
            }),
            None => out.push(Violation {
                path: (*section).to_string(),
                reason: "required section is missing".to_string(),
            }),
        }
    }
    for rule in &schema.rules {
        let value = match cfg.get(rule.path) {
            Some(v) => v,
            None => {
                if rule.required {
                    out.push(Violation {
                        path: rule.path.to_string(),
                        reason: "required key is missing".to_string(),
                    });
                }
                continue;
            }
        };
        if let Some(reason) = check_leaf(value, rule) {
            out.push(Violation { path: rule.path.to_string(), reason });
        }
    }
    out
}

fn check_leaf(value: &ConfigValue, rule: &LeafRule) -> Option<String> {
    let kind_ok = match rule.kind {
        LeafKind::Int => matches!(value, ConfigValue::Int(_)),
        LeafKind::Float => matches!(value, ConfigValue::Int(_) | ConfigValue::Float(_)),
        LeafKind::Bool => matches!(value, ConfigValue::Bool(_)),
        LeafKind::Str => matches!(value, ConfigValue::Str(_)),
        LeafKind::StrList => matches!(value, ConfigValue::Str(_) | ConfigValue::List(_)),
    };
    if !kind_ok {
        return Some(format!("expected {:?}, got {}", rule.kind, value.kind_name()));
    }
    if let Some(allowed) = rule.allowed {
        let tokens: Vec<String> = match value {
            ConfigValue::Str(s) if rule.kind == LeafKind::StrList => split_comma_list(s),
            ConfigValue::Str(s) => vec![s.clone()],
            ConfigValue::List(vs) => vs.iter().map(|v| v.to_string()).collect(),
            _ => vec![],
        };
        for t in tokens {
            if !allowed.contains(&t.as_str()) {
                return Some(format!("value {t:?} not allowed (allowed: {})", allowed.join(", ")));
            }
        }
    }
    None
}

// ── Tests ────────────────────────────────────────────────────────────────
