//! Content-addressed stage cache.
//!
//! Every pipeline stage writes its outputs under a digest that chains the
//! stage name, the canonical encoding of the stage's own config arguments,
//! and the parent stage's digest. Rerunning with identical upstream settings
//! lands on the same directory and is reused; changing any argument (or any
//! ancestor's argument) moves every downstream stage to a fresh directory.
//!
//! Commit protocol: build into a hidden temp dir inside the slot, fsync,
//! atomically rename to `outputs`, then write the `_COMPLETE` marker. A crash
//! anywhere before the marker leaves a slot that never reports a hit.

use std::fmt;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::config::ConfigValue;

/// Parent digest for the first stage of a run.
pub const ROOT_PARENT: &str = "root";

/// Marker file name; its presence (with valid content) is the only signal
/// that a slot's outputs are complete.
pub const COMPLETE_MARKER: &str = "_COMPLETE";

/// Arguments that change execution speed or chattiness but never outputs.
/// Skipped at every nesting depth so e.g. `--featurization.word2vec.num_workers=8`
/// still hits the cache.
pub const EXCLUDED_ARG_KEYS: &[&str] = &["num_workers", "verbosity", "log_level"];

// ── Stages ───────────────────────────────────────────────────────────────

/// The seven pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Construction,
    Transformation,
    Featurization,
    Batching,
    Training,
    Evaluation,
    Triage,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Construction,
        Stage::Transformation,
        Stage::Featurization,
        Stage::Batching,
        Stage::Training,
        Stage::Evaluation,
        Stage::Triage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Construction => "construction",
            Stage::Transformation => "transformation",
            Stage::Featurization => "featurization",
            Stage::Batching => "batching",
            Stage::Training => "training",
            Stage::Evaluation => "evaluation",
            Stage::Triage => "triage",
        }
    }

    /// Parse a user-facing stage name. Accepts the historical aliases
    /// `feat_training` and `gnn_training` that older run scripts used.
    pub fn from_cli_name(s: &str) -> Option<Stage> {
        match s {
            "construction" => Some(Stage::Construction),
            "transformation" => Some(Stage::Transformation),
            "featurization" | "feat_training" => Some(Stage::Featurization),
            "batching" => Some(Stage::Batching),
            "training" | "gnn_training" => Some(Stage::Training),
            "evaluation" => Some(Stage::Evaluation),
            "triage" => Some(Stage::Triage),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ── Canonical argument encoding ──────────────────────────────────────────

/// Deterministic, injective byte encoding of a config subtree.
///
/// Scalars are kind-tagged (`i`, `f`, `b`, `s`), strings and map keys are
/// length-prefixed, so no two distinct values share an encoding. Floats use
/// the shortest round-trip decimal form, so `0.0001` and `0.00010` in a YAML
/// file encode identically. Keys in [`EXCLUDED_ARG_KEYS`] are dropped.
pub fn canonical_args(v: &ConfigValue) -> String {
    let mut out = String::new();
    encode_value(v, &mut out);
    out
}

fn encode_value(v: &ConfigValue, out: &mut String) {
    match v {
        ConfigValue::Int(i) => {
            out.push('i');
            out.push_str(&i.to_string());
        }
        ConfigValue::Float(f) => {
            out.push('f');
            out.push_str(&f.to_string());
        }
        ConfigValue::Bool(b) => {
            out.push('b');
            out.push_str(if *b { "true" } else { "false" });
        }
        ConfigValue::Str(s) => {
            out.push('s');
            out.push_str(&s.len().to_string());
            out.push(':');
            out.push_str(s);
        }
        ConfigValue::List(vs) => {
            out.push('[');
            for (i, v) in vs.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                encode_value(v, out);
            }
            out.push(']');
        }
        ConfigValue::Map(m) => {
            out.push('{');
            for (k, v) in m {
                if EXCLUDED_ARG_KEYS.contains(&k.as_str()) {
                    continue;
                }
                out.push_str(&k.len().to_string());
                out.push(':');
                out.push_str(k);
                out.push('=');
                encode_value(v, out);
                out.push(';');
            }
            out.push('}');
        }
    }
}

/// Digest identifying one stage invocation: stage name, canonical args, and
/// the parent stage's digest, separated by 0x1F so no field can bleed into
/// the next.
pub fn stage_digest(stage: Stage, args: &ConfigValue, parent: &str) -> String {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update([0x1f]);
    h.update(canonical_args(args).as_bytes());
    h.update([0x1f]);
    h.update(parent.as_bytes());
    let bytes = h.finalize();
    let mut s = String::with_capacity(64);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ── Cache ────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("slot {digest} was committed by another process with different content")]
    ConcurrentMismatch { digest: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CacheError {
    CacheError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheState {
    Hit,
    Miss,
}

/// One resolved stage slot. `outputs` exists and is complete only on a hit.
#[derive(Debug, Clone)]
pub struct Slot {
    pub stage: Stage,
    pub digest: String,
    pub dir: PathBuf,
    pub outputs: PathBuf,
    pub state: CacheState,
}

/// Result of [`StageCache::ensure`].
#[derive(Debug, Clone)]
pub struct StageRun {
    pub stage: Stage,
    pub digest: String,
    pub outputs: PathBuf,
    /// True when the outputs were reused from a previous complete run.
    pub reused: bool,
}

pub struct StageCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt_markers: AtomicU64,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StageCache {
            root: root.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt_markers: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Markers that existed but failed validation (truncated write, digest
    /// mismatch). Each one was demoted to a miss.
    pub fn corrupt_markers(&self) -> u64 {
        self.corrupt_markers.load(Ordering::Relaxed)
    }

    pub fn slot_dir(&self, stage: Stage, digest: &str) -> PathBuf {
        self.root.join(stage.name()).join(digest)
    }

    /// Compute the slot for a stage invocation and classify it. `force`
    /// demotes a complete slot to a miss in place: same digest, same
    /// directory, marker and stale outputs removed so the rebuild recommits.
    pub fn resolve(
        &self,
        stage: Stage,
        args: &ConfigValue,
        parent: &str,
        force: bool,
    ) -> Result<Slot, CacheError> {
        let digest = stage_digest(stage, args, parent);
        let dir = self.slot_dir(stage, &digest);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let outputs = dir.join("outputs");
        let marker = dir.join(COMPLETE_MARKER);

        if force {
            remove_if_exists(&marker)?;
            remove_dir_if_exists(&outputs)?;
            self.misses.fetch_add(1, Ordering::Relaxed);
            return Ok(Slot { stage, digest, dir, outputs, state: CacheState::Miss });
        }

        let state = match fs::read_to_string(&marker) {
            Ok(text) if marker_is_valid(&text, &digest) && outputs.is_dir() => CacheState::Hit,
            Ok(_) => {
                log::warn!(
                    "stage {stage} slot {digest}: corrupt completion marker, rebuilding"
                );
                self.corrupt_markers.fetch_add(1, Ordering::Relaxed);
                remove_if_exists(&marker)?;
                CacheState::Miss
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => CacheState::Miss,
            Err(e) => return Err(io_err(&marker, e)),
        };
        match state {
            CacheState::Hit => self.hits.fetch_add(1, Ordering::Relaxed),
            CacheState::Miss => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        Ok(Slot { stage, digest, dir, outputs, state })
    }

    /// Read-only classification of a slot: what `resolve` would return,
    /// without creating directories, deleting markers, or counting. For
    /// planning output only; execution must go through `resolve`/`ensure`.
    pub fn peek(&self, stage: Stage, args: &ConfigValue, parent: &str) -> (String, CacheState) {
        let digest = stage_digest(stage, args, parent);
        let dir = self.slot_dir(stage, &digest);
        let state = match fs::read_to_string(dir.join(COMPLETE_MARKER)) {
            Ok(text) if marker_is_valid(&text, &digest) && dir.join("outputs").is_dir() => {
                CacheState::Hit
            }
            _ => CacheState::Miss,
        };
        (digest, state)
    }

    /// Start building a missed slot. Returns a temp outputs dir; fill it,
    /// then [`PendingBuild::commit`].
    pub fn begin<'a>(&'a self, slot: &Slot) -> Result<PendingBuild<'a>, CacheError> {
        let nonce = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let tmp = slot.dir.join(format!(".tmp-outputs-{}-{nonce}", std::process::id()));
        fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        Ok(PendingBuild { cache: self, slot: slot.clone(), tmp, committed: false })
    }

    /// Resolve, and on a miss run `build` against a temp dir and commit.
    /// The closure never runs on a hit.
    pub fn ensure<E, F>(
        &self,
        stage: Stage,
        args: &ConfigValue,
        parent: &str,
        force: bool,
        snapshot: &str,
        build: F,
    ) -> Result<StageRun, E>
    where
        E: From<CacheError>,
        F: FnOnce(&Path) -> Result<(), E>,
    {
        let slot = self.resolve(stage, args, parent, force)?;
        if slot.state == CacheState::Hit {
            return Ok(StageRun {
                stage,
                digest: slot.digest,
                outputs: slot.outputs,
                reused: true,
            });
        }
        let pending = self.begin(&slot)?;
        build(pending.outputs_dir())?;
        let outputs = pending.commit(snapshot)?;
        Ok(StageRun { stage, digest: slot.digest, outputs, reused: false })
    }
}

/// An in-progress stage build. Dropping without committing removes the temp
/// dir, so an aborted build leaves the slot incomplete (a future miss).
pub struct PendingBuild<'a> {
    cache: &'a StageCache,
    slot: Slot,
    tmp: PathBuf,
    committed: bool,
}

impl PendingBuild<'_> {
    pub fn outputs_dir(&self) -> &Path {
        &self.tmp
    }

    /// Publish the build: fsync the temp tree, rename it to `outputs`, write
    /// the config snapshot, then the completion marker last.
    pub fn commit(mut self, snapshot: &str) -> Result<PathBuf, CacheError> {
        let outputs = self.slot.outputs.clone();
        let marker = self.slot.dir.join(COMPLETE_MARKER);

        sync_dir_tree(&self.tmp)?;
        // A marker can't exist here unless another process finished the same
        // slot while we were building; their result is as good as ours.
        if marker.is_file() {
            let text = fs::read_to_string(&marker).map_err(|e| io_err(&marker, e))?;
            if marker_is_valid(&text, &self.slot.digest) && outputs.is_dir() {
                self.committed = true; // drop cleanup still removes tmp
                let _ = fs::remove_dir_all(&self.tmp);
                return Ok(outputs);
            }
            return Err(CacheError::ConcurrentMismatch { digest: self.slot.digest.clone() });
        }
        remove_dir_if_exists(&outputs)?;
        fs::rename(&self.tmp, &outputs).map_err(|e| io_err(&outputs, e))?;
        sync_dir(&self.slot.dir)?;

        let snap_path = self.slot.dir.join("config_snapshot");
        fs::write(&snap_path, snapshot).map_err(|e| io_err(&snap_path, e))?;

        let ns = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let mut f = File::create(&marker).map_err(|e| io_err(&marker, e))?;
        write!(f, "{}\n{ns}\n", self.slot.digest).map_err(|e| io_err(&marker, e))?;
        f.sync_all().map_err(|e| io_err(&marker, e))?;

        self.committed = true;
        Ok(outputs)
    }
}

impl Drop for PendingBuild<'_> {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
        let _ = &self.cache; // lifetime ties pending builds to the cache
    }
}

/// Marker format: digest line, then nanoseconds-since-epoch as decimal ASCII.
fn marker_is_valid(text: &str, digest: &str) -> bool {
    let mut lines = text.lines();
    let d = lines.next();
    let ts = lines.next();
    d == Some(digest)
        && ts.is_some_and(|t| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()))
        && lines.next().is_none()
}

fn remove_if_exists(path: &Path) -> Result<(), CacheError> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_err(path, e)),
    }
}

fn remove_dir_if_exists(path: &Path) -> Result<(), CacheError> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_err(path, e)),
    }
}

fn sync_dir(path: &Path) -> Result<(), CacheError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    f.sync_all().map_err(|e| io_err(path, e))
}

fn sync_dir_tree(path: &Path) -> Result<(), CacheError> {
    for entry in fs::read_dir(path).map_err(|e| io_err(path, e))? {
        let entry = entry.map_err(|e| io_err(path, e))?;
        let p = entry.path();
        if p.is_dir() {
            sync_dir_tree(&p)?;
        } else {
            let f = File::open(&p).map_err(|e| io_err(&p, e))?;
            f.sync_all().map_err(|e| io_err(&p, e))?;
        }
    }
    sync_dir(path)
}

// ── Tests ────────────────────────────────────────────────────────────────
