//! Pipeline stage 4: repartition construction windows into training batches.
//!
//! Three strategies: global (flatten every window, cut the stream into
//! fixed-size chunks), intra (cut each window independently, never crossing
//! window boundaries), inter (merge consecutive windows into one large
//! batch). A batch stores node rows rather than a plain graph because
//! inter-merging must keep the same entity from different windows as
//! distinct rows; rows are keyed by (source_window, node) so node-level
//! scores can always be mapped back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Entity, NodeRef, OpType, ProvGraph, NS_PER_MINUTE};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("batching over an empty stream (no windows or no edges)")]
    EmptyInput,
    #[error("cannot batch empty window starting at {window_start}")]
    EmptyWindow { window_start: i64 },
    #[error("bad batching parameter: {what}")]
    BadParam { what: String },
    #[error("batches out of temporal order at index {index}")]
    UnorderedBatches { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchOrigin {
    Global,
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    Edges,
    Minutes,
}

/// One node row. `source_window` is the construction-window index the row
/// came from; None means the row merged occurrences from several windows
/// (global mode only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNode {
    pub node: NodeRef,
    pub source_window: Option<usize>,
    pub entity: Entity,
}

/// One edge row; endpoints are indices into `Batch::nodes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEdge {
    pub src_row: usize,
    pub dst_row: usize,
    pub op: OpType,
    pub ts: i64,
    pub event_id: u64,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub origin: BatchOrigin,
    /// Chunk bounds, half-open: every edge ts is in [window_start, window_end).
    pub window_start: i64,
    pub window_end: i64,
    pub nodes: Vec<BatchNode>,
    pub edges: Vec<BatchEdge>,
    /// Per-edge source construction-window index; same length as `edges`.
    pub membership: Vec<usize>,
}

impl Batch {
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.membership.len() != self.edges.len() {
            return Err(format!(
                "membership length {} != edge count {}",
                self.membership.len(),
                self.edges.len()
            ));
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.src_row >= self.nodes.len() || e.dst_row >= self.nodes.len() {
                return Err(format!("edge {i} references row out of bounds"));
            }
            if e.ts < self.window_start || e.ts >= self.window_end {
                return Err(format!(
                    "edge {i} ts {} outside [{}, {})",
                    e.ts, self.window_start, self.window_end
                ));
            }
        }
        Ok(())
    }
}

// An edge lifted out of its window, tagged with the window index.
#[derive(Debug, Clone)]
struct TaggedEdge {
    window: usize,
    src: NodeRef,
    dst: NodeRef,
    op: OpType,
    ts: i64,
    event_id: u64,
    synthetic: bool,
}

fn entity_of(w: &ProvGraph, node: &NodeRef) -> Entity {
    w.nodes.get(node).cloned().expect("edge endpoint must be present in window node map")
}

/// Build batch rows for a chunk of tagged edges, merging repeated node refs
/// across windows: the row keeps the latest window's attributes, filling
/// gaps from earlier windows (same last-writer-wins rule as ingest).
fn rows_from_tagged(windows: &[ProvGraph], chunk: &[TaggedEdge]) -> (Vec<BatchNode>, Vec<BatchEdge>, Vec<usize>) {
    // node -> windows it appears in within this chunk
    let mut occurrences: BTreeMap<NodeRef, Vec<usize>> = BTreeMap::new();
    for e in chunk {
        occurrences.entry(e.src.clone()).or_default().push(e.window);
        occurrences.entry(e.dst.clone()).or_default().push(e.window);
    }
    let mut nodes = Vec::with_capacity(occurrences.len());
    let mut row_of: BTreeMap<NodeRef, usize> = BTreeMap::new();
    for (node, mut wins) in occurrences {
        wins.sort_unstable();
        wins.dedup();
        let mut entity = entity_of(&windows[wins[0]], &node);
        for &w in &wins[1..] {
            entity.attrs.merge_from(&entity_of(&windows[w], &node).attrs);
        }
        let source_window = if wins.len() == 1 { Some(wins[0]) } else { None };
        row_of.insert(node.clone(), nodes.len());
        nodes.push(BatchNode { node, source_window, entity });
    }
    let mut edges = Vec::with_capacity(chunk.len());
    let mut membership = Vec::with_capacity(chunk.len());
    for e in chunk {
        edges.push(BatchEdge {
            src_row: row_of[&e.src],
            dst_row: row_of[&e.dst],
            op: e.op,
            ts: e.ts,
            event_id: e.event_id,
            synthetic: e.synthetic,
        });
        membership.push(e.window);
    }
    (nodes, edges, membership)
}

/// Flatten every window into one ts-ordered stream and cut it into chunks:
/// `size` edges each (last smaller) or `size`-minute spans. Minute chunks
/// are anchored at the stream's first event floored to the minute (the same
/// alignment ingest uses for windows) and run to the last window's end, so
/// a span of three 15-minute windows cut at 10 minutes always yields 5
/// chunks, empty ones included.
pub fn global_batch(
    windows: &[ProvGraph],
    mode: ChunkMode,
    size: i64,
) -> Result<Vec<Batch>, BatchError> {
    if size < 1 {
        return Err(BatchError::BadParam { what: format!("chunk size must be >= 1, got {size}") });
    }
    let mut stream: Vec<TaggedEdge> = Vec::new();
    for (wi, w) in windows.iter().enumerate() {
        for e in &w.edges {
            stream.push(TaggedEdge {
                window: wi,
                src: e.src.clone(),
                dst: e.dst.clone(),
                op: e.op,
                ts: e.ts,
                event_id: e.event_id,
                synthetic: e.synthetic,
            });
        }
    }
    if stream.is_empty() {
        return Err(BatchError::EmptyInput);
    }
    // Boundary ties broken by event_id so chunk cuts are deterministic.
    stream.sort_by_key(|e| (e.ts, e.event_id));

    let mut out = Vec::new();
    match mode {
        ChunkMode::Edges => {
            for chunk in stream.chunks(size as usize) {
                let (nodes, edges, membership) = rows_from_tagged(windows, chunk);
                out.push(Batch {
                    origin: BatchOrigin::Global,
                    window_start: chunk.first().expect("chunks are non-empty").ts,
                    window_end: chunk.last().expect("chunks are non-empty").ts + 1,
                    nodes,
                    edges,
                    membership,
                });
            }
        }
        ChunkMode::Minutes => {
            let first_ts = stream[0].ts;
            let anchor = first_ts - first_ts.rem_euclid(NS_PER_MINUTE);
            let stream_end = windows.iter().map(|w| w.window_end).max().expect("non-empty stream");
            let width = size * NS_PER_MINUTE;
            let n_chunks = (stream_end - anchor + width - 1) / width;
            let mut cursor = 0usize;
            for c in 0..n_chunks {
                let lo = anchor + c * width;
                let hi = (lo + width).min(stream_end);
                let begin = cursor;
                while cursor < stream.len() && stream[cursor].ts < hi {
                    cursor += 1;
                }
                let (nodes, edges, membership) = rows_from_tagged(windows, &stream[begin..cursor]);
                out.push(Batch {
                    origin: BatchOrigin::Global,
                    window_start: lo,
                    window_end: hi,
                    nodes,
                    edges,
                    membership,
                });
            }
            debug_assert_eq!(cursor, stream.len());
        }
    }
    Ok(out)
}

/// Wrap one construction window as a single batch, tagging every row and
/// edge with `source_index`.
pub fn from_window(w: &ProvGraph, source_index: usize, origin: BatchOrigin) -> Batch {
    let mut row_of: BTreeMap<&NodeRef, usize> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(w.nodes.len());
    for (node, entity) in &w.nodes {
        row_of.insert(node, nodes.len());
        nodes.push(BatchNode {
            node: node.clone(),
            source_window: Some(source_index),
            entity: entity.clone(),
        });
    }
    let edges: Vec<BatchEdge> = w
        .edges
        .iter()
        .map(|e| BatchEdge {
            src_row: row_of[&e.src],
            dst_row: row_of[&e.dst],
            op: e.op,
            ts: e.ts,
            event_id: e.event_id,
            synthetic: e.synthetic,
        })
        .collect();
    let membership = vec![source_index; edges.len()];
    Batch {
        origin,
        window_start: w.window_start,
        window_end: w.window_end,
        nodes,
        edges,
        membership,
    }
}

/// Cut an existing batch into chunks without crossing its bounds. Minute
/// chunks anchor at the batch's own window_start (a 15-minute window cut at
/// 10 minutes gives a 10-minute and a 5-minute chunk); empty minute chunks
/// are kept so chunk counts depend only on spans. Edge-mode chunking of an
/// edgeless batch yields nothing.
pub fn partition_batch(parent: &Batch, mode: ChunkMode, size: i64) -> Result<Vec<Batch>, BatchError> {
    if size < 1 {
        return Err(BatchError::BadParam { what: format!("chunk size must be >= 1, got {size}") });
    }
    // (begin, end) edge ranges plus chunk bounds; parent edges are ts-sorted.
    debug_assert!(parent.edges.windows(2).all(|p| (p[0].ts, p[0].event_id) <= (p[1].ts, p[1].event_id)));
    let mut spans: Vec<(usize, usize, i64, i64)> = Vec::new();
    match mode {
        ChunkMode::Edges => {
            let n = parent.edges.len();
            let mut begin = 0usize;
            while begin < n {
                let end = (begin + size as usize).min(n);
                spans.push((begin, end, parent.edges[begin].ts, parent.edges[end - 1].ts + 1));
                begin = end;
            }
        }
        ChunkMode::Minutes => {
            let width = size * NS_PER_MINUTE;
            let n_chunks = (parent.window_end - parent.window_start + width - 1) / width;
            let mut cursor = 0usize;
            for c in 0..n_chunks {
                let lo = parent.window_start + c * width;
                let hi = (lo + width).min(parent.window_end);
                let begin = cursor;
                while cursor < parent.edges.len() && parent.edges[cursor].ts < hi {
                    cursor += 1;
                }
                spans.push((begin, cursor, lo, hi));
            }
        }
    }
    let mut out = Vec::with_capacity(spans.len());
    for (begin, end, lo, hi) in spans {
        let chunk = &parent.edges[begin..end];
        // Rows referenced by the chunk, in parent row order.
        let mut used: Vec<usize> = chunk.iter().flat_map(|e| [e.src_row, e.dst_row]).collect();
        used.sort_unstable();
        used.dedup();
        let child_row: BTreeMap<usize, usize> =
            used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let nodes = used.iter().map(|&r| parent.nodes[r].clone()).collect();
        let edges = chunk
            .iter()
            .map(|e| BatchEdge { src_row: child_row[&e.src_row], dst_row: child_row[&e.dst_row], ..e.clone() })
            .collect();
        let membership = parent.membership[begin..end].to_vec();
        out.push(Batch { origin: parent.origin, window_start: lo, window_end: hi, nodes, edges, membership });
    }
    Ok(out)
}

/// Cut one window into chunks; partitions never cross the window boundary.
/// `window_index` tags membership (pass the window's position in the split).
pub fn intra_batch(
    w: &ProvGraph,
    window_index: usize,
    mode: ChunkMode,
    size: i64,
) -> Result<Vec<Batch>, BatchError> {
    if w.edges.is_empty() {
        return Err(BatchError::EmptyWindow { window_start: w.window_start });
    }
    partition_batch(&from_window(w, window_index, BatchOrigin::Intra), mode, size)
}

/// Merge consecutive groups of `batch_size` batches into one. Rows stay
/// distinct per (source_window, node); two chunks of the same window
/// contribute one shared row per node.
pub fn merge_batches(batches: &[Batch], batch_size: usize) -> Result<Vec<Batch>, BatchError> {
    if batch_size < 1 {
        return Err(BatchError::BadParam { what: "batch_size must be >= 1".into() });
    }
    let mut out = Vec::new();
    for group in batches.chunks(batch_size) {
        let mut nodes: Vec<BatchNode> = Vec::new();
        let mut row_of: BTreeMap<(Option<usize>, NodeRef), usize> = BTreeMap::new();
        let mut edges: Vec<BatchEdge> = Vec::new();
        let mut membership: Vec<usize> = Vec::new();
        for b in group {
            let mut remap = Vec::with_capacity(b.nodes.len());
            for row in &b.nodes {
                let key = (row.source_window, row.node.clone());
                let idx = *row_of.entry(key).or_insert_with(|| {
                    nodes.push(row.clone());
                    nodes.len() - 1
                });
                remap.push(idx);
            }
            for e in &b.edges {
                edges.push(BatchEdge { src_row: remap[e.src_row], dst_row: remap[e.dst_row], ..e.clone() });
            }
            membership.extend_from_slice(&b.membership);
        }
        out.push(Batch {
            origin: BatchOrigin::Inter,
            window_start: group.first().expect("chunks are non-empty").window_start,
            window_end: group.last().expect("chunks are non-empty").window_end,
            nodes,
            edges,
            membership,
        });
    }
    Ok(out)
}

/// Merge consecutive groups of `batch_size` windows; identical entities in
/// different windows remain distinct rows, so node counts add.
pub fn inter_batch(graphs: &[ProvGraph], batch_size: usize) -> Result<Vec<Batch>, BatchError> {
    let wrapped: Vec<Batch> = graphs
        .iter()
        .enumerate()
        .map(|(i, w)| from_window(w, i, BatchOrigin::Inter))
        .collect();
    merge_batches(&wrapped, batch_size)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborEvent {
    pub neighbor: NodeRef,
    pub ts: i64,
    pub op: OpType,
}

/// Per-batch snapshots of each node's k most recent prior interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub k: usize,
    /// One map per batch, covering exactly the nodes appearing in that
    /// batch; a node with no prior history maps to an empty list.
    pub snapshots: Vec<BTreeMap<NodeRef, Vec<NeighborEvent>>>,
}

/// Single forward pass over temporally ordered batches: snapshot the
/// current buffers for the nodes of batch b, then feed b's edges into the
/// buffers (both endpoints record the other). Buffers keep the k most
/// recent entries by (ts, insertion order); snapshots additionally drop
/// entries with ts >= the batch's window_start, so no same-batch or future
/// event ever leaks in.
pub fn build_neighbor_index(batches: &[Batch], k: usize) -> Result<NeighborIndex, BatchError> {
    if k < 1 {
        return Err(BatchError::BadParam { what: "neighbor buffer k must be >= 1".into() });
    }
    for (i, pair) in batches.windows(2).enumerate() {
        if pair[1].window_start < pair[0].window_start {
            return Err(BatchError::UnorderedBatches { index: i + 1 });
        }
    }
    // Buffer entries: (ts, seq, neighbor, op), kept sorted descending, ≤ k.
    type Buffer = Vec<(i64, u64, NodeRef, OpType)>;
    let mut buffers: BTreeMap<NodeRef, Buffer> = BTreeMap::new();
    let mut seq = 0u64;
    let mut snapshots = Vec::with_capacity(batches.len());

    for b in batches {
        let mut snap: BTreeMap<NodeRef, Vec<NeighborEvent>> = BTreeMap::new();
        for row in &b.nodes {
            let history = buffers
                .get(&row.node)
                .map(|buf| {
                    buf.iter()
                        .filter(|(ts, _, _, _)| *ts < b.window_start)
                        .map(|(ts, _, neighbor, op)| NeighborEvent {
                            neighbor: neighbor.clone(),
                            ts: *ts,
                            op: *op,
                        })
                        .collect()
                })
                .unwrap_or_default();
            snap.insert(row.node.clone(), history);
        }
        snapshots.push(snap);

        for e in &b.edges {
            let src = b.nodes[e.src_row].node.clone();
            let dst = b.nodes[e.dst_row].node.clone();
            for (me, other) in [(&src, &dst), (&dst, &src)] {
                let buf = buffers.entry(me.clone()).or_default();
                let entry = (e.ts, seq, other.clone(), e.op);
                seq += 1;
                // Insert keeping (ts, seq) descending, newest first.
                let pos = buf.partition_point(|(ts, s, _, _)| (*ts, *s) > (entry.0, entry.1));
                buf.insert(pos, entry);
                buf.truncate(k);
            }
        }
    }
    Ok(NeighborIndex { k, snapshots })
}
