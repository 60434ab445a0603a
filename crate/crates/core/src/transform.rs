//! Structural graph transforms (pipeline stage 2), applied per window in
//! config order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::ingest::{Edge, NodeRef, OpType, ProvGraph};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("window starting {window_start} is cyclic; pseudo_root requires a DAG (apply dag first)")]
    CyclicGraph { window_start: i64 },
    #[error("unknown transform method {name:?}")]
    UnknownMethod { name: String },
}

/// Counters accumulated over all windows of one transform run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformStats {
    pub redundant_removed: u64,
    pub reverse_edges_added: u64,
    pub versions_minted: u64,
    pub pseudo_edges_added: u64,
}

/// Apply the configured method list, left to right, to every window.
pub fn apply_transforms(
    mut windows: Vec<ProvGraph>,
    methods: &[String],
) -> Result<(Vec<ProvGraph>, TransformStats), TransformError> {
    const KNOWN: [&str; 5] = ["none", "undirected", "remove_redundant", "dag", "pseudo_root"];
    if let Some(bad) = methods.iter().find(|m| !KNOWN.contains(&m.as_str())) {
        return Err(TransformError::UnknownMethod { name: bad.clone() });
    }
    let mut stats = TransformStats::default();
    for name in methods {
        for g in &mut windows {
            let taken = std::mem::replace(g, ProvGraph::empty(0, 0));
            *g = match name.as_str() {
                "none" => taken,
                "undirected" => {
                    let before = taken.edges.len() as u64;
                    let out = to_undirected(taken);
                    stats.reverse_edges_added += out.edges.len() as u64 - before;
                    out
                }
                "remove_redundant" => {
                    let (out, removed) = remove_redundant(taken);
                    stats.redundant_removed += removed;
                    out
                }
                "dag" => {
                    let before = taken.nodes.len() as u64;
                    let out = to_dag(taken);
                    stats.versions_minted += out.nodes.len() as u64 - before;
                    out
                }
                "pseudo_root" => {
                    let before = taken.edges.len() as u64;
                    let out = pseudo_root_edges(taken)?;
                    stats.pseudo_edges_added += out.edges.len() as u64 - before;
                    out
                }
                other => return Err(TransformError::UnknownMethod { name: other.to_string() }),
            };
        }
    }
    Ok((windows, stats))
}

/// Add the reverse arc of every edge unless an identical reverse (same
/// endpoints, op, and timestamp) already exists. Two directed arcs stand in
/// for one undirected edge so downstream code sees a single edge shape.
pub fn to_undirected(mut g: ProvGraph) -> ProvGraph {
    let present: BTreeSet<(NodeRef, NodeRef, OpType, i64)> =
        g.edges.iter().map(|e| (e.src, e.dst, e.op, e.ts)).collect();
    let mut added = Vec::new();
    for e in &g.edges {
        if !present.contains(&(e.dst, e.src, e.op, e.ts)) {
            added.push(Edge { src: e.dst, dst: e.src, ..*e });
        }
    }
    // A symmetric input pair contributes the same reverse twice; keep one.
    added.sort_by_key(|e| (e.time_key(), e.src, e.dst, e.op));
    added.dedup_by_key(|e| (e.src, e.dst, e.op, e.ts));
    g.edges.extend(added);
    g.directed = false;
    g.sort_edges();
    g
}

/// Keep only the earliest edge per (src, dst, op) triple.
pub fn remove_redundant(mut g: ProvGraph) -> (ProvGraph, u64) {
    let mut seen: BTreeSet<(NodeRef, NodeRef, OpType)> = BTreeSet::new();
    let before = g.edges.len();
    g.edges.retain(|e| seen.insert((e.src, e.dst, e.op)));
    let removed = (before - g.edges.len()) as u64;
    (g, removed)
}

/// Break cycles by node versioning in timestamp order: an edge always leaves
/// its source's current version; once a node has emitted an outgoing edge,
/// the next incoming edge bumps it to a fresh version (so information cannot
/// flow backwards in time through a node). Self-interactions bump
/// unconditionally, turning loops into version steps.
pub fn to_dag(mut g: ProvGraph) -> ProvGraph {
    let mut version: BTreeMap<NodeRef, u32> = BTreeMap::new();
    let mut emitted: BTreeMap<NodeRef, bool> = BTreeMap::new();

    let mut out_edges = Vec::with_capacity(g.edges.len());
    let mut minted: BTreeSet<NodeRef> = BTreeSet::new();
    for e in &g.edges {
        let src_base = NodeRef::base(e.src.id);
        let dst_base = NodeRef::base(e.dst.id);
        let src = NodeRef { id: e.src.id, version: *version.get(&src_base).unwrap_or(&0) };
        emitted.insert(src_base, true);
        if *emitted.get(&dst_base).unwrap_or(&false) {
            let v = version.entry(dst_base).or_insert(0);
            *v += 1;
            emitted.insert(dst_base, false);
        }
        let dst = NodeRef { id: e.dst.id, version: *version.get(&dst_base).unwrap_or(&0) };
        if src.version > 0 {
            minted.insert(src);
        }
        if dst.version > 0 {
            minted.insert(dst);
        }
        out_edges.push(Edge { src, dst, ..*e });
    }

    for nref in minted {
        let base = g.nodes[&NodeRef::base(nref.id)].clone();
        g.nodes.insert(nref, base);
    }
    g.edges = out_edges;
    g
}

/// Topological order via Kahn's algorithm; `None` when the graph is cyclic.
pub fn topo_order(g: &ProvGraph) -> Option<Vec<NodeRef>> {
    let mut indeg: BTreeMap<NodeRef, usize> = g.nodes.keys().map(|&n| (n, 0)).collect();
    let mut adj: BTreeMap<NodeRef, Vec<NodeRef>> = BTreeMap::new();
    for e in &g.edges {
        *indeg.get_mut(&e.dst)? += 1;
        adj.entry(e.src).or_default().push(e.dst);
    }
    let mut queue: VecDeque<NodeRef> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(n) = queue.pop_front() {
        order.push(n);
        for &m in adj.get(&n).into_iter().flatten() {
            let d = indeg.get_mut(&m).unwrap();
            *d -= 1;
            if *d == 0 {
                queue.push_back(m);
            }
        }
    }
    (order.len() == g.nodes.len()).then_some(order)
}

/// Connect every node to its root causes: for each root ancestor r of n
/// (ancestor with in-degree 0), add a synthetic (r, n, pseudo_root) edge at
/// the window start. Pseudo edges use their own op token even when a direct
/// structural edge exists, so objectives can tell provenance from plumbing.
pub fn pseudo_root_edges(mut g: ProvGraph) -> Result<ProvGraph, TransformError> {
    let order = topo_order(&g)
        .ok_or(TransformError::CyclicGraph { window_start: g.window_start })?;

    let mut indeg: BTreeMap<NodeRef, usize> = g.nodes.keys().map(|&n| (n, 0)).collect();
    let mut preds: BTreeMap<NodeRef, Vec<NodeRef>> = BTreeMap::new();
    for e in &g.edges {
        *indeg.get_mut(&e.dst).unwrap() += 1;
        preds.entry(e.dst).or_default().push(e.src);
    }

    // Root-ancestor sets propagate along the topological order.
    let mut roots: BTreeMap<NodeRef, BTreeSet<NodeRef>> = BTreeMap::new();
    for &n in &order {
        let set: BTreeSet<NodeRef> = if indeg[&n] == 0 {
            BTreeSet::from([n])
        } else {
            let mut s = BTreeSet::new();
            for p in &preds[&n] {
                s.extend(roots[p].iter().copied());
            }
            s
        };
        roots.insert(n, set);
    }

    let ts = g.window_start;
    let mut pseudo = Vec::new();
    for (&n, rs) in &roots {
        if indeg[&n] == 0 {
            continue; // a root is its own provenance
        }
        for &r in rs {
            pseudo.push(Edge { src: r, dst: n, op: OpType::PseudoRoot, ts, event_id: 0, synthetic: true });
        }
    }
    pseudo.dedup_by_key(|e| (e.src, e.dst));
    g.edges.extend(pseudo);
    g.sort_edges();
    Ok(g)
}

// ── Tests ────────────────────────────────────────────────────────────────
