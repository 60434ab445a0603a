//! Time-windowed graph construction.

use std::collections::BTreeMap;

use super::{
    Edge, Entity, EntityId, IngestError, NodeRef, ProvEvent, ProvGraph, NS_PER_MINUTE,
};

/// Reorder tolerance: an event may arrive this much later in the stream than
/// events with higher timestamps (multi-source logs interleave slightly).
pub const REORDER_SLACK_NS: i64 = 60 * 1_000_000_000;

/// Partition events into fixed-length windows aligned to the first event's
/// timestamp floored to the minute. Every window in the covered span is
/// emitted, including empty ones, so window indices are pure time arithmetic
/// for every consumer.
///
/// Node attributes merge last-writer-wins per attribute as the scan
/// advances; each window's node entry is the merged state as of the last
/// event touching that entity in the window.
pub fn build_windows(
    events: Vec<ProvEvent>,
    window_minutes: i64,
) -> Result<Vec<ProvGraph>, IngestError> {
    if window_minutes <= 0 {
        return Err(IngestError::BadParam {
            what: format!("window_minutes must be positive, got {window_minutes}"),
        });
    }
    if events.is_empty() {
        return Err(IngestError::EmptyStream);
    }

    // Stream-order disorder check, then a stable sort inside the slack.
    let mut max_ts = i64::MIN;
    for ev in &events {
        if max_ts != i64::MIN && ev.ts < max_ts - REORDER_SLACK_NS {
            return Err(IngestError::TimeDisorder {
                event_id: ev.event_id,
                ts: ev.ts,
                lag_secs: (max_ts - ev.ts) / 1_000_000_000,
            });
        }
        max_ts = max_ts.max(ev.ts);
    }
    let mut events = events;
    events.sort_by_key(|e| (e.ts, e.event_id));

    let width = window_minutes * NS_PER_MINUTE;
    let t0 = events[0].ts - events[0].ts.rem_euclid(NS_PER_MINUTE);
    let last_ts = events[events.len() - 1].ts;
    let count = ((last_ts - t0) / width) as usize + 1;

    let mut windows: Vec<ProvGraph> = (0..count)
        .map(|k| ProvGraph::empty(t0 + k as i64 * width, t0 + (k as i64 + 1) * width))
        .collect();

    // Running per-entity state: kind (fixed for the entity's lifetime) and
    // merged attributes.
    let mut registry: BTreeMap<EntityId, Entity> = BTreeMap::new();
    let touch = |reg: &mut BTreeMap<EntityId, Entity>, ent: &Entity| -> Result<Entity, IngestError> {
        match reg.get_mut(&ent.id) {
            Some(known) => {
                if known.kind != ent.kind {
                    return Err(IngestError::KindConflict {
                        id: ent.id,
                        first: known.kind,
                        second: ent.kind,
                    });
                }
                known.attrs.merge_from(&ent.attrs);
                Ok(known.clone())
            }
            None => {
                reg.insert(ent.id, ent.clone());
                Ok(ent.clone())
            }
        }
    };

    for ev in &events {
        let k = ((ev.ts - t0) / width) as usize;
        let w = &mut windows[k];
        let src_state = touch(&mut registry, &ev.src)?;
        let dst_state = touch(&mut registry, &ev.dst)?;
        w.nodes.insert(NodeRef::base(ev.src.id), src_state);
        w.nodes.insert(NodeRef::base(ev.dst.id), dst_state);
        w.edges.push(Edge {
            src: NodeRef::base(ev.src.id),
            dst: NodeRef::base(ev.dst.id),
            op: ev.op,
            ts: ev.ts,
            event_id: ev.event_id,
            synthetic: false,
        });
    }

    Ok(windows)
}
