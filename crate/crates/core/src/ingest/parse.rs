//! Event-log parsing: line-delimited JSON records to validated events.

use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use super::{Attrs, Entity, EntityId, EntityKind, IngestError, OpType, ProvEvent};

/// Parse outcome counters, reported alongside the events.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseSummary {
    pub parsed: u64,
    pub skipped: u64,
}

// Lenient mirror of the wire format; validation happens after the JSON
// parse so a single bad field skips one line instead of aborting the file.
#[derive(Deserialize)]
struct RawEvent {
    id: u64,
    ts: i64,
    op: String,
    src: RawEndpoint,
    dst: RawEndpoint,
}

#[derive(Deserialize)]
struct RawEndpoint {
    id: String,
    kind: String,
    #[serde(rename = "type")]
    type_name: Option<String>,
    path: Option<String>,
    cmd_line: Option<String>,
    remote_ip: Option<String>,
    remote_port: Option<String>,
}

impl RawEndpoint {
    fn into_entity(self) -> Option<Entity> {
        let id: EntityId = self.id.parse().ok()?;
        let kind = EntityKind::from_token(&self.kind)?;
        // `type` is the one attribute every valid record carries.
        self.type_name.as_ref()?;
        Some(Entity {
            id,
            kind,
            attrs: Attrs {
                type_name: self.type_name,
                path: self.path,
                cmd_line: self.cmd_line,
                remote_ip: self.remote_ip,
                remote_port: self.remote_port,
            },
        })
    }
}

fn parse_line(line: &str) -> Option<ProvEvent> {
    let raw: RawEvent = serde_json::from_str(line).ok()?;
    if raw.ts <= 0 {
        return None;
    }
    let op = OpType::from_token(&raw.op)?;
    let src = raw.src.into_entity()?;
    let dst = raw.dst.into_entity()?;
    if src.id == dst.id && (!op.allows_self_loop() || src.kind != dst.kind) {
        return None;
    }
    Some(ProvEvent { event_id: raw.id, ts: raw.ts, op, src, dst })
}

/// Parse a line-delimited event stream in file order. Malformed lines are
/// skipped and counted; more than 1% malformed aborts, since that rate means
/// the input is almost certainly not in the expected format.
pub fn parse_events<R: BufRead>(reader: R) -> Result<(Vec<ProvEvent>, ParseSummary), IngestError> {
    let mut events = Vec::new();
    let mut summary = ParseSummary::default();
    for line in reader.lines() {
        let line = line.map_err(|e| IngestError::Io { path: "<stream>".into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Some(ev) => {
                events.push(ev);
                summary.parsed += 1;
            }
            None => summary.skipped += 1,
        }
    }
    let total = summary.parsed + summary.skipped;
    if total > 0 && summary.skipped * 100 > total {
        return Err(IngestError::MalformedRate { skipped: summary.skipped, total });
    }
    if summary.skipped > 0 {
        log::warn!("parsed {} events, skipped {} malformed lines", summary.parsed, summary.skipped);
    }
    Ok((events, summary))
}

pub fn parse_events_file(path: &Path) -> Result<(Vec<ProvEvent>, ParseSummary), IngestError> {
    let file = std::fs::File::open(path)
        .map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })?;
    parse_events(std::io::BufReader::new(file))
}
