//! Node-level ground truth: `<hex-id>,<attack-id>` per line.

use std::collections::BTreeMap;
use std::path::Path;

use super::{EntityId, IngestError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub malicious: BTreeMap<EntityId, u32>,
    pub dataset_id: String,
}

impl GroundTruth {
    pub fn attack_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.malicious.values().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn load_ground_truth(path: &Path, dataset_id: &str) -> Result<GroundTruth, IngestError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IngestError::Io { path: path.to_path_buf(), source: e })?;
    let mut gt = GroundTruth { malicious: BTreeMap::new(), dataset_id: dataset_id.to_string() };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || IngestError::LabelSyntax { line_no: i + 1, line: line.to_string() };
        let (id_part, attack_part) = line.split_once(',').ok_or_else(bad)?;
        let id: EntityId = id_part.trim().parse().map_err(|()| bad())?;
        let attack_id: u32 = attack_part.trim().parse().map_err(|_| bad())?;
        match gt.malicious.get(&id) {
            Some(&prev) if prev != attack_id => {
                return Err(IngestError::LabelConflict { id, first: prev, second: attack_id });
            }
            _ => {
                gt.malicious.insert(id, attack_id);
            }
        }
    }
    Ok(gt)
}
