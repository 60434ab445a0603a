//! Time-based dataset splitting.

use super::{GroundTruth, IngestError, ProvGraph};

/// Windows partitioned into contiguous train/val/test spans.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ProvGraph>,
    pub val: Vec<ProvGraph>,
    pub test: Vec<ProvGraph>,
    /// (train_end, val_end) as given.
    pub boundaries: (i64, i64),
}

impl DatasetSplit {
    pub fn window_counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Partition windows by `window_start`: before `train_end` trains, before
/// `val_end` validates, the rest tests. Self-supervised training assumes
/// benign-only inputs, so any labeled attack node inside a train or val
/// window is an error, not a warning.
pub fn split_dataset(
    windows: Vec<ProvGraph>,
    gt: &GroundTruth,
    train_end: i64,
    val_end: i64,
) -> Result<DatasetSplit, IngestError> {
    if windows.is_empty() {
        return Err(IngestError::EmptyStream);
    }
    if train_end >= val_end {
        return Err(IngestError::SplitBounds {
            detail: format!("train_end {train_end} must be before val_end {val_end}"),
        });
    }
    let span_start = windows[0].window_start;
    let span_end = windows[windows.len() - 1].window_end;
    if train_end <= span_start || val_end >= span_end {
        return Err(IngestError::SplitBounds {
            detail: format!(
                "boundaries ({train_end}, {val_end}) must lie inside the dataset span [{span_start}, {span_end})"
            ),
        });
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        boundaries: (train_end, val_end),
    };
    for w in windows {
        let (name, bucket) = if w.window_start < train_end {
            ("train", &mut split.train)
        } else if w.window_start < val_end {
            ("val", &mut split.val)
        } else {
            ("test", &mut split.test)
        };
        if name != "test" {
            for nref in w.nodes.keys() {
                if let Some(&attack_id) = gt.malicious.get(&nref.id) {
                    return Err(IngestError::AttackLeakage {
                        node: nref.id,
                        attack_id,
                        split: name,
                        window_start: w.window_start,
                    });
                }
            }
        }
        bucket.push(w);
    }

    for (name, bucket) in
        [("train", &split.train), ("val", &split.val), ("test", &split.test)]
    {
        if bucket.is_empty() {
            return Err(IngestError::EmptySplit { which: name });
        }
    }
    Ok(split)
}
