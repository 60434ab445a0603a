//! On-disk embedding table: one JSON header line, then raw little-endian
//! f64 vector data in vocab order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeaturizeError;
use crate::Real;

/// Token -> vector map produced by featurization training.
///
/// Invariant: `vocab` is sorted ascending (corpus construction assigns
/// indices in sorted-token order) and `vectors.len() == vocab.len() * dim`,
/// with token i's vector at `vectors[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub vectors: Vec<Real>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    seed: u64,
    vocab: Vec<String>,
}

impl EmbeddingTable {
    pub fn vector(&self, token: &str) -> Option<&[Real]> {
        let idx = self.vocab.binary_search_by(|t| t.as_str().cmp(token)).ok()?;
        Some(&self.vectors[idx * self.dim..(idx + 1) * self.dim])
    }

    pub fn save(&self, path: &Path) -> Result<(), FeaturizeError> {
        let io_err = |e: std::io::Error| FeaturizeError::TableIo {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        debug_assert_eq!(self.vectors.len(), self.vocab.len() * self.dim);
        let header = Header { dim: self.dim, seed: self.seed, vocab: self.vocab.clone() };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer(&mut w, &header).map_err(|e| FeaturizeError::TableIo {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err)?;
        for x in &self.vectors {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable, FeaturizeError> {
        let fail = |message: String| FeaturizeError::TableIo { path: path.to_path_buf(), message };
        let mut r = BufReader::new(File::open(path).map_err(|e| fail(e.to_string()))?);

        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte).map_err(|e| fail(e.to_string()))? {
                0 => return Err(fail("missing header line".into())),
                _ if byte[0] == b'\n' => break,
                _ => header_bytes.push(byte[0]),
            }
        }
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| fail(format!("bad header: {e}")))?;
        if header.dim == 0 {
            return Err(fail("header dim must be >= 1".into()));
        }

        let mut data = Vec::new();
        r.read_to_end(&mut data).map_err(|e| fail(e.to_string()))?;
        let want = header.vocab.len() * header.dim * 8;
        if data.len() != want {
            return Err(fail(format!("expected {want} vector bytes, found {}", data.len())));
        }
        let vectors = data
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
            .collect();
        Ok(EmbeddingTable { dim: header.dim, seed: header.seed, vocab: header.vocab, vectors })
    }
}
