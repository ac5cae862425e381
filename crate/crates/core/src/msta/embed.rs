//! Text embedding providers for the text head.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::backend::{fnv1a, words};
use crate::{Error, Result};

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing over words and adjacent word pairs, L2-normalized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    fn bump(&self, v: &mut [f64], key: &str) {
        let h = fnv1a(key.as_bytes(), self.seed);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign;
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let ws = words(text);
        let mut v = vec![0.0; self.dim];
        for w in &ws {
            self.bump(&mut v, w);
        }
        for pair in ws.windows(2) {
            self.bump(&mut v, &format!("{} {}", pair[0], pair[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Precomputed embeddings keyed by exact text, loaded from JSON lines of
/// `{"text": ..., "embedding": [...]}`.
#[derive(Clone, Debug, Default)]
pub struct FileEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct Row {
    text: String,
    embedding: Vec<f64>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw).map_err(|(line, message)| Error::parse(path, line, message))
    }

    /// Parses the JSON-lines body; errors carry a 1-based line number.
    pub fn parse(raw: &str) -> std::result::Result<Self, (usize, String)> {
        let mut out = Self::default();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
            if row.embedding.is_empty() {
                return Err((i + 1, "empty embedding".into()));
            }
            if out.table.is_empty() {
                out.dim = row.embedding.len();
            } else if row.embedding.len() != out.dim {
                return Err((
                    i + 1,
                    format!(
                        "embedding has {} values, expected {}",
                        row.embedding.len(),
                        out.dim
                    ),
                ));
            }
            out.table.insert(row.text, row.embedding);
        }
        if out.table.is_empty() {
            return Err((0, "no embeddings".into()));
        }
        Ok(out)
    }
}

impl TextEmbedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no precomputed embedding for {text:?}")))
    }
}
