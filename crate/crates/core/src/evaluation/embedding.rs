use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const BUNDLED_DIM: usize = 50;

/// Word vectors in the GloVe text format: `word v1 v2 ... vd` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vectors: BTreeMap::new(),
        })
    }

    /// Deterministic `U(-1, 1)^dim` vector per token, seeded by the token's
    /// SHA-256, so the table depends on nothing but the strings.
    pub fn bundled<S: AsRef<str>>(tokens: &[S], dim: usize) -> Result<Self> {
        let mut t = Self::new(dim)?;
        for tok in tokens {
            let tok = tok.as_ref();
            let digest = Sha256::digest(format!("embedding/{tok}").as_bytes());
            let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut rng = RngStream::new(seed);
            let v = (0..dim).map(|_| rng.range(-1.0, 1.0)).collect();
            t.insert(tok, v)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, word: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Invalid(format!(
                "vector for `{word}` has {} entries, table dimension is {}",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_string(), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, v) in &self.vectors {
            out.push_str(w);
            for x in v {
                write!(out, " {x}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (ln, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else {
                continue;
            };
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("embedding line {}: {e}", ln + 1)))?;
            let t = match table.as_mut() {
                Some(t) => t,
                None => table.insert(Self::new(v.len())?),
            };
            t.insert(word, v)
                .map_err(|e| Error::Invalid(format!("embedding line {}: {e}", ln + 1)))?;
        }
        table.ok_or_else(|| Error::Invalid("embedding table is empty".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::agents::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_is_deterministic_and_round_trips() {
        let a = EmbeddingTable::bundled(&["red", "circle"], 4).unwrap();
        let b = EmbeddingTable::bundled(&["circle", "red"], 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get("red"), a.get("circle"));
        let back = EmbeddingTable::from_text(&a.to_text()).unwrap();
        assert_eq!(back.dim(), 4);
        for w in ["red", "circle"] {
            for (x, y) in back.get(w).unwrap().iter().zip(a.get(w).unwrap()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn ragged_text_is_rejected() {
        assert!(EmbeddingTable::from_text("a 1 2\nb 1\n").is_err());
        assert!(EmbeddingTable::from_text("").is_err());
    }
}
