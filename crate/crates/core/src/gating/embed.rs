use std::collections::BTreeMap;
use std::path::Path;

use crate::checksum::fnv1a64;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Source of unit-norm text embeddings for task prompts.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Tensor>;
}

fn unit(v: Vec<f64>, what: &str) -> Result<Tensor> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::config(format!("embedding for {what:?} has no direction")));
    }
    Tensor::new([v.len()], v.into_iter().map(|x| (x / n) as f32).collect())
}

/// Deterministic embedding: a Gaussian vector seeded by the text's hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Tensor> {
        if self.dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let mut rng = Rng::new(fnv1a64(text.as_bytes())).derive("text-embedding");
        unit((0..self.dim).map(|_| rng.normal()).collect(), text)
    }
}

/// Embeddings read from a JSON object mapping prompt text to a vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FileEmbedder {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            offset: crate::error::text_offset(&text, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        Self::from_table(table)
    }

    pub fn from_table(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table.values().next().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::config("embedding table is empty"));
        }
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::config(format!("embedding for {k:?} has {} dims, expected {dim}", v.len())));
        }
        Ok(Self { dim, table })
    }
}

impl EmbeddingProvider for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Tensor> {
        let v = self
            .table
            .get(text)
            .ok_or_else(|| Error::config(format!("no embedding for prompt {text:?}")))?;
        unit(v.clone(), text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embeddings_are_stable_and_unit() {
        let e = HashEmbedder::new(32);
        let a = e.embed("liver tumour").unwrap();
        assert!(a.bit_eq(&e.embed("liver tumour").unwrap()));
        assert!(!a.bit_eq(&e.embed("spleen").unwrap()));
        let n: f64 = a.data().iter().map(|&v| v as f64 * v as f64).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn file_embedder_normalises_and_rejects_unknown() {
        let mut t = BTreeMap::new();
        t.insert("a".to_string(), vec![3.0, 4.0]);
        let e = FileEmbedder::from_table(t).unwrap();
        assert_eq!(e.embed("a").unwrap().data(), &[0.6, 0.8]);
        assert!(matches!(e.embed("b"), Err(Error::Config(_))));
    }
}
