//! Binary model checkpoints: a JSON header (spec, seed, tensor table,
//! free-form metadata) followed by little-endian f64 parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Predictor};
use crate::error::{Error, Result};
use crate::io::{self, PayloadReader, PayloadWriter};
use crate::nn::Matrix;

const MAGIC: &[u8; 8] = b"MAPKDCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

/// A predictor plus the metadata it was saved with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Predictor,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Predictor, metadata: serde_json::Value) -> Self {
        Self { model, metadata }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.model;
        let header = Header {
            spec: m.spec,
            seed: m.seed,
            tensors: m
                .names
                .iter()
                .zip(&m.params)
                .map(|(n, p)| TensorEntry {
                    name: n.clone(),
                    rows: p.rows(),
                    cols: p.cols(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let mut w = PayloadWriter::new();
        for p in &m.params {
            w.f64s(p.data());
        }
        io::write_container(path, MAGIC, &header, &w.into_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = io::read_container(path, MAGIC)?;
        let header: Header = serde_json::from_value(header)?;
        let corrupt = |message: &str| Error::Artifact {
            path: path.to_path_buf(),
            message: message.into(),
        };
        let mut r = PayloadReader::new(&payload);
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let data = r.f64s(t.rows * t.cols).ok_or_else(|| corrupt("truncated parameter payload"))?;
            params.push(Matrix::from_vec(t.rows, t.cols, data));
            names.push(t.name);
        }
        if !r.is_done() {
            return Err(corrupt("trailing bytes after parameters"));
        }
        let model = Predictor::from_parts(header.spec, header.seed, names, params)
            .map_err(|e| corrupt(&e.to_string()))?;
        Ok(Self {
            model,
            metadata: header.metadata,
        })
    }

    /// Value of a string metadata field, if present.
    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(|v| v.as_str())
    }
}
