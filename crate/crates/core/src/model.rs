//! A graph bundled with its weights, plus the binary weight blob format.
//!
//! The blob is the concatenation of each parameterised node's little-endian
//! `f32` values (kernel then bias) followed by an index footer:
//! `count x (u32 node_id, u64 byte_offset, u64 byte_len)`, `u32 count`,
//! and the 4-byte magic `OWIX`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{infer_shapes, EngineError};
use crate::graph::{DepGraph, GraphError, NodeId, Op};

const INDEX_MAGIC: &[u8; 4] = b"OWIX";
const INDEX_ENTRY: usize = 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("weight blob: {0}")]
    Blob(String),
    #[error("node {node}: expected {expected} weights, found {got}")]
    WeightCount {
        node: NodeId,
        expected: usize,
        got: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Per-node parameters: kernel values followed by biases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    params: BTreeMap<NodeId, Vec<f32>>,
}

impl Weights {
    pub fn new(params: BTreeMap<NodeId, Vec<f32>>) -> Self {
        Self { params }
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut index = Vec::with_capacity(self.params.len());
        for (&id, values) in &self.params {
            let offset = out.len() as u64;
            out.extend(values.iter().flat_map(|v| v.to_le_bytes()));
            index.push((id as u32, offset, (values.len() * 4) as u64));
        }
        for (id, offset, len) in &index {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        out.extend_from_slice(INDEX_MAGIC);
        out
    }

    pub fn from_blob(blob: &[u8]) -> Result<Self, ModelError> {
        let err = |m: &str| ModelError::Blob(m.to_string());
        if blob.len() < 8 || &blob[blob.len() - 4..] != INDEX_MAGIC {
            return Err(err("missing OWIX footer"));
        }
        let count_at = blob.len() - 8;
        let count = u32::from_le_bytes(blob[count_at..count_at + 4].try_into().unwrap()) as usize;
        let index_len = count
            .checked_mul(INDEX_ENTRY)
            .filter(|&l| l <= count_at)
            .ok_or_else(|| err("index larger than blob"))?;
        let index_at = count_at - index_len;
        let mut params = BTreeMap::new();
        for entry in blob[index_at..count_at].chunks_exact(INDEX_ENTRY) {
            let id = u32::from_le_bytes(entry[0..4].try_into().unwrap()) as NodeId;
            let offset = u64::from_le_bytes(entry[4..12].try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(entry[12..20].try_into().unwrap()) as usize;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= index_at && len.is_multiple_of(4))
                .ok_or_else(|| err("index entry points outside the data region"))?;
            let values = blob[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if params.insert(id, values).is_some() {
                return Err(ModelError::Blob(format!("duplicate index entry for node {id}")));
            }
        }
        Ok(Self { params })
    }
}

/// A validated graph, its weights and the static shape of every node.
#[derive(Debug, Clone)]
pub struct Model {
    graph: DepGraph,
    weights: Weights,
    shapes: Vec<Vec<usize>>,
    digest: [u8; 32],
}

impl Model {
    pub fn new(graph: DepGraph, weights: Weights) -> Result<Self, ModelError> {
        let shapes = infer_shapes(&graph)?;
        for node in graph.nodes() {
            let expected = param_count(&node.op, node.inputs.first().map(|&i| &shapes[i][..]));
            let got = weights.get(node.id).map_or(0, <[f32]>::len);
            if expected != got {
                return Err(ModelError::WeightCount { node: node.id, expected, got });
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(graph.to_text().as_bytes());
        hasher.update(weights.to_blob());
        let digest = hasher.finalize().into();
        Ok(Self { graph, weights, shapes, digest })
    }

    pub fn load(model_path: &Path, weights_path: &Path) -> Result<Self, ModelError> {
        let io_err = |p: &Path| {
            let path = p.display().to_string();
            move |source| ModelError::Io { path, source }
        };
        let text = fs::read_to_string(model_path).map_err(io_err(model_path))?;
        let blob = fs::read(weights_path).map_err(io_err(weights_path))?;
        Self::new(DepGraph::parse(&text)?, Weights::from_blob(&blob)?)
    }

    pub fn save(&self, model_path: &Path, weights_path: &Path) -> Result<(), ModelError> {
        fs::write(model_path, self.graph.to_text()).map_err(|source| ModelError::Io {
            path: model_path.display().to_string(),
            source,
        })?;
        fs::write(weights_path, self.weights.to_blob()).map_err(|source| ModelError::Io {
            path: weights_path.display().to_string(),
            source,
        })
    }

    pub fn graph(&self) -> &DepGraph {
        &self.graph
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    /// SHA-256 over the canonical model text and weight blob; the client
    /// and server compare it at handshake.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }
}

/// Number of parameters a node needs given its (first) input shape.
pub fn param_count(op: &Op, input: Option<&[usize]>) -> usize {
    match (op, input) {
        (Op::Conv2d { out_channels, kernel, .. }, Some(shape)) => {
            out_channels * shape[0] * kernel * kernel + out_channels
        }
        (Op::Dense { units }, Some(shape)) => units * shape.iter().product::<usize>() + units,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DepGraph {
        DepGraph::new(vec![
            (Op::Input { shape: vec![2] }, vec![]),
            (Op::Dense { units: 2 }, vec![0]),
            (Op::Output, vec![1]),
        ])
        .unwrap()
    }

    #[test]
    fn blob_round_trips() {
        let w = Weights::new(BTreeMap::from([(1, vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]), (7, vec![3.0])]));
        let blob = w.to_blob();
        assert_eq!(&blob[blob.len() - 4..], b"OWIX");
        assert_eq!(Weights::from_blob(&blob).unwrap(), w);
    }

    #[test]
    fn blob_rejects_truncation() {
        let w = Weights::new(BTreeMap::from([(1, vec![1.0; 6])]));
        let blob = w.to_blob();
        assert!(Weights::from_blob(&blob[..blob.len() - 1]).is_err());
        assert!(Weights::from_blob(&blob[10..]).is_err());
    }

    #[test]
    fn weight_count_is_validated() {
        let err = Model::new(tiny(), Weights::new(BTreeMap::from([(1, vec![0.0; 5])]))).unwrap_err();
        assert!(matches!(err, ModelError::WeightCount { node: 1, expected: 6, got: 5 }));
        assert!(Model::new(tiny(), Weights::new(BTreeMap::from([(1, vec![0.0; 6])]))).is_ok());
    }

    #[test]
    fn missing_weights_file_names_the_path() {
        let dir = std::env::temp_dir().join("onloadrt-model-missing");
        let err = Model::load(&dir.join("m.txt"), &dir.join("w.bin")).unwrap_err();
        assert!(err.to_string().contains("m.txt"));
    }
}
