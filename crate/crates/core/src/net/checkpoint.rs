//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SMCKPT\0\x01"
//! hlen    u32      length of the JSON header
//! header  hlen     {"network": .., "iteration": n, "tensors": [{"name", "shape", "adam_steps"}]}
//! payload          for each tensor in header order: values, adam m, adam v as f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so write∘read is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::write_file_atomic;
use crate::net::adam::AdamState;
use crate::net::model::Network;
use crate::net::params::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"SMCKPT\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: Network,
    iteration: u64,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    adam_steps: u64,
}

impl Checkpoint {
    /// Freshly initialized parameters with empty optimizer state.
    pub fn init(network: Network, seed: u64) -> Result<Self> {
        let params = network.init_params(seed)?;
        let optimizer = AdamState::new(&params);
        Ok(Checkpoint {
            network,
            params,
            optimizer,
            iteration: 0,
        })
    }

    /// Drops optimizer moments, keeping the weights. Used when a new
    /// training phase starts from a checkpoint.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::new(&self.params);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.network.clone(),
            iteration: self.iteration,
            tensors: self
                .params
                .iter()
                .zip(&self.optimizer.steps)
                .map(|((name, t), &steps)| TensorHeader {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    adam_steps: steps,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let mut out = Vec::with_capacity(json.len() + 12 + self.params.parameter_count() * 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for i in 0..self.params.len() {
            for set in [&self.params, &self.optimizer.m, &self.optimizer.v] {
                for v in &set.tensors()[i].data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        header.network.validate()?;

        let mut cursor = 12 + hlen;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = cursor + n * 8;
            let chunk = bytes.get(cursor..end).ok_or_else(|| err("truncated payload"))?;
            cursor = end;
            Ok(chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        let mut steps = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            for set in [&mut params, &mut m, &mut v] {
                set.insert(
                    t.name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: take(n)?,
                    },
                );
            }
            steps.push(t.adam_steps);
        }
        if cursor != bytes.len() {
            return Err(err("trailing bytes after payload"));
        }
        // The stored tensors must be exactly what the network expects.
        let expected = header.network.init_params(0)?;
        if expected.names() != params.names()
            || expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape != b.shape)
        {
            return Err(err("tensor names or shapes do not match the stored network"));
        }
        if !params.all_finite() {
            return Err(err("non-finite parameter values"));
        }
        Ok(Checkpoint {
            network: header.network,
            params,
            optimizer: AdamState { steps, m, v },
            iteration: header.iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
