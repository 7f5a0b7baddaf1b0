//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header
//! (configs, progress, RNG state, tensor index), then little-endian `f64` payloads for
//! the parameters, Adam first moments and Adam second moments, each in index order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{ModelConfig, Network};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FUNDUSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Random state needed to continue a run: every stream is derived from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a training state to bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        model: state.network.config().clone(),
        train: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: RngState {
            seed: state.config.seed,
            epoch: state.epoch,
        },
        adam: state.adam.config,
        adam_step: state.adam.step,
        tensors: state
            .network
            .named_params()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let floats: usize = state.network.params().iter().map(Tensor::len).sum::<usize>() * 3;
    let mut out = Vec::with_capacity(20 + json.len() + floats * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [state.network.params(), &state.adam.m, &state.adam.v] {
        for t in group {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut groups = Vec::with_capacity(3);
    for _ in 0..3 {
        let tensors = header
            .tensors
            .iter()
            .map(|e| r.tensor(&e.shape))
            .collect::<Result<Vec<_>>>()?;
        groups.push(tensors);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let v = groups.pop().expect("three groups");
    let m = groups.pop().expect("three groups");
    let params = groups.pop().expect("three groups");
    let named = header.tensors.iter().map(|e| e.name.clone()).zip(params).collect();
    let network = Network::from_params(header.model, named).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(TrainState {
        config: header.train,
        network,
        adam: Adam {
            config: header.adam,
            step: header.adam_step,
            m,
            v,
        },
        epoch: header.epoch,
        step: header.step,
    })
}

/// Writes atomically: a temporary sibling is filled, synced and renamed over `path`,
/// so a failed write leaves the previous checkpoint intact.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("ckpt.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads only the network, for inference.
pub fn load_network(path: &Path) -> Result<Network> {
    Ok(load(path)?.network)
}
