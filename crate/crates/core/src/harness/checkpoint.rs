//! Versioned single-file checkpoint archive.
//!
//! Layout: magic `FCDK`, `u32` version, `u64` header length, a JSON header
//! (run config, epoch, history, parameter names and shapes, optimizer step),
//! then every parameter as raw little-endian `f64`, followed by the AdamW
//! first and second moments when present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{AdamW, ParamStore};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::model::JointNet;
use super::train::EpochRecord;

pub const MAGIC: &[u8; 4] = b"FCDK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub model: JointNet,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    params: Vec<ParamEntry>,
    optimizer_step: Option<u64>,
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ps = &self.model.params;
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            params: ps
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * ps.numel() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in ps.iter() {
            push_tensor(&mut out, t);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.first.iter().chain(&opt.second) {
                push_tensor(&mut out, t);
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing FCDK magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let mut model = JointNet::new(header.config.model.clone(), header.config.train.seed)
            .map_err(|e| bad(e.to_string()))?;
        let mut cursor = 16 + hlen;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad("truncated parameter data".into()))?;
            cursor += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(shape, data))
        };
        let ps: &mut ParamStore = &mut model.params;
        if header.params.len() != ps.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters, model expects {}",
                header.params.len(),
                ps.len()
            )));
        }
        for entry in &header.params {
            let id = ps
                .id(&entry.name)
                .ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
            if ps.get(id).shape() != entry.shape.as_slice() {
                return Err(bad(format!("shape mismatch for {}", entry.name)));
            }
            *ps.get_mut(id) = take(&entry.shape)?;
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut opt = AdamW::new(header.config.train.optimizer, ps);
                opt.step = step;
                let ids: Vec<_> = header
                    .params
                    .iter()
                    .map(|e| ps.id(&e.name).expect("checked above"))
                    .collect();
                for (e, id) in header.params.iter().zip(&ids) {
                    opt.first[id.index()] = take(&e.shape)?;
                }
                for (e, id) in header.params.iter().zip(&ids) {
                    opt.second[id.index()] = take(&e.shape)?;
                }
                Some(opt)
            }
            None => None,
        };
        ensure!(cursor == bytes.len(), "trailing bytes after checkpoint data in {}", path.display());
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            history: header.history,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
