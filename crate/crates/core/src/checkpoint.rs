//! Binary checkpoint format.
//!
//! ```text
//! "KCAP" | version: u32 LE | manifest_len: u64 LE | manifest (JSON)
//!        | payload (f64 LE) | crc32: u32 LE
//! ```
//!
//! The manifest lists every tensor with its group, shape and byte offset
//! into the payload. The CRC covers every byte before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::tensor::{SeededRng, Tensor};
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"KCAP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    vocab_hash: String,
    config: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Parameters, Adam moments and enough configuration to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub vocab_hash: String,
    /// Model-shape keys (see [`config::model_entries`]) plus
    /// `model.vocab_size`.
    pub config: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn capture(model: &CaptionModel, adam: &AdamState, vocab_hash: &str) -> Self {
        let mut config = config::model_entries(&model.encoder_cfg, &model.generator_cfg);
        config.insert("model.vocab_size".into(), model.vocab_size().to_string());
        let mut params = Vec::new();
        model.params.visit(&mut |n, t| params.push((n, t.clone())));
        Checkpoint {
            version: VERSION,
            step: adam.step,
            vocab_hash: vocab_hash.to_string(),
            config,
            params,
            adam_m: adam.first.clone(),
            adam_v: adam.second.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
            return Err(Error::Input("optimizer state does not match parameter count".into()));
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let groups = [
            (Group::Param, self.params.iter().map(|(_, t)| t).collect::<Vec<_>>()),
            (Group::AdamM, self.adam_m.iter().collect()),
            (Group::AdamV, self.adam_v.iter().collect()),
        ];
        for (group, list) in groups {
            for ((name, _), t) in self.params.iter().zip(list) {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    group,
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            step: self.step,
            vocab_hash: self.vocab_hash.clone(),
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Input(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(fmt_err(bytes.len(), "file too short for magic bytes"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err(0, "bad magic bytes"));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(fmt_err(bytes.len(), "file too short for header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body_end = bytes.len() - 4;
        let manifest_end = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .filter(|&e| e <= body_end as u64)
            .ok_or_else(|| fmt_err(8, format!("manifest length {manifest_len} exceeds file size")))?
            as usize;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(fmt_err(
                body_end,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| fmt_err(HEADER_LEN, format!("invalid manifest: {e}")))?;

        let payload = &bytes[manifest_end..body_end];
        let mut expected_offset = 0u64;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for entry in &manifest.tensors {
            let at = manifest_end + entry.offset as usize;
            if entry.offset != expected_offset {
                return Err(fmt_err(at, format!("tensor {} has offset {}, expected {expected_offset}", entry.name, entry.offset)));
            }
            let count: usize = entry.shape.iter().product();
            let nbytes = count * 8;
            let start = entry.offset as usize;
            if start + nbytes > payload.len() {
                return Err(fmt_err(at, format!("payload truncated in tensor {}", entry.name)));
            }
            let data = payload[start..start + nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| fmt_err(at, format!("tensor {}: {e}", entry.name)))?;
            match entry.group {
                Group::Param => params.push((entry.name.clone(), t)),
                Group::AdamM => adam_m.push(t),
                Group::AdamV => adam_v.push(t),
            }
            expected_offset += nbytes as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(fmt_err(
                manifest_end + expected_offset as usize,
                "trailing bytes after last tensor",
            ));
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(fmt_err(HEADER_LEN, "optimizer state does not match parameter count"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in &params {
            if !seen.insert(name) {
                return Err(fmt_err(HEADER_LEN, format!("duplicate tensor name {name}")));
            }
        }
        Ok(Checkpoint {
            version,
            step: manifest.step,
            vocab_hash: manifest.vocab_hash,
            config: manifest.config,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn vocab_size(&self) -> Result<usize> {
        self.config
            .get("model.vocab_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint config lacks model.vocab_size".into()))
    }

    /// Rebuilds the model and optimizer state. `max_gen_len` is a decoding
    /// setting and not part of the checkpoint.
    pub fn restore(&self, max_gen_len: usize) -> Result<(CaptionModel, AdamState)> {
        let (enc, gen) = config::model_from_entries(&self.config, self.vocab_size()?, max_gen_len)?;
        let mut model = CaptionModel::new(enc, gen, &mut SeededRng::new(0))?;
        let mut names = Vec::new();
        let mut error = None;
        let mut i = 0;
        model.params.visit_mut(&mut |name, t| {
            names.push(name.clone());
            if error.is_some() {
                return;
            }
            match self.params.get(i) {
                Some((n, stored)) if *n == name && stored.shape() == t.shape() => *t = stored.clone(),
                Some((n, stored)) => {
                    error = Some(Error::Config(format!(
                        "checkpoint tensor {n} {:?} does not match model parameter {name} {:?}",
                        stored.shape(),
                        t.shape()
                    )))
                }
                None => error = Some(Error::Config(format!("checkpoint is missing parameter {name}"))),
            }
            i += 1;
        });
        if let Some(e) = error {
            return Err(e);
        }
        if self.params.len() != names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                names.len()
            )));
        }
        let adam = AdamState {
            step: self.step,
            first: self.adam_m.clone(),
            second: self.adam_v.clone(),
        };
        Ok((model, adam))
    }
}
