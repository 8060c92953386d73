//! Binary checkpoint container.
//!
//! Layout: `b"CPCK"`, a little-endian `u32` format version, a little-endian
//! `u64` header length, the JSON header, then the raw little-endian `f32`
//! payload. Every tensor has a header entry with its byte range and a
//! SHA-256 checksum of those bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, IoContext, Result};
use crate::model::{stage_groups, Stage};
use crate::text::Vocabulary;

use super::optim::Adam;
use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
    AdamDM,
    AdamDV,
    AdamGM,
    AdamGV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: Stage,
    epoch: usize,
    config: TrainConfig,
    vocab: Vec<String>,
    adam_d_step: u64,
    adam_g_step: u64,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Epochs completed.
    pub epoch: usize,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub adam_d: Adam<f32>,
    pub adam_g: Adam<f32>,
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(EntryKind, &String, &Tensor<f32>)> = Vec::new();
        groups.extend(self.params.params().map(|(n, t)| (EntryKind::Param, n, t)));
        groups.extend(self.params.buffers().map(|(n, t)| (EntryKind::Buffer, n, t)));
        groups.extend(self.adam_d.m.iter().map(|(n, t)| (EntryKind::AdamDM, n, t)));
        groups.extend(self.adam_d.v.iter().map(|(n, t)| (EntryKind::AdamDV, n, t)));
        groups.extend(self.adam_g.m.iter().map(|(n, t)| (EntryKind::AdamGM, n, t)));
        groups.extend(self.adam_g.v.iter().map(|(n, t)| (EntryKind::AdamGV, n, t)));

        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(groups.len());
        for (kind, name, t) in groups {
            let bytes = tensor_bytes(t);
            entries.push(Entry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
                len: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            adam_d_step: self.adam_d.step,
            adam_g_step: self.adam_g.step,
            entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut params = ParamStore::new();
        let mut adam_d = Adam::new(header.config.beta1, header.config.beta2);
        let mut adam_g = Adam::new(header.config.beta1, header.config.beta2);
        adam_d.step = header.adam_d_step;
        adam_g.step = header.adam_g_step;
        for e in &header.entries {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("{}: byte range outside the payload", e.name)))?;
            let raw = &payload[start..end];
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return Err(Error::Checkpoint(format!("{}: checksum mismatch", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            if raw.len() != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "{}: {} bytes for shape {:?}",
                    e.name,
                    raw.len(),
                    e.shape
                )));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&e.shape, data);
            let name = e.name.clone();
            match e.kind {
                EntryKind::Param => params.insert(name, t),
                EntryKind::Buffer => params.insert_buffer(name, t),
                EntryKind::AdamDM => {
                    adam_d.m.insert(name, t);
                }
                EntryKind::AdamDV => {
                    adam_d.v.insert(name, t);
                }
                EntryKind::AdamGM => {
                    adam_g.m.insert(name, t);
                }
                EntryKind::AdamGV => {
                    adam_g.v.insert(name, t);
                }
            }
        }
        let ckpt = Checkpoint {
            stage: header.stage,
            epoch: header.epoch,
            config: header.config,
            vocab: Vocabulary::from_tokens(header.vocab)?,
            params,
            adam_d,
            adam_g,
        };
        ckpt.check_groups()?;
        Ok(ckpt)
    }

    /// Every group the stage requires is present.
    pub fn check_groups(&self) -> Result<()> {
        for group in stage_groups(self.stage) {
            if self.params.param_names_with_prefix(group).next().is_none() {
                return Err(Error::Checkpoint(format!(
                    "stage-{} checkpoint has no `{group}` parameters",
                    self.stage.number()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).at(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Name-ordered `(name, sha256)` of every parameter and buffer.
    pub fn group_digests(&self) -> BTreeMap<String, String> {
        self.params
            .params()
            .chain(self.params.buffers())
            .map(|(n, t)| (n.clone(), hex::encode(Sha256::digest(tensor_bytes(t)))))
            .collect()
    }
}
