//! Binary checkpoints.
//!
//! ```text
//! magic "PHCK" | u32 version | u64 payload length | payload | u32 CRC-32 of payload
//! ```
//!
//! The payload holds a TOML metadata block (config echo, body topologies,
//! iteration), then every parameter as name, shape and little-endian `f32`
//! values in store order, then optionally the optimizer state in `f64`.
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::diffcore::{AdamState, Moments, Tensor};
use crate::model::Model;
use crate::params::ParamStore;
use crate::skeleton::{SkeletonTopology, Vec3};

pub const MAGIC: &[u8; 4] = b"PHCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    Version { found: u32 },
    #[error("parameter `{name}` has shape {found:?} in the checkpoint but the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint holds parameter `{0}` unknown to the model")]
    Unexpected(String),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BodyMeta {
    parents: Vec<i64>,
    rest_offsets: Vec<Vec3>,
    bone_tips: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    iteration: u64,
    bodies: Vec<BodyMeta>,
    config: Config,
}

/// Per-tensor optimizer state, in store order.
pub type OptimizerState = Vec<AdamState>;

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub topologies: Vec<SkeletonTopology>,
    pub iteration: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, iteration: u64, optimizer: Option<&OptimizerState>) -> Self {
        Self {
            config: model.config.clone(),
            topologies: model.bodies.iter().map(|b| b.topology.clone()).collect(),
            iteration,
            params: model.store.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model described by the checkpoint's own config.
    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        self.to_model_with(&self.config)
    }

    /// Loads the parameters into a model built from `config`; every blob must
    /// match the model's names and shapes.
    pub fn to_model_with(&self, config: &Config) -> Result<Model, CheckpointError> {
        let template = Model::new(config, self.topologies.clone(), &mut crate::config::substream(0, "shape-template"))?;
        let mut store = ParamStore::new();
        for (name, p) in template.store.iter() {
            let (_, blob) = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if blob.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: blob.shape().to_vec(),
                });
            }
            store.insert(name.clone(), blob.clone(), p.group);
        }
        if let Some((name, _)) = self.params.iter().find(|(n, _)| template.store.get(n).is_none()) {
            return Err(CheckpointError::Unexpected(name.clone()));
        }
        Ok(Model { store, ..template })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            iteration: self.iteration,
            bodies: self
                .topologies
                .iter()
                .map(|t| BodyMeta {
                    parents: t.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
                    rest_offsets: t.rest_offsets.clone(),
                    bone_tips: t.bone_tips.clone(),
                })
                .collect(),
            config: self.config.clone(),
        };
        let meta = toml::to_string(&meta).expect("metadata serializes");
        let mut p = Vec::new();
        put_u64(&mut p, meta.len() as u64);
        p.extend_from_slice(meta.as_bytes());
        put_u32(&mut p, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut p, name.len() as u32);
            p.extend_from_slice(name.as_bytes());
            put_u32(&mut p, t.ndim() as u32);
            for &d in t.shape() {
                put_u64(&mut p, d as u64);
            }
            for &v in t.data() {
                p.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        match &self.optimizer {
            None => p.push(0),
            Some(states) => {
                p.push(1);
                for s in states {
                    put_u64(&mut p, s.t);
                    for m in &s.moments {
                        put_u64(&mut p, m.m.len() as u64);
                        for v in m.m.iter().chain(&m.v) {
                            p.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(p.len() + 20);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, p.len() as u64);
        out.extend_from_slice(&p);
        put_u32(&mut out, crc32fast::hash(&p));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Corrupt("missing header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 16 + len + 4 {
            return Err(CheckpointError::Corrupt(format!(
                "payload length {len} does not match file size {}",
                bytes.len()
            )));
        }
        let payload = &bytes[16..16 + len];
        let crc = u32::from_le_bytes(bytes[16 + len..].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != crc {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let meta_len = r.u64()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let meta: Meta = toml::from_str(meta_text).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let topologies = meta
            .bodies
            .into_iter()
            .map(|b| {
                let parents = b.parents.iter().map(|&p| (p >= 0).then_some(p as usize)).collect();
                SkeletonTopology::new(parents, b.rest_offsets, b.bone_tips).map_err(|e| CheckpointError::Meta(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut states = Vec::with_capacity(count);
                for (_, p) in &params {
                    let t = r.u64()?;
                    let n = r.u64()? as usize;
                    if n != p.len() {
                        return Err(CheckpointError::Corrupt("optimizer state does not match parameters".into()));
                    }
                    let vals: Vec<f64> = r
                        .take(16 * n)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    states.push(AdamState {
                        moments: vec![Moments {
                            m: vals[..n].to_vec(),
                            v: vals[n..].to_vec(),
                        }],
                        t,
                    });
                }
                Some(states)
            }
            _ => return Err(CheckpointError::Corrupt("bad optimizer flag".into())),
        };
        if r.pos != payload.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            config: meta.config,
            topologies,
            iteration: meta.iteration,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt("unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
