//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SEGADAPT"
//! version  u32
//! hlen     u64      byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON (CheckpointHeader)
//! blob     concatenated tensor payloads, f32 or f64 LE, in header order
//! ```
//!
//! Tensor keys written by the trainer:
//!
//! | key                  | dtype | contents                                   |
//! |----------------------|-------|--------------------------------------------|
//! | `student/<param>`    | f32   | every student parameter, incl. both heads  |
//! | `teacher/theta`      | f64   | EMA master weights over encoder + classifier |
//! | `optim/<slot>`       | f32   | optimizer moment buffers (`m.<i>`, `v.<i>`) |
//!
//! The training RNG is a pure function of `(seed, iteration)`, so those two
//! header fields are the complete RNG state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TeacherInit};

pub const MAGIC: &[u8; 8] = b"SEGADAPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub momentum: f64,
    pub init: TeacherInit,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub kind: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub iteration: u64,
    pub seed: u64,
    pub classes: usize,
    pub model: ModelConfig,
    pub teacher: Option<TeacherMeta>,
    pub optimizer: Option<OptimMeta>,
    /// Resolved experiment configuration, stored verbatim.
    pub config: serde_json::Value,
    pub build: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, (Vec<usize>, TensorData)>,
}

impl Checkpoint {
    pub fn new(
        iteration: u64,
        seed: u64,
        classes: usize,
        model: ModelConfig,
        config: serde_json::Value,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                iteration,
                seed,
                classes,
                model,
                teacher: None,
                optimizer: None,
                config,
                build: crate::BUILD_VERSION.to_string(),
                tensors: Vec::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let key = key.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("{key}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.tensors.insert(key.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor key {key}")));
        }
        Ok(())
    }

    pub fn f32(&self, key: &str) -> Result<&[f32]> {
        match self.tensors.get(key) {
            Some((_, TensorData::F32(v))) => Ok(v),
            Some(_) => Err(Error::Checkpoint(format!("{key} is not f32"))),
            None => Err(Error::Checkpoint(format!("missing tensor {key}"))),
        }
    }

    pub fn f64(&self, key: &str) -> Result<&[f64]> {
        match self.tensors.get(key) {
            Some((_, TensorData::F64(v))) => Ok(v),
            Some(_) => Err(Error::Checkpoint(format!("{key} is not f64"))),
            None => Err(Error::Checkpoint(format!("missing tensor {key}"))),
        }
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tensors.keys().filter(move |k| k.starts_with(prefix)).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.tensors = self
            .tensors
            .iter()
            .map(|(k, (shape, d))| TensorEntry { key: k.clone(), dtype: d.dtype(), shape: shape.clone() })
            .collect();
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, d) in self.tensors.values() {
            match d {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a segadapt checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if r.len() < hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let size = n * e.dtype.size();
            if r.len() < size {
                return Err(Error::Checkpoint(format!("{}: truncated payload", e.key)));
            }
            let (chunk, rest) = r.split_at(size);
            let data = match e.dtype {
                DType::F32 => TensorData::F32(
                    chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
                ),
                DType::F64 => TensorData::F64(
                    chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                ),
            };
            tensors.insert(e.key.clone(), (e.shape.clone(), data));
            r = rest;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
