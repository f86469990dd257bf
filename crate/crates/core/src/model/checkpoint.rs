//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` header length, TOML header, `u64` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u8` dtype tag,
//! `u32` rank, `u64` extents, little-endian scalars. Integers are
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::MixOnTape;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Model;
use crate::numerics::{DType, Scalar, SpectralState, Tensor};

pub const MAGIC: &[u8; 8] = b"REFSRCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Optimiser progress stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub optimizer_steps: u64,
    pub seed: u64,
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub lambdas: BTreeMap<String, Vec<f64>>,
    pub training: Option<TrainingMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub const PARAM_PREFIX: &str = "param:";
pub const SN_U_PREFIX: &str = "sn_u:";
pub const SN_V_PREFIX: &str = "sn_v:";

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), message.into()))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(corrupt(path, "truncated file"));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header_text = std::str::from_utf8(take(hlen)?).map_err(|_| corrupt(path, "header is not UTF-8"))?;
        let header: CheckpointHeader =
            toml::from_str(header_text).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(
                path,
                format!("format version {} (expected {FORMAT_VERSION})", header.format_version),
            ));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| corrupt(path, "tensor name is not UTF-8"))?;
            let tag = take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| corrupt(path, format!("unknown dtype tag {tag}")))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(n * dtype.tag() as usize)?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| corrupt(path, format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(corrupt(path, "trailing bytes after the last tensor"));
        }
        Ok(Self { header, tensors })
    }

    /// Writes to `<path>.partial` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let partial = partial_path(path);
        {
            let mut f = fs::File::create(&partial)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&partial, path)?;
        Ok(())
    }

    /// Same checkpoint with tensors converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        let mut header = self.header.clone();
        header.dtype = U::DTYPE.name().to_string();
        Checkpoint {
            header,
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

impl<T: MixOnTape> Model<T> {
    pub fn to_checkpoint(&self, training: Option<TrainingMeta>) -> Checkpoint<T> {
        let mut tensors = Vec::new();
        for p in self.store.iter() {
            tensors.push((format!("{PARAM_PREFIX}{}", p.name), p.value.clone()));
            if let Some(s) = &p.spectral {
                tensors.push((format!("{SN_U_PREFIX}{}", p.name), s.u.clone()));
                tensors.push((format!("{SN_V_PREFIX}{}", p.name), s.v.clone()));
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                dtype: T::DTYPE.name().to_string(),
                model: self.config.clone(),
                lambdas: self.lambdas(),
                training,
            },
            tensors,
        }
    }

    /// Rebuilds the model, requiring every parameter (and spectral state)
    /// to be present with its expected shape.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let mut model = Model::new(ck.header.model.clone(), 0)?;
        let expected: std::collections::HashSet<String> = model
            .store
            .iter()
            .flat_map(|p| {
                let mut names = vec![format!("{PARAM_PREFIX}{}", p.name)];
                if p.spectral.is_some() {
                    names.push(format!("{SN_U_PREFIX}{}", p.name));
                    names.push(format!("{SN_V_PREFIX}{}", p.name));
                }
                names
            })
            .collect();
        for (name, _) in &ck.tensors {
            let is_model = [PARAM_PREFIX, SN_U_PREFIX, SN_V_PREFIX].iter().any(|p| name.starts_with(p));
            if is_model && !expected.contains(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        for p in model.store.iter_mut() {
            p.value = fetch(format!("{PARAM_PREFIX}{}", p.name), p.value.shape())?;
            if let Some(s) = &p.spectral {
                let u = fetch(format!("{SN_U_PREFIX}{}", p.name), s.u.shape())?;
                let v = fetch(format!("{SN_V_PREFIX}{}", p.name), s.v.shape())?;
                p.spectral = Some(SpectralState { u, v });
            }
        }
        Ok(model)
    }
}
