//! Named parameter storage and its on-disk form.
//!
//! Parameters are registered in a fixed order by model constructors, so a
//! freshly built model and a checkpoint agree on ids as long as the
//! configuration matches. On disk a store is a JSON index plus a raw
//! little-endian `f64` blob; the blob makes reload bit-exact.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{RecapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group. The visual encoder trains at its own rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Rest,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Mat,
    group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    format: String,
    version: u32,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 2],
    group: ParamGroup,
}

const FORMAT: &str = "recap-tensors";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name: that is a model construction bug.
    pub fn register(&mut self, name: impl Into<String>, value: Mat, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.id(&name).is_none(),
            "parameter {name} registered twice"
        );
        self.entries.push(Entry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    /// Returns how many tensors were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for entry in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let src = other
                .id(&entry.name)
                .map(|id| other.get(id))
                .ok_or_else(|| {
                    RecapError::Checkpoint(format!("source has no parameter {}", entry.name))
                })?;
            if src.dim() != entry.value.dim() {
                return Err(RecapError::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    entry.name,
                    src.dim(),
                    entry.value.dim()
                )));
            }
            entry.value.assign(src);
            copied += 1;
        }
        Ok(copied)
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let index = TensorIndex {
            format: FORMAT.into(),
            version: 1,
            tensors: self
                .entries
                .iter()
                .map(|e| TensorMeta {
                    name: e.name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                    group: e.group,
                })
                .collect(),
        };
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        for e in &self.entries {
            for v in e.value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json_path = dir.join(format!("{stem}.json"));
        let bin_path = dir.join(format!("{stem}.bin"));
        fs::write(&json_path, serde_json::to_vec_pretty(&index)?)
            .map_err(|e| RecapError::io(&json_path, e))?;
        fs::write(&bin_path, blob).map_err(|e| RecapError::io(&bin_path, e))?;
        Ok(())
    }

    /// Fills this store (already populated with the expected names and
    /// shapes) from `<stem>.json` / `<stem>.bin`.
    pub fn load_into(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let json_path = dir.join(format!("{stem}.json"));
        let bin_path = dir.join(format!("{stem}.bin"));
        let raw = fs::read(&json_path).map_err(|e| RecapError::io(&json_path, e))?;
        let index: TensorIndex = serde_json::from_slice(&raw)?;
        if index.format != FORMAT || index.version != 1 {
            return Err(RecapError::Checkpoint(format!(
                "unsupported tensor file {} v{}",
                index.format, index.version
            )));
        }
        let blob = fs::read(&bin_path).map_err(|e| RecapError::io(&bin_path, e))?;
        let expected: usize = index.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 8).sum();
        if blob.len() != expected {
            return Err(RecapError::Checkpoint(format!(
                "{}: expected {expected} bytes, found {}",
                bin_path.display(),
                blob.len()
            )));
        }
        if index.tensors.len() != self.entries.len() {
            return Err(RecapError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                index.tensors.len(),
                self.entries.len()
            )));
        }
        let mut offset = 0;
        for meta in &index.tensors {
            let id = self.id(&meta.name).ok_or_else(|| {
                RecapError::Checkpoint(format!("unexpected parameter {}", meta.name))
            })?;
            let entry = &mut self.entries[id.0];
            if entry.value.dim() != (meta.shape[0], meta.shape[1]) {
                return Err(RecapError::Checkpoint(format!(
                    "shape mismatch for {}: checkpoint {:?}, model {:?}",
                    meta.name,
                    meta.shape,
                    entry.value.dim()
                )));
            }
            for v in entry.value.iter_mut() {
                let bytes: [u8; 8] = blob[offset..offset + 8].try_into().expect("8 bytes");
                *v = f64::from_le_bytes(bytes);
                offset += 8;
            }
        }
        Ok(())
    }
}

/// Weight initializers driven by a caller-owned generator.
pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Init { rng }
    }

    /// Glorot-uniform `fan_in × fan_out` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Mat::from_shape_simple_fn((fan_in, fan_out), || self.rng.random_range(-bound..bound))
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let dist = Normal::new(0.0, std).expect("finite std");
        Mat::from_shape_simple_fn((rows, cols), || dist.sample(self.rng))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::zeros((rows, cols))
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::ones((rows, cols))
    }
}
