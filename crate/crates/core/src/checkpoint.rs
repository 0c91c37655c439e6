//! Versioned binary checkpoint: magic, format version, a JSON header with
//! everything but the tensors, then length-prefixed little-endian f32
//! sections (parameters, Adam first and second moments, best parameters).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::Adam;
use crate::trainer::Progress;

pub const MAGIC: &[u8; 8] = b"FMSEGCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub adam: AdamState,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    /// Parameters at the best validation epoch; empty before any epoch.
    pub best_params: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = usize::try_from(self.u64()?).map_err(|_| bad("section too large"))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("section too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &Adam, progress: &Progress, best_params: &[f32]) -> Self {
        Self {
            header: CheckpointHeader {
                spec: model.spec().clone(),
                progress: progress.clone(),
                adam: AdamState {
                    lr: adam.lr,
                    beta1: adam.beta1,
                    beta2: adam.beta2,
                    eps: adam.eps,
                    step: adam.step,
                },
            },
            params: model.params().to_vec(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            best_params: best_params.to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let floats = self.params.len() + self.adam_m.len() + self.adam_v.len() + self.best_params.len();
        let mut out = Vec::with_capacity(20 + header.len() + 32 + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for section in [&self.params, &self.adam_m, &self.adam_v, &self.best_params] {
            put_f32s(&mut out, section);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| bad("header too large"))?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let ck = Self {
            header,
            params: r.f32s()?,
            adam_m: r.f32s()?,
            adam_v: r.f32s()?,
            best_params: r.f32s()?,
        };
        if r.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let n = ck.header.spec.num_params()?;
        if ck.params.len() != n || ck.adam_m.len() != n || ck.adam_v.len() != n {
            return Err(bad(format!("tensor sizes do not match a model with {n} parameters")));
        }
        if !(ck.best_params.is_empty() || ck.best_params.len() == n) {
            return Err(bad("best parameter section has the wrong size"));
        }
        Ok(ck)
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.header.progress.config
    }

    /// Model with the latest parameters.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::build(self.header.spec.clone(), 0)?;
        m.set_params(&self.params)?;
        Ok(m)
    }

    /// Model with the best-validation parameters (latest when none recorded).
    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.model()?;
        if !self.best_params.is_empty() {
            m.set_params(&self.best_params)?;
        }
        Ok(m)
    }

    pub fn adam(&self) -> Adam {
        let a = &self.header.adam;
        Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }
}
