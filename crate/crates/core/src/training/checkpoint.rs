//! Binary checkpoint files: magic, JSON header, raw little-endian f32 arrays.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamHyper, AdamW};
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CETAL001";

/// SHA-256 of the canonical JSON form of a model config.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl NamedArray {
    fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Self { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.f64() as f32).collect() }
    }

    fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| T::c(v as f64)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub hyper: AdamHyper,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model_config: ModelConfig,
    pub fingerprint: String,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form metadata (training config, best metric, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    fingerprint: String,
    model_config: ModelConfig,
    params: Vec<NamedArray>,
    optimizer: Option<OptimizerState>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &Detector<T>, optim: Option<&AdamW<T>>, epoch: usize, meta: serde_json::Value) -> Self {
        let names: Vec<&str> = model.params.entries().iter().map(|e| e.name.as_str()).collect();
        let params = model.params.entries().iter().map(|e| NamedArray::from_tensor(&e.name, &e.value)).collect();
        let optimizer = optim.map(|o| OptimizerState {
            step: o.step,
            hyper: o.hyper,
            m: o.m.iter().zip(&names).map(|(t, n)| NamedArray::from_tensor(n, t)).collect(),
            v: o.v.iter().zip(&names).map(|(t, n)| NamedArray::from_tensor(n, t)).collect(),
        });
        Self {
            epoch,
            model_config: model.config.clone(),
            fingerprint: config_fingerprint(&model.config),
            params,
            optimizer,
            meta,
        }
    }

    /// Rebuilds the model and overwrites every parameter by name.
    pub fn restore_model<T: Scalar>(&self) -> Result<Detector<T>> {
        let mut model = Detector::new(self.model_config.clone(), 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Parameter(format!(
                "checkpoint has {} arrays, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for arr in &self.params {
            let id = model
                .params
                .find(&arr.name)
                .ok_or_else(|| Error::Parameter(format!("unknown parameter '{}' in checkpoint", arr.name)))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != arr.shape.as_slice() {
                return Err(Error::Parameter(format!(
                    "parameter '{}' has shape {:?}, model expects {:?}",
                    arr.name,
                    arr.shape,
                    slot.shape()
                )));
            }
            *slot = arr.to_tensor()?;
        }
        Ok(model)
    }

    pub fn restore_optimizer<T: Scalar>(&self, model: &Detector<T>) -> Result<Option<AdamW<T>>> {
        let Some(state) = &self.optimizer else { return Ok(None) };
        let mut opt = AdamW::new(&model.params);
        opt.step = state.step;
        opt.hyper = state.hyper;
        for (dst, src) in [(&mut opt.m, &state.m), (&mut opt.v, &state.v)] {
            for arr in src {
                let id = model
                    .params
                    .find(&arr.name)
                    .ok_or_else(|| Error::Parameter(format!("unknown optimizer slot '{}'", arr.name)))?;
                dst[id.0] = arr.to_tensor()?;
            }
        }
        Ok(Some(opt))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            epoch: self.epoch,
            fingerprint: self.fingerprint.clone(),
            model_config: self.model_config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for arr in self.arrays() {
            let mut buf = Vec::with_capacity(arr.data.len() * 4);
            for v in &arr.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: String| Error::Data { context: "checkpoint".into(), msg };
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        let expected = config_fingerprint(&header.model_config);
        if expected != header.fingerprint {
            return Err(bad(format!("config fingerprint mismatch: header {} vs computed {expected}", header.fingerprint)));
        }
        let mut ck = Checkpoint {
            epoch: header.epoch,
            model_config: header.model_config,
            fingerprint: header.fingerprint,
            params: header.params,
            optimizer: header.optimizer,
            meta: header.meta,
        };
        for arr in ck.arrays_mut() {
            let n: usize = arr.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|e| bad(format!("array '{}' truncated: {e}", arr.name)))?;
            arr.data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    fn arrays(&self) -> impl Iterator<Item = &NamedArray> {
        let opt = self.optimizer.iter().flat_map(|o| o.m.iter().chain(&o.v));
        self.params.iter().chain(opt)
    }

    fn arrays_mut(&mut self) -> impl Iterator<Item = &mut NamedArray> {
        let opt = self.optimizer.iter_mut().flat_map(|o| o.m.iter_mut().chain(o.v.iter_mut()));
        self.params.iter_mut().chain(opt)
    }
}
