use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Named parameters plus Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Parameter name to tape variable, for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<String, Var>);

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))
    }

    /// Gradient per bound parameter; parameters that did not reach the loss
    /// get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor2> {
        self.0
            .iter()
            .map(|(name, &var)| {
                let g = grads.wrt(var).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.value(var).shape();
                    Tensor2::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

const FORMAT_TAG: &str = "gicl-params";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        let (r, c) = value.shape();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                m: Tensor2::zeros(r, c),
                v: Tensor2::zeros(r, c),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Mutable access to a value; the shape must not change.
    pub fn value_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.slots.get_mut(name).map(|s| s.value.data_mut())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings> {
        let mut map = BTreeMap::new();
        for (name, slot) in &self.slots {
            map.insert(name.clone(), tape.leaf(slot.value.clone())?);
        }
        Ok(Bindings(map))
    }

    /// One bias-corrected Adam update. Every gradient must name a known
    /// parameter of the same shape; nothing is modified on error.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor2>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name:?}")))?;
            if slot.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: param {:?} grad {:?}", slot.value.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("checked above");
            let w = slot.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] + cfg.weight_decay * w[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Writes a one-line JSON header followed by f32le payloads in header
    /// order. Optimizer moments are not persisted.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = FileHeader {
            format: FORMAT_TAG.into(),
            version: 1,
            step: self.step,
            tensors: self
                .slots
                .iter()
                .map(|(name, s)| TensorEntry {
                    name: name.clone(),
                    rows: s.value.rows(),
                    cols: s.value.cols(),
                })
                .collect(),
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for s in self.slots.values() {
            for v in s.value.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ParamFormat("missing header line".into()))?;
        let header: FileHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::ParamFormat(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG || header.version != 1 {
            return Err(Error::ParamFormat(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let payload = &bytes[split + 1..];
        let needed: usize = header.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
        if payload.len() != needed {
            return Err(Error::ParamFormat(format!(
                "payload has {} bytes, header describes {needed}",
                payload.len()
            )));
        }
        let mut out = ParamSet::new();
        let mut at = 0;
        for t in header.tensors {
            let n = t.rows * t.cols;
            let data: Vec<f64> = payload[at..at + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            at += n * 4;
            out.insert(t.name, Tensor2::from_vec(t.rows, t.cols, data)?);
        }
        out.step = header.step;
        Ok(out)
    }
}
