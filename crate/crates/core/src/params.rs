//! Named learnable tensors, their Adam state, and the checkpoint format.
//!
//! Checkpoint layout: the 8 magic bytes `C3DCKPT1`, a newline, one manifest
//! line per tensor (`name rank dim...`), a blank line, then every tensor's
//! values as little-endian `f32` in manifest order.
//!
//! Weights are kept on the `f32` grid (rounded after initialization and after
//! every optimizer step) so that a checkpoint round trip is lossless.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"C3DCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    touched: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Contract(format!("invalid parameter name {name:?}")));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let mut value = value.detached();
        value.data_mut().iter_mut().for_each(|v| *v = to_f32_grid(*v));
        let n = value.numel();
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: value.requires_grad(),
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            touched: false,
        });
        Ok(ParamId(id))
    }

    /// Glorot-uniform weight `fan_in x fan_out`.
    pub fn insert_weight<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn insert_bias(&mut self, name: &str, width: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(&[1, width]))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let e = &self.entries[id.0];
        (&e.first_moment, &e.second_moment)
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| g.variable(e.value.detached())).collect(),
        }
    }

    /// Adds every parameter as a constant; for inference, where no backward pass follows.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| g.constant(e.value.detached())).collect(),
        }
    }

    /// Adds gradients accumulated in `g` into the parameters' buffers.
    pub fn accumulate(&mut self, g: &Graph, bound: &Bound) {
        for (e, v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(*v) {
                e.value.accumulate_grad(grad);
                e.touched = true;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
            e.touched = false;
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.entries[id.0].value.grad().expect("parameters always carry a gradient buffer")
    }

    pub fn has_pending_grad(&self) -> bool {
        self.entries.iter().any(|e| e.touched)
    }

    /// Bias-corrected Adam update of every parameter that received gradient,
    /// followed by zeroing all gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_pending_grad() {
            return Err(Error::Contract("adam step without any accumulated gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            if !e.touched {
                continue;
            }
            let grad = e.value.grad().expect("gradient buffer").to_vec();
            let w = e.value.data_mut();
            for i in 0..w.len() {
                let g = grad[i];
                e.first_moment[i] = cfg.beta1 * e.first_moment[i] + (1.0 - cfg.beta1) * g;
                e.second_moment[i] = cfg.beta2 * e.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = e.first_moment[i] / bc1;
                let v_hat = e.second_moment[i] / bc2;
                w[i] = to_f32_grid(w[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Serializes names, shapes and `f32` values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for e in &self.entries {
            let _ = write!(manifest, "{} {}", e.name, e.value.rank());
            for d in e.value.shape() {
                let _ = write!(manifest, " {d}");
            }
            manifest.push('\n');
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * self.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(b'\n');
        out.extend_from_slice(manifest.as_bytes());
        out.push(b'\n');
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses a checkpoint without reference to any architecture.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelParams> {
        if bytes.len() < 9 || &bytes[..8] != CHECKPOINT_MAGIC || bytes[8] != b'\n' {
            return Err(Error::Checkpoint("bad magic; not a C3DCKPT1 checkpoint".into()));
        }
        let rest = &bytes[9..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .map(|p| p + 1)
            .or_else(|| (rest.first() == Some(&b'\n')).then_some(0))
            .ok_or_else(|| Error::Checkpoint("manifest is not terminated by a blank line".into()))?;
        let manifest = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let mut payload = &rest[end + 1..];
        let mut params = ModelParams::new();
        for line in manifest.lines() {
            let toks: Vec<&str> = line.split(' ').collect();
            let bad = || Error::Checkpoint(format!("malformed manifest line {line:?}"));
            if toks.len() < 2 {
                return Err(bad());
            }
            let rank: usize = toks[1].parse().map_err(|_| bad())?;
            if toks.len() != 2 + rank {
                return Err(bad());
            }
            let shape = toks[2..]
                .iter()
                .map(|t| t.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if payload.len() < 4 * numel {
                return Err(Error::Checkpoint(format!("payload truncated in tensor {}", toks[0])));
            }
            let data = payload[..4 * numel]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * numel..];
            params.insert(toks[0], Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(params)
    }

    /// Overwrites values with a checkpoint's, requiring identical names and shapes.
    pub fn load_values_from(&mut self, other: &ModelParams) -> Result<()> {
        for e in &self.entries {
            let Some(o) = other.by_name(&e.name) else {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter {}", e.name)));
            };
            if o.shape() != e.value.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    detail: format!(
                        "parameter {} has shape {:?} in checkpoint but {:?} in model",
                        e.name,
                        o.shape(),
                        e.value.shape()
                    ),
                });
            }
        }
        if other.len() != self.len() {
            let extra: Vec<&str> = other.names().filter(|n| self.id(n).is_none()).collect();
            return Err(Error::Checkpoint(format!("checkpoint has unknown parameters {extra:?}")));
        }
        for e in &mut self.entries {
            let src = other.by_name(&e.name).expect("checked above");
            e.value.data_mut().copy_from_slice(src.data());
            e.value.zero_grad();
            e.first_moment.iter_mut().for_each(|v| *v = 0.0);
            e.second_moment.iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_values_from(&ModelParams::from_checkpoint_bytes(&bytes)?)
    }

    /// True when names, shapes and values agree (optimizer state ignored).
    pub fn same_values(&self, other: &ModelParams) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape() && a.value.data() == b.value.data())
    }
}

/// Graph handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}
