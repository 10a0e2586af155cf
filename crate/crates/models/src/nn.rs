//! Minimal layer toolkit over candle with seeded, reproducible initialisation.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Optimizer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;

/// Pixel intensities in `[0,1]` are centred and scaled before entering any network.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-uniform for ReLU layers with the given fan-in.
    He(usize),
    Uniform(f64),
    Const(f64),
}

/// Named parameters of one network. Tensors are created either from a seeded
/// generator or from previously saved weights; order-independent by name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    saved: Option<BTreeMap<String, Tensor>>,
    frozen: BTreeSet<String>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn seeded(rng: ChaCha8Rng) -> Self {
        Self {
            vars: BTreeMap::new(),
            saved: None,
            frozen: BTreeSet::new(),
            rng,
        }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            vars: BTreeMap::new(),
            saved: Some(tensors),
            frozen: BTreeSet::new(),
            rng: rand::SeedableRng::seed_from_u64(0),
        }
    }

    /// Returns the parameter `name`, creating it on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.as_tensor().clone());
        }
        let tensor = match &self.saved {
            Some(saved) => {
                let t = saved
                    .get(name)
                    .ok_or_else(|| Error::Domain(format!("weights are missing tensor {name}")))?;
                if t.dims() != shape {
                    return Err(Error::Domain(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(DType::F32)?
            }
            None => {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match init {
                    Init::He(fan_in) => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect()
                    }
                    Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect(),
                    Init::Const(c) => vec![c as f32; n],
                };
                Tensor::from_vec(data, shape, &DEVICE)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Installs fixed weights under `name`; useful for transplanted sub-networks.
    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&tensor.to_dtype(DType::F32)?.copy()?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Excludes every parameter whose name starts with `prefix` from optimisation.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for name in self.vars.keys().filter(|n| n.starts_with(prefix)) {
            self.frozen.insert(name.clone());
        }
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub fn conv(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Conv2d> {
    let fan_in = c_in * k * k;
    let w = ps.get(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::He(fan_in))?;
    let b = ps.get(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?;
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub fn dense(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<Linear> {
    let w = ps.get(&format!("{name}.weight"), &[d_out, d_in], init)?;
    let b = ps.get(&format!("{name}.bias"), &[d_out], Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Output layer with a chosen bias prior (e.g. a low initial foreground rate).
pub fn dense_with_bias(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: f64) -> Result<Linear> {
    let bound = (1.0 / d_in as f64).sqrt();
    let w = ps.get(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(bound))?;
    let b = ps.get(&format!("{name}.bias"), &[d_out], Init::Const(bias))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv_relu(x: &Tensor, c: &Conv2d) -> Result<Tensor> {
    Ok(c.forward(x)?.relu()?)
}

/// `[B, H, W]`-ordered f32 pixels to a normalised `[B, 1, H, W]` tensor.
pub fn images_to_tensor(pixels: &[&[f32]], height: usize, width: usize) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(pixels.len() * height * width);
    for p in pixels {
        if p.len() != height * width {
            return Err(Error::Domain(format!(
                "input has {} pixels, expected {}x{}",
                p.len(),
                height,
                width
            )));
        }
        flat.extend_from_slice(p);
    }
    let t = Tensor::from_vec(flat, (pixels.len(), 1, height, width), &DEVICE)?;
    Ok(t.affine(1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD)?)
}

/// Numerically stable mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let loss = ((pos - logits.mul(targets)?)? + soft)?;
    Ok(loss.mean_all()?)
}

/// Summed smooth-L1 with transition point `beta`.
pub fn smooth_l1_sum(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    // 0.5 m^2 / beta + (d - m) with m = min(d, beta).
    let d = (pred - target)?.abs()?;
    let m = d.minimum(beta)?;
    let loss = (m.sqr()?.affine(0.5 / beta, 0.0)? + (d - &m)?)?;
    Ok(loss.sum_all()?)
}

pub fn adamw(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    let params = candle_nn::ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
