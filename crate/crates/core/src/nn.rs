//! Minimal seeded layers on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names; trainable
//! weights are `Var`s, batch-norm running statistics are buffers that are
//! checkpointed but never handed to the optimiser.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

pub struct ParamStore {
    device: Device,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn init_tensor(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = self.rng.lock().expect("rng lock");
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.init_tensor(shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_owned(), var);
        Ok(out)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let t = self.init_tensor(shape, init)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_owned(), var.clone());
        Ok(var)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter and buffer by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites stored values in place; every stored name must be present.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[output, input], Init::Uniform { fan_in: input })?,
            bias: store.param(&format!("{name}.bias"), &[output], Init::Uniform { fan_in: input })?,
        })
    }

    /// `x: [N, input] -> [N, output]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        Ok(Self {
            weight: store.param(
                &format!("{name}.weight"),
                &[output, input, kernel, kernel],
                Init::Uniform { fan_in },
            )?,
            bias: store.param(&format!("{name}.bias"), &[output], Init::Uniform { fan_in })?,
            kernel,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 3 && self.padding == 1 {
            return crate::kernels::conv3x3(x, &self.weight, &self.bias, false);
        }
        if self.kernel == 1 && self.padding == 0 {
            let (n, c, h, w) = x.dims4()?;
            let o = self.weight.dim(0)?;
            let y = self
                .weight
                .reshape((o, c))?
                .broadcast_matmul(&x.reshape((n, c, h * w))?)?
                .broadcast_add(&self.bias.reshape((1, o, 1))?)?;
            return Ok(y.reshape((n, o, h, w))?);
        }
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    /// `relu(conv(x))`, fused on the fast path.
    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 3 && self.padding == 1 {
            return crate::kernels::conv3x3(x, &self.weight, &self.bias, true);
        }
        Ok(self.forward(x)?.relu()?)
    }
}

/// Batch normalisation over `[N, C, H, W]` with running statistics.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    fn update_running(&self, mean: &Tensor, unbiased_var: &Tensor) -> Result<()> {
        let m = self.momentum;
        self.running_mean
            .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?)?;
        self.running_var
            .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased_var * m)?)?)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        if train {
            if let Some((normed, mean, var)) = crate::kernels::batch_normalize(x, self.eps)? {
                let (n, _, h, w) = x.dims4()?;
                let count = (n * h * w) as f64;
                let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let dev = x.device();
                let mean = Tensor::from_vec(mean.iter().map(|&v| v as f32).collect::<Vec<_>>(), c, dev)?;
                let var = Tensor::from_vec(var.iter().map(|&v| (v * correction) as f32).collect::<Vec<_>>(), c, dev)?;
                self.update_running(&mean, &var)?;
                return Ok(normed
                    .broadcast_mul(&self.gamma.reshape(shape)?)?
                    .broadcast_add(&self.beta.reshape(shape)?)?);
            }
        }
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.flatten_from(1)?; // [C, N*H*W]
            let mean = flat.mean(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centered.sqr()?.mean(D::Minus1)?;
            let count = flat.dim(1)? as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            self.update_running(&mean.detach(), &unbiased)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let normed = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_div(&(var + self.eps)?.sqrt()?.reshape(shape)?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Numerically stable binary cross entropy with logits, elementwise.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    // max(z, 0) - z*y + ln(1 + exp(-|z|))
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((relu - logits.mul(target)?)? + softplus)?)
}
