use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::UNet;
use crate::error::{Error, Result};
use crate::shapes::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Decay of the weight moving average copied into the model at the end;
    /// `None` keeps the raw weights.
    pub ema_decay: Option<f64>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            ema_decay: Some(0.995),
        }
    }
}

/// One training image in `[0, 1]` with an optional conditioning vector.
#[derive(Debug, Clone)]
pub struct DiffusionExample {
    pub image: Image,
    pub cond: Option<Vec<f32>>,
}

/// Minimises the noise-prediction MSE; returns the loss of every step.
pub fn train_diffusion(
    model: &UNet,
    data: &[DiffusionExample],
    schedule: &NoiseSchedule,
    config: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let conditional = model.config().cond_dim.is_some();
    if conditional && data.iter().any(|d| d.cond.is_none()) {
        return Err(Error::Config("conditional model needs a vector for every example".into()));
    }
    let (c, h, w) = data[0].image.dim();
    let mut opt = AdamW::new(
        model.params().trainable(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    if config.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
        return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
    }
    let vars = model.params().trainable();
    let mut ema = match config.ema_decay {
        Some(_) => Some(vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>()?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dev = candle_core::Device::Cpu;
    let per = c * h * w;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let b = config.batch_size;
        let mut xt = Vec::with_capacity(b * per);
        let mut eps = Vec::with_capacity(b * per);
        let mut ts = Vec::with_capacity(b);
        let mut conds = Vec::new();
        for _ in 0..b {
            let ex = &data[rng.random_range(0..data.len())];
            if ex.image.dim() != (c, h, w) {
                return Err(Error::Shape("training images differ in shape".into()));
            }
            let t = rng.random_range(1..=schedule.steps());
            let ab = schedule.alpha_bar(t);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for &v in ex.image.iter() {
                let e: f64 = StandardNormal.sample(&mut rng);
                xt.push((sa * (2.0 * v - 1.0) + sb * e) as f32);
                eps.push(e as f32);
            }
            ts.push(t);
            if let Some(v) = &ex.cond {
                conds.extend_from_slice(v);
            }
        }
        let xt = Tensor::from_vec(xt, (b, c, h, w), &dev)?;
        let eps = Tensor::from_vec(eps, (b, c, h, w), &dev)?;
        let cond = if conditional {
            Some(Tensor::from_vec(conds, (b, ()), &dev)?)
        } else {
            None
        };
        let pred = model.forward(&xt, &ts, cond.as_ref())?;
        let loss = (pred - eps)?.sqr()?.mean_all()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite diffusion loss at step {step}")));
        }
        opt.backward_step(&loss)?;
        if let (Some(avg), Some(decay)) = (ema.as_mut(), config.ema_decay) {
            // short warm-up so early weights do not dominate the average
            let d = decay.min((1 + step) as f64 / (10 + step) as f64);
            for (a, v) in avg.iter_mut().zip(&vars) {
                *a = ((&*a * d)? + (v.as_tensor() * (1.0 - d))?)?;
            }
        }
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("diffusion step {step}: loss {value:.4}");
        }
    }
    if let Some(avg) = ema {
        for (a, v) in avg.iter().zip(&vars) {
            v.set(a)?;
        }
    }
    Ok(losses)
}
