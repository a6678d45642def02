use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::sampler::NoisePredictor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Conv2d, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "diffusion-unet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Width at full resolution; the lower two resolutions use twice this.
    pub base_channels: usize,
    /// Length of the optional conditioning vector.
    pub cond_dim: Option<usize>,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_channels: 32,
            cond_dim: None,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config("base_channels must be even and at least 2".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time: Linear,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), input, output, 3, 1)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), output, output, 3, 1)?,
            time: Linear::new(store, &format!("{name}.time"), time_dim, output)?,
            skip: if input == output {
                None
            } else {
                Some(Conv2d::new(store, &format!("{name}.skip"), input, output, 1, 0)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let shift = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Three-resolution noise predictor with skip connections.
pub struct UNet {
    config: UNetConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    cond: Option<Linear>,
    conv_in: Conv2d,
    down0: ResBlock,
    down1: ResBlock,
    mid: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let b = config.base_channels;
        let td = config.time_dim();
        let s = &mut store;
        Ok(Self {
            time1: Linear::new(s, "time.0", b, td)?,
            time2: Linear::new(s, "time.1", td, td)?,
            cond: match config.cond_dim {
                Some(d) => Some(Linear::new(s, "cond", d, td)?),
                None => None,
            },
            conv_in: Conv2d::new(s, "conv_in", config.channels, b, 3, 1)?,
            down0: ResBlock::new(s, "down.0", b, b, td)?,
            down1: ResBlock::new(s, "down.1", b, 2 * b, td)?,
            mid: ResBlock::new(s, "mid", 2 * b, 2 * b, td)?,
            up1: ResBlock::new(s, "up.1", 4 * b, 2 * b, td)?,
            up0: ResBlock::new(s, "up.0", 3 * b, b, td)?,
            conv_out: Conv2d::new(s, "conv_out", b, config.channels, 3, 1)?,
            config,
            store,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Sinusoidal features of the timesteps, `[B, base_channels]`.
    fn timestep_features(&self, t: &[usize]) -> Result<Tensor> {
        let dim = self.config.base_channels;
        let half = dim / 2;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &step in t {
            let step = step as f64;
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
            let (sin, cos): (Vec<f32>, Vec<f32>) = freqs
                .map(|f| ((step * f).sin() as f32, (step * f).cos() as f32))
                .unzip();
            data.extend(sin);
            data.extend(cos);
        }
        Ok(Tensor::from_vec(data, (t.len(), dim), self.device())?)
    }

    /// `x: [B, C, H, W]` in model space -> predicted noise of the same shape.
    pub fn forward(&self, x: &Tensor, t: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        let (batch, c, h, w) = x.dims4()?;
        let size = self.config.image_size;
        if c != self.config.channels || h != size || w != size {
            return Err(Error::Shape(format!(
                "expected [B, {}, {size}, {size}], got {:?}",
                self.config.channels,
                x.dims()
            )));
        }
        if t.len() != batch {
            return Err(Error::LengthMismatch(t.len(), batch));
        }
        let mut temb = self.time2.forward(&self.time1.forward(&self.timestep_features(t)?)?.silu()?)?;
        match (&self.cond, cond) {
            (Some(layer), Some(v)) => temb = (temb + layer.forward(v)?)?,
            (None, Some(_)) => return Err(Error::Config("model was built without conditioning".into())),
            _ => {}
        }
        let temb = temb.silu()?;
        let h0 = self.down0.forward(&self.conv_in.forward(x)?, &temb)?;
        let h1 = self.down1.forward(&kernels::avgpool2x(&h0)?, &temb)?;
        let m = self.mid.forward(&kernels::avgpool2x(&h1)?, &temb)?;
        let u1 = Tensor::cat(&[&kernels::upsample2x(&m)?, &h1], 1)?;
        let u1 = self.up1.forward(&u1, &temb)?;
        let u0 = Tensor::cat(&[&kernels::upsample2x(&u1)?, &h0], 1)?;
        let u0 = self.up0.forward(&u0, &temb)?;
        self.conv_out.forward(&u0.silu()?)
    }

    pub fn predict_batch(&self, xs: &[&Array3<f64>], t: usize, cond: Option<&[f32]>) -> Result<Vec<Array3<f64>>> {
        let Some(first) = xs.first() else {
            return Ok(Vec::new());
        };
        let shape = first.dim();
        let mut data = Vec::with_capacity(xs.len() * first.len());
        for x in xs {
            if x.dim() != shape {
                return Err(Error::Shape("batch samples differ in shape".into()));
            }
            data.extend(x.iter().map(|&v| v as f32));
        }
        let input = Tensor::from_vec(data, (xs.len(), shape.0, shape.1, shape.2), self.device())?;
        let cond = match cond {
            Some(v) => Some(Tensor::from_vec(v.to_vec(), (1, v.len()), self.device())?.repeat((xs.len(), 1))?),
            None => None,
        };
        let out = self.forward(&input, &vec![t; xs.len()], cond.as_ref())?;
        let flat = out.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(flat
            .chunks_exact(first.len())
            .map(|c| Array3::from_shape_vec(shape, c.to_vec()).expect("chunk length matches shape"))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &DiffusionMeta) -> Result<()> {
        let bytes = checkpoint::encode(
            CHECKPOINT_KIND,
            &self.config,
            serde_json::to_value(meta)?,
            &self.store.tensors(),
        )?;
        checkpoint::write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, DiffusionMeta)> {
        let bytes = checkpoint::read(path)?;
        let (header, tensors) = checkpoint::decode(&bytes, CHECKPOINT_KIND)?;
        let config: UNetConfig = checkpoint::config_of(&header)?;
        let meta: DiffusionMeta = serde_json::from_value(header.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let model = Self::new(config)?;
        model.store.load(&tensors)?;
        Ok((model, meta))
    }
}

/// Schedule parameters stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionMeta {
    fn default() -> Self {
        Self {
            schedule_steps: super::schedule::DEFAULT_STEPS,
            beta_start: super::schedule::BETA_START,
            beta_end: super::schedule::BETA_END,
        }
    }
}

impl DiffusionMeta {
    pub fn schedule(&self) -> Result<super::NoiseSchedule> {
        super::NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, x_t: &Array3<f64>, t: usize) -> Result<Array3<f64>> {
        Ok(self.predict_batch(&[x_t], t, None)?.remove(0))
    }
}

/// A conditional model bound to one conditioning vector.
pub struct Conditioned<'a> {
    pub model: &'a UNet,
    pub cond: Vec<f32>,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, x_t: &Array3<f64>, t: usize) -> Result<Array3<f64>> {
        Ok(self.model.predict_batch(&[x_t], t, Some(&self.cond))?.remove(0))
    }
}
