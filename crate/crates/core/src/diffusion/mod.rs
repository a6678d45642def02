//! Pixel-space toy diffusion: schedule, forward process, noise predictor,
//! deterministic DDIM sampling with a guidance hook, and first-stage codes.

mod ae;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use ae::{ae_code, FirstStageAE, LDM8_CHANNELS, LDM8_Z_SHAPE};
pub use sampler::{
    ddpm_loss, ddpm_loss_grad, gaussian, to_image, to_model, DdimSampler, DiffusionState, NoisePredictor,
    OracleEps, StepPrediction, ZeroEps,
};
pub use schedule::{q_sample, NoiseSchedule, BETA_END, BETA_START, DEFAULT_STEPS};
pub use train::{train_diffusion, DiffusionExample, DiffusionTrainConfig};
pub use unet::{Conditioned, DiffusionMeta, UNet, UNetConfig, CHECKPOINT_KIND};

use crate::datasets::SceneRecord;
use crate::error::{Error, Result};
use crate::shapes::downsample;

/// Training images at `size` from dataset records (box-filtered).
pub fn examples_from_records(records: &[SceneRecord], size: usize) -> Result<Vec<DiffusionExample>> {
    records
        .iter()
        .map(|r| {
            let (_, h, w) = r.image.dim();
            if h != w || h % size != 0 {
                return Err(Error::Shape(format!("cannot reduce {h}x{w} to {size}x{size}")));
            }
            Ok(DiffusionExample {
                image: downsample(&r.image, h / size),
                cond: None,
            })
        })
        .collect()
}
