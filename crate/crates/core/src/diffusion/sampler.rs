use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};

/// A noise predictor `eps_theta(x_t, t)` over single samples in model space.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Array3<f64>, t: usize) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub sample: Array3<f64>,
    pub t: usize,
    pub seed: u64,
}

/// Standard-normal tensor from a seeded stream.
pub fn gaussian(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Mean squared error between drawn noise and the model's prediction.
pub fn ddpm_loss(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x0_batch: &[Array3<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if x0_batch.is_empty() {
        return Err(Error::EmptyInput("x0 batch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for x0 in x0_batch {
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("x0 batch contains non-finite values".into()));
        }
        let t = rand::Rng::random_range(rng, 1..=schedule.steps());
        let noise = Array3::from_shape_simple_fn(x0.raw_dim(), || StandardNormal.sample(rng));
        let xt = q_sample(schedule, x0, t, &noise)?;
        let pred = model.predict(&xt, t)?;
        total += Zip::from(&pred).and(&noise).fold(0.0, |acc, &p, &e| acc + (p - e) * (p - e));
        count += noise.len();
    }
    Ok(total / count as f64)
}

/// Gradient of the mean squared error with respect to the predictions.
pub fn ddpm_loss_grad(pred: &Array3<f64>, noise: &Array3<f64>) -> Array3<f64> {
    let n = pred.len() as f64;
    Zip::from(pred).and(noise).map_collect(|&p, &e| 2.0 * (p - e) / n)
}

/// Deterministic DDIM (eta = 0) over an evenly spaced stride.
#[derive(Debug, Clone)]
pub struct DdimSampler {
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
}

/// Quantities of one step, exposed for guidance and tracing.
#[derive(Debug, Clone)]
pub struct StepPrediction {
    pub t: usize,
    pub t_prev: usize,
    pub eps: Array3<f64>,
    /// Denoised estimate in model space, clipped to `[-1, 1]`.
    pub x0_hat: Array3<f64>,
}

/// Guidance callback: `(step index, t, image estimate in [0, 1])` to a gradient.
pub type GuidanceHook<'a> = dyn FnMut(usize, usize, &Array3<f64>) -> Result<Array3<f64>> + 'a;

impl DdimSampler {
    pub fn new(schedule: NoiseSchedule, steps: usize) -> Result<Self> {
        let timesteps = schedule.stride(steps)?;
        Ok(Self { schedule, timesteps })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Descending timesteps visited by the sampler.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn previous(&self, t: usize) -> Result<usize> {
        if t == 0 {
            return Err(Error::StepUnderflow);
        }
        match self.timesteps.iter().position(|&s| s == t) {
            Some(i) => Ok(self.timesteps.get(i + 1).copied().unwrap_or(0)),
            None => Err(Error::InvalidValue(format!("timestep {t} is not on the sampling stride"))),
        }
    }

    pub fn predict(&self, model: &dyn NoisePredictor, state: &DiffusionState) -> Result<StepPrediction> {
        let t_prev = self.previous(state.t)?;
        let eps = model.predict(&state.sample, state.t)?;
        if eps.shape() != state.sample.shape() {
            return Err(Error::Shape(format!(
                "model output {:?} does not match sample {:?}",
                eps.shape(),
                state.sample.shape()
            )));
        }
        let ab = self.schedule.alpha_bar(state.t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0_hat = Zip::from(&state.sample)
            .and(&eps)
            .map_collect(|&x, &e| ((x - sb * e) / sa).clamp(-1.0, 1.0));
        Ok(StepPrediction {
            t: state.t,
            t_prev,
            eps,
            x0_hat,
        })
    }

    /// Applies the update given a prediction; `guidance_grad` is with respect to `x_t`.
    pub fn update(
        &self,
        state: &DiffusionState,
        pred: &StepPrediction,
        guidance_grad: Option<&Array3<f64>>,
        alpha_scale: f64,
    ) -> Result<DiffusionState> {
        let ab_prev = self.schedule.alpha_bar(pred.t_prev);
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let ab = self.schedule.alpha_bar(pred.t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        // noise direction re-derived from the clipped estimate keeps the step consistent
        let mut mean = Zip::from(&pred.x0_hat)
            .and(&state.sample)
            .map_collect(|&x0, &x| pa * x0 + pb * (x - sa * x0) / sb);
        if let Some(g) = guidance_grad {
            if g.shape() != mean.shape() {
                return Err(Error::Shape(format!(
                    "guidance gradient {:?} does not match sample {:?}",
                    g.shape(),
                    mean.shape()
                )));
            }
            let scale = alpha_scale * self.schedule.posterior_variance(pred.t, pred.t_prev);
            Zip::from(&mut mean).and(g).for_each(|m, &gv| *m += scale * gv);
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite sample at t = {}", pred.t)));
        }
        Ok(DiffusionState {
            sample: mean,
            t: pred.t_prev,
            seed: state.seed,
        })
    }

    /// One DDIM step from `state.t` to the previous stride timestep.
    pub fn step(
        &self,
        model: &dyn NoisePredictor,
        state: &DiffusionState,
        guidance_grad: Option<&Array3<f64>>,
        alpha_scale: f64,
    ) -> Result<DiffusionState> {
        let pred = self.predict(model, state)?;
        self.update(state, &pred, guidance_grad, alpha_scale)
    }

    /// `d image / d x_t` where `image = (x0_hat + 1) / 2` with `eps` held fixed.
    pub fn image_chain_factor(&self, t: usize) -> f64 {
        0.5 / self.schedule.alpha_bar(t).sqrt()
    }

    pub fn initial_state(&self, shape: (usize, usize, usize), seed: u64) -> DiffusionState {
        DiffusionState {
            sample: gaussian(shape, seed),
            t: self.timesteps[0],
            seed,
        }
    }

    /// Full run from seeded noise; returns an image in `[0, 1]`.
    ///
    /// `guidance` sees `(step index, t, image estimate in [0, 1])` and returns the
    /// gradient of the quantity to increase with respect to that estimate.
    pub fn sample(
        &self,
        model: &dyn NoisePredictor,
        shape: (usize, usize, usize),
        seed: u64,
        mut guidance: Option<&mut GuidanceHook<'_>>,
        alpha_scale: f64,
    ) -> Result<Array3<f64>> {
        let mut state = self.initial_state(shape, seed);
        let mut index = 0;
        while state.t > 0 {
            let pred = self.predict(model, &state)?;
            let grad = match guidance.as_mut() {
                Some(f) => {
                    let estimate = to_image(&pred.x0_hat);
                    let g = f(index, pred.t, &estimate)?;
                    let k = self.image_chain_factor(pred.t);
                    Some(g.mapv(|v| v * k))
                }
                None => None,
            };
            state = self.update(&state, &pred, grad.as_ref(), alpha_scale)?;
            index += 1;
        }
        Ok(to_image(&state.sample))
    }
}

/// Model space `[-1, 1]` to image space `[0, 1]`, clamped.
pub fn to_image(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Image space `[0, 1]` to model space `[-1, 1]`.
pub fn to_model(image: &Array3<f64>) -> Array3<f64> {
    image.mapv(|v| v * 2.0 - 1.0)
}

/// Knows the clean sample and returns the exact noise consistent with it.
pub struct OracleEps {
    pub x0: Array3<f64>,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleEps {
    fn predict(&self, x_t: &Array3<f64>, t: usize) -> Result<Array3<f64>> {
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(x_t).and(&self.x0).map_collect(|&x, &x0| (x - a * x0) / b))
    }
}

/// Always predicts zero noise.
pub struct ZeroEps;

impl NoisePredictor for ZeroEps {
    fn predict(&self, x_t: &Array3<f64>, _t: usize) -> Result<Array3<f64>> {
        Ok(Array3::zeros(x_t.raw_dim()))
    }
}
