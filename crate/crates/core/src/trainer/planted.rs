//! Data drawn from a known generator, for checking that training recovers it.

use super::dataset::{Dataset, Sequence};
use crate::data::{FrameSequence, FrameShape};
use crate::diffcore::{SeededRng, Tensor};
use crate::error::Result;
use crate::model::{LatentTrajectory, Model, ModelConfig, WeightInit};

/// Sequences drawn from `generator`.
#[derive(Clone, Debug)]
pub struct Planted {
    pub generator: Model,
    /// Latents of each sequence, burn-in included.
    pub latents: Vec<LatentTrajectory>,
    /// Noise-free frames.
    pub clean: Vec<FrameSequence>,
    /// `clean` plus N(0, sigma_data^2) noise, clamped to [-1, 1].
    pub observed: Vec<FrameSequence>,
}

impl Planted {
    /// Fully visible training set of the observed frames.
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(
            self.observed
                .iter()
                .map(|x| Sequence::new(x.clone(), None))
                .collect::<Result<_>>()?,
        )
    }
}

/// Random nonlinear generator with weights ~ N(0, gain^2 / fan_in), so its
/// frames vary visibly over time.
pub fn random_generator(cfg: ModelConfig, gain: f64, rng: &mut SeededRng) -> Result<Model> {
    Model::with_init(cfg, WeightInit::FanIn(gain), Some(rng))
}

/// Linear-mode generator `s_t = A s_{t-1} + B xi_t`, `x_t = C s_t` with `A`
/// of spectral norm `radius` and `C` scaled so frames mostly stay in
/// [-1, 1].
pub fn random_linear_generator(
    d: usize,
    d_noise: usize,
    frame: FrameShape,
    radius: f64,
    rng: &mut SeededRng,
) -> Result<Model> {
    let mut draw = |r: usize, c: usize, scale: f64| {
        let data = (0..r * c).map(|_| scale * rng.normal()).collect();
        Tensor::new(&[r, c], data)
    };
    let mut a = draw(d, d, 1.0)?;
    let norm = nalgebra::DMatrix::from_row_slice(d, d, a.data())
        .singular_values()
        .max();
    if norm > 0.0 {
        a.data_mut().iter_mut().for_each(|v| *v *= radius / norm);
    }
    let b = draw(d, d_noise, 1.0 / (d_noise as f64).sqrt())?;
    // stationary state variance is at most 1 / (1 - radius^2) per coordinate
    let state_sd = (1.0 / (1.0 - radius * radius).max(1e-6)).sqrt();
    let c = draw(frame.len(), d, 0.2 / (state_sd * (d as f64).sqrt()))?;
    Model::linear(&a, &b, &c, frame)
}

/// Draws `n` sequences of `frames` frames from `generator`, discarding the
/// first `burn_in` frames of each rollout.
pub fn plant(
    generator: Model,
    n: usize,
    frames: usize,
    burn_in: usize,
    sigma_data: f64,
    rng: &mut SeededRng,
) -> Result<Planted> {
    let dims = generator.latent_dims();
    let mut latents = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    for _ in 0..n {
        let z = LatentTrajectory::sample_prior(dims, burn_in + frames, rng);
        let x = generator.synthesize_from(&z, burn_in)?;
        let mut noisy = x.clone();
        for v in noisy.data_mut() {
            *v = (*v + sigma_data * rng.normal()).clamp(-1.0, 1.0);
        }
        latents.push(z);
        clean.push(x);
        observed.push(noisy);
    }
    Ok(Planted {
        generator,
        latents,
        clean,
        observed,
    })
}

/// Scales the weights through which the innovations enter the transition,
/// which is the same as drawing `xi ~ N(0, factor^2 I)`. With a small factor
/// the motion is mostly determined by the initial state.
pub fn damp_innovations(model: &mut Model, factor: f64) -> Result<()> {
    let (d, dn) = (model.config().d, model.config().d_noise);
    let store = model.params_mut();
    let id = store
        .ids()
        .find(|&id| store.name(id) == "transition.0.w")
        .ok_or_else(|| crate::error::Error::State("model has no transition input layer".into()))?;
    let w = &mut store.get_mut(id).value;
    let cols = w.shape()[1];
    for (k, v) in w.data_mut().iter_mut().enumerate() {
        if (d..d + dn).contains(&(k % cols)) {
            *v *= factor;
        }
    }
    Ok(())
}
