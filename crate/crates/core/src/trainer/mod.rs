//! Alternating inference/learning training loop, recovery of occluded
//! pixels, image-to-video animation and appearance interpolation.

mod adam;
mod dataset;
mod planted;
#[cfg(test)]
mod tests;
mod train;

pub use adam::Adam;
pub use dataset::{Dataset, Sequence};
pub use planted::{damp_innovations, plant, random_generator, random_linear_generator, Planted};
pub use train::{
    metrics_csv, ChunkReport, MetricsRow, TrainConfig, Trainer, Variant, METRICS_HEADER,
};

use crate::data::FrameSequence;
use crate::diffcore::{SeededRng, Tensor};
use crate::error::{Error, Result};
use crate::model::{LatentTrajectory, Model};

/// Trains `model` on the masked sequences and returns the trainer together
/// with the model output for every frame. Occluded pixels of the output are
/// the model's fill-in.
pub fn recover(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    variant: Variant,
) -> Result<(Trainer, Vec<FrameSequence>)> {
    let mut trainer = Trainer::new(model, data, cfg, variant)?;
    trainer.run()?;
    let out = trainer.reconstructions()?;
    Ok((trainer, out))
}

/// Encodes `x0` into an initial state and appearance, draws fresh
/// innovations and rolls out `frames` frames following `x0`.
pub fn animate(
    model: &Model,
    x0: &[f64],
    frames: usize,
    rng: &mut SeededRng,
) -> Result<FrameSequence> {
    if !model.has_encoder() {
        return Err(Error::InvalidConfig(
            "animation needs a model trained with an encoder".into(),
        ));
    }
    if model.config().d_motion > 0 {
        return Err(Error::InvalidConfig(
            "animation does not support motion vectors".into(),
        ));
    }
    let (s0, a) = model.encode(x0)?;
    let dims = model.latent_dims();
    let mut xi = Tensor::zeros(&[frames, dims.d_noise]);
    rng.fill_normal(xi.data_mut());
    model.rollout(&LatentTrajectory { s0, xi, a, m: None })
}

/// Rollouts at `a(l) = (1 - l) a1 + l a2` for `l = k / (steps - 1)`, all
/// sharing `s0`, `xi` and `m` from `base`. A single step gives `a1` only.
pub fn interpolate_appearance(
    model: &Model,
    base: &LatentTrajectory,
    a1: &Tensor,
    a2: &Tensor,
    steps: usize,
) -> Result<Vec<FrameSequence>> {
    let da = model.config().d_appearance;
    if a1.shape() != [da] || a2.shape() != [da] {
        return Err(Error::dim(
            "interpolate_appearance",
            format!(
                "appearance vectors {:?} and {:?}, model uses {da}",
                a1.shape(),
                a2.shape()
            ),
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "interpolation needs at least one step".into(),
        ));
    }
    (0..steps)
        .map(|k| {
            let l = if steps == 1 {
                0.0
            } else {
                k as f64 / (steps - 1) as f64
            };
            let a: Vec<f64> = a1
                .data()
                .iter()
                .zip(a2.data())
                .map(|(x, y)| (1.0 - l) * x + l * y)
                .collect();
            let z = LatentTrajectory {
                a: Some(Tensor::vector(a)),
                ..base.clone()
            };
            model.rollout(&z)
        })
        .collect()
}
