//! Complete-data log-likelihood, its latent gradients, and Langevin sampling
//! of the latents (optionally Metropolis-adjusted).

mod langevin;
mod objective;
mod store;

pub use langevin::{langevin_run, langevin_step, BlockDeltas, LangevinConfig, PosteriorSample};
pub use objective::{ActiveBlocks, Evaluation, Objective, StateSource, Want};
pub use store::{decode_latents, encode_latents, read_latents, write_latents};

use crate::data::{FrameSequence, VisibilityMask};
use crate::error::{Error, Result};
use crate::model::{LatentTrajectory, Model};

fn whole_sequence<'a>(
    model: &'a Model,
    x: &'a FrameSequence,
    mask: Option<&'a VisibilityMask>,
    sigma: f64,
) -> Result<Objective<'a>> {
    if x.shape() != model.config().frame {
        return Err(Error::dim(
            "log_joint",
            format!(
                "frames are {}, model emits {}",
                x.shape(),
                model.config().frame
            ),
        ));
    }
    if let Some(m) = mask {
        if !m.matches(x) {
            return Err(Error::dim(
                "log_joint",
                "mask shape differs from the sequence",
            ));
        }
    }
    Ok(Objective {
        model,
        target: x.data(),
        mask: mask.map(VisibilityMask::data),
        sigma,
        state: StateSource::Latent,
    })
}

/// Log joint of a whole sequence with every latent block free.
pub fn log_joint(
    z: &LatentTrajectory,
    x: &FrameSequence,
    mask: Option<&VisibilityMask>,
    model: &Model,
    sigma: f64,
) -> Result<f64> {
    Ok(whole_sequence(model, x, mask, sigma)?
        .evaluate(z, Want::Value)?
        .log_joint)
}

/// Gradient of [`log_joint`] with respect to `s0`, `xi`, `a`, `m`.
pub fn latent_gradients(
    z: &LatentTrajectory,
    x: &FrameSequence,
    mask: Option<&VisibilityMask>,
    model: &Model,
    sigma: f64,
) -> Result<LatentTrajectory> {
    let e = whole_sequence(model, x, mask, sigma)?.evaluate(z, Want::Latents)?;
    Ok(e.latent_grads.expect("requested"))
}
