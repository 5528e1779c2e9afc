//! Finite-difference check of every latent and parameter gradient of the
//! log joint on random tiny models.

use super::gradcheck::{fd_gradcheck, GradcheckReport};
use crate::data::{FrameShape, VisibilityMask};
use crate::diffcore::SeededRng;
use crate::error::Result;
use crate::inference::{Objective, StateSource, Want};
use crate::model::{DecoderKind, EncoderKind, LatentTrajectory, Model, ModelConfig};
use crate::trainer::Variant;

/// Shape of one random check instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub config: ModelConfig,
    pub variant: Variant,
    pub frames: usize,
    pub masked: bool,
    pub sigma: f64,
}

/// Draws dimensions for instance `case`: `d <= 4`, `d_noise <= 3`, `T <= 6`
/// modeled frames and frames of at most 4x4x1, cycling through the variants
/// unless one is given.
pub fn random_instance(rng: &mut SeededRng, case: u64, variant: Option<Variant>) -> Instance {
    let variant = variant.unwrap_or(
        [
            Variant::Plain,
            Variant::Appearance,
            Variant::AppearanceMotion,
            Variant::Conditional,
        ][case as usize % 4],
    );
    let pick = |rng: &mut SeededRng, lo: usize, hi: usize| {
        lo + (rng.uniform() * (hi - lo + 1) as f64) as usize % (hi - lo + 1)
    };
    let d = pick(rng, 1, 4);
    let d_noise = pick(rng, 1, 3);
    let deconv = rng.uniform() < 0.3;
    let (frame, decoder) = if deconv {
        (
            FrameShape::new(4, 4, 1),
            DecoderKind::Deconv {
                channels: vec![2, 1],
            },
        )
    } else {
        (
            FrameShape::new(pick(rng, 1, 4), pick(rng, 1, 4), 1),
            DecoderKind::Mlp {
                hidden: vec![pick(rng, 2, 5)],
            },
        )
    };
    let d_appearance = if variant == Variant::Plain {
        0
    } else {
        pick(rng, 1, 3)
    };
    let d_motion = if variant == Variant::AppearanceMotion {
        pick(rng, 1, 2)
    } else {
        0
    };
    let encoder = (variant == Variant::Conditional).then(|| EncoderKind::Mlp { hidden: vec![3] });
    Instance {
        config: ModelConfig {
            d,
            d_noise,
            d_appearance,
            d_motion,
            frame,
            transition_hidden: vec![pick(rng, 2, 5)],
            decoder,
            encoder,
            linear_mode: false,
        },
        variant,
        frames: pick(rng, 1, 6),
        masked: rng.uniform() < 0.5,
        sigma: 0.5 + rng.uniform(),
    }
}

/// Builds instance `case` from `seed` and compares the analytic gradient of
/// the log joint with respect to every latent block and every parameter
/// against central differences. `corrupt` perturbs one analytic coordinate,
/// so the check is seen to fail.
pub fn gradcheck_instance(
    seed: u64,
    case: u64,
    variant: Option<Variant>,
    corrupt: bool,
) -> Result<GradcheckReport> {
    let mut rng = SeededRng::with_stream(seed, 3).fork(case);
    let inst = random_instance(&mut rng, case, variant);
    let mut model = Model::zeros(inst.config.clone())?;
    let theta: Vec<f64> = (0..model.params().num_scalars())
        .map(|_| 0.5 * rng.normal())
        .collect();
    model.params_mut().assign_flat(&theta)?;

    let shape = inst.config.frame;
    let conditional = inst.variant == Variant::Conditional;
    let total_frames = inst.frames + usize::from(conditional);
    let x: Vec<f64> = (0..total_frames * shape.len())
        .map(|_| 0.5 * rng.normal())
        .collect();
    let mask = inst
        .masked
        .then(|| {
            let vis = (0..x.len()).map(|_| rng.uniform() < 0.6).collect();
            VisibilityMask::new(shape, total_frames, vis)
        })
        .transpose()?;
    let z = LatentTrajectory::sample_prior(model.latent_dims(), inst.frames, &mut rng);
    let off = usize::from(conditional) * shape.len();
    let target = &x[off..];
    let visible = mask.as_ref().map(|mk| &mk.data()[off..]);
    let state = if conditional {
        StateSource::Encoded(&x[..shape.len()])
    } else {
        StateSource::Latent
    };
    let obj = Objective {
        model: &model,
        target,
        mask: visible,
        sigma: inst.sigma,
        state,
    };

    let e = obj.evaluate(&z, Want::LatentsAndParams)?;
    let mut analytic = e.latent_grads.expect("requested").flatten();
    analytic.extend(
        e.param_grads
            .expect("requested")
            .flatten_params(model.params()),
    );
    if corrupt {
        analytic[0] += 0.1 * (1.0 + analytic[0].abs());
    }
    let n_latent = z.num_scalars();
    let mut point = z.flatten();
    point.extend(&theta);
    let mut zz = z.clone();
    let mut mm = model.clone();
    fd_gradcheck(
        |p: &[f64]| {
            zz.assign_flat(&p[..n_latent])?;
            mm.params_mut().assign_flat(&p[n_latent..])?;
            Ok(Objective { model: &mm, ..obj }
                .evaluate(&zz, Want::Value)?
                .log_joint)
        },
        &point,
        &analytic,
        1e-5,
    )
}
