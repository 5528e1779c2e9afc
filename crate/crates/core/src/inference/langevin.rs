use super::objective::{ActiveBlocks, Evaluation, Objective, Want};
use crate::diffcore::SeededRng;
use crate::error::{Error, Result};
use crate::model::LatentTrajectory;

/// Per-block step-size overrides; `None` means the shared step size.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BlockDeltas {
    pub s0: Option<f64>,
    pub xi: Option<f64>,
    pub a: Option<f64>,
    pub m: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    pub delta: f64,
    pub steps: usize,
    pub sigma: f64,
    pub mh_correct: bool,
    pub block_delta: BlockDeltas,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            delta: 0.03,
            steps: 15,
            sigma: 1.0,
            mh_correct: false,
            block_delta: BlockDeltas::default(),
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.block_delta;
        let deltas = [Some(self.delta), b.s0, b.xi, b.a, b.m];
        if deltas
            .iter()
            .flatten()
            .any(|d| !(*d >= 0.0) || !d.is_finite())
        {
            return Err(Error::InvalidConfig(
                "Langevin step sizes must be finite and non-negative".into(),
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Step sizes for s0, xi, a, m.
    pub fn deltas(&self) -> [f64; 4] {
        let b = self.block_delta;
        [b.s0, b.xi, b.a, b.m].map(|d| d.unwrap_or(self.delta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub latents: LatentTrajectory,
    pub log_joint: f64,
    /// Accepted proposals (MH mode); equals the step count otherwise.
    pub accept_count: usize,
}

fn block_list<'z>(
    z: &'z mut LatentTrajectory,
    active: ActiveBlocks,
    deltas: [f64; 4],
) -> Vec<(&'z mut [f64], f64)> {
    let mut v = Vec::with_capacity(4);
    if active.s0 {
        v.push((z.s0.data_mut(), deltas[0]));
    }
    v.push((z.xi.data_mut(), deltas[1]));
    if active.a {
        if let Some(a) = z.a.as_mut() {
            v.push((a.data_mut(), deltas[2]));
        }
    }
    if let Some(m) = z.m.as_mut() {
        v.push((m.data_mut(), deltas[3]));
    }
    v
}

/// `x + (delta^2 / 2) grad + delta z` on every active block, with `z` drawn
/// block by block in the order s0, xi, a, m. Returns the proposal.
pub fn langevin_step(
    z: &LatentTrajectory,
    grads: &LatentTrajectory,
    active: ActiveBlocks,
    cfg: &LangevinConfig,
    rng: &mut SeededRng,
) -> LatentTrajectory {
    let mut out = z.clone();
    let mut g = grads.clone();
    let deltas = cfg.deltas();
    let grad_blocks = block_list(&mut g, active, deltas);
    for ((x, delta), (gr, _)) in block_list(&mut out, active, deltas)
        .into_iter()
        .zip(grad_blocks)
    {
        for (xv, gv) in x.iter_mut().zip(gr.iter()) {
            let noise = rng.normal();
            if delta != 0.0 {
                *xv += 0.5 * delta * delta * *gv + delta * noise;
            }
        }
    }
    out
}

/// `log q(to | from)` for the Langevin proposal, dropping constants shared by
/// both directions.
fn log_proposal(
    to: &LatentTrajectory,
    from: &LatentTrajectory,
    from_grads: &LatentTrajectory,
    active: ActiveBlocks,
    deltas: [f64; 4],
) -> f64 {
    let (mut t, mut f, mut g) = (to.clone(), from.clone(), from_grads.clone());
    let tb = block_list(&mut t, active, deltas);
    let fb = block_list(&mut f, active, deltas);
    let gb = block_list(&mut g, active, deltas);
    let mut lq = 0.0;
    for (((tv, delta), (fv, _)), (gv, _)) in tb.into_iter().zip(fb).zip(gb) {
        if delta == 0.0 {
            continue;
        }
        let h = 0.5 * delta * delta;
        let ss: f64 = tv
            .iter()
            .zip(fv.iter())
            .zip(gv.iter())
            .map(|((t, f), g)| (t - f - h * g).powi(2))
            .sum();
        lq -= ss / (2.0 * delta * delta);
    }
    lq
}

fn checked(obj: &Objective, z: &LatentTrajectory, iteration: usize) -> Result<Evaluation> {
    let e = obj.evaluate(z, Want::Latents)?;
    let grads_ok = e
        .latent_grads
        .as_ref()
        .is_some_and(LatentTrajectory::all_finite);
    if !e.log_joint.is_finite() || !grads_ok {
        return Err(Error::NonFinite {
            what: format!(
                "log joint ({}) or its gradient during Langevin dynamics",
                e.log_joint
            ),
            iteration,
        });
    }
    Ok(e)
}

/// Runs `cfg.steps` Langevin transitions from the warm start `z`.
pub fn langevin_run(
    z: &LatentTrajectory,
    obj: &Objective,
    cfg: &LangevinConfig,
    rng: &mut SeededRng,
) -> Result<PosteriorSample> {
    let active = obj.active();
    let deltas = cfg.deltas();
    let mut current = z.clone();
    let mut accept_count = 0;
    if cfg.steps == 0 {
        let e = obj.evaluate(&current, Want::Value)?;
        return Ok(PosteriorSample {
            latents: current,
            log_joint: e.log_joint,
            accept_count,
        });
    }
    let mut eval = checked(obj, &current, 0)?;
    for it in 0..cfg.steps {
        let grads = eval
            .latent_grads
            .as_ref()
            .expect("latent gradients requested");
        let proposal = langevin_step(&current, grads, active, cfg, rng);
        if cfg.mh_correct {
            let u = rng.uniform();
            let prop_eval = match checked(obj, &proposal, it + 1) {
                Ok(e) => e,
                // A proposal that overflows is rejected like any other.
                Err(Error::NonFinite { .. }) => continue,
                Err(e) => return Err(e),
            };
            let pg = prop_eval.latent_grads.as_ref().unwrap();
            let log_ratio = prop_eval.log_joint - eval.log_joint
                + log_proposal(&current, &proposal, pg, active, deltas)
                - log_proposal(&proposal, &current, grads, active, deltas);
            if u.ln() < log_ratio {
                current = proposal;
                eval = prop_eval;
                accept_count += 1;
            }
        } else {
            current = proposal;
            eval = checked(obj, &current, it + 1)?;
            accept_count += 1;
        }
    }
    Ok(PosteriorSample {
        latents: current,
        log_joint: eval.log_joint,
        accept_count,
    })
}
