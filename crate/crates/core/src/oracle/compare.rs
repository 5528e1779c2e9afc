//! Long-run Langevin moments against the exact smoother on a linear model.

use rayon::prelude::*;

use super::linear::{kalman_smoother, LinearSSM};
use crate::data::FrameSequence;
use crate::diffcore::SeededRng;
use crate::error::Result;
use crate::inference::{langevin_step, LangevinConfig, Objective, StateSource, Want};
use crate::model::LatentTrajectory;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompareConfig {
    pub delta: f64,
    pub burn_in: usize,
    pub steps: usize,
    /// Independent chains, each started from a prior draw.
    pub chains: usize,
    pub mh_correct: bool,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub rmse_mean: f64,
    /// Largest `|var_langevin / var_exact - 1|` over latent coordinates.
    pub max_var_rel_err: f64,
    pub langevin_mean: Vec<f64>,
    pub langevin_var: Vec<f64>,
    pub exact_mean: Vec<f64>,
    pub exact_var: Vec<f64>,
    pub accept_rate: f64,
    /// Chains stopped because the log joint became non-finite. Any
    /// divergence makes both error figures infinite.
    pub diverged_chains: usize,
}

struct ChainMoments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
    accepted: usize,
    diverged: bool,
}

fn run_chain(
    model: &crate::model::Model,
    x: &FrameSequence,
    cfg: &CompareConfig,
    sigma: f64,
    mut rng: SeededRng,
) -> Result<ChainMoments> {
    let obj = Objective {
        model,
        target: x.data(),
        mask: None,
        sigma,
        state: StateSource::Latent,
    };
    let lcfg = LangevinConfig {
        delta: cfg.delta,
        steps: 1,
        sigma,
        mh_correct: cfg.mh_correct,
        ..Default::default()
    };
    let mut z = LatentTrajectory::sample_prior(model.latent_dims(), x.frames(), &mut rng);
    let n = z.num_scalars();
    let mut m = ChainMoments {
        sum: vec![0.0; n],
        sum_sq: vec![0.0; n],
        count: 0,
        accepted: 0,
        diverged: false,
    };
    let active = obj.active();
    let mut eval = obj.evaluate(&z, Want::Latents)?;
    for it in 0..cfg.burn_in + cfg.steps {
        if cfg.mh_correct {
            let s = crate::inference::langevin_run(&z, &obj, &lcfg, &mut rng)?;
            m.accepted += s.accept_count;
            z = s.latents;
        } else {
            let grads = eval.latent_grads.as_ref().expect("requested");
            z = langevin_step(&z, grads, active, &lcfg, &mut rng);
            eval = obj.evaluate(&z, Want::Latents)?;
            if !eval.log_joint.is_finite() {
                m.diverged = true;
                break;
            }
            m.accepted += 1;
        }
        if it >= cfg.burn_in {
            let values = z.blocks().into_iter().flat_map(|b| b.data().iter());
            for ((s, q), &v) in m.sum.iter_mut().zip(m.sum_sq.iter_mut()).zip(values) {
                *s += v;
                *q += v * v;
            }
            m.count += 1;
        }
    }
    Ok(m)
}

/// Pools post-burn-in samples of `cfg.chains` chains (chain `k` uses
/// `rng.fork(k)`) and compares their moments with the smoother.
pub fn langevin_vs_kalman(
    ssm: &LinearSSM,
    x: &FrameSequence,
    cfg: &CompareConfig,
    rng: &SeededRng,
) -> Result<CompareReport> {
    let model = ssm.to_model()?;
    let exact = kalman_smoother(ssm, x)?;
    let chains: Vec<ChainMoments> = (0..cfg.chains)
        .into_par_iter()
        .map(|k| run_chain(&model, x, cfg, ssm.sigma, rng.fork(k as u64)))
        .collect::<Result<_>>()?;
    let n = exact.mean.num_scalars();
    let (mut sum, mut sum_sq, mut count, mut accepted) =
        (vec![0.0; n], vec![0.0; n], 0usize, 0usize);
    let diverged_chains = chains.iter().filter(|c| c.diverged).count();
    for c in &chains {
        for i in 0..n {
            sum[i] += c.sum[i];
            sum_sq[i] += c.sum_sq[i];
        }
        count += c.count;
        accepted += c.accepted;
    }
    let cnt = count.max(1) as f64;
    let langevin_mean: Vec<f64> = sum.iter().map(|s| s / cnt).collect();
    let langevin_var: Vec<f64> = sum_sq
        .iter()
        .zip(&langevin_mean)
        .map(|(q, m)| q / cnt - m * m)
        .collect();
    let exact_mean = exact.mean.flatten();
    let exact_var = exact.variances();
    let mut rmse_mean = (langevin_mean
        .iter()
        .zip(&exact_mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let mut max_var_rel_err = langevin_var
        .iter()
        .zip(&exact_var)
        .map(|(a, b)| (a / b - 1.0).abs())
        .fold(0.0, f64::max);
    if diverged_chains > 0 {
        rmse_mean = f64::INFINITY;
        max_var_rel_err = f64::INFINITY;
    }
    let total_steps = (cfg.chains * (cfg.burn_in + cfg.steps)).max(1) as f64;
    Ok(CompareReport {
        rmse_mean,
        max_var_rel_err,
        langevin_mean,
        langevin_var,
        exact_mean,
        exact_var,
        accept_rate: accepted as f64 / total_steps,
        diverged_chains,
    })
}
