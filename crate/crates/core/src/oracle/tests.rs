use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::*;
use crate::data::{FrameSequence, FrameShape};
use crate::diffcore::SeededRng;

fn obs(values: Vec<f64>, dim: usize) -> FrameSequence {
    let t = values.len() / dim;
    FrameSequence::new(FrameShape::new(1, dim, 1), t, values).unwrap()
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

#[test]
fn uninformative_observations_return_the_prior() {
    let mut rng = SeededRng::new(1);
    let mut ssm = LinearSSM::random_stable(2, 2, 3, 0.5, 0.8, &mut rng);
    ssm.c = DMatrix::zeros(3, 2);
    let (_, x) = ssm.sample(4, &mut rng);
    let post = kalman_smoother(&ssm, &x).unwrap();
    assert!(post.mean.flatten().iter().all(|v| v.abs() < 1e-12));
    assert!((&post.cov_s0 - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    for c in &post.cov_xi {
        assert!((c - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }
}

#[test]
fn scalar_case_matches_closed_form() {
    let (a, b, c, sigma, x) = (0.6, 1.3, -0.8, 0.4, 0.9);
    let ssm = LinearSSM::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, b),
        DMatrix::from_element(1, 1, c),
        sigma,
    )
    .unwrap();
    let post = kalman_smoother(&ssm, &obs(vec![x], 1)).unwrap();
    // x = h . (s0, xi) + noise with h = (c a, c b); Sherman–Morrison gives the
    // posterior covariance I - h h^T / (sigma^2 + |h|^2).
    let h = [c * a, c * b];
    let denom = sigma * sigma + h[0] * h[0] + h[1] * h[1];
    let mean = [h[0] * x / denom, h[1] * x / denom];
    assert!((post.mean.s0.data()[0] - mean[0]).abs() < 1e-12);
    assert!((post.mean.xi.data()[0] - mean[1]).abs() < 1e-12);
    assert!((post.cov_s0[(0, 0)] - (1.0 - h[0] * h[0] / denom)).abs() < 1e-12);
    assert!((post.cov_xi[0][(0, 0)] - (1.0 - h[1] * h[1] / denom)).abs() < 1e-12);
}

#[test]
fn smoother_agrees_with_dense_solve() {
    let mut rng = SeededRng::new(7);
    for case in 0..20 {
        let d = 1 + case % 3;
        let dn = 1 + case % 2;
        let obs_dim = 1 + case % 4;
        let t = 1 + (case * 7) % 9;
        if d + t * dn > DENSE_LATENT_CAP {
            continue;
        }
        let ssm = LinearSSM::random_stable(d, dn, obs_dim, 0.3 + rng.uniform(), 0.9, &mut rng);
        let (_, x) = ssm.sample(t, &mut rng);
        let k = kalman_smoother(&ssm, &x).unwrap();
        let e = dense_posterior(&ssm, &x).unwrap();
        assert!(
            rel_close(&k.mean.flatten(), &e.mean.flatten(), 1e-8),
            "case {case}"
        );
        assert!(
            rel_close(&k.variances(), &e.variances(), 1e-8),
            "case {case}"
        );
        for (a, b) in k.cov_xi.iter().zip(&e.cov_xi) {
            assert!((a - b).amax() < 1e-8);
        }
    }
}

#[test]
fn smoother_handles_singular_transition() {
    let mut rng = SeededRng::new(2);
    let mut ssm = LinearSSM::random_stable(2, 2, 3, 0.5, 0.8, &mut rng);
    ssm.a = DMatrix::zeros(2, 2);
    let (_, x) = ssm.sample(5, &mut rng);
    let k = kalman_smoother(&ssm, &x).unwrap();
    let e = dense_posterior(&ssm, &x).unwrap();
    assert!(rel_close(&k.mean.flatten(), &e.mean.flatten(), 1e-8));
    assert!(rel_close(&k.variances(), &e.variances(), 1e-8));
}

#[test]
fn dense_solve_is_capped() {
    let mut rng = SeededRng::new(3);
    let ssm = LinearSSM::random_stable(2, 3, 2, 0.5, 0.8, &mut rng);
    let (_, x) = ssm.sample(20, &mut rng);
    assert!(dense_posterior(&ssm, &x).is_err());
    assert!(kalman_smoother(&ssm, &x).is_ok());
}

#[test]
fn linear_mode_model_reproduces_the_recursion() {
    let mut rng = SeededRng::new(5);
    let ssm = LinearSSM::random_stable(2, 2, 3, 0.5, 0.8, &mut rng);
    let model = ssm.to_model().unwrap();
    let z = crate::model::LatentTrajectory::sample_prior(model.latent_dims(), 6, &mut rng);
    let x = model.rollout(&z).unwrap();
    let mut s = DVector::from_column_slice(z.s0.data());
    for t in 0..6 {
        s = &ssm.a * s + &ssm.b * DVector::from_column_slice(z.xi.row(t));
        let want = &ssm.c * &s;
        assert!(rel_close(x.frame(t), want.as_slice(), 1e-14));
    }
}

#[test]
fn short_langevin_comparison_runs_and_is_reproducible() {
    let mut rng = SeededRng::new(8);
    let ssm = LinearSSM::random_stable(1, 1, 2, 0.5, 0.7, &mut rng);
    let (_, x) = ssm.sample(3, &mut rng);
    let cfg = CompareConfig {
        delta: 0.05,
        burn_in: 200,
        steps: 2000,
        chains: 4,
        mh_correct: false,
    };
    let r1 = langevin_vs_kalman(&ssm, &x, &cfg, &SeededRng::new(1)).unwrap();
    let r2 = langevin_vs_kalman(&ssm, &x, &cfg, &SeededRng::new(1)).unwrap();
    assert_eq!(r1.langevin_mean, r2.langevin_mean);
    assert!(r1.rmse_mean < 0.2, "{r1:?}");
}

fn rotation_sequence() -> FrameSequence {
    // states go once around a circle, so they average to zero and follow
    // s_{t+1} = R s_t exactly
    let t_len = 8;
    let theta = std::f64::consts::PI / 4.0;
    let c = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, -0.5]).scale(0.3);
    let mut data = Vec::new();
    for t in 0..t_len {
        let s = DVector::from_vec(vec![(theta * t as f64).cos(), (theta * t as f64).sin()]);
        data.extend((&c * s).iter());
    }
    obs(data, 3)
}

#[test]
fn exact_ar1_data_has_zero_residuals() {
    let lds = lds_fit(&rotation_sequence(), 2).unwrap();
    assert!(lds.residuals.amax() < 1e-10);
    let ctc = lds.c.transpose() * &lds.c;
    assert!((ctc - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
}

#[test]
fn constant_sequence_gives_zero_transition() {
    let x = obs(vec![0.25; 12], 3);
    let lds = lds_fit(&x, 2).unwrap();
    assert_eq!(lds.a, DMatrix::zeros(2, 2));
    assert!(lds.states.amax() < 1e-15);
}

#[test]
fn too_few_frames_is_a_rank_error() {
    let x = obs(vec![0.1; 9], 3);
    assert!(matches!(lds_fit(&x, 3), Err(crate::Error::Rank(_))));
}

#[test]
fn truncation_error_equals_tail_singular_energy() {
    let mut rng = SeededRng::new(4);
    let (dim, t_len, d) = (6, 10, 3);
    let data: Vec<f64> = (0..dim * t_len).map(|_| rng.normal()).collect();
    let x = obs(data, dim);
    let lds = lds_fit(&x, d).unwrap();
    let recon = lds.reconstruction();
    let err: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    // independent route: eigenvalues of the centered Gram matrix
    let y = DMatrix::from_fn(dim, t_len, |i, t| x.frame(t)[i]);
    let mean = y.column_mean();
    let mut yc = y;
    for mut col in yc.column_iter_mut() {
        col -= &mean;
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(&yc * yc.transpose())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let tail: f64 = eig[d..].iter().sum();
    assert!((err - tail).abs() < 1e-9 * tail.max(1.0), "{err} vs {tail}");
}

#[test]
fn rollout_with_fitted_residuals_reproduces_projection() {
    let mut rng = SeededRng::new(6);
    let data: Vec<f64> = (0..5 * 12).map(|_| rng.normal()).collect();
    let x = obs(data, 5);
    let lds = lds_fit(&x, 2).unwrap();
    let first = lds.states.column(0).into_owned();
    let replay = lds.rollout(&first, &lds.residuals);
    let recon = lds.reconstruction();
    assert!(rel_close(replay.data(), recon.data(), 1e-8));
}

#[test]
fn zero_innovations_stay_at_the_mean_frame() {
    let mut lds = lds_fit(&rotation_sequence(), 2).unwrap();
    lds.innovation_cov = DMatrix::zeros(2, 2);
    let x = lds_synthesize(&lds, 50, &mut SeededRng::new(1));
    for t in 0..50 {
        assert!(rel_close(x.frame(t), lds.mean.as_slice(), 1e-15));
    }
}

#[test]
fn synthesis_is_seeded_and_stable() {
    let mut rng = SeededRng::new(9);
    let data: Vec<f64> = (0..4 * 20).map(|_| rng.normal()).collect();
    let mut lds = lds_fit(&obs(data, 4), 3).unwrap();
    let a1 = lds_synthesize(&lds, 30, &mut SeededRng::new(2));
    assert_eq!(a1, lds_synthesize(&lds, 30, &mut SeededRng::new(2)));

    let a = DMatrix::from_fn(3, 3, |_, _| rng.normal());
    let norm = a.clone().svd(false, false).singular_values.max();
    lds.a = a.scale(0.9 / norm);
    let x = lds_synthesize(&lds, 10_000, &mut SeededRng::new(3));
    let bound = 50.0 * lds.innovation_cov.trace().sqrt() / (1.0 - 0.9);
    for t in 0..10_000 {
        let f = DVector::from_column_slice(x.frame(t)) - &lds.mean;
        assert!((lds.c.transpose() * f).norm() < bound);
    }
}

#[test]
fn random_instances_pass_and_corruption_fails() {
    for case in 0..12 {
        let r = gradcheck_instance(3, case, None, false).unwrap();
        assert!(r.max_rel_err < 1e-6, "case {case}: {r:?}");
    }
    let r = gradcheck_instance(3, 0, None, true).unwrap();
    assert!(r.max_rel_err > 1e-3);
}

#[test]
fn instances_respect_the_size_limits() {
    let mut rng = SeededRng::new(1);
    for case in 0..200 {
        let i = random_instance(&mut rng, case, None);
        let c = &i.config;
        assert!(
            (1..=4).contains(&c.d) && (1..=3).contains(&c.d_noise) && (1..=6).contains(&i.frames)
        );
        assert!(c.frame.height <= 4 && c.frame.width <= 4 && c.frame.channels == 1);
        c.validate().unwrap();
        i.variant.check(c).unwrap();
    }
}

#[test]
fn conditioned_model_has_the_requested_geometry() {
    let mut rng = SeededRng::new(4);
    let ssm = LinearSSM::random_conditioned(2, 2, 3, 0.5, 0.8, 2.0, &mut rng);
    let s = ssm.a.clone().svd(false, false).singular_values;
    assert!((s.max() - 0.8).abs() < 1e-12);
    assert!((ssm.b.transpose() * &ssm.b - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    assert!(
        (ssm.c.transpose() * &ssm.c - DMatrix::<f64>::identity(2, 2).scale(4.0)).amax() < 1e-12
    );
}

#[test]
fn coarse_steps_are_reported_as_divergence() {
    let mut rng = SeededRng::new(5);
    let ssm = LinearSSM::random_conditioned(2, 2, 3, 0.5, 0.8, 2.0, &mut rng);
    let (_, x) = ssm.sample(10, &mut rng);
    let cfg = CompareConfig {
        delta: 0.5,
        burn_in: 50,
        steps: 200,
        chains: 2,
        mh_correct: false,
    };
    let r = langevin_vs_kalman(&ssm, &x, &cfg, &SeededRng::new(1)).unwrap();
    assert_eq!(r.diverged_chains, 2);
    assert!(r.rmse_mean.is_infinite());
}
