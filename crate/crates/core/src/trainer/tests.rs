use proptest::prelude::*;

use super::*;
use crate::data::{FrameShape, VisibilityMask};
use crate::diffcore::{Gradients, ParamStore};
use crate::inference::{LangevinConfig, Objective, StateSource, Want};
use crate::model::{DecoderKind, EncoderKind, ModelConfig};

fn tiny(d: usize, dn: usize, da: usize, dm: usize, frame: FrameShape) -> ModelConfig {
    ModelConfig {
        d,
        d_noise: dn,
        d_appearance: da,
        d_motion: dm,
        frame,
        transition_hidden: vec![4],
        decoder: DecoderKind::Mlp { hidden: vec![5] },
        encoder: None,
        linear_mode: false,
    }
}

fn planted_set(cfg: ModelConfig, n: usize, frames: usize, seed: u64) -> Planted {
    let mut rng = SeededRng::new(seed);
    let gen = random_generator(cfg, 1.5, &mut rng).unwrap();
    plant(gen, n, frames, 10, 0.1, &mut rng).unwrap()
}

fn quick_cfg(iterations: usize, chunk: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        langevin: LangevinConfig {
            steps: 3,
            sigma: 0.3,
            ..LangevinConfig::default()
        },
        chunk_length: chunk,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn scalar_store(x: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("x", Tensor::vector(vec![x]));
    s
}

fn scalar_grad(g: f64) -> Gradients {
    Gradients::from_params(vec![Some(Tensor::vector(vec![g]))])
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    for g in [3.0, -0.25, 1e-3] {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store, 0.01, 0.5, 0.999, 1e-8);
        adam.step(&mut store, &scalar_grad(g)).unwrap();
        let moved = store.value(store.ids().next().unwrap()).data()[0] - 1.0;
        assert!((moved - 0.01 * g.signum()).abs() < 1e-7, "{g}: {moved}");
    }
}

#[test]
fn zero_gradient_never_moves_parameters() {
    let mut store = scalar_store(0.7);
    let mut adam = Adam::new(&store, 0.1, 0.5, 0.999, 1e-8);
    for _ in 0..50 {
        adam.step(&mut store, &scalar_grad(0.0)).unwrap();
        adam.step(&mut store, &Gradients::from_params(vec![None]))
            .unwrap();
    }
    assert_eq!(store.get(store.ids().next().unwrap()).value.data(), &[0.7]);
    assert_eq!(adam.steps(), 100);
}

#[test]
fn adam_matches_scalar_oracle_on_a_quadratic() {
    // ascend f(x) = -(x - 3)^2
    let (lr, b1, b2, eps) = (0.1, 0.5, 0.999, 1e-8);
    let mut store = scalar_store(0.0);
    let mut adam = Adam::new(&store, lr, b1, b2, eps);
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let id = store.ids().next().unwrap();
        let cur = store.value(id).data()[0];
        adam.step(&mut store, &scalar_grad(-2.0 * (cur - 3.0)))
            .unwrap();

        let g = -2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        x += lr * mhat / (vhat.sqrt() + eps);
        assert!((store.value(id).data()[0] - x).abs() < 1e-14, "step {t}");
    }
}

#[test]
fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
    let mut store = scalar_store(0.5);
    let mut adam = Adam::new(&store, 0.1, 0.5, 0.999, 1e-8);
    let err = adam.step(&mut store, &scalar_grad(f64::NAN)).unwrap_err();
    assert!(err.to_string().contains("x"), "{err}");
    assert_eq!(adam.steps(), 0);
    assert_eq!(store.value(store.ids().next().unwrap()).data(), &[0.5]);
}

#[test]
fn variant_must_fit_the_model() {
    let f = FrameShape::new(1, 3, 1);
    assert!(Variant::Plain.check(&tiny(2, 2, 0, 0, f)).is_ok());
    assert!(Variant::Plain.check(&tiny(2, 2, 1, 0, f)).is_err());
    assert!(Variant::Appearance.check(&tiny(2, 2, 0, 0, f)).is_err());
    assert!(Variant::AppearanceMotion
        .check(&tiny(2, 2, 1, 1, f))
        .is_ok());
    assert!(Variant::Conditional.check(&tiny(2, 2, 1, 0, f)).is_err());
    for v in [
        Variant::Plain,
        Variant::Appearance,
        Variant::AppearanceMotion,
        Variant::Conditional,
    ] {
        assert_eq!(Variant::parse(v.name()), Some(v));
    }
}

#[test]
fn no_op_loop_passes_everything_through() {
    let cfg = tiny(2, 2, 0, 0, FrameShape::new(1, 3, 1));
    let p = planted_set(cfg.clone(), 3, 7, 1);
    let model = Model::new(cfg, &mut SeededRng::new(2)).unwrap();
    let mut tc = quick_cfg(1, 4);
    tc.langevin.steps = 0;
    tc.learning_rate = 0.0;
    let mut t = Trainer::new(model.clone(), p.dataset().unwrap(), tc, Variant::Plain).unwrap();
    let before = t.latents().to_vec();
    t.run().unwrap();
    assert_eq!(t.model().params().flatten(), model.params().flatten());
    assert_eq!(t.latents(), &before[..]);
    assert_eq!(t.metrics().len(), 1);
    assert!(t.metrics()[0].recon_err_visible.is_some());
    assert!(t.metrics()[0].recon_err_occluded.is_none());
}

#[test]
fn each_phase_touches_only_its_own_state() {
    let cfg = tiny(2, 2, 1, 1, FrameShape::new(2, 2, 1));
    let p = planted_set(cfg.clone(), 2, 9, 3);
    let model = Model::new(cfg, &mut SeededRng::new(4)).unwrap();
    let mut t = Trainer::new(
        model,
        p.dataset().unwrap(),
        quick_cfg(1, 4),
        Variant::AppearanceMotion,
    )
    .unwrap();
    for c in 0..t.num_chunks() {
        let (params, latents) = (t.param_checksum(), t.latent_checksum());
        t.infer_chunk(c).unwrap();
        assert_eq!(t.param_checksum(), params);
        assert_ne!(t.latent_checksum(), latents);
        let latents = t.latent_checksum();
        t.learn_chunk(c).unwrap();
        assert_eq!(t.latent_checksum(), latents);
        assert_ne!(t.param_checksum(), params);
    }
}

#[test]
fn chunk_at_least_as_long_as_the_sequence_is_unchunked() {
    let cfg = tiny(2, 2, 0, 0, FrameShape::new(1, 3, 1));
    let p = planted_set(cfg.clone(), 2, 6, 5);
    let model = Model::new(cfg, &mut SeededRng::new(6)).unwrap();
    let run = |chunk| {
        let mut t = Trainer::new(
            model.clone(),
            p.dataset().unwrap(),
            quick_cfg(5, chunk),
            Variant::Plain,
        )
        .unwrap();
        t.run().unwrap();
        (metrics_csv(t.metrics()), t.param_checksum())
    };
    let whole = run(6);
    assert_eq!(run(7), whole);
    assert_eq!(run(1000), whole);
    assert_ne!(run(2).0, whole.0);
}

fn masked_dataset(p: &Planted, corrupt: Option<f64>) -> Dataset {
    let mut rng = SeededRng::new(99);
    let seqs = p
        .observed
        .iter()
        .map(|x| {
            let vis: Vec<bool> = (0..x.data().len()).map(|_| rng.uniform() < 0.6).collect();
            let mask = VisibilityMask::new(x.shape(), x.frames(), vis.clone()).unwrap();
            let mut input = x.clone();
            if let Some(c) = corrupt {
                for (v, &seen) in input.data_mut().iter_mut().zip(&vis) {
                    if !seen {
                        *v = c;
                    }
                }
            }
            Sequence::new(input, Some(mask))
                .unwrap()
                .with_truth(x.clone())
                .unwrap()
        })
        .collect();
    Dataset::new(seqs).unwrap()
}

#[test]
fn occluded_pixels_never_influence_training() {
    let cfg = tiny(2, 2, 1, 0, FrameShape::new(2, 2, 1));
    let p = planted_set(cfg.clone(), 2, 8, 7);
    let model = Model::new(cfg, &mut SeededRng::new(8)).unwrap();
    let run = |corrupt| {
        let mut t = Trainer::new(
            model.clone(),
            masked_dataset(&p, corrupt),
            quick_cfg(4, 3),
            Variant::Appearance,
        )
        .unwrap();
        t.run().unwrap();
        (
            metrics_csv(t.metrics()),
            t.param_checksum(),
            t.latent_checksum(),
        )
    };
    let clean = run(None);
    assert!(clean
        .0
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(3)
        .is_some_and(|s| !s.is_empty()));
    assert_eq!(run(Some(0.9)), clean);
    assert_eq!(run(Some(-1e6)), clean);
}

#[test]
fn identical_sequences_double_the_gradient() {
    let cfg = tiny(2, 2, 1, 0, FrameShape::new(1, 3, 1));
    let p = planted_set(cfg.clone(), 1, 5, 9);
    let model = Model::new(cfg, &mut SeededRng::new(10)).unwrap();
    let one = Dataset::new(vec![Sequence::new(p.observed[0].clone(), None).unwrap()]).unwrap();
    let two = Dataset::new(vec![Sequence::new(p.observed[0].clone(), None).unwrap(); 2]).unwrap();
    let t1 = Trainer::new(model.clone(), one, quick_cfg(1, 5), Variant::Appearance).unwrap();
    let mut t2 = Trainer::new(model.clone(), two, quick_cfg(1, 5), Variant::Appearance).unwrap();
    t2.set_latents(vec![t1.latents()[0].clone(); 2]).unwrap();
    let g1 = t1.chunk_gradients(0).unwrap();
    let g2 = t2.chunk_gradients(0).unwrap();
    let mut sum = g2[0].1.param_grads.clone().unwrap();
    sum.add_params(g2[1].1.param_grads.as_ref().unwrap());
    let single = g1[0]
        .1
        .param_grads
        .as_ref()
        .unwrap()
        .flatten_params(model.params());
    let double = sum.flatten_params(model.params());
    for (a, b) in single.iter().zip(&double) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn chunked_emission_gradients_add_up_to_the_whole_sequence() {
    // with states held fixed, the emission parameters see each frame once,
    // so their gradient does not depend on where chunks are cut
    let cfg = tiny(2, 2, 0, 0, FrameShape::new(1, 3, 1));
    let p = planted_set(cfg.clone(), 1, 9, 12);
    let model = Model::new(cfg, &mut SeededRng::new(13)).unwrap();
    let data = p.dataset().unwrap();
    let mut t = Trainer::new(model.clone(), data, quick_cfg(1, 4), Variant::Plain).unwrap();
    let z = t.latents()[0].clone();
    let mut total_lj = 0.0;
    let mut total: Option<Gradients> = None;
    for c in 0..t.num_chunks() {
        let g = t.chunk_gradients(c).unwrap().remove(0).1;
        total_lj += g.log_joint;
        match total.as_mut() {
            Some(tg) => tg.add_params(g.param_grads.as_ref().unwrap()),
            None => total = g.param_grads.clone(),
        }
        // carry the boundary state without changing parameters
        t.set_carried(0, g.final_state);
    }
    let whole = Objective {
        model: &model,
        target: p.observed[0].data(),
        mask: None,
        sigma: 0.3,
        state: StateSource::Latent,
    }
    .evaluate(&z, Want::LatentsAndParams)
    .unwrap();
    // the whole-sequence run counts the s0 prior once, as does chunk 0
    assert!((whole.log_joint - total_lj).abs() < 1e-10 * whole.log_joint.abs().max(1.0));
    let store = model.params();
    let (tg, wg) = (total.unwrap(), whole.param_grads.unwrap());
    for id in store
        .ids()
        .filter(|&id| store.name(id).starts_with("emission"))
    {
        let (a, b) = (tg.param(id).unwrap(), wg.param(id).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(
                (x - y).abs() < 1e-10 * y.abs().max(1.0),
                "{}",
                store.name(id)
            );
        }
    }
}

#[test]
fn conditional_training_updates_the_encoder() {
    let mut cfg = tiny(2, 2, 1, 0, FrameShape::new(2, 2, 1));
    cfg.encoder = Some(EncoderKind::Mlp { hidden: vec![3] });
    let p = planted_set(cfg.clone(), 3, 6, 14);
    let model = Model::new(cfg, &mut SeededRng::new(15)).unwrap();
    let enc = |m: &Model| -> Vec<f64> {
        let s = m.params();
        s.ids()
            .filter(|&id| s.name(id).starts_with("encoder"))
            .flat_map(|id| s.value(id).data().to_vec())
            .collect()
    };
    let mut t = Trainer::new(
        model.clone(),
        p.dataset().unwrap(),
        quick_cfg(3, 2),
        Variant::Conditional,
    )
    .unwrap();
    t.run().unwrap();
    assert_ne!(enc(t.model()), enc(&model));
    let recon = t.reconstructions().unwrap();
    assert_eq!(recon[0].frames(), 6);
    assert_eq!(recon[0].frame(0), p.observed[0].frame(0));
}

#[test]
fn conditional_variant_needs_a_visible_first_frame() {
    let mut cfg = tiny(2, 2, 1, 0, FrameShape::new(1, 2, 1));
    cfg.encoder = Some(EncoderKind::Mlp { hidden: vec![] });
    let p = planted_set(cfg.clone(), 1, 3, 16);
    let mut vis = vec![true; 6];
    vis[1] = false;
    let mask = VisibilityMask::new(FrameShape::new(1, 2, 1), 3, vis).unwrap();
    let data = Dataset::new(vec![
        Sequence::new(p.observed[0].clone(), Some(mask)).unwrap()
    ])
    .unwrap();
    let model = Model::new(cfg, &mut SeededRng::new(1)).unwrap();
    assert!(Trainer::new(model, data, quick_cfg(1, 2), Variant::Conditional).is_err());
}

#[test]
fn dataset_rejects_mixed_shapes_and_empty_input() {
    let a = FrameSequence::zeros(FrameShape::new(1, 2, 1), 3);
    let b = FrameSequence::zeros(FrameShape::new(2, 1, 1), 3);
    assert!(Dataset::new(vec![]).is_err());
    let mixed = vec![
        Sequence::new(a, None).unwrap(),
        Sequence::new(b, None).unwrap(),
    ];
    assert!(Dataset::new(mixed).is_err());
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            chunk_length: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn metrics_csv_leaves_missing_values_empty() {
    let rows = [MetricsRow {
        iter: 1,
        log_joint: -2.5,
        recon_err_visible: Some(3.0),
        recon_err_occluded: None,
        wallclock_ms: None,
    }];
    assert_eq!(
        metrics_csv(&rows),
        format!("{METRICS_HEADER}\n1,-2.5,3,,\n")
    );
}

fn enc_model(seed: u64, zero: bool) -> Model {
    let mut cfg = tiny(3, 2, 2, 0, FrameShape::new(2, 2, 1));
    cfg.encoder = Some(EncoderKind::Mlp { hidden: vec![4] });
    let model = Model::new(cfg.clone(), &mut SeededRng::new(seed)).unwrap();
    if !zero {
        return model;
    }
    let mut m = model;
    let ids: Vec<_> = m
        .params()
        .ids()
        .filter(|&id| m.params().name(id).starts_with("encoder"))
        .collect();
    for id in ids {
        m.params_mut().get_mut(id).value.fill(0.0);
    }
    m
}

#[test]
fn animation_is_seeded() {
    let m = enc_model(1, false);
    let x0 = [0.1, -0.2, 0.3, 0.0];
    let a = animate(&m, &x0, 5, &mut SeededRng::new(3)).unwrap();
    assert_eq!(a, animate(&m, &x0, 5, &mut SeededRng::new(3)).unwrap());
    assert_ne!(a, animate(&m, &x0, 5, &mut SeededRng::new(4)).unwrap());
    let plain = Model::new(
        tiny(3, 2, 2, 0, FrameShape::new(2, 2, 1)),
        &mut SeededRng::new(1),
    )
    .unwrap();
    assert!(animate(&plain, &x0, 5, &mut SeededRng::new(3)).is_err());
}

#[test]
fn zero_encoder_animates_from_the_origin() {
    let m = enc_model(2, true);
    let got = animate(&m, &[0.5; 4], 4, &mut SeededRng::new(6)).unwrap();
    let mut xi = Tensor::zeros(&[4, 2]);
    SeededRng::new(6).fill_normal(xi.data_mut());
    let z = LatentTrajectory {
        s0: Tensor::zeros(&[3]),
        xi,
        a: Some(Tensor::zeros(&[2])),
        m: None,
    };
    assert_eq!(got, m.rollout(&z).unwrap());
}

fn interp_setup() -> (Model, LatentTrajectory) {
    let m = Model::new(
        tiny(3, 2, 2, 0, FrameShape::new(2, 2, 1)),
        &mut SeededRng::new(5),
    )
    .unwrap();
    let z = LatentTrajectory::sample_prior(m.latent_dims(), 4, &mut SeededRng::new(6));
    (m, z)
}

#[test]
fn two_step_interpolation_gives_the_endpoints() {
    let (m, z) = interp_setup();
    let a1 = Tensor::vector(vec![0.3, -1.1]);
    let a2 = Tensor::vector(vec![-0.7, 0.4]);
    let out = interpolate_appearance(&m, &z, &a1, &a2, 2).unwrap();
    let direct = |a: &Tensor| {
        m.rollout(&LatentTrajectory {
            a: Some(a.clone()),
            ..z.clone()
        })
        .unwrap()
    };
    assert_eq!(out, vec![direct(&a1), direct(&a2)]);
}

#[test]
fn interpolation_between_equal_vectors_is_constant() {
    let (m, z) = interp_setup();
    let a = Tensor::vector(vec![0.2, 0.9]);
    let out = interpolate_appearance(&m, &z, &a, &a, 5).unwrap();
    assert!(out.iter().all(|x| *x == out[0]));
}

#[test]
fn midpoint_of_opposite_vectors_is_the_zero_appearance() {
    let (m, z) = interp_setup();
    let a = Tensor::vector(vec![0.37, -1.3]);
    let neg = Tensor::vector(vec![-0.37, 1.3]);
    let out = interpolate_appearance(&m, &z, &a, &neg, 3).unwrap();
    let zero = m
        .rollout(&LatentTrajectory {
            a: Some(Tensor::zeros(&[2])),
            ..z.clone()
        })
        .unwrap();
    assert_eq!(out[1], zero);
    assert!(interpolate_appearance(&m, &z, &a, &Tensor::vector(vec![1.0]), 3).is_err());
}

#[test]
fn planted_data_stays_in_range() {
    let p = planted_set(tiny(2, 2, 0, 0, FrameShape::new(2, 2, 1)), 3, 5, 17);
    assert!(p.observed.iter().all(FrameSequence::in_unit_range));
    let mut rng = SeededRng::new(18);
    let lin = random_linear_generator(2, 2, FrameShape::new(4, 4, 1), 0.9, &mut rng).unwrap();
    let q = plant(lin, 2, 30, 20, 0.0, &mut rng).unwrap();
    assert!(q.clean.iter().all(FrameSequence::in_unit_range));
    assert_eq!(q.observed, q.clean);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adam_step_respects_the_moment_bound(
        grads in proptest::collection::vec(-1e3f64..1e3, 1..20),
        lr in 1e-4f64..0.1,
    ) {
        // Cauchy-Schwarz on m_t = (1 - b1) sum_k b1^k g_{t-k} against
        // v_t = (1 - b2) sum_k b2^k g_{t-k}^2 bounds |mhat| / sqrt(vhat)
        let (b1, b2) = (0.5f64, 0.999f64);
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, lr, b1, b2, 1e-8);
        let id = store.ids().next().unwrap();
        for (t, g) in grads.into_iter().enumerate() {
            let t = t as i32 + 1;
            let geo: f64 = (0..t).map(|k| (b1 * b1 / b2).powi(k)).sum();
            let bound = lr * (1.0 - b1) / (1.0 - b1.powi(t)) * geo.sqrt() * ((1.0 - b2.powi(t)) / (1.0 - b2)).sqrt();
            let before = store.value(id).data()[0];
            adam.step(&mut store, &scalar_grad(g)).unwrap();
            prop_assert!((store.value(id).data()[0] - before).abs() <= bound * (1.0 + 1e-12));
        }
    }
}

#[test]
fn damping_innovation_weights_equals_scaling_the_innovations() {
    let cfg = tiny(3, 2, 1, 1, FrameShape::new(2, 2, 1));
    let mut rng = SeededRng::new(20);
    let gen = random_generator(cfg, 1.0, &mut rng).unwrap();
    let z = LatentTrajectory::sample_prior(gen.latent_dims(), 4, &mut rng);
    let mut damped = gen.clone();
    damp_innovations(&mut damped, 0.25).unwrap();
    let mut zs = z.clone();
    zs.xi.data_mut().iter_mut().for_each(|v| *v *= 0.25);
    let (a, b) = (damped.rollout(&z).unwrap(), gen.rollout(&zs).unwrap());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-14);
    }
}
