use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::oracle::fd_gradcheck;

fn randn(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor {
    standard_normal(rng, shape).map(|v| v * scale)
}

/// Checks every input and parameter gradient of `build` (which must return a
/// scalar) against central differences.
fn check_primitive<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let v = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        let gi: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (v, gi, grads.flatten_params(store))
    };
    let (_, gin, gpar) = eval(store, inputs);
    let mut worst: f64 = 0.0;

    let flat_params = store.flatten();
    let mut scratch = store.clone();
    let r = fd_gradcheck(
        |p: &[f64]| {
            scratch.assign_flat(p).unwrap();
            Ok(eval(&scratch, inputs).0)
        },
        &flat_params,
        &gpar,
        1e-5,
    )
    .unwrap();
    worst = worst.max(r.max_rel_err);

    for (k, t) in inputs.iter().enumerate() {
        let r = fd_gradcheck(
            |x: &[f64]| {
                let mut ins = inputs.to_vec();
                ins[k] = Tensor::new(t.shape(), x.to_vec()).unwrap();
                Ok(eval(store, &ins).0)
            },
            t.data(),
            gin[k].data(),
            1e-5,
        )
        .unwrap();
        worst = worst.max(r.max_rel_err);
    }
    worst
}

#[test]
fn affine_zero_weights_give_zero() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[2, 3]));
    let b = store.add("b", Tensor::zeros(&[2]));
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::vector(vec![1.0, -2.0, 5.0]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn affine_identity_passes_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::identity(3));
    let b = store.add("b", Tensor::zeros(&[3]));
    let mut g = Graph::new(&store);
    let v = Tensor::vector(vec![0.3, -1.1, 2.0]);
    let x = g.input(v.clone());
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y), &v);
}

#[test]
fn affine_matches_double_loop() {
    let mut rng = SeededRng::new(11);
    let wt = randn(&mut rng, &[3, 2], 1.0);
    let bt = randn(&mut rng, &[3], 1.0);
    let xt = randn(&mut rng, &[2], 1.0);
    let mut expect = [0.0; 3];
    for j in 0..3 {
        expect[j] = bt.data()[j];
        for i in 0..2 {
            expect[j] += wt.data()[j * 2 + i] * xt.data()[i];
        }
    }
    let mut store = ParamStore::new();
    let w = store.add("w", wt);
    let b = store.add("b", bt);
    let mut g = Graph::new(&store);
    let x = g.input(xt);
    let y = g.affine(x, w, b).unwrap();
    for j in 0..3 {
        assert!((g.value(y).data()[j] - expect[j]).abs() < 1e-14);
    }
}

#[test]
fn affine_shape_mismatch_names_operands() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[2, 3]));
    let b = store.add("b", Tensor::zeros(&[2]));
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros(&[4]));
    let err = g.affine(x, w, b).unwrap_err();
    match err {
        Error::Dimension { op, detail } => {
            assert_eq!(op, "affine");
            assert!(
                detail.contains("[4]") && detail.contains("[2, 3]"),
                "{detail}"
            );
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn activations() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::vector(vec![0.0, -1.5, 40.0, -40.0]));
    let t = g.activation(x, Activation::Tanh);
    let r = g.activation(x, Activation::Relu);
    assert_eq!(g.value(t).data()[0], 0.0);
    assert!((g.value(t).data()[2] - 1.0).abs() < 1e-12);
    assert!((g.value(t).data()[3] + 1.0).abs() < 1e-12);
    assert_eq!(g.value(r).data()[1], 0.0);
    assert_eq!(g.value(r).data()[2], 40.0);
}

#[test]
fn conv_transpose_zero_kernel_gives_bias() {
    let mut store = ParamStore::new();
    let k = store.add("k", Tensor::zeros(&[4, 4, 1, 1]));
    let b = store.add("b", Tensor::vector(vec![0.25]));
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::new(&[1, 1, 1], vec![3.0]).unwrap());
    let y = g.conv_transpose2d(x, k, b, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.25));
}

/// Independent scatter-add: every input pixel stamps the kernel onto the
/// output at `stride * position - pad`.
fn scatter_add_oracle(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let oh = (h - 1) * stride + ks - 2 * pad;
    let ow = (w - 1) * stride + ks - 2 * pad;
    let mut full = vec![0.0; (oh + 2 * pad) * (ow + 2 * pad) * cout];
    let fw = ow + 2 * pad;
    for iy in 0..h {
        for ix in 0..w {
            for ci in 0..cin {
                let v = x.data()[(iy * w + ix) * cin + ci];
                for ky in 0..ks {
                    for kx in 0..ks {
                        for co in 0..cout {
                            let kv = k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                            full[((iy * stride + ky) * fw + ix * stride + kx) * cout + co] +=
                                v * kv;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                out.push(full[((oy + pad) * fw + ox + pad) * cout + co] + bias.data()[co]);
            }
        }
    }
    Tensor::new(&[oh, ow, cout], out).unwrap()
}

#[test]
fn conv_transpose_matches_scatter_add() {
    let mut rng = SeededRng::new(5);
    for (h, w, cin, cout) in [(1, 1, 1, 1), (2, 3, 2, 3), (3, 2, 3, 1)] {
        let kt = randn(&mut rng, &[4, 4, cin, cout], 1.0);
        let bt = randn(&mut rng, &[cout], 1.0);
        let mut xt = Tensor::zeros(&[h, w, cin]);
        if h == 1 {
            xt.data_mut()[0] = 1.0; // delta input
        } else {
            xt = randn(&mut rng, &[h, w, cin], 1.0);
        }
        let expect = scatter_add_oracle(&xt, &kt, &bt, 2, 1);
        let mut store = ParamStore::new();
        let k = store.add("k", kt);
        let b = store.add("b", bt);
        let mut g = Graph::new(&store);
        let x = g.input(xt);
        let y = g.conv_transpose2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv_transpose_channel_mismatch() {
    let mut store = ParamStore::new();
    let k = store.add("k", Tensor::zeros(&[4, 4, 2, 1]));
    let b = store.add("b", Tensor::zeros(&[1]));
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros(&[2, 2, 3]));
    assert!(matches!(
        g.conv_transpose2d(x, k, b, 2, 1),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn conv_transpose_input_gradient_of_sum() {
    let mut rng = SeededRng::new(6);
    let mut store = ParamStore::new();
    let k = store.add("k", randn(&mut rng, &[4, 4, 2, 3], 1.0));
    let b = store.add("b", randn(&mut rng, &[3], 1.0));
    let xt = randn(&mut rng, &[3, 2, 2], 1.0);
    let err = check_primitive(&store, &[xt], |g, v| {
        let y = g.conv_transpose2d(v[0], k, b, 2, 1).unwrap();
        let t = g.tanh(y);
        g.sum(t)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_of_linear_form() {
    let xs = vec![0.5, -2.0, 3.0];
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap());
    let b = store.add("b", Tensor::zeros(&[1]));
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::vector(xs.clone()));
    let y = g.affine(x, w, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), xs.as_slice());
    assert!(grads.wrt(x).is_none());
}

#[test]
fn tanh_squared_is_stationary_at_zero() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let w = g.input(Tensor::vector(vec![0.0]));
    let t = g.tanh(w);
    let l = g.sum_squares(t);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[0.0]);
}

#[test]
fn second_backward_is_a_state_error() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let w = g.input(Tensor::vector(vec![1.0]));
    let l = g.sum_squares(w);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::State(_))));
}

#[test]
fn accumulate_into_param_grads() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
    let b = store.add("b", Tensor::zeros(&[1]));
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::vector(vec![2.0, 3.0]));
            let y = g.affine(x, w, b).unwrap();
            g.backward(y).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.get(w).grad.data(), &[4.0, 6.0]);
    store.reset_grads();
    assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
}

fn mlp_store(rng: &mut SeededRng) -> (ParamStore, [ParamId; 4]) {
    let mut store = ParamStore::new();
    let w1 = store.add("w1", randn(rng, &[5, 3], 0.7));
    let b1 = store.add("b1", randn(rng, &[5], 0.3));
    let w2 = store.add("w2", randn(rng, &[2, 5], 0.7));
    let b2 = store.add("b2", randn(rng, &[2], 0.3));
    (store, [w1, b1, w2, b2])
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = SeededRng::new(21);
    for _ in 0..10 {
        let (store, [w1, b1, w2, b2]) = mlp_store(&mut rng);
        let xt = randn(&mut rng, &[4, 3], 1.0);
        let target: Vec<f64> = randn(&mut rng, &[8], 1.0).into_data();
        let err = check_primitive(&store, &[xt], |g, v| {
            let h = g.affine(v[0], w1, b1).unwrap();
            let h = g.tanh(h);
            let y = g.affine(h, w2, b2).unwrap();
            g.masked_sse(y, &target, None).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = SeededRng::new(1234);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut rng, &[3, 4], 0.8));
        let b = store.add("b", randn(&mut rng, &[3], 0.5));
        let sc = store.add("scale", randn(&mut rng, &[3], 1.0));
        let sh = store.add("shift", randn(&mut rng, &[3], 0.5));
        let k = store.add("k", randn(&mut rng, &[4, 4, 3, 2], 0.5));
        let kb = store.add("kb", randn(&mut rng, &[2], 0.5));
        let ck = store.add("ck", randn(&mut rng, &[3, 3, 2, 2], 0.5));
        let cb = store.add("cb", randn(&mut rng, &[2], 0.5));
        let a = randn(&mut rng, &[2, 4], 1.0);
        let v = randn(&mut rng, &[2], 1.0);
        let target: Vec<f64> = randn(&mut rng, &[2 * 8 * 2], 1.0).into_data();
        let mask: Vec<bool> = (0..target.len()).map(|i| (i + trial) % 3 != 0).collect();
        let err = check_primitive(&store, &[a, v], |g, x| {
            let h = g.affine(x[0], w, b).unwrap(); // [2, 3]
            let h = g.scale_shift(h, sc, sh).unwrap();
            let h = g.activation(h, Activation::Tanh);
            let c = g.concat(&[h, x[1]]).unwrap(); // [2, 5]
            let r0 = g.row(c, 0).unwrap();
            let r1 = g.row(c, 1).unwrap();
            let s = g.stack(&[r1, r0]).unwrap();
            let s = g.slice_last(s, 1, 3).unwrap(); // [2, 3]
            let s = g.scale(s, 0.7);
            let s = g.add(s, h).unwrap();
            let img = g.reshape(s, &[2, 1, 1, 3]).unwrap();
            let up = g.conv_transpose2d(img, k, kb, 2, 1).unwrap(); // [2, 2, 2, 2]
            let up = g.activation(up, Activation::Tanh);
            let big = g.reshape(up, &[2, 2, 2, 2]).unwrap();
            let cv = g.conv2d(big, ck, cb, 1, 1).unwrap(); // [2, 2, 2, 2]
            let flat = g.reshape(cv, &[2, 8]).unwrap();
            let y = g.concat(&[flat, flat]).unwrap(); // [2, 16]
            let sse = g.masked_sse(y, &target, Some(&mask)).unwrap();
            let sq = g.sum_squares(x[1]);
            let l = g.add(sse, sq).unwrap();
            l
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = SeededRng::new(77);
    let (store, [w1, b1, w2, b2]) = mlp_store(&mut rng);
    let xt = randn(&mut rng, &[3], 1.0);
    let t1: Vec<f64> = randn(&mut rng, &[2], 1.0).into_data();
    let t2: Vec<f64> = randn(&mut rng, &[2], 1.0).into_data();
    let run = |which: u8| {
        let mut g = Graph::new(&store);
        let x = g.input(xt.clone());
        let h = g.affine(x, w1, b1).unwrap();
        let h = g.tanh(h);
        let y = g.affine(h, w2, b2).unwrap();
        let l1 = g.masked_sse(y, &t1, None).unwrap();
        let l2 = g.masked_sse(y, &t2, None).unwrap();
        let l = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        let grads = g.backward(l).unwrap();
        let mut v = grads.flatten_params(&store);
        v.extend_from_slice(grads.wrt(x).unwrap().data());
        v
    };
    let (g1, g2, g12) = (run(1), run(2), run(0));
    for i in 0..g12.len() {
        assert!((g12[i] - (g1[i] + g2[i])).abs() < 1e-12);
    }
}

#[test]
fn pipelines_are_deterministic() {
    let run = || {
        let mut rng = SeededRng::new(99);
        let (store, [w1, b1, w2, b2]) = mlp_store(&mut rng);
        let xt = standard_normal(&mut rng, &[6, 3]);
        let mut g = Graph::new(&store);
        let x = g.input(xt);
        let h = g.affine(x, w1, b1).unwrap();
        let h = g.activation(h, Activation::Relu);
        let y = g.affine(h, w2, b2).unwrap();
        let l = g.sum_squares(y);
        let grads = g.backward(l).unwrap();
        (g.value(y).clone(), grads.flatten_params(&store))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn conv_transpose_doubles_spatial_size(h in 1usize..7, w in 1usize..7, cin in 1usize..3, cout in 1usize..3) {
        let mut store = ParamStore::new();
        let k = store.add("k", Tensor::zeros(&[4, 4, cin, cout]));
        let b = store.add("b", Tensor::zeros(&[cout]));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[h, w, cin]));
        let y = g.conv_transpose2d(x, k, b, 2, 1).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[2 * h, 2 * w, cout][..]);
    }
}
