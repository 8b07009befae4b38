use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(shape, rand_vec(rng, shape.iter().product())).unwrap()
}

/// Store whose tensors are all random; inputs are registered as parameters so
/// their gradients are checked too.
fn store_of(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    for (name, shape) in specs {
        s.add(*name, shape, rand_vec(rng, shape.iter().product()), false)
            .unwrap();
    }
    s
}

/// Random projection of `out` to a scalar, so every output coordinate matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.input(rand_tensor(&mut rng, &shape));
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

fn p(g: &mut Graph<f64>, s: &ParameterStore<f64>, name: &str) -> Var {
    g.param(s, s.id(name).unwrap())
}

#[test]
fn pointwise_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 3, 3, 4]);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w = g.input(Tensor::from_vec(&[4, 4], eye).unwrap());
    let b = g.input(Tensor::zeros(&[4]));
    let y = layer_forward(&mut g, LayerKind::PointwiseConv1x1, &[w, b], &[xv], 1.0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn softmax_two_logits() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
    let y = g.softmax_last_axis(x);
    let d = g.value(y).data();
    assert!((d[0] - 0.73106).abs() < 1e-5 && (d[1] - 0.26894).abs() < 1e-5);
}

#[test]
fn layer_norm_of_constant_rows_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::filled(&[2, 5], 0.3));
    let y = g.layer_norm(x, None, None).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 2, 4]));
    let y = g.layer_norm(x, None, None).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn linear_loss_gradient_and_accumulation() {
    let mut s = ParameterStore::<f64>::new();
    let id = s.add("w", &[3], vec![0.5, -1.0, 2.0], false).unwrap();
    let x = vec![1.5, -0.25, 4.0];
    for round in 1..=2 {
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let xv = g.input(Tensor::from_vec(&[3], x.clone()).unwrap());
        let prod = g.mul(w, xv).unwrap();
        let loss = g.sum_all(prod);
        g.backward_into(loss, &mut s).unwrap();
        let expect: Vec<f64> = x.iter().map(|v| v * round as f64).collect();
        assert_eq!(s.get(id).grad, expect);
    }
}

#[test]
fn l1_subgradient() {
    let mut g = Graph::<f64>::new();
    let pred = g.input_with_grad(Tensor::from_vec(&[4], vec![0.0, 1.0, 0.5, 0.2]).unwrap());
    let target = g.input(Tensor::from_vec(&[4], vec![1.0, 0.0, 0.5, 0.1]).unwrap());
    let loss = g.l1_loss(pred, target).unwrap();
    assert!((g.value(loss).data()[0] - (1.0 + 1.0 + 0.0 + 0.1) / 4.0).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.of(pred).unwrap(), &[-0.25, 0.25, 0.0, 0.25]);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input_with_grad(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Graph(_))));
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut s = ParameterStore::<f64>::new();
    let w = s.add("w", &[2], vec![1.0, 2.0], false).unwrap();
    let b = s.add("b", &[2], vec![0.0, 0.0], true).unwrap();
    s.get_mut(w).trainable = false;
    let mut g = Graph::new();
    let (wv, bv) = (g.param(&s, w), g.param(&s, b));
    let sum = g.add(wv, bv).unwrap();
    let loss = g.sum_all(sum);
    g.backward_into(loss, &mut s).unwrap();
    assert_eq!(s.get(w).grad, vec![0.0, 0.0]);
    assert_eq!(s.get(b).grad, vec![1.0, 1.0]);
}

#[test]
fn unknown_layer_kind() {
    assert!(matches!(
        "conv5x5".parse::<LayerKind>(),
        Err(crate::Error::Unknown { .. })
    ));
    assert_eq!("gelu".parse::<LayerKind>().unwrap(), LayerKind::Gelu);
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 3, 3, 4]));
    let w = g.input(Tensor::zeros(&[3, 2]));
    assert!(g.pointwise(x, w, None).is_err());
    let wd = g_input(&mut g, &[16, 2]);
    assert!(g.downsample(x, wd, None).is_err());
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b, false, false).is_err());
    assert!(g.matmul(a, b, false, true).is_ok());
}

fn g_input(g: &mut Graph<f64>, shape: &[usize]) -> Var {
    g.input(Tensor::zeros(shape))
}

fn check(
    specs: &[(&str, &[usize])],
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store_of(&mut rng, specs);
    grad_check(&mut s, f, GradCheckOptions::default())
        .unwrap()
        .max_rel_error
}

#[test]
fn gradcheck_pointwise_conv() {
    let err = check(&[("x", &[1, 4, 4, 2]), ("w", &[2, 3]), ("b", &[3])], 2, |g, s| {
        let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
        let y = g.pointwise(x, w, Some(b))?;
        project(g, y, 7)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn gradcheck_depthwise_strided_upsample() {
    let err = check(
        &[
            ("x", &[2, 4, 6, 3]),
            ("dw", &[3, 3, 3]),
            ("db", &[3]),
            ("sw", &[12, 5]),
            ("sb", &[5]),
            ("uw", &[5, 8]),
            ("ub", &[2]),
        ],
        3,
        |g, s| {
            let x = p(g, s, "x");
            let (dw, db) = (p(g, s, "dw"), p(g, s, "db"));
            let y = g.depthwise(x, dw, Some(db))?;
            let (sw, sb) = (p(g, s, "sw"), p(g, s, "sb"));
            let y = g.downsample(y, sw, Some(sb))?;
            let (uw, ub) = (p(g, s, "uw"), p(g, s, "ub"));
            let y = g.upsample(y, uw, Some(ub))?;
            project(g, y, 8)
        },
    );
    assert!(err < 1e-7, "{err}");
}

#[test]
fn gradcheck_norm_gelu_softmax_concat() {
    let err = check(
        &[
            ("x", &[1, 2, 3, 4]),
            ("gamma", &[4]),
            ("beta", &[4]),
            ("y", &[1, 2, 3, 2]),
        ],
        4,
        |g, s| {
            let x = p(g, s, "x");
            let (ga, be) = (p(g, s, "gamma"), p(g, s, "beta"));
            let n = g.layer_norm(x, Some(ga), Some(be))?;
            let a = g.gelu(n);
            let y = p(g, s, "y");
            let c = g.concat_channels(a, y)?;
            let c = g.scale(c, 1.7);
            let sm = g.softmax_last_axis(c);
            let d = g.sub(sm, c)?;
            project(g, d, 9)
        },
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_matmul_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let ashape: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let bshape: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let err = check(&[("a", ashape), ("b", bshape)], 5, |g, s| {
            let (a, b) = (p(g, s, "a"), p(g, s, "b"));
            let c = g.matmul(a, b, ta, tb)?;
            project(g, c, 10)
        });
        assert!(err < 1e-8, "ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn gradcheck_clamp_away_from_kinks() {
    let mut s = ParameterStore::<f64>::new();
    s.add("x", &[4], vec![-0.5, 0.3, 0.7, 1.6], false).unwrap();
    let r = grad_check(
        &mut s,
        |g, s| {
            let x = p(g, s, "x");
            let y = g.clamp(x, 0.0, 1.0);
            project(g, y, 11)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8);
}

#[test]
fn gradcheck_constant_function_is_zero() {
    let mut s = ParameterStore::<f64>::new();
    s.add("unused", &[3], vec![1.0, 2.0, 3.0], false).unwrap();
    let r = grad_check(
        &mut s,
        |g, _| Ok(g.input(Tensor::scalar(4.0))),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert_eq!(r.checked, 3);
}

fn attention_specs(n: usize, c: usize, heads: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("q", vec![2, 2, 2, c]),
        ("k", vec![n, 2, 2, c]),
        ("v", vec![n, 2, 2, c]),
        ("la", vec![heads]),
    ]
}

#[test]
fn gradcheck_attention_both_axes() {
    for axis in [TokenAxis::Spatial, TokenAxis::Channel] {
        for normalize in [true, false] {
            let specs = attention_specs(2, 8, 2);
            let specs: Vec<(&str, &[usize])> = specs.iter().map(|(n, s)| (*n, s.as_slice())).collect();
            let err = check(&specs, 12, |g, s| {
                let (q, k, v, la) = (p(g, s, "q"), p(g, s, "k"), p(g, s, "v"), p(g, s, "la"));
                let o = g.attention(
                    q,
                    k,
                    v,
                    la,
                    AttentionSpec {
                        axis,
                        heads: 2,
                        normalize,
                    },
                )?;
                project(g, o, 13)
            });
            assert!(err < 1e-6, "{axis:?} normalize={normalize}: {err}");
        }
    }
}

/// Spatial single-head attention written with the generic primitives.
fn attention_by_primitives(
    g: &mut Graph<f64>,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    log_alpha: f64,
) -> Tensor<f64> {
    let c = q.last_dim();
    let q2 = g.input(q.clone().reshape(&[q.rows(), c]).unwrap());
    let k2 = g.input(k.clone().reshape(&[k.rows(), c]).unwrap());
    let v2 = g.input(v.clone().reshape(&[v.rows(), c]).unwrap());
    let qn = g.layer_norm(q2, None, None).unwrap();
    let kn = g.layer_norm(k2, None, None).unwrap();
    let logits = g.matmul(qn, kn, false, true).unwrap();
    let logits = g.scale(logits, (-log_alpha).exp());
    let probs = g.softmax_last_axis(logits);
    let mixed = g.matmul(probs, v2, false, false).unwrap();
    let out = g.add(mixed, q2).unwrap();
    g.value(out).clone()
}

#[test]
fn fused_attention_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let q = rand_tensor(&mut rng, &[1, 3, 3, 4]);
    let k = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let v = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let la = g.input(Tensor::from_vec(&[1], vec![0.3]).unwrap());
    let spec = AttentionSpec {
        axis: TokenAxis::Spatial,
        heads: 1,
        normalize: true,
    };
    let fused = g.attention(qv, kv, vv, la, spec).unwrap();
    let fused = g.value(fused).clone();
    let reference = attention_by_primitives(&mut g, &q, &k, &v, 0.3);
    let fused = fused.reshape(&[9, 4]).unwrap();
    assert!(
        fused.max_abs_diff(&reference) < 1e-6,
        "{}",
        fused.max_abs_diff(&reference)
    );
}

#[test]
fn attention_worked_example() {
    // normalized query (1, 0) against keys (1, 0), (0, 1) with values (2, 0), (0, 2)
    let mut g = Graph::<f64>::new();
    let q = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = g.input(Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = g.input(Tensor::from_vec(&[2, 1, 1, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    let la = g.input(Tensor::zeros(&[1]));
    let spec = AttentionSpec {
        axis: TokenAxis::Spatial,
        heads: 1,
        normalize: false,
    };
    let o = g.attention(q, k, v, la, spec).unwrap();
    let d = g.value(o).data();
    assert!((d[0] - 2.46212).abs() < 1e-4 && (d[1] - 0.53788).abs() < 1e-4, "{d:?}");
}

#[test]
fn single_support_token_attention_is_v_plus_q() {
    let mut g = Graph::<f64>::new();
    let q = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![0.3, -0.7]).unwrap());
    let k = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![5.0, 1.0]).unwrap());
    let v = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![1.5, 2.5]).unwrap());
    let la = g.input(Tensor::from_vec(&[1], vec![2.0]).unwrap());
    let spec = AttentionSpec {
        axis: TokenAxis::Spatial,
        heads: 1,
        normalize: true,
    };
    let o = g.attention(q, k, v, la, spec).unwrap();
    let d = g.value(o).data();
    assert!((d[0] - 1.8).abs() < 1e-12 && (d[1] - 1.8).abs() < 1e-12, "{d:?}");
}

#[test]
fn attention_rejects_bad_heads() {
    let mut g = Graph::<f64>::new();
    let q = g.input(Tensor::zeros(&[1, 2, 2, 6]));
    let k = g.input(Tensor::zeros(&[1, 2, 2, 6]));
    let la = g.input(Tensor::zeros(&[4]));
    let spec = AttentionSpec {
        axis: TokenAxis::Channel,
        heads: 4,
        normalize: true,
    };
    assert!(g.attention(q, k, k, la, spec).is_err());
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s = ParameterStore::<f32>::new();
        let specs: [(&str, &[usize]); 3] = [("x", &[2, 4, 4, 4]), ("w", &[4, 4]), ("la", &[2])];
        for (n, sh) in specs {
            let vals = (0..sh.iter().product()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            s.add(n, sh, vals, false).unwrap();
        }
        let mut g = Graph::new();
        let x = g.param(&s, s.id("x").unwrap());
        let w = g.param(&s, s.id("w").unwrap());
        let la = g.param(&s, s.id("la").unwrap());
        let y = g.pointwise(x, w, None).unwrap();
        let spec = AttentionSpec {
            axis: TokenAxis::Spatial,
            heads: 2,
            normalize: true,
        };
        let a = g.attention(y, y, x, la, spec).unwrap();
        let loss = g.mean(a);
        g.backward_into(loss, &mut s).unwrap();
        s.iter()
            .flat_map(|p| p.grad.clone())
            .map(f32::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-80.0f32..80.0, 1..40), width in 1usize..8) {
        let rows = values.len() / width;
        prop_assume!(rows > 0);
        let data = values[..rows * width].to_vec();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(&[rows, width], data).unwrap());
        let y = g.softmax_last_axis(x);
        for row in g.value(y).data().chunks(width) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
