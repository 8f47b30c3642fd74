use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Central-difference check of `build` (which must return a scalar) with
/// respect to every element of every input.
fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (tp, _, op) = eval(&plus);
            let (tm, _, om) = eval(&minus);
            let numeric = (tp.value(op).item().unwrap() - tm.value(om).item().unwrap()) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Reduces a tensor-valued node to a scalar with fixed pseudo-random weights.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = tape.mul_const(v, w)?;
    tape.sum(p)
}

#[test]
fn matmul_examples() {
    let (a, b, c, d) = (1.5, -2.0, 0.25, 7.0);
    let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let x = m(&[&[a, b], &[c, d]]);
    assert_eq!(matmul(&id, &x).unwrap(), x);

    let p = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let q = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
    assert_eq!(matmul(&p, &q).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));

    let z = Tensor::zeros(&[3, 2]);
    assert!(matmul(&z, &x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]])).unwrap();
    for &p in s.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax_rows(&m(&[&[1000.0, 1000.0]])).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_rows(&m(&[&[0.0, 3f64.ln()]])).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);
    assert!(matches!(
        softmax_rows(&m(&[&[f64::NAN, 0.0]])),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::filled(&[2], 1.0);
    let zero = Tensor::zeros(&[2]);
    let c = layer_norm(&m(&[&[4.0, 4.0]]), &one, &zero, 1e-5).unwrap();
    assert_eq!(c.data(), &[0.0, 0.0]);

    let y = layer_norm(&m(&[&[1.0, 3.0]]), &one, &zero, 1e-15).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

    let beta = Tensor::vector(vec![0.3, -0.7]).unwrap();
    let y = layer_norm(&m(&[&[1.0, 3.0], &[-2.0, 9.0]]), &zero, &beta, 1e-5).unwrap();
    assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[5, 7]);
    let y = layer_norm(&x, &Tensor::filled(&[7], 1.0), &Tensor::zeros(&[7]), 1e-14).unwrap();
    for r in 0..5 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_rejects_mismatched_params() {
    let x = Tensor::zeros(&[2, 3]);
    let g = Tensor::zeros(&[2]);
    assert!(matches!(layer_norm(&x, &g, &g, 1e-5), Err(Error::Dimension(_))));
}

#[test]
fn bce_examples() {
    let ln2 = 2f64.ln();
    for t in [0.0, 1.0] {
        let l = bce_with_logits(&Tensor::scalar(0.0), &Tensor::scalar(t)).unwrap();
        assert!((l - ln2).abs() < 1e-15);
    }
    let l = bce_with_logits(&Tensor::scalar(100.0), &Tensor::scalar(1.0)).unwrap();
    assert!(l.is_finite() && l < 1e-40);
    let l = bce_with_logits(&Tensor::scalar(3f64.ln()), &Tensor::scalar(1.0)).unwrap();
    assert!((l - (4.0f64 / 3.0).ln()).abs() < 1e-15);

    let err = bce_with_logits(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_participating_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::filled(&[2], 3.0));
    let unused = tape.param(Tensor::filled(&[2], 1.0));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[1.0, 1.0]);
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(&tape, unused).data(), &[0.0, 0.0]);
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut tape = Tape::inference();
    let x = tape.param(Tensor::filled(&[2], 3.0));
    let s = tape.sum(x).unwrap();
    assert!(!tape.requires_grad(s));
    assert!(tape.backward(s).unwrap().get(x).is_none());
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig::with_lr(0.01);
    let mut params = vec![Tensor::filled(&[3], 0.5)];
    let mut state = AdamState::new(&params);
    for _ in 0..5 {
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, &cfg).unwrap();
    }
    assert_eq!(params[0].data(), &[0.5; 3]);

    let mut params = vec![Tensor::zeros(&[4])];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &[Tensor::filled(&[4], 1.0)], &mut state, &cfg).unwrap();
    for &p in params[0].data() {
        assert!((p + 0.01).abs() < 1e-9);
    }

    let mut params = vec![Tensor::filled(&[1], 2.0), Tensor::filled(&[1], 2.0)];
    let mut state = AdamState::new(&params);
    for step in 0..20 {
        let g = Tensor::filled(&[1], (step as f64).sin());
        adam_step(&mut params, &[g.clone(), g], &mut state, &cfg).unwrap();
    }
    assert_eq!(params[0].data()[0].to_bits(), params[1].data()[0].to_bits());
}

#[test]
fn adam_rejects_bad_config_and_shapes() {
    let mut params = vec![Tensor::zeros(&[2])];
    let mut state = AdamState::new(&params);
    let bad = AdamConfig::with_lr(0.0);
    assert!(matches!(
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, &bad),
        Err(Error::Config(_))
    ));
    let cfg = AdamConfig::with_lr(0.1);
    assert!(matches!(
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, &cfg),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn gradcheck_matmul_add_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        random_tensor(&mut rng, &[3, 4]),
        random_tensor(&mut rng, &[4, 2]),
        random_tensor(&mut rng, &[2]),
    ];
    let worst = gradcheck(&inputs, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        let q = t.add_row(p, v[2])?;
        weighted_sum(t, q, 1)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn gradcheck_elementwise_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random_tensor(&mut rng, &[3, 3]), random_tensor(&mut rng, &[3, 3])];
    for act in [Activation::Gelu, Activation::Sigmoid, Activation::Tanh] {
        let worst = gradcheck(&inputs, |t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.add(a, v[0])?;
            let c = t.scale(b, 0.7)?;
            let d = t.activate(c, act)?;
            let e = t.scale_rows(d, vec![1.0, -0.5, 2.0])?;
            weighted_sum(t, e, 2)
        });
        assert!(worst < 1e-4, "{act:?}: {worst}");
    }
}

#[test]
fn gradcheck_softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [
        random_tensor(&mut rng, &[4, 5]),
        random_tensor(&mut rng, &[5]),
        random_tensor(&mut rng, &[5]),
    ];
    let worst = gradcheck(&inputs, |t, v| {
        let s = t.softmax_rows(v[0])?;
        let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let both = t.add(s, n)?;
        weighted_sum(t, both, 3)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn gradcheck_gather_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = [random_tensor(&mut rng, &[4, 3]), random_tensor(&mut rng, &[5, 2])];
    let worst = gradcheck(&inputs, |t, v| {
        let a = t.gather_rows(v[0], vec![1, 3, 1, 2, 0], false)?;
        let b = t.concat_cols(&[a, v[1]])?;
        weighted_sum(t, b, 4)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn gather_frozen_row_zero_gets_no_gradient() {
    let mut tape = Tape::new();
    let table = tape.param(Tensor::filled(&[3, 2], 1.0));
    let g = tape.gather_rows(table, vec![0, 2, 0], true).unwrap();
    let s = tape.sum(g).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(&tape, table).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn gradcheck_chunk_attention_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inputs = [
        random_tensor(&mut rng, &[6, 4]),
        random_tensor(&mut rng, &[6, 4]),
        random_tensor(&mut rng, &[6, 4]),
    ];
    let mask = [true, true, true, true, false, false];
    let worst = gradcheck(&inputs, |t, v| {
        let o = t.chunk_attention(v[0], v[1], v[2], &mask, 3, 2)?;
        weighted_sum(t, o, 5)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn gradcheck_bce_weighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = [random_tensor(&mut rng, &[6])];
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let weights = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
    for pos_weight in [1.0, 3.0] {
        let worst = gradcheck(&inputs, |t, v| {
            t.weighted_bce_with_logits(v[0], &targets, Some(&weights), pos_weight)
        });
        assert!(worst < 1e-4, "{worst}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let a = Tensor::from_rows(std::slice::from_ref(&row)).unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let b = Tensor::from_rows(&[shifted]).unwrap();
        let sa = softmax_rows(&a).unwrap();
        let sb = softmax_rows(&b).unwrap();
        let total: f64 = sa.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(sa.data().iter().all(|&p| p >= 0.0));
        prop_assert!(sa.max_abs_diff(&sb) <= 1e-12);
    }

    #[test]
    fn bce_matches_log_sigmoid_definition(z in -30.0f64..30.0, positive in any::<bool>()) {
        let t = if positive { 1.0 } else { 0.0 };
        let fused = bce_with_logits(&Tensor::scalar(z), &Tensor::scalar(t)).unwrap();
        let s = 1.0 / (1.0 + (-z).exp());
        // 1 − σ(z) evaluated as σ(−z) to avoid cancellation near z = 30.
        let s_neg = 1.0 / (1.0 + z.exp());
        let naive = -(t * s.ln() + (1.0 - t) * s_neg.ln());
        prop_assert!((fused - naive).abs() <= 1e-10, "z={} fused={} naive={}", z, fused, naive);
    }

    #[test]
    fn ops_are_bitwise_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[4, 6]);
        let b = random_tensor(&mut rng, &[6, 3]);
        let run = || {
            let mut t = Tape::new();
            let va = t.param(a.clone());
            let vb = t.param(b.clone());
            let p = t.matmul(va, vb).unwrap();
            let s = t.softmax_rows(p).unwrap();
            let l = t.sum(s).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(s).clone(), g.wrt(&t, va))
        };
        let (x1, g1) = run();
        let (x2, g2) = run();
        prop_assert_eq!(x1, x2);
        prop_assert_eq!(g1, g2);
    }
}
