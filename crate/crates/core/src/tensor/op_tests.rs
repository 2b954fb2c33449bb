use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Weighted sum with fixed random weights: a smooth scalar probe of `out`.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
    let m = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0, 10.0, 18.0]);
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn elementwise_rejects_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
}

#[test]
fn sub_self_is_zero_with_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[3.0, -1.0]).with_requires_grad(true));
    let d = tape.sub(x, x).unwrap();
    assert_eq!(tape.value(d).data(), &[0.0, 0.0]);
    let loss = tape.sum(d).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn mul_product_rule() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
    let b = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
    let m = tape.mul(a, b).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[3.0]);
    assert_eq!(tape.grad(b).unwrap(), &[2.0]);
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let z = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
    let e = tape.exp(z).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 1.0]);

    let th = tape.tanh(z).unwrap();
    assert_eq!(tape.value(th).data(), &[0.0, 0.0]);
    let loss = tape.sum(th).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[1.0, 1.0]);

    let n = tape.constant(Tensor::scalar(-2.0));
    let lr = tape.leaky_relu(n, 0.01).unwrap();
    assert_abs_diff_eq!(tape.value(lr).data()[0], -0.02, epsilon = 1e-15);
}

#[test]
fn exp_clamps_and_zeroes_gradient_outside() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[25.0, -30.0, 1.0]).with_requires_grad(true));
    let e = tape.exp(x).unwrap();
    let v = tape.value(e).data().to_vec();
    assert_eq!(v[0], EXP_CLAMP.exp());
    assert_eq!(v[1], (-EXP_CLAMP).exp());
    let loss = tape.sum(e).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[1], 0.0);
    assert_abs_diff_eq!(g[2], 1f64.exp(), epsilon = 1e-12);
}

#[test]
fn conv1d_hand_example() {
    // Replicate-padded [1, 1, 2, 3, 3] against [1, 0, -1].
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
    let w = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv1d(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, -2.0, -1.0]);
}

#[test]
fn conv1d_bias_gradient_is_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 7], &mut rng));
    let w = tape.leaf(&random(&[4, 3, 5], &mut rng).with_requires_grad(true));
    let b = tape.leaf(&Tensor::zeros(&[4]).with_requires_grad(true));
    let y = tape.conv1d(x, w, b).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    // Summed over a batch of 2, each of length 7.
    assert_eq!(tape.grad(b).unwrap(), &[14.0; 4]);
}

#[test]
fn conv1d_validates() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
    let w_even = tape.constant(Tensor::zeros(&[1, 2, 4]));
    let w_bad = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv1d(x, w_even, b), Err(Error::Config(_))));
    assert!(matches!(tape.conv1d(x, w_bad, b), Err(Error::Dimension(_))));
}

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);

    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(x, eye, b).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let bad = tape.constant(Tensor::zeros(&[2, 2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.linear(x, bad, b2), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[2, 3]).with_requires_grad(true));
    let s1 = tape.sum(x).unwrap();
    let s2 = tape.sum(x).unwrap();
    let loss = tape.add(s1, s2).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[3]).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn foreign_var_rejected() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.constant(Tensor::zeros(&[1]));
    let _ = b.constant(Tensor::zeros(&[1]));
    assert!(matches!(b.backward(x), Err(Error::Usage(_))));
}

#[test]
fn backward_accumulates_into_tensor() {
    let mut param = t(&[2], &[1.0, -1.0]).with_requires_grad(true);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.leaf(&param);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_into(x, &mut param).unwrap();
    }
    assert_eq!(param.grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn split_and_interleave_are_inverse() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let e = tape.strided(x, 0).unwrap();
    let o = tape.strided(x, 1).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 3.0, 5.0]);
    assert_eq!(tape.value(o).data(), &[2.0, 4.0, 6.0]);
    let back = tape.interleave(e, o).unwrap();
    assert_eq!(tape.value(back).data(), tape.value(x).data());
}

#[test]
fn linear_function_gradcheck_is_exact() {
    // Central differences have no truncation error on a linear function, so a
    // wide step keeps the roundoff term well below 1e-9.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 4], &mut rng);
    let report = finite_diff_check(
        |tape, p| {
            let s = tape.scale(p[0], 2.5)?;
            probe(tape, s, 9)
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn gradcheck_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 8], &mut rng);
    let b = random(&[2, 3, 8], &mut rng);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)> = vec![
        ("add", Box::new(|t, p| t.add(p[0], p[1]))),
        ("sub", Box::new(|t, p| t.sub(p[0], p[1]))),
        ("mul", Box::new(|t, p| t.mul(p[0], p[1]))),
        ("exp", Box::new(|t, p| t.exp(p[0]))),
        ("tanh", Box::new(|t, p| t.tanh(p[0]))),
        ("leaky_relu", Box::new(|t, p| t.leaky_relu(p[0], 0.01))),
        ("strided", Box::new(|t, p| t.strided(p[0], 1))),
        ("interleave", Box::new(|t, p| t.interleave(p[0], p[1]))),
        ("slice", Box::new(|t, p| t.slice_last(p[0], 2, 5))),
        ("concat", Box::new(|t, p| t.concat_last(p[0], p[1]))),
        ("mean", Box::new(|t, p| t.mean(p[0]))),
    ];
    for (name, f) in cases {
        let report = finite_diff_check(
            |tape, p| {
                let out = f(tape, p)?;
                probe(tape, out, 3)
            },
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{name}: {report:?}");
    }
}

#[test]
fn gradcheck_conv1d_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 6], &mut rng);
    let w = random(&[4, 3, 5], &mut rng);
    let b = random(&[4], &mut rng);
    let report = finite_diff_check(
        |tape, p| {
            let y = tape.conv1d(p[0], p[1], p[2])?;
            probe(tape, y, 11)
        },
        &[x, w, b],
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-4), "conv1d: {report:?}");

    let x = random(&[3, 4], &mut rng);
    let w = random(&[2, 4], &mut rng);
    let b = random(&[2], &mut rng);
    let report = finite_diff_check(
        |tape, p| {
            let y = tape.linear(p[0], p[1], p[2])?;
            probe(tape, y, 12)
        },
        &[x, w, b],
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-6), "linear: {report:?}");
}

#[test]
fn exp_gradcheck_across_step_sizes() {
    // Large-argument exp: every step in the 1e-5..1e-7 band is accurate,
    // and clearly better than a coarse step.
    let x = t(&[3], &[8.0, 10.0, 12.0]);
    let err = |h: f64| {
        finite_diff_check(|tape, p| {
            let e = tape.exp(p[0])?;
            tape.sum(e)
        }, &[x.clone()], h)
        .unwrap()
        .max_rel_error
    };
    let coarse = err(1e-2);
    for h in [1e-5, 1e-6, 1e-7] {
        let e = err(h);
        assert!(e < 1e-6, "h={h}: {e}");
        assert!(e < coarse, "h={h}: {e} vs coarse {coarse}");
    }
}

proptest! {
    #[test]
    fn conv1d_delta_kernel_is_identity(
        batch in 1usize..3, channels in 1usize..4, len in 1usize..12, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[batch, channels, len], &mut rng);
        let mut w = Tensor::zeros(&[channels, channels, 3]);
        for c in 0..channels {
            w.data_mut()[(c * channels + c) * 3 + 1] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let bv = tape.constant(Tensor::zeros(&[channels]));
        let y = tape.conv1d(xv, wv, bv).unwrap();
        prop_assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn repeated_use_scales_gradient(n in 1usize..5, len in 1usize..6, seed in any::<u64>()) {
        let x = random(&[len], &mut ChaCha8Rng::seed_from_u64(seed)).with_requires_grad(true);
        let grad_for = |uses: usize| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let sq = tape.tanh(v).unwrap();
            let mut total = tape.sum(sq).unwrap();
            for _ in 1..uses {
                let s = tape.sum(sq).unwrap();
                total = tape.add(total, s).unwrap();
            }
            tape.backward(total).unwrap();
            tape.grad(v).unwrap().to_vec()
        };
        let single = grad_for(1);
        let multi = grad_for(n);
        for (s, m) in single.iter().zip(&multi) {
            prop_assert!((m - n as f64 * s).abs() <= 1e-12 * (1.0 + m.abs()));
        }
    }

    #[test]
    fn ops_do_not_mutate_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, 4], &mut rng).with_requires_grad(true);
        let w = random(&[2, 2, 3], &mut rng).with_requires_grad(true);
        let before = (x.clone(), w.clone());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let bv = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv1d(xv, wv, bv).unwrap();
        let y = tape.mul(y, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        prop_assert_eq!(tape.value(xv), &before.0.clone().with_requires_grad(false));
        prop_assert_eq!(&x, &before.0);
        prop_assert_eq!(&w, &before.1);
    }
}
