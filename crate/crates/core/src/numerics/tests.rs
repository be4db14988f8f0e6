use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), 2.0, &mut rng).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p), &[1., 2., 3., 4.]);

    let a = tape.constant(&t(&[1, 2], &[1., 2.]));
    let b = tape.constant(&t(&[2, 1], &[3., 4.]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(p), &[1, 1]);
    assert_eq!(tape.value(p), &[11.0]);

    assert!(matches!(tape.matmul(a, a), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = rand_tensor(&[4, 2], 7);
    let err = grad_check(
        |tape, x| {
            let bv = tape.constant(&b);
            let y = tape.matmul(x, bv)?;
            Ok(tape.sum(y))
        },
        &rand_tensor(&[3, 4], 8),
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 3], &[1., 2., 3.]));
    let w = tape.constant(&t(&[1, 1, 1], &[1.]));
    let y = tape.conv1d(x, w, None, 1).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3.]);

    let x = tape.constant(&t(&[1, 4], &[1., 2., 3., 4.]));
    let w = tape.constant(&t(&[1, 1, 3], &[1., 1., 1.]));
    let y = tape.conv1d(x, w, None, 1).unwrap();
    assert_eq!(tape.value(y), &[3., 6., 9., 7.]);

    let w2 = tape.constant(&t(&[1, 1, 2], &[1., 1.]));
    assert!(matches!(tape.conv1d(x, w2, None, 1), Err(Error::UnsupportedKernel(2))));
}

#[test]
fn conv1d_dilated_matches_direct_sum() {
    // out[t] = Σ_k w[k] x[t + (k-1)·d]
    let x = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
    let w = [0.5, -1.0, 2.0];
    let d = 2;
    let mut tape = Tape::new();
    let xv = tape.constant(&t(&[1, 6], &x));
    let wv = tape.constant(&t(&[1, 1, 3], &w));
    let y = tape.conv1d(xv, wv, None, d).unwrap();
    for tt in 0..6i64 {
        let mut s = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let src = tt + (k as i64 - 1) * d as i64;
            if (0..6).contains(&src) {
                s += (*wk as f64) * x[src as usize] as f64;
            }
        }
        assert!((tape.value(y)[tt as usize] - s).abs() < 1e-12);
    }
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let w = rand_tensor(&[3, 2, 3], 1);
    let readout = rand_tensor(&[3, 8], 2);
    let err = grad_check(
        |tape, x| {
            let wv = tape.constant(&w);
            let y = tape.conv1d(x, wv, None, 2)?;
            let r = tape.constant(&readout);
            let p = tape.mul(y, r)?;
            Ok(tape.sum(p))
        },
        &rand_tensor(&[2, 8], 3),
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(&Tensor::full([2], 1.0).unwrap());
    let b = tape.constant(&Tensor::zeros([2]).unwrap());
    let x = tape.constant(&t(&[1, 2], &[1., 3.]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!((tape.value(y)[0] + 1.0).abs() < 1e-4 && (tape.value(y)[1] - 1.0).abs() < 1e-4);

    let g3 = tape.constant(&Tensor::full([3], 1.0).unwrap());
    let b3 = tape.constant(&Tensor::zeros([3]).unwrap());
    let c = tape.constant(&t(&[1, 3], &[4., 4., 4.]));
    let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
    assert!(tape.value(y).iter().all(|v| *v == 0.0));

    let r = tape.constant(&rand_tensor(&[5, 3], 4));
    let y = tape.layer_norm(r, g3, b3, 1e-5).unwrap();
    for row in tape.value(y).chunks(3) {
        let mean = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }
    assert!(tape.layer_norm(r, g, b, 1e-5).is_err());
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(&Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s), &[0.5]);

    let c = tape.constant(&t(&[3], &[2.5, 2.5, 2.5]));
    let sm = tape.softmax(c, 0).unwrap();
    assert!(tape.value(sm).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

    let x = tape.constant(&Tensor::scalar(-2.0));
    let slope = tape.constant(&Tensor::scalar(0.25));
    let p = tape.prelu(x, slope).unwrap();
    assert_eq!(tape.value(p), &[-0.5]);

    let r = tape.constant(&t(&[3], &[-1., 0., 2.]));
    let r = tape.relu(r);
    assert_eq!(tape.value(r), &[0., 0., 2.]);
}

#[test]
fn pool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 3], &[1., 5., 3.]));
    let avg = tape.pool(x, 1, PoolMode::Avg).unwrap();
    assert_eq!(tape.value(avg), &[3.0]);
    let mx = tape.pool(x, 1, PoolMode::Max).unwrap();
    assert_eq!(tape.shape(mx), &[1, 1]);
    assert_eq!(tape.value(mx), &[5.0]);
    tape.backward(mx).unwrap();
    assert_eq!(tape.grad_f64(x).unwrap(), &[0., 1., 0.]);

    let mut tape = Tape::new();
    let c = tape.leaf(&t(&[1, 3], &[2., 2., 2.]));
    let a = tape.pool(c, 1, PoolMode::Avg).unwrap();
    let m = tape.pool(c, 1, PoolMode::Max).unwrap();
    assert_eq!(tape.value(a), tape.value(m));
    tape.backward(m).unwrap();
    // ties go to the first index
    assert_eq!(tape.grad_f64(c).unwrap(), &[1., 0., 0.]);

    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2, 3], &[1., 5., 3., 0., -1., 9.]));
    let m0 = tape.pool(x, 0, PoolMode::Max).unwrap();
    assert_eq!(tape.shape(m0), &[1, 3]);
    assert_eq!(tape.value(m0), &[1., 5., 9.]);
    assert!(tape.pool(x, 2, PoolMode::Avg).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let xt = rand_tensor(&[2, 3], 5);
    let x = tape.leaf(&xt);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad_f64(x).unwrap().iter().all(|g| *g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(&xt);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, v) in tape.grad_f64(x).unwrap().iter().zip(xt.data()) {
        assert!((g - 2.0 * *v as f64).abs() < 1e-12);
    }
    // a second call accumulates
    tape.backward(s).unwrap();
    for (g, v) in tape.grad_f64(x).unwrap().iter().zip(xt.data()) {
        assert!((g - 4.0 * *v as f64).abs() < 1e-12);
    }
    tape.zero_grad();
    assert!(tape.grad_f64(x).is_none());

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn broadcasting_reduces_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&rand_tensor(&[3, 4], 1));
    let row = tape.leaf(&rand_tensor(&[1, 4], 2));
    let col = tape.leaf(&rand_tensor(&[3, 1], 3));
    let a = tape.add(x, row).unwrap();
    let m = tape.mul(a, col).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    let cv = tape.value(col).to_vec();
    let expect_row: f64 = cv.iter().sum();
    assert!(tape.grad_f64(row).unwrap().iter().all(|g| (g - expect_row).abs() < 1e-12));
    let (xv, rv) = (tape.value(x).to_vec(), tape.value(row).to_vec());
    for i in 0..3 {
        let e: f64 = (0..4).map(|j| xv[i * 4 + j] + rv[j]).sum();
        assert!((tape.grad_f64(col).unwrap()[i] - e).abs() < 1e-12);
    }
    let bad = tape_const(&mut tape, &[2, 4]);
    assert!(tape.add(x, bad).is_err());
}

fn tape_const(tape: &mut Tape, shape: &[usize]) -> Var {
    tape.constant(&Tensor::zeros(shape.to_vec()).unwrap())
}

#[test]
fn shape_ops_round_trip() {
    let mut tape = Tape::new();
    let x = tape.leaf(&rand_tensor(&[2, 5], 9));
    let a = tape.narrow(x, 1, 0, 2).unwrap();
    let b = tape.narrow(x, 1, 2, 3).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c), tape.value(x));
    assert!(tape.narrow(x, 1, 4, 2).is_err());
    let r = tape.reshape(c, [10]).unwrap();
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert!(tape.grad_f64(x).unwrap().iter().all(|g| *g == 1.0));
}

#[test]
fn overlap_add_sums_hops() {
    let mut tape = Tape::new();
    let f = tape.leaf(&t(&[3, 4], &[1.; 12]));
    let y = tape.overlap_add(f, 2, 7).unwrap();
    assert_eq!(tape.value(y), &[1., 1., 2., 2., 2., 2., 1.]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // the final frame's last sample falls past the end
    assert_eq!(tape.grad_f64(f).unwrap()[11], 0.0);
    assert_eq!(tape.grad_f64(f).unwrap()[10], 1.0);
}

#[test]
fn ln_rejects_non_positive() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.ln(x), Err(Error::Contract(_))));
}

#[test]
fn grad_check_examples() {
    let x = rand_tensor(&[4, 3], 11);
    let sum_err = grad_check(|tape, x| Ok(tape.sum(x)), &x, 1e-3).unwrap();
    assert!(sum_err < 1e-9, "{sum_err}");
    let sig_err = grad_check(
        |tape, x| {
            let s = tape.sigmoid(x);
            Ok(tape.sum(s))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(sig_err < 1e-3, "{sig_err}");

    let faulty = GradCheck { fault: Some(OpKind::Sigmoid), ..GradCheck::default() }
        .check(
            |tape, x| {
                let s = tape.sigmoid(x);
                Ok(tape.sum(s))
            },
            &x,
        )
        .unwrap();
    assert!(faulty.max_rel_err > 0.1, "{}", faulty.max_rel_err);
}

#[test]
fn op_kind_names_round_trip() {
    for k in OpKind::ALL {
        assert_eq!(OpKind::from_name(k.name()), Some(k));
    }
    assert_eq!(OpKind::from_name("nope"), None);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(&rand_tensor(&[4, 6], 21));
        let w = tape.constant(&rand_tensor(&[6, 6], 22));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax(y, 1).unwrap();
        tape.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f32..30.0, 1..12),
        shift in -50.0f32..50.0,
    ) {
        let n = logits.len();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new([n], logits.clone()).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|&v| v as f64 + shift as f64).collect();
        let xs = tape.constant_f64([n], shifted).unwrap();
        let ys = tape.softmax(xs, 0).unwrap();
        let total: f64 = tape.value(y).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        for (a, b) in tape.value(y).iter().zip(tape.value(ys)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn conv1d_matches_direct_sum_for_any_geometry(
        t in 1usize..9,
        half_k in 0usize..4,
        dil in 1usize..4,
        seed in any::<u64>(),
    ) {
        let k = 2 * half_k + 1;
        let x = rand_tensor(&[2, t], seed);
        let w = rand_tensor(&[3, 2, k], seed ^ 0xABCD);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let y = tape.conv1d(xv, wv, None, dil).unwrap();
        let pad = (dil * (k - 1) / 2) as i64;
        for co in 0..3 {
            for tt in 0..t as i64 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for kk in 0..k {
                        let src = tt + (kk * dil) as i64 - pad;
                        if (0..t as i64).contains(&src) {
                            s += w.at(&[co, ci, kk]) as f64 * x.at(&[ci, src as usize]) as f64;
                        }
                    }
                }
                prop_assert!((tape.value(y)[co * t + tt as usize] - s).abs() < 1e-12);
            }
        }
        // backward must not touch out-of-range taps either
        let total = tape.sum(y);
        tape.backward(total).unwrap();
        prop_assert!(tape.grad_f64(wv).unwrap().iter().all(|g| g.is_finite()));
    }
}
