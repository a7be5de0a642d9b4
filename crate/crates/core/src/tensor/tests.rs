use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let p = tape.matmul(i, i).unwrap();
    assert_eq!(tape.value(p), &Tensor::eye(2));

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
}

#[test]
fn matmul_grad_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b0 = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let a = tape.leaf(a0.clone());
    let b = tape.constant(b0.clone());
    let c = tape.matmul(a, b).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    let numeric = finite_diff_grad(
        |x| {
            let mut tp = Tape::new();
            let a = tp.constant(x.clone());
            let b = tp.constant(b0.clone());
            let c = tp.matmul(a, b).unwrap();
            let s = tp.sum(c);
            tp.value(s).item()
        },
        &a0,
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(tape.grad(a).unwrap(), &numeric, 1e-3, 1e-6) < 1e-4);
    // d sum(AB)/dA[i,k] = sum_j B[k,j]
    for i in 0..3 {
        for k in 0..4 {
            let row: f64 = (0..2).map(|j| b0.get(&[k, j])).sum();
            assert!((tape.grad(a).unwrap().get(&[i, k]) - row).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expected: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    for (a, b) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((expected[0] - 0.09003).abs() < 1e-5);
    assert!((expected[1] - 0.24473).abs() < 1e-5);
    assert!((expected[2] - 0.66524).abs() < 1e-5);
}

#[test]
fn softmax_non_last_axis_slices_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform(&[2, 5, 3], -20.0, 20.0, &mut rng));
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y);
    for o in 0..2 {
        for j in 0..3 {
            let s: f64 = (0..5).map(|i| v.get(&[o, i, j])).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..5).all(|i| v.get(&[o, i, j]) > 0.0));
        }
    }
    assert!(tape.softmax(x, 3).is_err());
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[5.0, 5.0]));
    let y = tape.layernorm(x, 0, LAYERNORM_EPS).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = tape.layernorm(x, 0, 1e-14).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);

    let x = tape.constant(t(&[1], &[1.0]));
    assert!(matches!(
        tape.layernorm(x, 0, LAYERNORM_EPS),
        Err(crate::Error::Precondition { .. })
    ));
}

#[test]
fn layernorm_random_slices_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[16], -5.0, 5.0, &mut rng));
        let y = tape.layernorm(x, 0, 1e-12).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<f64>() / 16.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");

    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(c);
    assert!(tape.backward(s).is_err(), "detached loss");

    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.backward(s).is_err(), "second call");
    tape.reset_grads();
    tape.backward(s).unwrap();
}

#[test]
fn shared_input_accumulates_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[3.0]));
    let a = tape.scale(x, 2.0);
    let b = tape.mul(x, x).unwrap();
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[8.0]);
}

#[test]
fn no_implicit_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn avgpool_and_conv_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
    let b = tape.constant(Tensor::full(&[5], 0.25));
    let y = tape.conv3x3(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 8, 8]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    let p = tape.avgpool2d(y, 2).unwrap();
    assert_eq!(tape.shape(p), &[2, 5, 4, 4]);
    assert!(tape.avgpool2d(p, 3).is_err());
}

#[test]
fn slice_concat_pad_roundtrip() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap());
    let a = tape.slice(x, 1, 0, 1).unwrap();
    let b = tape.slice(x, 1, 1, 3).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c), tape.value(x));
    let p = tape.pad2d(x, 1, 2, 4, 6).unwrap();
    assert_eq!(tape.value(p).get(&[1, 2]), 0.0);
    assert_eq!(tape.value(p).get(&[2, 5]), 7.0);
    assert!(tape.pad2d(x, 3, 0, 4, 6).is_err());
}

#[test]
fn bytes_roundtrip_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[2, 3, 4], -1e6, 1e6, &mut rng);
    let (y, _) = Tensor::from_bytes(&x.to_bytes()).unwrap();
    assert_eq!(x, y);
}

#[test]
fn kink_margin_sees_non_smooth_inputs() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[2], &[0.001, -3.0]));
    let _ = tape.relu(c);
    assert_eq!(tape.kink_margin(), f64::INFINITY);
    let x = tape.leaf(t(&[3], &[0.5, -0.02, 2.0]));
    let _ = tape.relu(x);
    assert_eq!(tape.kink_margin(), 0.02);
    let _ = tape.max(x);
    assert_eq!(tape.kink_margin(), 0.02);
    let y = tape.leaf(t(&[3], &[0.6, 1.0, 2.005]));
    let _ = tape.maximum(x, y).unwrap();
    assert!((tape.kink_margin() - 0.005).abs() < 1e-12);
}
