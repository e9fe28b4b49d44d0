use super::*;
use crate::error::CdalError;
use crate::testutil::{naive_conv2d, naive_depthwise, random_tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_bad_lengths() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(xv, w).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_dirac_3x3_is_exact_identity() {
    let x = random_tensor(&[2, 5, 4], 3);
    let mut k = vec![0.0; 2 * 2 * 9];
    k[4] = 1.0; // [0,0,1,1]
    k[(1 * 2 + 1) * 9 + 4] = 1.0; // [1,1,1,1]
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(t(&[2, 2, 3, 3], &k));
    let y = tape.conv2d(xv, w).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_zero_input_gives_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(random_tensor(&[3, 2, 3, 3], 1));
    let y = tape.conv2d(x, w).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_naive_oracle() {
    let x = random_tensor(&[2, 4, 4], 11);
    let w = random_tensor(&[3, 2, 3, 3], 12);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv).unwrap();
    assert!(tape.value(y).max_abs_diff(&naive_conv2d(&x, &w)) < 1e-12);
}

#[test]
fn conv2d_shape_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, w), Err(CdalError::Shape { .. })));
    let even = tape.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(tape.conv2d(x, even).is_err());
}

#[test]
fn depthwise_cases() {
    let x = random_tensor(&[3, 4, 5], 5);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ones = tape.constant(Tensor::full(&[3, 1, 1], 1.0));
    let y = tape.depthwise_conv2d(xv, ones).unwrap();
    assert_eq!(tape.value(y), &x);

    // constant field 5, kernel summing to 2: interior responds with 10
    let c = tape.constant(Tensor::full(&[1, 5, 5], 5.0));
    let k = tape.constant(Tensor::full(&[1, 3, 3], 2.0 / 9.0));
    let y = tape.depthwise_conv2d(c, k).unwrap();
    let v = tape.value(y);
    for yy in 1..4 {
        for xx in 1..4 {
            assert!((v.data()[yy * 5 + xx] - 10.0).abs() < 1e-12);
        }
    }

    let w = random_tensor(&[3, 3, 3], 6);
    let wv = tape.constant(w.clone());
    let y = tape.depthwise_conv2d(xv, wv).unwrap();
    assert!(tape.value(y).max_abs_diff(&naive_depthwise(&x, &w)) < 1e-12);

    let bad = tape.constant(Tensor::zeros(&[2, 3, 3]));
    assert!(tape.depthwise_conv2d(xv, bad).is_err());
}

#[test]
fn gap_cases() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 3, 3], 3.0));
    let g = tape.gap(c).unwrap();
    assert_eq!(tape.value(g).data(), &[3.0, 3.0]);
    let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
    let g = tape.gap(z).unwrap();
    assert_eq!(tape.value(g).data(), &[0.0, 0.0]);
    let x = t(&[2, 2, 2], &[1., 2., 3., 4., -1., 0.5, 0.25, 2.25]);
    let xv = tape.constant(x);
    let g = tape.gap(xv).unwrap();
    assert_eq!(tape.value(g).data(), &[10.0 / 4.0, 2.0 / 4.0]);
}

#[test]
fn elementwise_definitions() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3]));
    let s = tape.softmax(z);
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let z1 = tape.constant(Tensor::scalar(0.0));
    let sg = tape.sigmoid(z1);
    assert_eq!(tape.value(sg).item(), 0.5);
    let sp = tape.softplus(z1);
    assert!((tape.value(sp).item() - 2f64.ln()).abs() < 1e-15);

    let big = tape.constant(Tensor::from_vec(vec![800.0, -800.0]));
    let sp = tape.softplus(big);
    assert_eq!(tape.value(sp).data(), &[800.0, 0.0]);
    let ls = tape.log_softmax(big);
    assert!(tape.value(ls).is_finite());
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = random_tensor(&[4, 7], 9).map(|v| v * 20.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let s = tape.softmax(xv);
    for row in tape.value(s).data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn concat_preserves_blocks() {
    let a = random_tensor(&[2, 3, 3], 1);
    let b = random_tensor(&[3, 3, 3], 2);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat_channels(av, bv).unwrap();
    let cv = tape.value(c);
    assert_eq!(cv.shape(), &[5, 3, 3]);
    assert_eq!(&cv.data()[..18], a.data());
    assert_eq!(&cv.data()[18..], b.data());
    let bad = tape.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(tape.concat_channels(av, bad).is_err());
}

#[test]
fn binary_ops_check_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.sub(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&[2, 3], 4));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_square_is_two_x() {
    let xt = random_tensor(&[5], 4);
    let mut tape = Tape::new();
    let x = tape.param(xt.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(xt.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x), Err(CdalError::Shape { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[2, 6, 6], 8));
        let w = tape.constant(random_tensor(&[3, 2, 3, 3], 9));
        let y = tape.conv2d(x, w).unwrap();
        let y = tape.softplus(y);
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradcheck_linear_map_is_tight() {
    let x = random_tensor(&[4], 1);
    let w = random_tensor(&[3, 4], 2);
    let b = random_tensor(&[3], 3);
    let r = finite_diff_check(
        |tape, v| {
            let y = tape.linear(v[0], v[1], v[2])?;
            Ok(tape.sum(y))
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn gradcheck_sigmoid_chain() {
    let x = random_tensor(&[6], 5);
    let r = finite_diff_check(
        |tape, v| {
            let a = tape.sigmoid(v[0]);
            let b = tape.sigmoid(a);
            let c = tape.mul(b, v[0])?;
            Ok(tape.sum(c))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let z = random_tensor(&[5], 6).map(|v| 3.0 * v);
    let r = finite_diff_check(
        |tape, v| {
            let ls = tape.log_softmax(v[0]);
            let p = tape.pick(ls, 2)?;
            Ok(tape.scale(p, -1.0))
        },
        &[z],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn channel_bias_forward_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.param(t(&[2], &[10.0, -1.0]));
    let y = tape.add_channel_bias(x, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 12.0, 2.0, 3.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
    assert!(tape.add_channel_bias(x, x).is_err());
}
