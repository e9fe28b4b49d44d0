//! Independent naive oracles and fixtures for unit tests.

use rand::Rng as _;

use crate::rng;
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test.random_tensor");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed).map(|v| v.abs() + 0.1)
}

/// Nested-loop zero-padded cross-correlation, `x: [C_in,H,W]`, `w: [C_out,C_in,kH,kW]`.
pub fn naive_conv2d(x: &Tensor, w: &Tensor) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let at = |c: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[(c * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = 0.0;
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w.data()[((o * ci + c) * kh + ky) * kw + kx];
                            s += wv * at(c, y as isize + ky as isize - ph, xx as isize + kx as isize - pw);
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = s;
            }
        }
    }
    Tensor::new(vec![co, h, wd], out).unwrap()
}

/// Per-channel naive convolution with `w: [C,kH,kW]`.
pub fn naive_depthwise(x: &Tensor, w: &Tensor) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (w.shape()[1], w.shape()[2]);
    let mut out = Vec::with_capacity(c * h * wd);
    for ch in 0..c {
        let xi = Tensor::new(vec![1, h, wd], x.channel(ch).to_vec()).unwrap();
        let wi = Tensor::new(vec![1, 1, kh, kw], w.data()[ch * kh * kw..(ch + 1) * kh * kw].to_vec()).unwrap();
        out.extend_from_slice(naive_conv2d(&xi, &wi).data());
    }
    Tensor::new(vec![c, h, wd], out).unwrap()
}

pub fn naive_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn naive_softplus(z: f64) -> f64 {
    (1.0 + z.exp()).ln()
}

/// `w·x + b` by explicit loops.
pub fn naive_linear(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..b.len())
        .map(|i| b[i] + (0..n).map(|j| w.data()[i * n + j] * x[j]).sum::<f64>())
        .collect()
}

pub fn naive_gap(x: &Tensor) -> Vec<f64> {
    let c = x.shape()[0];
    (0..c)
        .map(|ch| x.channel(ch).iter().sum::<f64>() / x.channel(ch).len() as f64)
        .collect()
}

/// `-log softmax(z)[label]` evaluated from the definition.
pub fn naive_ce(z: &[f64], label: usize) -> f64 {
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    -(z[label].exp() / denom).ln()
}
