//! Objective terms and the shared attribution head.
//!
//! `L_total = η1·L_causal + η2·L_decor + η3·L_aug + L_original`, where
//!
//! - `L_causal = CE(Y_f − Y_c, y)` rewards the gap between factual and
//!   counterfactual predictions;
//! - `L_decor = −H(softmax(Y_c))` is minimised at uniform counterfactual predictions;
//! - `L_aug` is the mean absolute disagreement between original and augmented
//!   attended features over every map except the preserved one;
//! - `L_original` is supervised cross-entropy on plainly pooled features.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionSet;
use crate::error::{CdalError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Linear classifier `C -> K` over pooled features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub in_dim: usize,
    pub classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, in_dim: usize, classes: usize) -> Self {
        ClassifierHead {
            in_dim,
            classes,
            weight: store.add_he(seed, &format!("{prefix}.w"), &[classes, in_dim], in_dim),
            bias: store.add_zeros(&format!("{prefix}.b"), &[classes]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, pooled: Var) -> Result<Var> {
        tape.linear(pooled, p[self.weight], p[self.bias])
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `δ(GAP(Σ_i x ⊙ a_i))`.
pub fn predict(tape: &mut Tape, p: &Binding, head: &ClassifierHead, x: Var, a: &AttentionSet) -> Result<Var> {
    let total = tape.channel_sum(a.maps)?;
    let z = tape.mul_spatial(x, total)?;
    let pooled = tape.gap(z)?;
    head.forward(tape, p, pooled)
}

/// `Y_effect = Y_f − Y_c` at logit level.
pub fn causal_effect(tape: &mut Tape, y_f: Var, y_c: Var) -> Result<Var> {
    tape.sub(y_f, y_c)
}

/// `−log_softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let k = tape.value(logits).len();
    if label >= k {
        return Err(CdalError::InvalidArgument(format!("label {label} out of range for {k} classes")));
    }
    let ls = tape.log_softmax(logits);
    let picked = tape.pick(ls, label)?;
    Ok(tape.scale(picked, -1.0))
}

pub fn l_causal(tape: &mut Tape, y_effect: Var, label: usize) -> Result<Var> {
    cross_entropy(tape, y_effect, label)
}

/// Negative entropy of `softmax(y_c)`, in `[−ln K, 0]`.
pub fn l_decor(tape: &mut Tape, y_c: Var) -> Result<Var> {
    let p = tape.softmax(y_c);
    let logp = tape.log_softmax(y_c);
    let plogp = tape.mul(p, logp)?;
    Ok(tape.sum(plogp))
}

/// `(1/M) Σ_{i≠s} mean|x ⊙ f_i − x_aug ⊙ f_aug_i|` with a 0-based `s`.
pub fn l_aug(tape: &mut Tape, x: Var, x_aug: Var, f: &AttentionSet, f_aug: &AttentionSet, s: usize) -> Result<Var> {
    let m = f.count(tape);
    if f_aug.count(tape) != m {
        return Err(CdalError::shape("l_aug", format!("{m} vs {} maps", f_aug.count(tape))));
    }
    if s >= m {
        return Err(CdalError::InvalidArgument(format!("preserved index {s} out of range for {m} maps")));
    }
    let mut terms = Vec::with_capacity(m - 1);
    for i in (0..m).filter(|&i| i != s) {
        let fi = tape.channel(f.maps, i)?;
        let gi = tape.channel(f_aug.maps, i)?;
        let a = tape.mul_spatial(x, fi)?;
        let b = tape.mul_spatial(x_aug, gi)?;
        let d = tape.sub(a, b)?;
        terms.push(tape.mean_abs(d));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let sum = tape.add_n(&terms)?;
    Ok(tape.scale(sum, 1.0 / m as f64))
}

/// Cross-entropy of the baseline head on globally pooled features.
pub fn l_original(tape: &mut Tape, p: &Binding, base: &ClassifierHead, x: Var, label: usize) -> Result<Var> {
    let pooled = tape.gap(x)?;
    let logits = base.forward(tape, p, pooled)?;
    cross_entropy(tape, logits, label)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eta1: 1.0,
            eta2: 0.5,
            eta3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta3", self.eta3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CdalError::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms recorded on a tape; CDAL terms are `None` when disabled.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub original: Var,
    pub causal: Option<Var>,
    pub decor: Option<Var>,
    pub aug: Option<Var>,
}

pub fn l_total(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut terms = vec![parts.original];
    for (term, eta) in [(parts.causal, w.eta1), (parts.decor, w.eta2), (parts.aug, w.eta3)] {
        if let Some(t) = term {
            terms.push(tape.scale(t, eta));
        }
    }
    tape.add_n(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionKind, Provenance};
    use crate::tensor::finite_diff_check;
    use crate::testutil::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    fn set(tape: &mut Tape, t: Tensor) -> AttentionSet {
        AttentionSet {
            maps: tape.constant(t),
            kind: AttentionKind::Factual,
            provenance: Provenance::Original,
        }
    }

    #[test]
    fn predict_with_zero_maps_gives_bias() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 1, "h", 3, 4);
        *store.get_mut(head.bias) = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(random_tensor(&[3, 4, 4], 1));
        let a = set(&mut tape, Tensor::zeros(&[2, 4, 4]));
        let y = predict(&mut tape, &p, &head, x, &a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, -0.2, 0.3, 0.0]);
    }

    #[test]
    fn predict_with_unit_map_is_vanilla_pooled_classifier() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 1, "h", 3, 2);
        let xt = random_tensor(&[3, 4, 4], 2);
        let want = naive_linear(&naive_gap(&xt), store.get(head.weight), store.get(head.bias).data());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(xt);
        let a = set(&mut tape, Tensor::full(&[1, 4, 4], 1.0));
        let y = predict(&mut tape, &p, &head, x, &a).unwrap();
        for (g, w) in tape.value(y).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn predict_matches_step_by_step_oracle() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 1, "h", 2, 3);
        let xt = random_tensor(&[2, 3, 3], 3);
        let at = positive_tensor(&[3, 3, 3], 4);
        let mut z = vec![0.0; 18];
        for i in 0..3 {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += xt.data()[j] * at.data()[i * 9 + j % 9];
            }
        }
        let z = Tensor::new(vec![2, 3, 3], z).unwrap();
        let want = naive_linear(&naive_gap(&z), store.get(head.weight), store.get(head.bias).data());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(xt);
        let a = set(&mut tape, at);
        let y = predict(&mut tape, &p, &head, x, &a).unwrap();
        for (g, w) in tape.value(y).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-13);
        }
    }

    #[test]
    fn causal_effect_cases() {
        let mut tape = Tape::new();
        let yf = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let e = causal_effect(&mut tape, yf, yf).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0; 3]);
        let e = causal_effect(&mut tape, yf, zero).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(yf).data());
        let yc = tape.constant(Tensor::from_vec(vec![0.25, 1.0, -1.0]));
        let e = causal_effect(&mut tape, yf, yc).unwrap();
        assert_eq!(tape.value(e).data(), &[0.75, -3.0, 1.5]);
    }

    #[test]
    fn causal_loss_boundaries() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[4], 0.7));
        let l = l_causal(&mut tape, u, 1).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-9);
        let sat = tape.constant(Tensor::from_vec(vec![-10.0, 10.0, -10.0, -10.0]));
        let l = l_causal(&mut tape, sat, 1).unwrap();
        assert!(scalar(&tape, l) < 1e-4);
        let r = random_tensor(&[5], 5).map(|v| 4.0 * v);
        let rv = tape.constant(r.clone());
        let l = l_causal(&mut tape, rv, 3).unwrap();
        assert!((scalar(&tape, l) - naive_ce(r.data(), 3)).abs() < 1e-12);
        assert!(l_causal(&mut tape, rv, 5).is_err());
    }

    #[test]
    fn decor_boundaries() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[5], -0.3));
        let l = l_decor(&mut tape, u).unwrap();
        assert!((scalar(&tape, l) + 5f64.ln()).abs() < 1e-9);
        let sat = tape.constant(Tensor::from_vec(vec![60.0, -60.0, -60.0]));
        let l = l_decor(&mut tape, sat).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12 && scalar(&tape, l) <= 0.0);
        let r = random_tensor(&[4], 6).map(|v| 2.0 * v);
        let z: f64 = r.data().iter().map(|v| v.exp()).sum();
        let h: f64 = -r.data().iter().map(|v| v.exp() / z).map(|p| p * p.ln()).sum::<f64>();
        let rv = tape.constant(r);
        let l = l_decor(&mut tape, rv).unwrap();
        assert!((scalar(&tape, l) + h).abs() < 1e-12);
    }

    #[test]
    fn aug_loss_cases() {
        let xt = random_tensor(&[2, 3, 3], 7);
        let ft = positive_tensor(&[3, 3, 3], 8);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let f = set(&mut tape, ft.clone());
        let l = l_aug(&mut tape, x, x, &f, &f, 1).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let one = set(&mut tape, positive_tensor(&[1, 3, 3], 9));
        let other = set(&mut tape, positive_tensor(&[1, 3, 3], 10));
        let l = l_aug(&mut tape, x, x, &one, &other, 0).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let xa = random_tensor(&[2, 3, 3], 11);
        let fa = positive_tensor(&[3, 3, 3], 12);
        let s = 2;
        let mut want = 0.0;
        for i in 0..3 {
            if i == s {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..18 {
                acc += (xt.data()[j] * ft.data()[i * 9 + j % 9] - xa.data()[j] * fa.data()[i * 9 + j % 9]).abs();
            }
            want += acc / 18.0;
        }
        want /= 3.0;
        let xav = tape.constant(xa);
        let fav = set(&mut tape, fa);
        let l = l_aug(&mut tape, x, xav, &f, &fav, s).unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-14);
        assert!(scalar(&tape, l) >= 0.0);
        assert!(l_aug(&mut tape, x, xav, &f, &fav, 3).is_err());
    }

    #[test]
    fn original_loss_cases() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 1, "base", 3, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        // zero features -> zero logits -> uniform CE
        let zero = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let l = l_original(&mut tape, &p, &head, zero, 2).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-12);

        let xt = random_tensor(&[3, 2, 2], 13);
        let logits = naive_linear(&naive_gap(&xt), store.get(head.weight), store.get(head.bias).data());
        let xv = tape.constant(xt);
        let l = l_original(&mut tape, &p, &head, xv, 0).unwrap();
        assert!((scalar(&tape, l) - naive_ce(&logits, 0)).abs() < 1e-12);
        assert!(l_original(&mut tape, &p, &head, xv, 4).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let vals = [0.8, 1.5, -0.4, 0.2];
        let v: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let parts = LossParts {
            original: v[0],
            causal: Some(v[1]),
            decor: Some(v[2]),
            aug: Some(v[3]),
        };
        let zero_w = LossWeights {
            eta1: 0.0,
            eta2: 0.0,
            eta3: 0.0,
        };
        let t = l_total(&mut tape, &parts, &zero_w).unwrap();
        assert_eq!(scalar(&tape, t), 0.8);
        let w = LossWeights::default();
        let t = l_total(&mut tape, &parts, &w).unwrap();
        assert!((scalar(&tape, t) - (0.8 + 1.5 - 0.5 * 0.4 + 0.5 * 0.2)).abs() < 1e-15);
        let z = tape.constant(Tensor::scalar(0.0));
        let zeros = LossParts {
            original: z,
            causal: Some(z),
            decor: Some(z),
            aug: Some(z),
        };
        let one = LossWeights {
            eta1: 1.0,
            eta2: 1.0,
            eta3: 1.0,
        };
        let t = l_total(&mut tape, &zeros, &one).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);
        assert!(LossWeights { eta1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn decor_descent_reaches_max_entropy() {
        let k = 6;
        let mut y = random_tensor(&[k], 14).map(|v| 3.0 * v);
        let mut entropy = 0.0;
        for _ in 0..500 {
            let mut tape = Tape::new();
            let yv = tape.param(y.clone());
            let l = l_decor(&mut tape, yv).unwrap();
            entropy = -scalar(&tape, l);
            tape.backward(l).unwrap();
            let g = tape.grad(yv).unwrap().clone();
            for (a, b) in y.data_mut().iter_mut().zip(g.data()) {
                *a -= 0.1 * b;
            }
        }
        assert!(entropy >= 0.99 * (k as f64).ln(), "{entropy}");
    }

    #[test]
    fn causal_descent_grows_margin_monotonically() {
        let label = 1;
        let mut yf = random_tensor(&[4], 15);
        let yc = random_tensor(&[4], 16);
        let margin = |yf: &Tensor| {
            let e: Vec<f64> = yf.data().iter().zip(yc.data()).map(|(a, b)| a - b).collect();
            let other = e.iter().enumerate().filter(|(i, _)| *i != label).map(|(_, v)| *v).fold(f64::MIN, f64::max);
            e[label] - other
        };
        let mut last = margin(&yf);
        for step in 0..50 {
            let mut tape = Tape::new();
            let f = tape.param(yf.clone());
            let c = tape.constant(yc.clone());
            let e = causal_effect(&mut tape, f, c).unwrap();
            let l = l_causal(&mut tape, e, label).unwrap();
            tape.backward(l).unwrap();
            let g = tape.grad(f).unwrap().clone();
            for (a, b) in yf.data_mut().iter_mut().zip(g.data()) {
                *a -= 0.1 * b;
            }
            let m = margin(&yf);
            assert!(m > last, "step {step}: {m} <= {last}");
            last = m;
        }
    }

    #[test]
    fn miniature_total_gradcheck() {
        // C=3, H=W=4, M=2, K=3
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 2, "delta", 3, 3);
        let base = ClassifierHead::new(&mut store, 2, "base", 3, 3);
        let x = random_tensor(&[3, 4, 4], 17);
        let xa = random_tensor(&[3, 4, 4], 18);
        let f = positive_tensor(&[2, 4, 4], 19);
        let fa = positive_tensor(&[2, 4, 4], 20);
        let ca = positive_tensor(&[2, 4, 4], 21);
        let mut inputs = store.tensors().to_vec();
        inputs.extend([x, xa, f, fa, ca]);
        let r = finite_diff_check(
            |tape, v| {
                let n = v.len() - 5;
                let p = Binding::from_vars(v[..n].to_vec());
                let mk = |m| AttentionSet {
                    maps: m,
                    kind: AttentionKind::Factual,
                    provenance: Provenance::Augmented,
                };
                let (x, xa) = (v[n], v[n + 1]);
                let (f, fa, ca) = (mk(v[n + 2]), mk(v[n + 3]), mk(v[n + 4]));
                let yf = predict(tape, &p, &head, xa, &fa)?;
                let yc = predict(tape, &p, &head, xa, &ca)?;
                let e = causal_effect(tape, yf, yc)?;
                let parts = LossParts {
                    original: l_original(tape, &p, &base, x, 1)?,
                    causal: Some(l_causal(tape, e, 2)?),
                    decor: Some(l_decor(tape, yc)?),
                    aug: Some(l_aug(tape, x, xa, &f, &fa, 0)?),
                };
                l_total(tape, &parts, &LossWeights::default())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
