//! Causal attention augmentation.
//!
//! 1. A standard augmentation chain (noise, then box blur, then global scale) is
//!    applied to the feature map as a detached data transformation.
//! 2. One factual map index `s` is drawn with probability proportional to its
//!    L1 energy.
//! 3. Features are recombined as `x ⊙ F_s + x_aug ⊙ c̄`, where `c̄` is the
//!    channel-mean of the counterfactual maps rescaled by its maximum.
//! 4. Factual and counterfactual attention are re-extracted from the result.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBranch, AttentionSet, CounterfactualSource, Provenance};
use crate::error::{CdalError, Result};
use crate::params::Binding;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugChainConfig {
    pub noise_sigma: f64,
    pub blur_passes: usize,
    pub scale_range: [f64; 2],
}

impl Default for AugChainConfig {
    fn default() -> Self {
        AugChainConfig {
            noise_sigma: 0.05,
            blur_passes: 1,
            scale_range: [0.9, 1.1],
        }
    }
}

impl AugChainConfig {
    /// A chain that leaves its input untouched.
    pub fn disabled() -> Self {
        AugChainConfig {
            noise_sigma: 0.0,
            blur_passes: 0,
            scale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CdalError::Config(format!("aug.noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(CdalError::Config(format!("aug.scale_range needs 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// One 3x3 box-blur pass; border pixels average over their in-bounds neighbours,
/// so constant fields are fixed points.
pub fn box_blur(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw("box_blur")?;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let mut s = 0.0;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        s += src[yy * w + xi];
                    }
                }
                out[(ch * h + y) * w + xx] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Applies the noise → blur → scale chain. Stages that are switched off consume no
/// randomness.
pub fn standard_aug(x: &Tensor, cfg: &AugChainConfig, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    let mut out = x.clone();
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for _ in 0..cfg.blur_passes {
        out = box_blur(&out)?;
    }
    let [lo, hi] = cfg.scale_range;
    if lo != 1.0 || hi != 1.0 {
        let k = if lo == hi { lo } else { rng.random_range(lo..hi) };
        out.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

/// Normalised L1 energy of each map in `f: [M,H,W]`.
pub fn energy_weights(f: &Tensor) -> Result<Vec<f64>> {
    let (m, _, _) = f.chw("energy_weights")?;
    let energies: Vec<f64> = (0..m).map(|i| f.channel(i).iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = energies.iter().sum();
    if !total.is_finite() {
        return Err(CdalError::Numeric(format!("attention energy {total} is not finite")));
    }
    if total <= 0.0 {
        return Err(CdalError::Degenerate(format!("attention energy {total} cannot form a distribution")));
    }
    Ok(energies.into_iter().map(|e| e / total).collect())
}

/// Draws a 0-based map index with probability equal to its energy weight.
pub fn sample_index(f: &Tensor, rng: &mut Rng) -> Result<usize> {
    let w = energy_weights(f)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(w.iter().rposition(|&wi| wi > 0.0).expect("non-degenerate"))
}

/// `c̄`: channel mean of `[M,H,W]` counterfactual maps divided by its maximum.
pub fn counterfactual_mask(tape: &mut Tape, c: Var) -> Result<Var> {
    let m = tape.shape(c)[0] as f64;
    let sum = tape.channel_sum(c)?;
    let mean = tape.scale(sum, 1.0 / m);
    Ok(tape.max_normalize(mean))
}

/// `x ⊙ f_s + x_aug ⊙ mask`, spatial maps broadcast over channels.
pub fn selective_mix(tape: &mut Tape, x: Var, x_aug: Var, f_s: Var, mask: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_aug) {
        return Err(CdalError::shape(
            "selective_augment",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(x_aug)),
        ));
    }
    let kept = tape.mul_spatial(x, f_s)?;
    let varied = tape.mul_spatial(x_aug, mask)?;
    tape.add(kept, varied)
}

pub fn selective_augment(tape: &mut Tape, x: Var, x_aug: Var, f_s: Var, c: &AttentionSet) -> Result<Var> {
    let mask = counterfactual_mask(tape, c.maps)?;
    selective_mix(tape, x, x_aug, f_s, mask)
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentOutput {
    pub x_aug: Var,
    pub f_aug: AttentionSet,
    pub c_aug: AttentionSet,
    /// 0-based index of the preserved factual map.
    pub s: usize,
}

/// Full augmentation pass over features `x` with attention `f`, `c` from the live branches.
#[allow(clippy::too_many_arguments)]
pub fn augment_pass(
    tape: &mut Tape,
    p: &Binding,
    x: Var,
    f: &AttentionSet,
    c: &AttentionSet,
    factual: &AttentionBranch,
    counterfactual: CounterfactualSource<'_>,
    cfg: &AugChainConfig,
    rng: &mut Rng,
) -> Result<AugmentOutput> {
    let noisy = standard_aug(tape.value(x), cfg, rng)?;
    let noisy = tape.detach(noisy)?;
    let s = sample_index(tape.value(f.maps), rng)?;
    let f_s = tape.channel(f.maps, s)?;
    let x_aug = selective_augment(tape, x, noisy, f_s, c)?;
    let f_aug = factual.extract_as(tape, p, x_aug, Provenance::Augmented)?;
    let c_aug = counterfactual.produce(tape, p, x_aug, &f_aug, rng)?;
    Ok(AugmentOutput { x_aug, f_aug, c_aug, s })
}
