//! Factual and counterfactual attention extraction.
//!
//! Each branch runs two CE-conv paths over the feature map `X`:
//! a 1x1 CE conv giving `X_cross` (M/2 channels), then a depthwise 3x3 CE conv
//! followed by a pointwise 1x1 mix giving `X_depth` (M/2 channels). The maps are
//! `softplus(concat[X_cross, X_depth])`, which keeps every entry non-negative.
//!
//! The factual and counterfactual branches share this code but never share
//! parameters. For ablations, [`static_counterfactual`] replaces the learned
//! counterfactual branch with a fixed construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ce_conv::{CeConvLayer, ConvMode};
use crate::error::{CdalError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Factual,
    Counterfactual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

/// `M` attention maps `[M,H,W]` recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSet {
    pub maps: Var,
    pub kind: AttentionKind,
    pub provenance: Provenance,
}

impl AttentionSet {
    pub fn count(&self, tape: &Tape) -> usize {
        tape.shape(self.maps)[0]
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub kind: AttentionKind,
    pub c_in: usize,
    pub n_maps: usize,
    pub ce_1x1: CeConvLayer,
    pub ce_dw: CeConvLayer,
    pub pointwise: ParamId,
}

impl AttentionBranch {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        kind: AttentionKind,
        c_in: usize,
        n_maps: usize,
        n_experts: usize,
    ) -> Result<Self> {
        if n_maps == 0 || n_maps % 2 != 0 {
            return Err(CdalError::Config(format!("attention map count {n_maps} must be even and positive")));
        }
        let half = n_maps / 2;
        let ce_1x1 = CeConvLayer::new(store, seed, &format!("{prefix}.cross"), ConvMode::Standard, c_in, half, 1, n_experts)?;
        let ce_dw = CeConvLayer::new(store, seed, &format!("{prefix}.depth"), ConvMode::Depthwise, half, half, 3, n_experts)?;
        let pointwise = store.add_he(seed, &format!("{prefix}.depth.pointwise"), &[half, half, 1, 1], half);
        Ok(AttentionBranch {
            kind,
            c_in,
            n_maps,
            ce_1x1,
            ce_dw,
            pointwise,
        })
    }

    pub fn extract(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<AttentionSet> {
        self.extract_as(tape, p, x, Provenance::Original)
    }

    pub fn extract_as(&self, tape: &mut Tape, p: &Binding, x: Var, provenance: Provenance) -> Result<AttentionSet> {
        let cross = self.ce_1x1.forward(tape, p, x)?;
        let depth = self.ce_dw.forward(tape, p, cross)?;
        let depth = tape.conv2d(depth, p[self.pointwise])?;
        let both = tape.concat_channels(cross, depth)?;
        Ok(AttentionSet {
            maps: tape.softplus(both),
            kind: self.kind,
            provenance,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ce_1x1.param_ids().to_vec();
        ids.extend(self.ce_dw.param_ids());
        ids.push(self.pointwise);
        ids
    }
}

/// Attention pooling: `h[c] = (1/HW) Σ x[c,h,w]·a[h,w]`.
pub fn attention_pool(tape: &mut Tape, x: Var, a: Var) -> Result<Var> {
    let weighted = tape.mul_spatial(x, a)?;
    tape.gap(weighted)
}

/// How counterfactual attention is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CounterfactualMode {
    /// The learned counterfactual CE-conv branch.
    Learned,
    Random,
    Uniform,
    Reversed,
    Shuffle,
}

impl CounterfactualMode {
    pub const ALL: [CounterfactualMode; 5] = [
        CounterfactualMode::Learned,
        CounterfactualMode::Random,
        CounterfactualMode::Uniform,
        CounterfactualMode::Reversed,
        CounterfactualMode::Shuffle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CounterfactualMode::Learned => "learned",
            CounterfactualMode::Random => "random",
            CounterfactualMode::Uniform => "uniform",
            CounterfactualMode::Reversed => "reversed",
            CounterfactualMode::Shuffle => "shuffle",
        }
    }

    pub fn is_static(self) -> bool {
        self != CounterfactualMode::Learned
    }
}

impl fmt::Display for CounterfactualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CounterfactualMode {
    type Err = CdalError;

    fn from_str(s: &str) -> Result<Self> {
        CounterfactualMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CdalError::Config(format!("unknown counterfactual mode {s:?}")))
    }
}

/// Fixed counterfactual maps derived from factual maps `f: [M,H,W]`.
///
/// - `random`: i.i.d. uniform(0,1) entries.
/// - `uniform`: every entry `1/(HW)`.
/// - `reversed`: `max(F_i) − F_i` per map.
/// - `shuffle`: `F_i` with spatial positions permuted, one permutation per map.
pub fn static_counterfactual(mode: CounterfactualMode, f: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let (m, h, w) = f.chw("static_counterfactual")?;
    let plane = h * w;
    let data: Vec<f64> = match mode {
        CounterfactualMode::Learned => {
            return Err(CdalError::InvalidArgument(
                "learned counterfactuals come from the counterfactual branch".into(),
            ))
        }
        CounterfactualMode::Random => (0..m * plane).map(|_| rng.random::<f64>()).collect(),
        CounterfactualMode::Uniform => vec![1.0 / plane as f64; m * plane],
        CounterfactualMode::Reversed => (0..m)
            .flat_map(|i| {
                let map = f.channel(i);
                let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                map.iter().map(move |v| mx - v).collect::<Vec<_>>()
            })
            .collect(),
        CounterfactualMode::Shuffle => {
            let mut out = Vec::with_capacity(m * plane);
            let mut perm: Vec<usize> = (0..plane).collect();
            for i in 0..m {
                perm.shuffle(rng);
                let map = f.channel(i);
                out.extend(perm.iter().map(|&j| map[j]));
            }
            out
        }
    };
    Tensor::new(vec![m, h, w], data)
}

/// Where counterfactual maps come from during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum CounterfactualSource<'a> {
    Branch(&'a AttentionBranch),
    /// A fixed construction from the factual maps; gradients do not flow into it.
    Static(CounterfactualMode),
}

impl CounterfactualSource<'_> {
    /// Counterfactual maps for features `x` whose factual maps are `factual`.
    pub fn produce(
        &self,
        tape: &mut Tape,
        p: &Binding,
        x: Var,
        factual: &AttentionSet,
        rng: &mut Rng,
    ) -> Result<AttentionSet> {
        match *self {
            CounterfactualSource::Branch(b) => b.extract_as(tape, p, x, factual.provenance),
            CounterfactualSource::Static(mode) => {
                let maps = static_counterfactual(mode, tape.value(factual.maps), rng)?;
                Ok(AttentionSet {
                    maps: tape.detach(maps)?,
                    kind: AttentionKind::Counterfactual,
                    provenance: factual.provenance,
                })
            }
        }
    }
}
