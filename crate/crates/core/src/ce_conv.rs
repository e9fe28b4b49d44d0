//! Causal Expert convolution: a dynamic kernel built per input as the
//! sigmoid-gated sum of `N_exp` expert kernels, `W' = Σ α_i W_i` with
//! `α = σ(MLP(GAP(x)))`.

use serde::{Deserialize, Serialize};

use crate::error::{CdalError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Gate MLP reduction ratio: hidden width is `max(1, C_in / 4)`.
pub const GATE_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Standard,
    Depthwise,
}

#[derive(Clone, Debug)]
pub struct CeConvLayer {
    pub mode: ConvMode,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub n_experts: usize,
    /// Experts stacked on a leading axis: `[N, C_out, C_in, k, k]` or `[N, C, k, k]`.
    pub experts: ParamId,
    pub gate_w1: ParamId,
    pub gate_b1: ParamId,
    pub gate_w2: ParamId,
    pub gate_b2: ParamId,
}

impl CeConvLayer {
    /// Registers a layer's parameters under `prefix`. Each expert is drawn from its own
    /// stream; gate biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        mode: ConvMode,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        n_experts: usize,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(CdalError::Config(format!("{prefix}: n_experts must be >= 1")));
        }
        if kernel % 2 == 0 {
            return Err(CdalError::Config(format!("{prefix}: kernel {kernel} must be odd")));
        }
        if mode == ConvMode::Depthwise && c_in != c_out {
            return Err(CdalError::Config(format!("{prefix}: depthwise layer needs c_in == c_out")));
        }
        let kernel_shape: Vec<usize> = match mode {
            ConvMode::Standard => vec![c_out, c_in, kernel, kernel],
            ConvMode::Depthwise => vec![c_in, kernel, kernel],
        };
        let fan_in = match mode {
            ConvMode::Standard => c_in * kernel * kernel,
            ConvMode::Depthwise => kernel * kernel,
        };
        let mut scratch = ParamStore::new();
        let mut data = Vec::new();
        for i in 0..n_experts {
            let id = scratch.add_he(seed, &format!("{prefix}.experts.{i}"), &kernel_shape, fan_in);
            data.extend_from_slice(scratch.get(id).data());
        }
        let mut shape = vec![n_experts];
        shape.extend_from_slice(&kernel_shape);
        let experts = store.add(format!("{prefix}.experts"), Tensor::new(shape, data)?);

        let hidden = (c_in / GATE_REDUCTION).max(1);
        let gate_w1 = store.add_he(seed, &format!("{prefix}.gate.w1"), &[hidden, c_in], c_in);
        let gate_b1 = store.add_zeros(&format!("{prefix}.gate.b1"), &[hidden]);
        let gate_w2 = store.add_he(seed, &format!("{prefix}.gate.w2"), &[n_experts, hidden], hidden);
        let gate_b2 = store.add_zeros(&format!("{prefix}.gate.b2"), &[n_experts]);
        Ok(CeConvLayer {
            mode,
            c_in,
            c_out,
            kernel,
            n_experts,
            experts,
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        match tape.shape(x) {
            &[c, _, _] if c == self.c_in => Ok(()),
            s => Err(CdalError::shape(
                "ce_conv",
                format!("layer expects [{}, H, W], got {s:?}", self.c_in),
            )),
        }
    }

    /// Causal contribution factors `α ∈ (0,1)^N`.
    pub fn gate(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let pooled = tape.gap(x)?;
        let h = tape.linear(pooled, p[self.gate_w1], p[self.gate_b1])?;
        let h = tape.relu(h);
        let z = tape.linear(h, p[self.gate_w2], p[self.gate_b2])?;
        Ok(tape.sigmoid(z))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let alpha = self.gate(tape, p, x)?;
        self.forward_with_alpha(tape, p, x, alpha)
    }

    /// Convolves with the mixture kernel built from a given `alpha`.
    pub fn forward_with_alpha(&self, tape: &mut Tape, p: &Binding, x: Var, alpha: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let kernel = tape.mix(alpha, p[self.experts])?;
        match self.mode {
            ConvMode::Standard => tape.conv2d(x, kernel),
            ConvMode::Depthwise => tape.depthwise_conv2d(x, kernel),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.experts, self.gate_w1, self.gate_b1, self.gate_w2, self.gate_b2]
    }
}
