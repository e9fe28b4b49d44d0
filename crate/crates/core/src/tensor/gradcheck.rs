use super::{Tape, Tensor, Var};
use crate::error::{CdalError, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Checks `f` (which builds a scalar from its inputs on a fresh tape) at `inputs`.
///
/// Each coordinate gets `(f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps)` compared with the
/// backward gradient; the error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
/// Tensors passed through [`Tape::detach`] are recorded at `inputs` and replayed in
/// every perturbed evaluation, matching the zero gradient they get in backward.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let frozen = tape.detached().to_vec();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::replaying(frozen.clone());
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(CdalError::Numeric(format!("non-finite gradient at input {k} coord {i}")));
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = k;
                report.worst_coord = i;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
