//! Finite-difference gradient suite over every differentiable tape operation and
//! the composed training objective.

use rand::Rng as _;
use serde::Serialize;

use crate::attention::{attention_pool, AttentionBranch, AttentionKind, AttentionSet, CounterfactualMode, Provenance};
use crate::augment::AugChainConfig;
use crate::ce_conv::{CeConvLayer, ConvMode};
use crate::error::Result;
use crate::losses::{self, l_total, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::{Binding, ParamStore};
use crate::rng;
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;
/// The composed objective sums many terms, so roundoff needs a wider stencil.
const PIPELINE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub pass: bool,
}

fn uniform(shape: &[usize], label: &str) -> Tensor {
    let mut r = rng::stream(11, label);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Entries bounded away from zero so kinks at 0 stay out of the finite-difference stencil.
fn off_zero(shape: &[usize], label: &str) -> Tensor {
    uniform(shape, label).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn positive(shape: &[usize], label: &str) -> Tensor {
    uniform(shape, label).map(|v| v.abs() + 0.1)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct weight.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let w = uniform(tape.shape(v), "diag.projection");
    let w = tape.constant(w);
    let y = tape.mul(v, w)?;
    Ok(tape.sum(y))
}

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    macro_rules! case {
        ($name:expr, [$($input:expr),*], |$t:ident, $v:ident| $body:expr) => {
            ($name, vec![$($input),*], Box::new(move |$t: &mut Tape, $v: &[Var]| -> Result<Var> {
                let out = $body;
                project($t, out)
            }) as Builder)
        };
    }
    vec![
        case!("conv2d", [uniform(&[2, 4, 5], "c.x"), uniform(&[3, 2, 3, 3], "c.w")], |t, v| t.conv2d(v[0], v[1])?),
        case!("conv2d_1x1", [uniform(&[3, 4, 4], "c1.x"), uniform(&[2, 3, 1, 1], "c1.w")], |t, v| t.conv2d(v[0], v[1])?),
        case!("depthwise_conv2d", [uniform(&[3, 5, 4], "d.x"), uniform(&[3, 3, 3], "d.w")], |t, v| t
            .depthwise_conv2d(v[0], v[1])?),
        case!("gap", [uniform(&[3, 4, 4], "g.x")], |t, v| t.gap(v[0])?),
        case!("avg_pool2", [uniform(&[2, 4, 6], "p.x")], |t, v| t.avg_pool2(v[0])?),
        case!("linear", [uniform(&[5], "l.x"), uniform(&[3, 5], "l.w"), uniform(&[3], "l.b")], |t, v| t
            .linear(v[0], v[1], v[2])?),
        case!("sigmoid", [uniform(&[7], "s.x").map(|x| 3.0 * x)], |t, v| t.sigmoid(v[0])),
        case!("relu", [off_zero(&[9], "r.x")], |t, v| t.relu(v[0])),
        case!("softplus", [uniform(&[7], "sp.x").map(|x| 4.0 * x)], |t, v| t.softplus(v[0])),
        case!("softmax", [uniform(&[2, 4], "sm.x")], |t, v| t.softmax(v[0])),
        case!("log_softmax", [uniform(&[2, 4], "lsm.x")], |t, v| t.log_softmax(v[0])),
        case!("add", [uniform(&[2, 3], "a.a"), uniform(&[2, 3], "a.b")], |t, v| t.add(v[0], v[1])?),
        case!("sub", [uniform(&[2, 3], "s.a"), uniform(&[2, 3], "s.b")], |t, v| t.sub(v[0], v[1])?),
        case!("mul", [uniform(&[2, 3], "m.a"), uniform(&[2, 3], "m.b")], |t, v| t.mul(v[0], v[1])?),
        case!("scale", [uniform(&[4], "sc.x")], |t, v| t.scale(v[0], -2.5)),
        case!("add_n", [uniform(&[3], "an.a"), uniform(&[3], "an.b"), uniform(&[3], "an.c")], |t, v| t
            .add_n(&[v[0], v[1], v[2]])?),
        case!("mul_spatial", [uniform(&[2, 3, 3], "ms.x"), uniform(&[3, 3], "ms.a")], |t, v| t
            .mul_spatial(v[0], v[1])?),
        case!("add_channel_bias", [uniform(&[2, 3, 3], "cb.x"), uniform(&[2], "cb.b")], |t, v| t
            .add_channel_bias(v[0], v[1])?),
        case!("concat_channels", [uniform(&[1, 2, 3], "cc.a"), uniform(&[2, 2, 3], "cc.b")], |t, v| t
            .concat_channels(v[0], v[1])?),
        case!("mean_abs", [off_zero(&[2, 3, 3], "ma.x")], |t, v| t.mean_abs(v[0])),
        case!("sum", [uniform(&[2, 3], "su.x")], |t, v| t.sum(v[0])),
        case!("mean", [uniform(&[2, 3], "me.x")], |t, v| t.mean(v[0])),
        case!("pick", [uniform(&[5], "pk.x")], |t, v| t.pick(v[0], 3)?),
        case!("channel", [uniform(&[3, 2, 2], "ch.x")], |t, v| t.channel(v[0], 1)?),
        case!("channel_sum", [uniform(&[3, 2, 2], "cs.x")], |t, v| t.channel_sum(v[0])?),
        case!("max_normalize", [positive(&[3, 3], "mn.x")], |t, v| t.max_normalize(v[0])),
        case!("mix", [uniform(&[3], "mx.a"), uniform(&[3, 2, 2, 3, 3], "mx.e")], |t, v| t.mix(v[0], v[1])?),
    ]
}

fn check(name: &str, inputs: &[Tensor], tol: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradRow> {
    check_eps(name, inputs, tol, EPS, f)
}

fn check_eps(
    name: &str,
    inputs: &[Tensor],
    tol: f64,
    eps: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradRow> {
    let r = finite_diff_check(f, inputs, eps)?;
    Ok(GradRow {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        tolerance: tol,
        coords: r.coords_checked,
        pass: r.max_rel_error < tol,
    })
}

/// All parameters of `store` checked through `f`, which receives them as a binding.
fn check_store(
    name: &str,
    store: &ParamStore,
    extra: &[Tensor],
    tol: f64,
    eps: f64,
    f: impl Fn(&mut Tape, &Binding, &[Var]) -> Result<Var>,
) -> Result<GradRow> {
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend_from_slice(extra);
    check_eps(name, &inputs, tol, eps, |tape, vars| {
        let p = Binding::from_vars(vars[..n].to_vec());
        f(tape, &p, &vars[n..])
    })
}

fn composite_rows() -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (label, mode, c_in, c_out) in [
        ("ce_conv_standard", ConvMode::Standard, 3, 2),
        ("ce_conv_depthwise", ConvMode::Depthwise, 3, 3),
    ] {
        let mut store = ParamStore::new();
        let k = if mode == ConvMode::Standard { 1 } else { 3 };
        let layer = CeConvLayer::new(&mut store, 3, "ce", mode, c_in, c_out, k, 3)?;
        let x = uniform(&[c_in, 4, 4], label);
        rows.push(check_store(label, &store, &[x], OP_TOLERANCE, EPS, |t, p, v| {
            let y = layer.forward(t, p, v[0])?;
            project(t, y)
        })?);
    }

    let mut store = ParamStore::new();
    let branch = AttentionBranch::new(&mut store, 4, "attn", AttentionKind::Factual, 4, 4, 2)?;
    let x = uniform(&[4, 4, 4], "branch.x");
    rows.push(check_store("attention_branch_pool", &store, &[x], OP_TOLERANCE, EPS, |t, p, v| {
        let a = branch.extract(t, p, v[0])?;
        let first = t.channel(a.maps, 0)?;
        let pooled = attention_pool(t, v[0], first)?;
        project(t, pooled)
    })?);

    let set = |maps: Var| AttentionSet {
        maps,
        kind: AttentionKind::Factual,
        provenance: Provenance::Original,
    };
    rows.push(check(
        "l_causal",
        &[uniform(&[4], "lc.f"), uniform(&[4], "lc.c")],
        OP_TOLERANCE,
        |t, v| {
            let e = losses::causal_effect(t, v[0], v[1])?;
            losses::l_causal(t, e, 2)
        },
    )?);
    rows.push(check("l_decor", &[uniform(&[4], "ld.c").map(|x| 2.0 * x)], OP_TOLERANCE, |t, v| {
        losses::l_decor(t, v[0])
    })?);
    rows.push(check(
        "l_aug",
        &[
            off_zero(&[2, 3, 3], "la.x"),
            off_zero(&[2, 3, 3], "la.xa"),
            positive(&[3, 3, 3], "la.f"),
            positive(&[3, 3, 3], "la.fa"),
        ],
        OP_TOLERANCE,
        |t, v| losses::l_aug(t, v[0], v[1], &set(v[2]), &set(v[3]), 1),
    )?);
    Ok(rows)
}

/// Full objective over every model parameter: batch of 2 images at 8x8, frozen
/// sample streams so each evaluation replays the same augmentation draws.
pub fn pipeline_row(mode: CounterfactualMode) -> Result<GradRow> {
    let model = Model::new(
        ModelConfig {
            counterfactual_mode: mode,
            ..ModelConfig::default()
        },
        3,
        3,
        21,
    )?;
    let images = [positive(&[3, 8, 8], "pipe.img0"), positive(&[3, 8, 8], "pipe.img1")];
    let aug = AugChainConfig::default();
    let weights = LossWeights::default();
    check_store(&format!("pipeline_{mode}"), &model.store, &[], PIPELINE_TOLERANCE, PIPELINE_EPS, |t, p, _| {
        let mut totals = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let mut r = rng::indexed(5, "pipe.sample", i as u64);
            let g = model.sample_graph(t, p, img, i % 3, &aug, &mut r)?;
            totals.push(l_total(t, &g.parts, &weights)?);
        }
        let sum = t.add_n(&totals)?;
        Ok(t.scale(sum, 0.5))
    })
}

/// Every registered operation, the composite building blocks, and the full pipeline.
pub fn gradcheck_suite() -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (name, inputs, f) in op_cases() {
        rows.push(check(name, &inputs, OP_TOLERANCE, f)?);
    }
    rows.extend(composite_rows()?);
    rows.push(pipeline_row(CounterfactualMode::Learned)?);
    Ok(rows)
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut out = format!("{:<28} {:>12} {:>10} {:>7}  status\n", "check", "max_rel_err", "tolerance", "coords");
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:>12.3e} {:>10.0e} {:>7}  {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.coords,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}
