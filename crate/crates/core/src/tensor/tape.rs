use super::kernels;
use super::Tensor;
use crate::error::{CdalError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var },
    Depthwise { x: Var, w: Var },
    Gap(Var),
    AvgPool2(Var),
    Linear { x: Var, w: Var, b: Var },
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulSpatial { x: Var, a: Var },
    ChannelBias { x: Var, b: Var },
    Concat(Var, Var),
    MeanAbs(Var),
    Sum(Var),
    Pick(Var, usize),
    Channel(Var, usize),
    ChannelSum(Var),
    MaxNormalize { x: Var, argmax: Option<usize> },
    Mix { alpha: Var, experts: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph in topological order and differentiates it.
///
/// A tape is confined to one thread. Values are immutable once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient accumulator for `v`, or None when `v` needs no gradient.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn rows(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().expect("rank >= 1");
    (t.len() / last, last)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose [`Tape::detach`] calls return `values` in order instead of
    /// their arguments, so a graph can be re-evaluated with its detached inputs held
    /// fixed.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Tape {
            replay: Some(values),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as data; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant computed from values already on the tape. The tensor is logged
    /// (see [`Tape::detached`]) and swapped for the replayed one on a replaying tape.
    pub fn detach(&mut self, value: Tensor) -> Result<Var> {
        let k = self.detached.len();
        let value = match &self.replay {
            Some(r) => {
                let v = r
                    .get(k)
                    .ok_or_else(|| CdalError::shape("detach", format!("no replay value for detach #{k}")))?;
                if v.shape() != value.shape() {
                    return Err(CdalError::shape(
                        "detach",
                        format!("replay #{k} {:?} vs {:?}", v.shape(), value.shape()),
                    ));
                }
                v.clone()
            }
            None => value,
        };
        self.detached.push(value.clone());
        Ok(self.constant(value))
    }

    /// Every tensor passed through [`Tape::detach`], in call order.
    pub fn detached(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CdalError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- forward ops ----

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw("conv2d")?;
        let (c_out, wc, kh, kw) = match self.shape(w) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(CdalError::shape("conv2d", format!("kernel must be rank 4, got {s:?}"))),
        };
        if wc != c_in {
            return Err(CdalError::shape("conv2d", format!("input has {c_in} channels, kernel expects {wc}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CdalError::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        let mut out = vec![0.0; c_out * h * wd];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &mut out, c_in, c_out, h, wd, kh, kw);
        let value = Tensor::new(vec![c_out, h, wd], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w }, rg))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw("depthwise_conv2d")?;
        let (wc, kh, kw) = self.value(w).chw("depthwise_conv2d")?;
        if wc != c {
            return Err(CdalError::shape("depthwise_conv2d", format!("input has {c} channels, kernel has {wc}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CdalError::shape("depthwise_conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        let mut out = vec![0.0; c * h * wd];
        kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &mut out, c, h, wd, kh, kw);
        let value = Tensor::new(vec![c, h, wd], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Depthwise { x, w }, rg))
    }

    /// Global average pooling `[C,H,W] -> [C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("gap")?;
        let plane = (h * w) as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| self.value(x).channel(ch).iter().sum::<f64>() / plane)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(out), Op::Gap(x), rg))
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CdalError::shape("avg_pool2", format!("spatial size {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] = 0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2(x), rg))
    }

    /// `w·x + b` with `x: [n]`, `w: [m,n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = match self.shape(x) {
            &[n] => n,
            s => return Err(CdalError::shape("linear", format!("input must be rank 1, got {s:?}"))),
        };
        let m = match self.shape(w) {
            &[m, k] if k == n => m,
            s => return Err(CdalError::shape("linear", format!("weight {s:?} incompatible with input [{n}]"))),
        };
        if self.shape(b) != [m] {
            return Err(CdalError::shape("linear", format!("bias {:?} must be [{m}]", self.shape(b))));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out: Vec<f64> = (0..m)
            .map(|i| bv[i] + wv[i * n..(i + 1) * n].iter().zip(xv).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(out), Op::Linear { x, w, b }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// `ln(1 + e^z)`, evaluated stably for large `|z|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softplus(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, n) = rows(t);
        let mut out = t.data().to_vec();
        for row in 0..r {
            let s = &mut out[row * n..(row + 1) * n];
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in s.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            s.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, n) = rows(t);
        let mut out = t.data().to_vec();
        for row in 0..r {
            let s = &mut out[row * n..(row + 1) * n];
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            s.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("elem_add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("elem_sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("elem_mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, k), rg)
    }

    /// Sum of same-shaped vars; `vars` must be non-empty.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| CdalError::InvalidArgument("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Hadamard product of `x: [C,H,W]` with a spatial map `a: [H,W]` broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("mul_spatial")?;
        if self.shape(a) != [h, w] {
            return Err(CdalError::shape("mul_spatial", format!("map {:?} vs features [{c},{h},{w}]", self.shape(a))));
        }
        let av = self.value(a).data();
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * av[i % plane])
            .collect();
        let rg = self.rg(&[x, a]);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::MulSpatial { x, a }, rg))
    }

    /// Adds `b[c]` to every entry of channel `c` of `x: [C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("add_channel_bias")?;
        if self.shape(b) != [c] {
            return Err(CdalError::shape("add_channel_bias", format!("bias {:?} vs {c} channels", self.shape(b))));
        }
        let bv = self.value(b).data();
        let plane = h * w;
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + bv[i / plane]).collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::ChannelBias { x, b }, rg))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(CdalError::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(a, b), rg))
    }

    /// Mean of absolute values over all entries, as a scalar.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::MeanAbs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.len() {
            return Err(CdalError::InvalidArgument(format!("pick index {i} out of range {}", t.len())));
        }
        let v = t.data()[i];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, i), rg))
    }

    /// Map `i` of `[C,H,W]`, as `[H,W]`.
    pub fn channel(&mut self, x: Var, i: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("channel")?;
        if i >= c {
            return Err(CdalError::InvalidArgument(format!("channel {i} out of range {c}")));
        }
        let data = self.value(x).channel(i).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![h, w], data)?, Op::Channel(x, i), rg))
    }

    /// Sum over channels `[C,H,W] -> [H,W]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("channel_sum")?;
        let t = self.value(x);
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(t.channel(ch)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![h, w], out)?, Op::ChannelSum(x), rg))
    }

    /// `x / max(x)` when the maximum is positive, all zeros otherwise.
    pub fn max_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (argmax, mx) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let (value, argmax) = if mx > 0.0 {
            (t.map(|v| v / mx), Some(argmax))
        } else {
            (Tensor::zeros(t.shape()), None)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxNormalize { x, argmax }, rg)
    }

    /// `Σ_i alpha[i] · experts[i]` where `experts` stacks `N` same-shaped kernels on axis 0.
    pub fn mix(&mut self, alpha: Var, experts: Var) -> Result<Var> {
        let n = match self.shape(alpha) {
            &[n] => n,
            s => return Err(CdalError::shape("mix", format!("alpha must be rank 1, got {s:?}"))),
        };
        let es = self.shape(experts);
        if es.len() < 2 || es[0] != n {
            return Err(CdalError::shape("mix", format!("experts {es:?} do not stack {n} kernels")));
        }
        let shape = es[1..].to_vec();
        let k: usize = shape.iter().product();
        let (av, ev) = (self.value(alpha).data(), self.value(experts).data());
        let mut out = vec![0.0; k];
        for (i, a) in av.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(&ev[i * k..(i + 1) * k]) {
                *o += a * e;
            }
        }
        let rg = self.rg(&[alpha, experts]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mix { alpha, experts }, rg))
    }

    // ---- reverse pass ----

    /// Backpropagates from a scalar `loss`, populating gradients for every node that
    /// requires one. Replaces gradients from any earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(CdalError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w } => {
                let (c_in, h, wd) = self.value(x).chw("conv2d").expect("recorded");
                let ws = self.shape(w);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let mut gx = slot!(x).map(|v| std::mem::take(v));
                let mut gw = slot!(w).map(|v| std::mem::take(v));
                kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    c_in,
                    c_out,
                    h,
                    wd,
                    kh,
                    kw,
                );
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
            }
            Op::Depthwise { x, w } => {
                let (c, h, wd) = self.value(x).chw("depthwise").expect("recorded");
                let ws = self.shape(w);
                let (kh, kw) = (ws[1], ws[2]);
                let mut gx = slot!(x).map(|v| std::mem::take(v));
                let mut gw = slot!(w).map(|v| std::mem::take(v));
                kernels::depthwise_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                );
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
            }
            Op::Gap(x) => {
                if let Some(gx) = slot!(x) {
                    let plane = gx.len() / g.len();
                    let inv = 1.0 / plane as f64;
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i / plane] * inv;
                    }
                }
            }
            Op::AvgPool2(x) => {
                if let Some(gx) = slot!(x) {
                    let (c, h, w) = self.value(x).chw("avg_pool2").expect("recorded");
                    let (oh, ow) = (h / 2, w / 2);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = 0.25 * g[(ch * oh + y) * ow + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                gx[base] += gv;
                                gx[base + 1] += gv;
                                gx[base + w] += gv;
                                gx[base + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let n = self.value(x).len();
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                if let Some(gx) = slot!(x) {
                    for (i, gi) in g.iter().enumerate() {
                        for (xj, wij) in gx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *xj += gi * wij;
                        }
                    }
                }
                if let Some(gw) = slot!(w) {
                    for (i, gi) in g.iter().enumerate() {
                        for (wij, xj) in gw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *wij += gi * xj;
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ChannelBias { x, b } => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = slot!(b) {
                    let plane = g.len() / gb.len();
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        gb[c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(x) {
                    for ((a, gi), s) in gx.iter_mut().zip(g).zip(out) {
                        *a += gi * s * (1.0 - s);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = slot!(x) {
                    for ((a, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = slot!(x) {
                    for ((a, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gi * sigmoid(*v);
                    }
                }
            }
            Op::Softmax(x) => {
                let (r, n) = rows(&node.value);
                if let Some(gx) = slot!(x) {
                    for row in 0..r {
                        let s = &out[row * n..(row + 1) * n];
                        let gr = &g[row * n..(row + 1) * n];
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[row * n + j] += s[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (r, n) = rows(&node.value);
                if let Some(gx) = slot!(x) {
                    for row in 0..r {
                        let ls = &out[row * n..(row + 1) * n];
                        let gr = &g[row * n..(row + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            gx[row * n + j] += gr[j] - ls[j].exp() * total;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = slot!(a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += k * b);
                }
            }
            Op::MulSpatial { x, a } => {
                let (xv, av) = (self.value(x).data(), self.value(a).data());
                let plane = av.len();
                if let Some(gx) = slot!(x) {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i] * av[i % plane];
                    }
                }
                if let Some(ga) = slot!(a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % plane] += gi * xv[i];
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(a).len();
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y);
                }
            }
            Op::MeanAbs(x) => {
                let xv = self.value(x).data();
                let k = g[0] / xv.len() as f64;
                if let Some(gx) = slot!(x) {
                    for (a, v) in gx.iter_mut().zip(xv) {
                        if *v > 0.0 {
                            *a += k;
                        } else if *v < 0.0 {
                            *a -= k;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Pick(x, i) => {
                if let Some(gx) = slot!(x) {
                    gx[i] += g[0];
                }
            }
            Op::Channel(x, i) => {
                if let Some(gx) = slot!(x) {
                    let plane = g.len();
                    gx[i * plane..(i + 1) * plane].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ChannelSum(x) => {
                if let Some(gx) = slot!(x) {
                    let plane = g.len();
                    for (i, a) in gx.iter_mut().enumerate() {
                        *a += g[i % plane];
                    }
                }
            }
            Op::MaxNormalize { x, argmax } => {
                if let (Some(k), Some(gx)) = (argmax, slot!(x)) {
                    let xv = self.value(x).data();
                    let m = xv[k];
                    let cross: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() / (m * m);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b / m);
                    gx[k] -= cross;
                }
            }
            Op::Mix { alpha, experts } => {
                let (av, ev) = (self.value(alpha).data(), self.value(experts).data());
                let k = g.len();
                if let Some(ga) = slot!(alpha) {
                    for (i, a) in ga.iter_mut().enumerate() {
                        *a += ev[i * k..(i + 1) * k].iter().zip(g).map(|(e, gi)| e * gi).sum::<f64>();
                    }
                }
                if let Some(ge) = slot!(experts) {
                    for (i, a) in av.iter().enumerate() {
                        for (e, gi) in ge[i * k..(i + 1) * k].iter_mut().zip(g) {
                            *e += a * gi;
                        }
                    }
                }
            }
        }
    }
}
