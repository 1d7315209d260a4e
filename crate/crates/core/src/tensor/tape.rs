use super::kernels::{self, ConvGeom};
use super::{ensure_same_shape, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        y: usize,
        w: usize,
        geom: ConvGeom,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Shift(usize),
    LeakyRelu(usize, f32),
    Tanh(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Upsample2(usize),
    SumAll(usize),
    MeanAll(usize),
    ChannelMean(usize),
    SampleMean(usize),
    L1(usize, usize),
    ReluMean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only leaves keep one.
    grad: Option<Tensor>,
    /// f64 value of scalar reductions and of scalar arithmetic on them.
    exact: Option<f64>,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller indices than the node itself and a reverse sweep over indices is
/// a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value as a constant; gradient never flows through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Value of a scalar node, in f64 when the node was produced by a
    /// reduction (or scalar arithmetic on reductions).
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        match node.exact {
            Some(x) => Ok(x),
            None => node.value.item().map(f64::from),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let exact = self.exact_scalar(&op);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
            exact,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_reduction(&mut self, value: f64, requires_grad: bool, op: Op) -> Var {
        let v = self.push(Tensor::scalar(value as f32), requires_grad, op);
        self.nodes[v.0].exact = Some(value);
        v
    }

    fn exact_scalar(&self, op: &Op) -> Option<f64> {
        let ex = |i: usize| self.nodes[i].exact;
        match *op {
            Op::Add(a, b) => Some(ex(a)? + ex(b)?),
            Op::Sub(a, b) => Some(ex(a)? - ex(b)?),
            Op::Mul(a, b) => Some(ex(a)? * ex(b)?),
            Op::Scale(a, s) => Some(ex(a)? * f64::from(s)),
            // shift amount is not stored; handled in `shift`
            _ => None,
        }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- convolution -------------------------------------------------

    /// Grouped 2-D cross-correlation. `weight` is `(Cout, Cin/groups, kh, kw)`,
    /// `bias` holds `Cout` values.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geom.cout {
                return Err(Error::shape(format!(
                    "conv2d bias has {} values, expected {}",
                    self.value(b).numel(),
                    geom.cout
                )));
            }
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut ids = vec![input.0, weight.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.any_grad(&ids);
        let value = Tensor::new(geom.y_shape(), out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x: input.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                geom,
            },
        ))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with the same
    /// weight, stride and groups (padding 0). `weight` is
    /// `(Cin, Cout/groups, kh, kw)` where `Cin` is this op's input channels.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom =
            ConvGeom::for_transpose(self.shape(input), self.shape(weight), stride, groups)?;
        let out = kernels::conv_backward_input(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
        );
        let rg = self.any_grad(&[input.0, weight.0]);
        let value = Tensor::new(geom.x_shape(), out)?;
        Ok(self.push(
            value,
            rg,
            Op::ConvTranspose2d {
                y: input.0,
                w: weight.0,
                geom,
            },
        ))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        ensure_same_shape(name, self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    /// `a + s` for a scalar constant `s`.
    pub fn shift(&mut self, a: Var, s: f32) -> Var {
        let exact = self.nodes[a.0].exact.map(|x| x + f64::from(s));
        let v = self.unary(a, |x| x + s, Op::Shift(a.0));
        self.nodes[v.0].exact = exact;
        v
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(
            a,
            |x| if x >= 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a.0))
    }

    // ---- normalization / resampling ------------------------------------

    /// Training-mode batch normalization over (N, H, W) per channel.
    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let s = self.shape(input);
        let m = s.n * s.plane();
        if m < 2 {
            return Err(Error::shape(format!(
                "batch_norm2d needs N*H*W >= 2, input is {s}"
            )));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != s.c {
                return Err(Error::shape(format!(
                    "batch_norm2d {name} has {} values, expected {}",
                    self.value(p).numel(),
                    s.c
                )));
            }
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let plane = s.plane();
        let mut xhat = vec![0.0f32; s.numel()];
        let mut out = vec![0.0f32; s.numel()];
        let mut inv_std = vec![0.0f32; s.c];
        for c in 0..s.c {
            let channel = || {
                (0..s.n).flat_map(move |n| {
                    let off = (n * s.c + c) * plane;
                    off..off + plane
                })
            };
            let mean = channel().map(|i| f64::from(x[i])).sum::<f64>() / m as f64;
            let var = channel()
                .map(|i| {
                    let d = f64::from(x[i]) - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let istd = 1.0 / (var + f64::from(eps)).sqrt();
            inv_std[c] = istd as f32;
            for i in channel() {
                let xh = ((f64::from(x[i]) - mean) * istd) as f32;
                xhat[i] = xh;
                out[i] = g[c] * xh + b[c];
            }
        }
        let rg = self.any_grad(&[input.0, gamma.0, beta.0]);
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let src = self.value(a).data();
        let (h2, w2) = (2 * s.h, 2 * s.w);
        let mut out = vec![0.0f32; s.n * s.c * h2 * w2];
        for nc in 0..s.n * s.c {
            let sp = &src[nc * s.plane()..(nc + 1) * s.plane()];
            let dp = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dp[y * w2 + x] = sp[(y / 2) * s.w + x / 2];
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(Shape::new(s.n, s.c, h2, w2), out).expect("shape by construction");
        self.push(value, rg, Op::Upsample2(a.0))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = sum_f64(self.value(a).data());
        let rg = self.nodes[a.0].requires_grad;
        self.push_reduction(v, rg, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = sum_f64(t.data()) / t.numel() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push_reduction(v, rg, Op::MeanAll(a.0))
    }

    /// Mean over channels: `N×C×H×W → N×1×H×W`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let src = self.value(a).data();
        let plane = s.plane();
        let mut out = vec![0.0f32; s.n * plane];
        for n in 0..s.n {
            for i in 0..plane {
                let acc: f64 = (0..s.c)
                    .map(|c| f64::from(src[(n * s.c + c) * plane + i]))
                    .sum();
                out[n * plane + i] = (acc / s.c as f64) as f32;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(Shape::new(s.n, 1, s.h, s.w), out).expect("shape by construction");
        self.push(value, rg, Op::ChannelMean(a.0))
    }

    /// Mean over (C, H, W): `N×C×H×W → N×1×1×1`.
    pub fn sample_mean(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let t = self.value(a);
        let out = (0..s.n)
            .map(|n| (sum_f64(t.sample(n)) / s.sample_len() as f64) as f32)
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(Shape::new(s.n, 1, 1, 1), out).expect("shape by construction");
        self.push(value, rg, Op::SampleMean(a.0))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("l1_distance", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let acc: f64 = ta
            .iter()
            .zip(tb)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
            .sum();
        let v = acc / ta.len() as f64;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push_reduction(v, rg, Op::L1(a.0, b.0)))
    }

    /// `mean(max(a, 0))`; subgradient at 0 is 1.
    pub fn relu_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let acc: f64 = t.data().iter().map(|&x| f64::from(x.max(0.0))).sum();
        let v = acc / t.numel() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push_reduction(v, rg, Op::ReluMean(a.0))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagate from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar (1x1x1x1) loss, got {s}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |target: usize, f: &dyn Fn(&mut [f32])| {
                if !nodes[target].requires_grad {
                    return;
                }
                let buf = grads[target]
                    .get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::Conv2d { x, w, b, geom } => {
                    if nodes[*x].requires_grad {
                        let dx = kernels::conv_backward_input(geom, &g, nodes[*w].value.data());
                        acc(*x, &|buf| add_into(buf, &dx));
                    }
                    if nodes[*w].requires_grad {
                        let dw = kernels::conv_backward_weight(geom, &g, nodes[*x].value.data());
                        acc(*w, &|buf| add_into(buf, &dw));
                    }
                    if let Some(b) = b {
                        if nodes[*b].requires_grad {
                            let db = kernels::conv_backward_bias(geom, &g);
                            acc(*b, &|buf| add_into(buf, &db));
                        }
                    }
                }
                Op::ConvTranspose2d { y, w, geom } => {
                    if nodes[*y].requires_grad {
                        let dy = kernels::conv_forward(geom, &g, nodes[*w].value.data(), None);
                        acc(*y, &|buf| add_into(buf, &dy));
                    }
                    if nodes[*w].requires_grad {
                        let dw = kernels::conv_backward_weight(geom, nodes[*y].value.data(), &g);
                        acc(*w, &|buf| add_into(buf, &dw));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &|buf| add_into(buf, &g));
                    acc(*b, &|buf| add_into(buf, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|buf| add_into(buf, &g));
                    acc(*b, &|buf| buf.iter_mut().zip(&g).for_each(|(o, &d)| *o -= d));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, &|buf| {
                        for ((o, &d), &y) in buf.iter_mut().zip(&g).zip(vb) {
                            *o += d * y;
                        }
                    });
                    acc(*b, &|buf| {
                        for ((o, &d), &x) in buf.iter_mut().zip(&g).zip(va) {
                            *o += d * x;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(*a, &|buf| buf.iter_mut().zip(&g).for_each(|(o, &d)| *o += d * s));
                }
                Op::Shift(a) => acc(*a, &|buf| add_into(buf, &g)),
                Op::LeakyRelu(a, slope) => {
                    let x = nodes[*a].value.data();
                    acc(*a, &|buf| {
                        for ((o, &d), &xi) in buf.iter_mut().zip(&g).zip(x) {
                            *o += if xi >= 0.0 { d } else { d * slope };
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, &|buf| {
                        for ((o, &d), &yi) in buf.iter_mut().zip(&g).zip(y) {
                            *o += d * (1.0 - yi * yi);
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let s = nodes[*x].value.shape();
                    let plane = s.plane();
                    let m = (s.n * plane) as f64;
                    let gam = nodes[*gamma].value.data();
                    let mut dgamma = vec![0.0f32; s.c];
                    let mut dbeta = vec![0.0f32; s.c];
                    let mut dx = vec![0.0f32; s.numel()];
                    for c in 0..s.c {
                        let idx = |n: usize| {
                            let off = (n * s.c + c) * plane;
                            off..off + plane
                        };
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                        for n in 0..s.n {
                            for i in idx(n) {
                                sum_dy += f64::from(g[i]);
                                sum_dy_xhat += f64::from(g[i]) * f64::from(xhat[i]);
                            }
                        }
                        dgamma[c] = sum_dy_xhat as f32;
                        dbeta[c] = sum_dy as f32;
                        let k = f64::from(gam[c]) * f64::from(inv_std[c]) / m;
                        for n in 0..s.n {
                            for i in idx(n) {
                                let v = m * f64::from(g[i])
                                    - sum_dy
                                    - f64::from(xhat[i]) * sum_dy_xhat;
                                dx[i] = (k * v) as f32;
                            }
                        }
                    }
                    acc(*x, &|buf| add_into(buf, &dx));
                    acc(*gamma, &|buf| add_into(buf, &dgamma));
                    acc(*beta, &|buf| add_into(buf, &dbeta));
                }
                Op::Upsample2(a) => {
                    let s = nodes[*a].value.shape();
                    let w2 = 2 * s.w;
                    acc(*a, &|buf| {
                        for nc in 0..s.n * s.c {
                            let gp = &g[nc * 4 * s.plane()..(nc + 1) * 4 * s.plane()];
                            let bp = &mut buf[nc * s.plane()..(nc + 1) * s.plane()];
                            for y in 0..s.h {
                                for x in 0..s.w {
                                    let r0 = 2 * y * w2 + 2 * x;
                                    let r1 = r0 + w2;
                                    bp[y * s.w + x] += gp[r0] + gp[r0 + 1] + gp[r1] + gp[r1 + 1];
                                }
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    let d = g[0];
                    acc(*a, &|buf| buf.iter_mut().for_each(|o| *o += d));
                }
                Op::MeanAll(a) => {
                    let d = g[0] / nodes[*a].value.numel() as f32;
                    acc(*a, &|buf| buf.iter_mut().for_each(|o| *o += d));
                }
                Op::ChannelMean(a) => {
                    let s = nodes[*a].value.shape();
                    let plane = s.plane();
                    let inv_c = 1.0 / s.c as f32;
                    acc(*a, &|buf| {
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let off = (n * s.c + c) * plane;
                                for i in 0..plane {
                                    buf[off + i] += g[n * plane + i] * inv_c;
                                }
                            }
                        }
                    });
                }
                Op::SampleMean(a) => {
                    let s = nodes[*a].value.shape();
                    let len = s.sample_len();
                    acc(*a, &|buf| {
                        for n in 0..s.n {
                            let d = g[n] / len as f32;
                            buf[n * len..(n + 1) * len].iter_mut().for_each(|o| *o += d);
                        }
                    });
                }
                Op::L1(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let d = g[0] / va.len() as f32;
                    let sign = |x: f32, y: f32| {
                        if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    acc(*a, &|buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(va).zip(vb) {
                            *o += d * sign(x, y);
                        }
                    });
                    acc(*b, &|buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(va).zip(vb) {
                            *o -= d * sign(x, y);
                        }
                    });
                }
                Op::ReluMean(a) => {
                    let x = nodes[*a].value.data();
                    let d = g[0] / x.len() as f32;
                    acc(*a, &|buf| {
                        for (o, &xi) in buf.iter_mut().zip(x) {
                            if xi >= 0.0 {
                                *o += d;
                            }
                        }
                    });
                }
            }
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(existing) => add_into(existing.data_mut(), &g),
                slot @ None => {
                    *slot = Some(Tensor::new(node.value.shape(), g)?);
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| f64::from(v)).sum()
}
