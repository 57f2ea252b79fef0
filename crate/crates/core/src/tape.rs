//! Reverse-mode autodiff over a Wengert tape.
//!
//! Ops are recorded in forward order; node i is produced by entry i, so the
//! tape is topologically ordered by construction and backward is a single
//! reverse sweep that visits each entry exactly once. Values are f64
//! throughout so finite-difference checks have headroom.
//!
//! The tape also keeps an executed multiply count for the matmul-backed ops
//! (convolutions and fully-connected layers). Batch normalization, pooling,
//! activations, and elementwise ops contribute zero by convention, which is
//! the same convention the static cost analyzer reports.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Convolution parameters bound to tape variables.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Running statistics and constants for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    Relu6 {
        x: Var,
    },
    /// Saved per-channel statistics: batch statistics in train mode, frozen
    /// running statistics in eval mode. Eval treats them as constants, so its
    /// backward reduces to a per-channel affine map.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool {
        x: Var,
    },
    Fc {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    ConcatChannels {
        xs: Vec<Var>,
    },
    SplitChannels {
        x: Var,
        index: usize,
        groups: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Sum {
        x: Var,
    },
    NllLoss {
        probs: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by tape variable, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mul_count: u64,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Executed multiply count of all conv/fc ops recorded so far.
    pub fn mul_count(&self) -> u64 {
        self.mul_count
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A non-differentiable input (data); no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn conv2d(&mut self, x: Var, p: &ConvParams) -> Result<Var> {
        self.check(x)?;
        self.check(p.weight)?;
        let (n, c, h, w) = self.value(x).dims4()?;
        let wt = self.value(p.weight);
        let (m, c_g, kh, kw) = wt.dims4()?;
        if kh != kw {
            return Err(Error::dim(format!("square kernels only, got {kh}x{kw}")));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::dim(format!("odd kernel sizes only, got {k}")));
        }
        let g = p.groups;
        if g == 0 || c % g != 0 || m % g != 0 {
            return Err(Error::group(format!(
                "channels must divide into groups: c_in={c}, c_out={m}, g={g}"
            )));
        }
        if c_g != c / g {
            return Err(Error::dim(format!(
                "weight expects {c_g} channels per group, input provides {}",
                c / g
            )));
        }
        if h + 2 * p.padding < k || w + 2 * p.padding < k {
            return Err(Error::dim(format!(
                "kernel {k} does not fit input {h}x{w} with padding {}",
                p.padding
            )));
        }
        if let Some(b) = p.bias {
            self.check(b)?;
            if self.value(b).shape() != [m] {
                return Err(Error::dim(format!("bias must have {m} entries")));
            }
        }
        let shape = ConvShape {
            n,
            c_in: c,
            h,
            w,
            c_out: m,
            k,
            stride: p.stride,
            pad: p.padding,
            groups: g,
        };
        if shape.h_out() < 1 || shape.w_out() < 1 {
            return Err(Error::dim("empty convolution output".to_string()));
        }
        let bias = p.bias.map(|b| self.value(b).data().to_vec());
        let (out, count) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(p.weight).data(),
            bias.as_deref(),
            &shape,
        );
        self.mul_count += count;
        let out = Tensor::new(vec![n, m, shape.h_out(), shape.w_out()], out)?;
        let needs = self.needs(x) || self.needs(p.weight) || p.bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv2d {
                x,
                w: p.weight,
                b: p.bias,
                shape,
            },
            out,
            needs,
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.clamp(0.0, 6.0))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Relu6 { x }, t, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, t, needs)
    }

    /// Row-wise softmax over an (N, K) tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, k) = self.value(x).dims2()?;
        let data = self.value(x).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[i * k..(i + 1) * k] {
                *o /= sum;
            }
        }
        let t = Tensor::new(vec![n, k], out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax { x }, t, needs))
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim(format!("gamma/beta must have {c} entries")));
        }
        if state.running_mean.len() != c {
            return Err(Error::dim(format!(
                "running stats sized {} for {c} channels",
                state.running_mean.len()
            )));
        }
        let data = self.value(x).data();
        let hw = h * w;
        let count = (n * hw) as f64;

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, m) in mean.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for v in &data[base..base + hw] {
                            acc += v;
                        }
                    }
                    *m = acc / count;
                }
                for (ch, vr) in var.iter_mut().enumerate() {
                    let m = mean[ch];
                    let mut acc = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for v in &data[base..base + hw] {
                            let d = v - m;
                            acc += d * d;
                        }
                    }
                    *vr = acc / count;
                }
                for ch in 0..c {
                    state.running_mean[ch] =
                        (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean[ch];
                    state.running_var[ch] =
                        (1.0 - state.momentum) * state.running_var[ch] + state.momentum * var[ch];
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
        let gdata = self.value(gamma).data();
        let bdata = self.value(beta).data();
        let mut out = vec![0.0; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gdata[ch], bdata[ch]);
                for (o, v) in out[base..base + hw].iter_mut().zip(&data[base..base + hw]) {
                    *o = (v - m) * is * g + b;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let train = mode == BnMode::Train;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            t,
            needs,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let data = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                let mut acc = 0.0;
                for v in &data[base..base + h * w] {
                    acc += v;
                }
                out[i * c + ch] = acc / hw;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool { x }, t, needs))
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (n, d) = self.value(x).dims2()?;
        let (dw, e) = self.value(w).dims2()?;
        if d != dw {
            return Err(Error::dim(format!(
                "inner dimensions differ: x has {d}, weight has {dw}"
            )));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [e] {
                return Err(Error::dim(format!("bias must have {e} entries")));
            }
        }
        let (mut out, count) = kernels::matmul(self.value(x).data(), self.value(w).data(), n, d, e);
        self.mul_count += count;
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            for row in out.chunks_mut(e) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(vec![n, e], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Fc { x, w, b }, t, needs))
    }

    /// Concatenate along the channel axis (axis 1) of rank-2 or rank-4 tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat of zero tensors".to_string()));
        }
        for &v in xs {
            self.check(v)?;
        }
        let first = self.value(xs[0]).shape().to_vec();
        let rank = first.len();
        if rank != 2 && rank != 4 {
            return Err(Error::dim(format!(
                "concat expects rank 2 or 4, got {rank}"
            )));
        }
        let n = first[0];
        let tail: &[usize] = &first[2..];
        let mut c_total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != rank || s[0] != n || &s[2..] != tail {
                return Err(Error::shape(format!(
                    "concat operands disagree outside axis 1: {:?} vs {:?}",
                    first, s
                )));
            }
            c_total += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut out = vec![0.0; n * c_total * inner];
        for i in 0..n {
            let mut offset = 0;
            for &v in xs {
                let c = self.value(v).shape()[1];
                let src = &self.value(v).data()[i * c * inner..(i + 1) * c * inner];
                let dst_base = i * c_total * inner + offset * inner;
                out[dst_base..dst_base + c * inner].copy_from_slice(src);
                offset += c;
            }
        }
        let mut shape = first;
        shape[1] = c_total;
        let t = Tensor::new(shape, out)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::ConcatChannels { xs: xs.to_vec() }, t, needs))
    }

    /// Split channels into `groups` equal parts.
    pub fn split_channels(&mut self, x: Var, groups: usize) -> Result<Vec<Var>> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        if rank != 2 && rank != 4 {
            return Err(Error::dim(format!("split expects rank 2 or 4, got {rank}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::group(format!(
                "{c} channels do not split into {groups} groups"
            )));
        }
        let c_g = c / groups;
        let inner: usize = shape[2..].iter().product();
        let needs = self.needs(x);
        let mut outs = Vec::with_capacity(groups);
        for gi in 0..groups {
            let mut part = vec![0.0; n * c_g * inner];
            for i in 0..n {
                let src_base = (i * c + gi * c_g) * inner;
                part[i * c_g * inner..(i + 1) * c_g * inner]
                    .copy_from_slice(&self.value(x).data()[src_base..src_base + c_g * inner]);
            }
            let mut s = shape.clone();
            s[1] = c_g;
            let t = Tensor::new(s, part)?;
            outs.push(self.push(
                Op::SplitChannels {
                    x,
                    index: gi,
                    groups,
                },
                t,
                needs,
            ));
        }
        Ok(outs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add requires equal shapes: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, t, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul requires equal shapes: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, t, needs))
    }

    /// Scale each row of an (N, C) tensor by the matching entry of an (N, 1)
    /// gate; this is how a per-sample attention weight broadcasts over
    /// channels.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let (n, c) = self.value(x).dims2()?;
        if self.value(s).shape() != [n, 1] {
            return Err(Error::shape(format!(
                "gate must be ({n}, 1), got {:?}",
                self.value(s).shape()
            )));
        }
        let sdata = self.value(s).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .zip(sdata)
            .flat_map(|(row, &g)| row.iter().map(move |&v| v * g))
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Op::ScaleRows { x, s }, t, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Tensor::scalar(total), needs)
    }

    /// Mean negative log-likelihood of already-softmaxed probabilities.
    pub fn nll_loss(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        self.check(probs)?;
        let (n, k) = self.value(probs).dims2()?;
        if targets.len() != n {
            return Err(Error::shape(format!(
                "{n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::dim(format!(
                "target class {bad} out of range 0..{k}"
            )));
        }
        let data = self.value(probs).data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= data[i * k + t].ln();
        }
        loss /= n as f64;
        let needs = self.needs(probs);
        Ok(self.push(
            Op::NllLoss {
                probs,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Each tape entry is visited once;
    /// leaves collect accumulated gradients. The tape refuses to run twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(dy);
                continue;
            }
            self.backward_step(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_step(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, shape } => {
                let need_dx = self.needs(*x);
                let need_db = b.is_some_and(|b| self.needs(b));
                let g = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    shape,
                    need_dx,
                    need_db,
                );
                if self.needs(*w) {
                    self.accumulate(grads, *w, &g.dw);
                }
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, &dx);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Relu6 { x } => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 && v < 6.0 { d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<f64> = y.iter().zip(dy).map(|(&y, &d)| d * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let (n, k) = self.nodes[i].value.dims2().expect("softmax output rank 2");
                let mut dx = vec![0.0; n * k];
                for r in 0..n {
                    let yr = &y[r * k..(r + 1) * k];
                    let dr = &dy[r * k..(r + 1) * k];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in dx[r * k..(r + 1) * k].iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("bn input rank 4");
                let hw = h * w;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let count = (n * hw) as f64;

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let is = inv_std[ch];
                    let m = mean[ch];
                    for ni in 0..n {
                        let base = (ni * c + ch) * hw;
                        for q in 0..hw {
                            let d = dy[base + q];
                            dgamma[ch] += d * (xd[base + q] - m) * is;
                            dbeta[ch] += d;
                        }
                    }
                }

                let mut dx = vec![0.0; xd.len()];
                if *train {
                    // mean and inv_std depend on x; the full batch-norm
                    // gradient removes the per-channel projections onto 1 and
                    // onto xhat.
                    for ch in 0..c {
                        let is = inv_std[ch];
                        let m = mean[ch];
                        let g = gd[ch];
                        let s1 = dbeta[ch] / count;
                        let s2 = dgamma[ch] / count;
                        for ni in 0..n {
                            let base = (ni * c + ch) * hw;
                            for q in 0..hw {
                                let xh = (xd[base + q] - m) * is;
                                dx[base + q] = g * is * (dy[base + q] - s1 - xh * s2);
                            }
                        }
                    }
                } else {
                    for ch in 0..c {
                        let scale = gd[ch] * inv_std[ch];
                        for ni in 0..n {
                            let base = (ni * c + ch) * hw;
                            for q in 0..hw {
                                dx[base + q] = dy[base + q] * scale;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("gap input rank 4");
                let hw = h * w;
                let scale = 1.0 / hw as f64;
                let mut dx = vec![0.0; n * c * hw];
                for ni in 0..n {
                    for ch in 0..c {
                        let d = dy[ni * c + ch] * scale;
                        let base = (ni * c + ch) * hw;
                        for o in &mut dx[base..base + hw] {
                            *o = d;
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Fc { x, w, b } => {
                let (n, d) = self.value(*x).dims2().expect("fc input rank 2");
                let (_, e) = self.value(*w).dims2().expect("fc weight rank 2");
                if self.needs(*x) {
                    let (dx, _) = kernels::matmul_nt(dy, self.value(*w).data(), n, e, d);
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let (dw, _) = kernels::matmul_tn(self.value(*x).data(), dy, n, d, e);
                    self.accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; e];
                        for row in dy.chunks(e) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, &db);
                    }
                }
            }
            Op::ConcatChannels { xs } => {
                let out_shape = self.nodes[i].value.shape();
                let (n, c_total) = (out_shape[0], out_shape[1]);
                let inner: usize = out_shape[2..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let mut dxi = vec![0.0; n * c * inner];
                        for ni in 0..n {
                            let src = (ni * c_total + offset) * inner;
                            dxi[ni * c * inner..(ni + 1) * c * inner]
                                .copy_from_slice(&dy[src..src + c * inner]);
                        }
                        self.accumulate(grads, v, &dxi);
                    }
                    offset += c;
                }
            }
            Op::SplitChannels { x, index, groups } => {
                let xshape = self.value(*x).shape();
                let (n, c) = (xshape[0], xshape[1]);
                let inner: usize = xshape[2..].iter().product();
                let c_g = c / groups;
                let mut dx = vec![0.0; n * c * inner];
                for ni in 0..n {
                    let dst = (ni * c + index * c_g) * inner;
                    dx[dst..dst + c_g * inner]
                        .copy_from_slice(&dy[ni * c_g * inner..(ni + 1) * c_g * inner]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy);
                self.accumulate(grads, *b, dy);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(d, v)| d * v)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = dy
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(d, v)| d * v)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::ScaleRows { x, s } => {
                let (n, c) = self.value(*x).dims2().expect("scale_rows rank 2");
                let sd = self.value(*s).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * c];
                    for ni in 0..n {
                        for ch in 0..c {
                            dx[ni * c + ch] = dy[ni * c + ch] * sd[ni];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*s) {
                    let xd = self.value(*x).data();
                    let mut ds = vec![0.0; n];
                    for ni in 0..n {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += dy[ni * c + ch] * xd[ni * c + ch];
                        }
                        ds[ni] = acc;
                    }
                    self.accumulate(grads, *s, &ds);
                }
            }
            Op::Sum { x } => {
                let d = dy[0];
                let dx = vec![d; self.value(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::NllLoss { probs, targets } => {
                let (n, k) = self.value(*probs).dims2().expect("nll rank 2");
                let pd = self.value(*probs).data();
                let scale = dy[0] / n as f64;
                let mut dp = vec![0.0; n * k];
                for (i, &t) in targets.iter().enumerate() {
                    dp[i * k + t] = -scale / pd[i * k + t];
                }
                self.accumulate(grads, *probs, &dp);
            }
        }
    }
}
