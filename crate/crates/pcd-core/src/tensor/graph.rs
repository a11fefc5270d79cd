//! Reverse-mode autodiff tape.
//!
//! Operators evaluate eagerly and append a node recording their inputs plus
//! whatever context the backward pass needs. `backward` walks the tape in
//! exact reverse execution order; gradients accumulate additively, so shared
//! inputs receive every contribution. Interior gradients are scratch state of
//! a single backward call, while leaf gradients persist and accumulate across
//! calls.

use super::ops;
use super::{sc, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One selected pixel of a classification mask: batch index, row, column,
/// and the class the pixel is labeled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskEntry {
    pub b: usize,
    pub y: usize,
    pub x: usize,
    pub class: usize,
}

enum Op<F: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    TConv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    /// `mean`/`invstd` are the statistics used for normalization; in train
    /// mode they are batch statistics (input-dependent), in eval mode they
    /// are running statistics (constants).
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, invstd: Vec<F>, training: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    ChannelSoftmax { x: Var },
    ConcatChannels { xs: Vec<Var> },
    SliceChannels { x: Var, from: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Scale { x: Var, k: F },
    /// Scalar reduction Σ w_i·x_i with fixed weights (gradient checking).
    WeightedSum { x: Var, w: Tensor<F> },
    /// Mean cross-entropy over masked pixels of per-pixel channel softmax;
    /// `probs` holds the softmax row saved for each entry.
    MaskedCrossEntropy { logits: Var, entries: Vec<MaskEntry>, probs: Vec<F> },
    /// Mean over batch of ½‖pred − target‖².
    HalfSquaredDistance { pred: Var, target: Tensor<F> },
    /// Mean over batch of Σ_i w_i (pred_i − target_i)² with fixed weights.
    WeightedSse { pred: Var, target: Tensor<F>, weights: Tensor<F> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    needs_grad: bool,
    param_idx: Option<usize>,
    op: Op<F>,
}

impl<F: Scalar> Node<F> {
    fn placeholder() -> Self {
        Node {
            value: Tensor::zeros(&[0]),
            grad: None,
            needs_grad: false,
            param_idx: None,
            op: Op::Leaf,
        }
    }
}

/// An eager autodiff tape. Build one per forward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, param_idx: None, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients (inputs, targets).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A gradient-tracked leaf with no external identity (gradient checking).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// A leaf bound to `params[idx]`; tracks gradients iff the parameter is
    /// trainable, which also prunes backward work behind frozen subgraphs.
    pub fn param(&mut self, idx: usize, params: &[Parameter<F>]) -> Var {
        let p = &params[idx];
        let v = self.push(p.value.clone(), p.trainable, Op::Leaf);
        self.nodes[v.0].param_idx = Some(idx);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- operators ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        let out = ops::conv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            stride,
            pad,
        )?;
        if !out.all_finite() {
            return Err(Error::numeric("conv2d produced a non-finite value"));
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(out, needs, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::config("transposed_conv2d: stride must be positive"));
        }
        let out = ops::tconv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            stride,
            pad,
        )?;
        if !out.all_finite() {
            return Err(Error::numeric("transposed_conv2d produced a non-finite value"));
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(out, needs, Op::TConv2d { x, w, b, stride, pad }))
    }

    /// Batch normalization in train mode: normalizes with batch statistics
    /// and updates `running_mean`/`running_var` in place by exponential
    /// moving average (`momentum` weights the fresh batch statistic).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<F>,
        running_var: &mut Tensor<F>,
        momentum: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        Self::check_bn_params(c, self.value(gamma), self.value(beta))?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::config("batch_norm: running stats length mismatch"));
        }
        let stats = ops::bn_batch_stats(self.value(x), F::EPS_BN)?;
        let keep = sc::<F>(1.0 - momentum);
        let fresh = sc::<F>(momentum);
        for (r, b) in running_mean.data_mut().iter_mut().zip(stats.mean.iter()) {
            *r = *r * keep + *b * fresh;
        }
        for (r, b) in running_var.data_mut().iter_mut().zip(stats.var.iter()) {
            *r = *r * keep + *b * fresh;
        }
        let out = ops::bn_apply(self.value(x), self.value(gamma), self.value(beta), &stats.mean, &stats.invstd);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            needs,
            Op::BatchNorm { x, gamma, beta, mean: stats.mean, invstd: stats.invstd, training: true },
        ))
    }

    /// Batch normalization in eval mode: normalizes with the provided
    /// running statistics, which are treated as constants.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        Self::check_bn_params(c, self.value(gamma), self.value(beta))?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::config("batch_norm: running stats length mismatch"));
        }
        let mean: Vec<F> = running_mean.data().to_vec();
        let invstd: Vec<F> = running_var
            .data()
            .iter()
            .map(|v| sc::<F>(1.0 / (v.to_f64().unwrap() + F::EPS_BN).sqrt()))
            .collect();
        let out = ops::bn_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &invstd);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            needs,
            Op::BatchNorm { x, gamma, beta, mean, invstd, training: false },
        ))
    }

    fn check_bn_params(c: usize, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<()> {
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::config(format!(
                "batch_norm: gamma/beta must have length {} (got {:?}/{:?})",
                c,
                gamma.shape(),
                beta.shape()
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v <= F::zero() {
                *v = F::zero();
            }
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Add { a, b }))
    }

    /// Hadamard product; shapes must match exactly (no broadcasting).
    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config(format!(
                "multiply: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o * *bv;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Mul { a, b }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_fwd(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::MaxPool2 { x, argmax }))
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::channel_softmax_fwd(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::ChannelSoftmax { x }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::config("concat_channels: no inputs"));
        }
        let (b0, _, h0, w0) = self.value(xs[0]).dims4()?;
        let mut c_total = 0;
        for &v in xs {
            let (b, c, h, w) = self.value(v).dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::config(
                    "concat_channels: batch/spatial dims must match across inputs",
                ));
            }
            c_total += c;
        }
        let mut out = Tensor::zeros(&[b0, c_total, h0, w0]);
        let plane = h0 * w0;
        {
            let od = out.data_mut();
            for bi in 0..b0 {
                let mut coff = 0;
                for &v in xs {
                    let t = &self.nodes[v.0].value;
                    let (_, c, _, _) = t.dims4().unwrap();
                    let src = &t.data()[bi * c * plane..(bi + 1) * c * plane];
                    let dst = &mut od[(bi * c_total + coff) * plane..(bi * c_total + coff + c) * plane];
                    dst.copy_from_slice(src);
                    coff += c;
                }
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, needs, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Channels `from..to` of a `[B,C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if from >= to || to > c {
            return Err(Error::config(format!(
                "slice_channels: range {}..{} out of bounds for {} channels",
                from, to, c
            )));
        }
        let nc = to - from;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, nc, h, w]);
        {
            let od = out.data_mut();
            let xd = self.nodes[x.0].value.data();
            for bi in 0..b {
                let src = &xd[(bi * c + from) * plane..(bi * c + to) * plane];
                od[bi * nc * plane..(bi + 1) * nc * plane].copy_from_slice(src);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::SliceChannels { x, from }))
    }

    /// `[B,C,H,W]` → `[B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[b, c]);
        let norm = sc::<F>(1.0 / (h * w) as f64);
        {
            let od = out.data_mut();
            let xd = self.nodes[x.0].value.data();
            for bc in 0..b * c {
                let mut acc = F::zero();
                for v in &xd[bc * h * w..(bc + 1) * h * w] {
                    acc = acc + *v;
                }
                od[bc] = acc * norm;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::GlobalAvgPool { x }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear_fwd(self.value(x), self.value(w), self.value(b))?;
        if !out.all_finite() {
            return Err(Error::numeric("linear produced a non-finite value"));
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, needs, Op::Linear { x, w, b }))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = *v * k;
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale { x, k })
    }

    /// Scalar-valued Σ w_i·x_i against a fixed weight tensor of identical
    /// shape. Random weights make this a Jacobian-sensitive reduction for
    /// gradient checking.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<F>) -> Result<Var> {
        if self.value(x).shape() != w.shape() {
            return Err(Error::config("weighted_sum: weight shape mismatch"));
        }
        let mut acc = F::zero();
        for (xv, wv) in self.value(x).data().iter().zip(w.data()) {
            acc = acc + *xv * *wv;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), needs, Op::WeightedSum { x, w }))
    }

    /// Mean cross-entropy of per-pixel channel softmax over the given mask
    /// entries. Gradients are exactly zero at unmasked pixels.
    pub fn masked_cross_entropy(&mut self, logits: Var, entries: &[MaskEntry]) -> Result<Var> {
        let (b, c, h, w) = self.value(logits).dims4()?;
        if entries.is_empty() {
            return Err(Error::config("masked_cross_entropy: empty mask"));
        }
        for e in entries {
            if e.b >= b || e.y >= h || e.x >= w || e.class >= c {
                return Err(Error::config(format!(
                    "masked_cross_entropy: entry (b={},y={},x={},class={}) out of bounds",
                    e.b, e.y, e.x, e.class
                )));
            }
        }
        let xd = self.value(logits).data();
        let plane = h * w;
        let mut probs = vec![F::zero(); entries.len() * c];
        let mut loss = 0f64;
        for (ei, e) in entries.iter().enumerate() {
            let base = e.b * c * plane + e.y * w + e.x;
            let mut mx = xd[base];
            for cc in 1..c {
                let v = xd[base + cc * plane];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for cc in 0..c {
                let ex = (xd[base + cc * plane] - mx).exp();
                probs[ei * c + cc] = ex;
                denom = denom + ex;
            }
            for cc in 0..c {
                probs[ei * c + cc] = probs[ei * c + cc] / denom;
            }
            // -ln(p) in log space: exp(x_t - mx) can underflow to a hard
            // zero in f32 while ln(denom) - (x_t - mx) stays finite.
            let gap = (xd[base + e.class * plane] - mx).to_f64().unwrap();
            loss += denom.to_f64().unwrap().ln() - gap;
        }
        loss /= entries.len() as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("masked_cross_entropy produced a non-finite loss"));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(sc(loss)),
            needs,
            Op::MaskedCrossEntropy { logits, entries: entries.to_vec(), probs },
        ))
    }

    /// Mean over batch of ½‖pred − target‖²; `pred`/`target` are `[B,K]`.
    pub fn half_squared_distance(&mut self, pred: Var, target: Tensor<F>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::config("half_squared_distance: shape mismatch"));
        }
        let (b, _) = self.value(pred).dims2()?;
        let mut acc = 0f64;
        for (p, t) in self.value(pred).data().iter().zip(target.data()) {
            let d = (*p - *t).to_f64().unwrap();
            acc += 0.5 * d * d;
        }
        acc /= b as f64;
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(sc(acc)), needs, Op::HalfSquaredDistance { pred, target }))
    }

    /// Mean over batch of Σ_i w_i (p_i − t_i)² with fixed per-element
    /// weights; all of `pred`/`target`/`weights` are `[B,K]`.
    pub fn weighted_sse(
        &mut self,
        pred: Var,
        target: Tensor<F>,
        weights: Tensor<F>,
    ) -> Result<Var> {
        if self.value(pred).shape() != target.shape()
            || self.value(pred).shape() != weights.shape()
        {
            return Err(Error::config("weighted_sse: shape mismatch"));
        }
        let (b, _) = self.value(pred).dims2()?;
        let mut acc = 0f64;
        for ((p, t), w) in self.value(pred).data().iter().zip(target.data()).zip(weights.data()) {
            let d = (*p - *t).to_f64().unwrap();
            acc += w.to_f64().unwrap() * d * d;
        }
        acc /= b as f64;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(sc(acc)),
            needs,
            Op::WeightedSse { pred, target, weights },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagate d(loss)=1 back through the tape. Leaf gradients accumulate
    /// across calls; interior gradients are reset on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        {
            let shape = self.nodes[loss.0].value.shape().to_vec();
            let mut seed = Tensor::zeros(&shape);
            seed.data_mut()[0] = F::one();
            self.accum(loss, seed);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let node = std::mem::replace(&mut self.nodes[i], Node::placeholder());
            self.backprop_node(&node);
            self.nodes[i] = node;
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: Tensor<F>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    fn backprop_node(&mut self, node: &Node<F>) {
        let g = node.grad.as_ref().expect("caller checked grad presence");
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.needs(*x) {
                    let dx = ops::conv2d_bwd_x(
                        &self.nodes[w.0].value,
                        g,
                        *stride,
                        *pad,
                        &self.nodes[x.0].value.shape().to_vec(),
                    );
                    self.accum(*x, dx);
                }
                if self.needs(*w) {
                    let dw = ops::conv2d_bwd_w(
                        &self.nodes[x.0].value,
                        g,
                        *stride,
                        *pad,
                        &self.nodes[w.0].value.shape().to_vec(),
                    );
                    self.accum(*w, dw);
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        self.accum(*bv, ops::bias_grad_4d(g));
                    }
                }
            }
            Op::TConv2d { x, w, b, stride, pad } => {
                if self.needs(*x) {
                    let dx = ops::tconv2d_bwd_x(
                        &self.nodes[w.0].value,
                        g,
                        *stride,
                        *pad,
                        &self.nodes[x.0].value.shape().to_vec(),
                    );
                    self.accum(*x, dx);
                }
                if self.needs(*w) {
                    let dw = ops::tconv2d_bwd_w(
                        &self.nodes[x.0].value,
                        g,
                        *stride,
                        *pad,
                        &self.nodes[w.0].value.shape().to_vec(),
                    );
                    self.accum(*w, dw);
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        self.accum(*bv, ops::bias_grad_4d(g));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, training } => {
                let (dx, dgamma, dbeta) = ops::bn_bwd(
                    &self.nodes[x.0].value,
                    &self.nodes[gamma.0].value,
                    mean,
                    invstd,
                    g,
                    *training,
                );
                if self.needs(*x) {
                    self.accum(*x, dx);
                }
                if self.needs(*gamma) {
                    self.accum(*gamma, dgamma);
                }
                if self.needs(*beta) {
                    self.accum(*beta, dbeta);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (d, xv) in dx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                        if *xv <= F::zero() {
                            *d = F::zero();
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accum(*a, g.clone());
                }
                if self.needs(*b) {
                    self.accum(*b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (d, bv) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *d = *d * *bv;
                    }
                    self.accum(*a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    for (d, av) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *d = *d * *av;
                    }
                    self.accum(*b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let dx = ops::maxpool2_bwd(argmax, g, &self.nodes[x.0].value.shape().to_vec());
                    self.accum(*x, dx);
                }
            }
            Op::ChannelSoftmax { x } => {
                if self.needs(*x) {
                    let dx = ops::channel_softmax_bwd(&node.value, g);
                    self.accum(*x, dx);
                }
            }
            Op::ConcatChannels { xs } => {
                let (b, c_total, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let gd = g.data();
                let mut coff = 0;
                for &v in xs {
                    let (_, c, _, _) = self.nodes[v.0].value.dims4().unwrap();
                    if self.needs(v) {
                        let mut dv = Tensor::zeros(self.nodes[v.0].value.shape());
                        {
                            let dd = dv.data_mut();
                            for bi in 0..b {
                                let src = &gd[(bi * c_total + coff) * plane
                                    ..(bi * c_total + coff + c) * plane];
                                dd[bi * c * plane..(bi + 1) * c * plane].copy_from_slice(src);
                            }
                        }
                        self.accum(v, dv);
                    }
                    coff += c;
                }
            }
            Op::SliceChannels { x, from } => {
                if self.needs(*x) {
                    let (b, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                    let (_, nc, _, _) = node.value.dims4().unwrap();
                    let plane = h * w;
                    let mut dx = Tensor::zeros(&[b, c, h, w]);
                    {
                        let dd = dx.data_mut();
                        let gd = g.data();
                        for bi in 0..b {
                            let dst = &mut dd[(bi * c + from) * plane..(bi * c + from + nc) * plane];
                            dst.copy_from_slice(&gd[bi * nc * plane..(bi + 1) * nc * plane]);
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let (b, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                    let norm = sc::<F>(1.0 / (h * w) as f64);
                    let mut dx = Tensor::zeros(&[b, c, h, w]);
                    {
                        let dd = dx.data_mut();
                        let gd = g.data();
                        for bc in 0..b * c {
                            let gv = gd[bc] * norm;
                            for v in &mut dd[bc * h * w..(bc + 1) * h * w] {
                                *v = gv;
                            }
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    ops::linear_bwd(&self.nodes[x.0].value, &self.nodes[w.0].value, g);
                if self.needs(*x) {
                    self.accum(*x, dx);
                }
                if self.needs(*w) {
                    self.accum(*w, dw);
                }
                if self.needs(*b) {
                    self.accum(*b, db);
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for v in dx.data_mut() {
                        *v = *v * *k;
                    }
                    self.accum(*x, dx);
                }
            }
            Op::WeightedSum { x, w } => {
                if self.needs(*x) {
                    let gv = g.data()[0];
                    let mut dx = w.clone();
                    for v in dx.data_mut() {
                        *v = *v * gv;
                    }
                    self.accum(*x, dx);
                }
            }
            Op::MaskedCrossEntropy { logits, entries, probs } => {
                if self.needs(*logits) {
                    let gv = g.data()[0];
                    let (_, c, h, w) = self.nodes[logits.0].value.dims4().unwrap();
                    let plane = h * w;
                    let norm = gv * sc::<F>(1.0 / entries.len() as f64);
                    let mut dx = Tensor::zeros(self.nodes[logits.0].value.shape());
                    {
                        let dd = dx.data_mut();
                        for (ei, e) in entries.iter().enumerate() {
                            let base = e.b * c * plane + e.y * w + e.x;
                            for cc in 0..c {
                                let onehot =
                                    if cc == e.class { F::one() } else { F::zero() };
                                let d = (probs[ei * c + cc] - onehot) * norm;
                                dd[base + cc * plane] = dd[base + cc * plane] + d;
                            }
                        }
                    }
                    self.accum(*logits, dx);
                }
            }
            Op::HalfSquaredDistance { pred, target } => {
                if self.needs(*pred) {
                    let gv = g.data()[0];
                    let (b, _) = self.nodes[pred.0].value.dims2().unwrap();
                    let norm = gv * sc::<F>(1.0 / b as f64);
                    let mut dx = self.nodes[pred.0].value.clone();
                    for (d, t) in dx.data_mut().iter_mut().zip(target.data()) {
                        *d = (*d - *t) * norm;
                    }
                    self.accum(*pred, dx);
                }
            }
            Op::WeightedSse { pred, target, weights } => {
                if self.needs(*pred) {
                    let gv = g.data()[0];
                    let (b, _) = self.nodes[pred.0].value.dims2().unwrap();
                    let norm = gv * sc::<F>(2.0 / b as f64);
                    let mut dx = self.nodes[pred.0].value.clone();
                    for ((d, t), w) in
                        dx.data_mut().iter_mut().zip(target.data()).zip(weights.data())
                    {
                        *d = (*d - *t) * *w * norm;
                    }
                    self.accum(*pred, dx);
                }
            }
        }
    }

    /// Add every parameter leaf's gradient into its slot in `params`.
    pub fn accumulate_param_grads(&self, params: &mut [Parameter<F>]) {
        for node in &self.nodes {
            let (Some(idx), Some(grad)) = (node.param_idx, node.grad.as_ref()) else {
                continue;
            };
            params[idx].grad.add_assign(grad);
        }
    }
}
