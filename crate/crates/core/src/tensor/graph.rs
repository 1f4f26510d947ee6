use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom, Tap};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    Sigmoid,
    UpsampleBilinear,
    UpsampleNearest,
    Downsample,
    Concat,
    Mul,
    Add,
    Sum,
    CrossEntropy,
    SoftDice,
}

impl OpKind {
    /// Every operation with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 13] = [
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::UpsampleBilinear,
        OpKind::UpsampleNearest,
        OpKind::Downsample,
        OpKind::Concat,
        OpKind::Mul,
        OpKind::Add,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::SoftDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::Downsample => "downsample",
            OpKind::Concat => "concat",
            OpKind::Mul => "elementwise_mul",
            OpKind::Add => "add",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SoftDice => "soft_dice",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMethod {
    Bilinear,
    Nearest,
}

/// Per-channel statistics of a training-mode batch-norm call.
///
/// `var` is the unbiased estimate, ready for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalization source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Resize {
        input: Var,
        ty: Vec<Tap>,
        tx: Vec<Tap>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<(Var, usize)>),
    Mul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sum(Var, Option<Vec<f64>>),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<u8>,
    },
    SoftDice {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<u8>,
        smooth: f64,
    },
}

struct Node {
    kind: OpKind,
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
///
/// Nodes are appended in execution order, so the node list is always a valid
/// topological order. A graph is single-threaded; use one per worker.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    last_visits: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Test hook: scales every gradient produced by the backward rule of
    /// `kind` by 1.5, so that verification tooling can prove it notices.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes the most recent [`Graph::backward`] call processed.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    /// Count of recorded nodes of a given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Fingerprint of every ReLU sign and max-pool winner in the graph. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn switch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => {
                    for &v in self.data(*x) {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Registers a leaf tensor. Its `requires_grad` flag is preserved.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(OpKind::Leaf, Op::Leaf, t, rg)
    }

    /// Registers a constant (never differentiated) leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Registers a leaf that accumulates gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.requiring_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    /// Gradient of the last backward pass, if `v` requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, kind: OpKind, op: Op, mut value: Tensor, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        value.attach(id);
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            kind,
            op,
            value,
            requires_grad,
        });
        id
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).dims4(op)
    }

    /// 2-D cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,K,K]` plus optional `[Cout]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [b, cin, h, w] = self.dims4(input, OP)?;
        let [cout, kcin, kh, kw] = self.dims4(kernel, OP)?;
        if kcin != cin {
            return Err(Error::dim(
                OP,
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim(OP, format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::dim(
                    OP,
                    format!("bias shape {:?} does not match {cout} outputs", self.shape(bv)),
                ));
            }
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::dim(OP, format!("{h}x{w} input (pad {padding}) smaller than kernel {k}")));
        }
        let (span_h, span_w) = (h + 2 * padding - k, w + 2 * padding - k);
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent not exact: ({h}+2*{padding}-{k})/{stride}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad: padding,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(input),
            b,
            &geom,
            self.data(kernel),
            bias.map(|bv| self.data(bv)),
        );
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|bv| self.rg(bv));
        let value = Tensor::new([b, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            OpKind::Conv2d,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch: b,
            },
            value,
            rg,
        ))
    }

    /// Per-channel batch normalization. Training mode returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        if !(eps > 0.0) {
            return Err(Error::Config(format!("batch_norm eps must be positive, got {eps}")));
        }
        let [b, c, h, w] = self.dims4(input, OP)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::dim(OP, format!("affine parameter shape {:?} != [{c}]", self.shape(p))));
            }
        }
        let hw = h * w;
        let n = b * hw;
        let x = self.data(input);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "training-mode batch_norm needs at least 2 values per channel, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = || (0..b).flat_map(|bi| x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter());
                    let m = vals().sum::<f64>() / n as f64;
                    let v = vals().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(OP, "running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new([b, c, h, w], out)?;
        let v = self.push(
            OpKind::BatchNorm,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: matches!(mode, BnMode::Train),
            },
            value,
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        // NaN passes through so that divergence is not masked
        let out = t.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(OpKind::Relu, Op::Relu(input), value, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(OpKind::Sigmoid, Op::Sigmoid(input), value, rg)
    }

    /// Integer-factor spatial upsampling of `[B,C,H,W]`.
    pub fn upsample(&mut self, input: Var, factor: usize, method: UpsampleMethod) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "upsample")?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let (ty, tx, kind) = match method {
            UpsampleMethod::Bilinear => (
                kernels::bilinear_taps(h, factor),
                kernels::bilinear_taps(w, factor),
                OpKind::UpsampleBilinear,
            ),
            UpsampleMethod::Nearest => (
                kernels::nearest_taps(h, factor),
                kernels::nearest_taps(w, factor),
                OpKind::UpsampleNearest,
            ),
        };
        let out = kernels::resize_forward(self.data(input), b * c, (h, w), &ty, &tx);
        let value = Tensor::new([b, c, h * factor, w * factor], out)?;
        let rg = self.rg(input);
        Ok(self.push(kind, Op::Resize { input, ty, tx }, value, rg))
    }

    /// Max-pool with window = stride = `factor`.
    pub fn downsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        const OP: &str = "downsample";
        let dims @ [b, c, h, w] = self.dims4(input, OP)?;
        if factor == 0 {
            return Err(Error::Config("downsample factor must be >= 1".into()));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::dim(OP, format!("{h}x{w} not divisible by {factor}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.data(input), dims, factor);
        let value = Tensor::new([b, c, h / factor, w / factor], out)?;
        let rg = self.rg(input);
        Ok(self.push(OpKind::Downsample, Op::MaxPool { input, argmax }, value, rg))
    }

    /// Channel-axis concatenation in argument order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim(OP, "no inputs"))?;
        let [b, _, h, w] = self.dims4(first, OP)?;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vb, vc, vh, vw] = self.dims4(v, OP)?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::dim(
                    OP,
                    format!("input {:?} does not match batch/spatial extents [{b},_,{h},{w}]", self.shape(v)),
                ));
            }
            parts.push((v, vc));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.data(v)[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let value = Tensor::new([b, total, h, w], out)?;
        Ok(self.push(OpKind::Concat, Op::Concat(parts), value, rg))
    }

    /// Elementwise product. `b` may also be a `[B,1,H,W]` map broadcast over the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa == sb || (sa.len() == 4 && sb.len() == 4 && sb[1] == 1 && sa[0] == sb[0] && sa[2..] == sb[2..]);
        if !ok {
            return Err(Error::dim("elementwise_mul", format!("{sa:?} vs {sb:?} not broadcastable")));
        }
        let out = if sa == sb {
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect()
        } else {
            let [bsz, c, h, w] = [sa[0], sa[1], sa[2], sa[3]];
            let (da, db) = (self.data(a), self.data(b));
            let hw = h * w;
            let mut out = Vec::with_capacity(da.len());
            for bi in 0..bsz {
                let map = &db[bi * hw..(bi + 1) * hw];
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    out.extend(da[off..off + hw].iter().zip(map).map(|(x, y)| x * y));
                }
            }
            out
        };
        let value = Tensor::new(sa.to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(OpKind::Mul, Op::Mul { a, b }, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(OpKind::Add, Op::Add(a, b), value, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().sum();
        let rg = self.rg(input);
        self.push(OpKind::Sum, Op::Sum(input, None), Tensor::scalar(s), rg)
    }

    /// `sum_i weights[i] * x[i]` with constant weights, as a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(input).numel() {
            return Err(Error::dim(
                "sum",
                format!("{} weights for {} elements", weights.len(), self.value(input).numel()),
            ));
        }
        let s = self.data(input).iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(input);
        Ok(self.push(OpKind::Sum, Op::Sum(input, Some(weights.to_vec())), Tensor::scalar(s), rg))
    }

    /// Mean softmax cross-entropy over all pixels of `[B,C,H,W]` logits.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let (probs, [b, c, h, w]) = self.softmax_checked(logits, target, "cross_entropy")?;
        let hw = h * w;
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let t = target[bi * hw + p] as usize;
                let base = bi * c * hw + p;
                // log-softmax from the logits avoids log(0) for saturated probabilities
                let z = self.data(logits);
                let zmax = (0..c).map(|k| z[base + k * hw]).fold(f64::NEG_INFINITY, f64::max);
                let lse = zmax + (0..c).map(|k| (z[base + k * hw] - zmax).exp()).sum::<f64>().ln();
                total += lse - z[base + t * hw];
            }
        }
        let loss = total / (b * hw) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            OpKind::CrossEntropy,
            Op::CrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// One minus the mean over classes of the smoothed soft Dice between
    /// softmax probabilities and the one-hot target, pooled over the batch.
    pub fn soft_dice(&mut self, logits: Var, target: &[u8], smooth: f64) -> Result<Var> {
        let (probs, [b, c, h, w]) = self.softmax_checked(logits, target, "soft_dice")?;
        let (inter, denom) = dice_terms(&probs, target, [b, c, h, w]);
        let mean_dice = (0..c)
            .map(|k| (2.0 * inter[k] + smooth) / (denom[k] + smooth))
            .sum::<f64>()
            / c as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            OpKind::SoftDice,
            Op::SoftDice {
                logits,
                probs,
                target: target.to_vec(),
                smooth,
            },
            Tensor::scalar(1.0 - mean_dice),
            rg,
        ))
    }

    fn softmax_checked(&self, logits: Var, target: &[u8], op: &'static str) -> Result<(Vec<f64>, [usize; 4])> {
        let dims @ [b, c, h, w] = self.dims4(logits, op)?;
        if target.len() != b * h * w {
            return Err(Error::dim(op, format!("target has {} labels for {} pixels", target.len(), b * h * w)));
        }
        if let Some(bad) = target.iter().find(|&&t| t as usize >= c) {
            return Err(Error::Data(format!("class id {bad} out of range for {c} classes")));
        }
        Ok((softmax_channels(self.data(logits), dims), dims))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every reachable
    /// node requiring one are stored on its tensor and readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visits += 1;
            let node = &self.nodes[i];
            let scale = if self.fault == Some(node.kind) { 1.5 } else { 1.0 };
            let mut contribs: Vec<(Var, Vec<f64>)> = Vec::new();
            self.local_grads(node, &g, &mut contribs);
            for (v, mut c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    c.iter_mut().for_each(|x| *x *= scale);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            if node.requires_grad {
                self.nodes[i].value.set_grad(g);
            }
        }
        self.last_visits = visits;
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &[f64], out: &mut Vec<(Var, Vec<f64>)>) {
        if !node.requires_grad {
            return;
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let grads = kernels::conv2d_backward(
                    self.data(*input),
                    *batch,
                    geom,
                    self.data(*kernel),
                    g,
                    self.rg(*input),
                    self.rg(*kernel),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(d) = grads.input {
                    out.push((*input, d));
                }
                if let Some(d) = grads.kernel {
                    out.push((*kernel, d));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = [
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                    node.value.shape()[3],
                ];
                let hw = h * w;
                let n = (b * hw) as f64;
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = if *train {
                                    gm[ch] * inv_std[ch] / n * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gm[ch] * inv_std[ch] * g[i]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                out.push((*x, d));
            }
            Op::Resize { input, ty, tx } => {
                let s = self.shape(*input);
                let d = kernels::resize_backward(g, s[0] * s[1], (s[2], s[3]), ty, tx);
                out.push((*input, d));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                out.push((*input, d));
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (b, total, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &(v, c) in parts {
                    let mut d = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * total + offset) * hw;
                        d.extend_from_slice(&g[start..start + c * hw]);
                    }
                    out.push((v, d));
                    offset += c;
                }
            }
            Op::Mul { a, b } => {
                let (da_src, db_src) = (self.data(*a), self.data(*b));
                if self.shape(*a) == self.shape(*b) {
                    out.push((*a, g.iter().zip(db_src).map(|(x, y)| x * y).collect()));
                    out.push((*b, g.iter().zip(da_src).map(|(x, y)| x * y).collect()));
                } else {
                    let s = self.shape(*a);
                    let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; db_src.len()];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for p in 0..hw {
                                da[off + p] = g[off + p] * db_src[bi * hw + p];
                                db[bi * hw + p] += g[off + p] * da_src[off + p];
                            }
                        }
                    }
                    out.push((*a, da));
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sum(x, None) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Sum(x, Some(w)) => out.push((*x, w.iter().map(|w| w * g[0]).collect())),
            Op::CrossEntropy { logits, probs, target } => {
                let s = self.shape(*logits);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = g[0] / (b * hw) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for bi in 0..b {
                    for p in 0..hw {
                        let t = target[bi * hw + p] as usize;
                        d[(bi * c + t) * hw + p] -= scale;
                    }
                }
                out.push((*logits, d));
            }
            Op::SoftDice {
                logits,
                probs,
                target,
                smooth,
            } => {
                let s = self.shape(*logits);
                let dims = [s[0], s[1], s[2], s[3]];
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (inter, denom) = dice_terms(probs, target, dims);
                // dL/dp for each class and pixel, then through the softmax Jacobian
                let mut d = vec![0.0; probs.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let t = target[bi * hw + p] as usize;
                        let dp = |k: usize| {
                            let num = 2.0 * inter[k] + smooth;
                            let den = denom[k] + smooth;
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            -g[0] / c as f64 * (2.0 * onehot * den - num) / (den * den)
                        };
                        let idx = |k: usize| (bi * c + k) * hw + p;
                        let dot: f64 = (0..c).map(|k| probs[idx(k)] * dp(k)).sum();
                        for k in 0..c {
                            d[idx(k)] = probs[idx(k)] * (dp(k) - dot);
                        }
                    }
                }
                out.push((*logits, d));
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over the channel axis of `[B,C,H,W]` data.
pub(crate) fn softmax_channels(z: &[f64], [b, c, h, w]: [usize; 4]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; z.len()];
    for bi in 0..b {
        for p in 0..hw {
            let idx = |k: usize| (bi * c + k) * hw + p;
            let m = (0..c).map(|k| z[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (z[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..c {
                out[idx(k)] /= s;
            }
        }
    }
    out
}

/// Per-class soft intersection `sum p*t` and denominator `sum p + sum t`.
fn dice_terms(probs: &[f64], target: &[u8], [b, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut inter = vec![0.0; c];
    let mut denom = vec![0.0; c];
    for bi in 0..b {
        for p in 0..hw {
            let t = target[bi * hw + p] as usize;
            for k in 0..c {
                let pk = probs[(bi * c + k) * hw + p];
                denom[k] += pk;
                if k == t {
                    inter[k] += pk;
                    denom[k] += 1.0;
                }
            }
        }
    }
    (inter, denom)
}
