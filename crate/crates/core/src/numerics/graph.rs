//! Define-by-run computation graph with a reverse-mode backward pass.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so arena order is a topological order and `backward` is a
//! single reverse sweep. Layout conventions: images and feature maps are
//! `[height, width, channels]`, convolution weights are
//! `[k, k, in_channels, out_channels]`.

use super::tensor::Tensor;
use super::NumericsError;

/// Cosine bound used when evaluating the derivative of `acos`.
pub const ARCCOS_CLAMP: f64 = 1.0 - 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag recorded for each node.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Filter2d {
        input: Var,
        kernel: Tensor,
    },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    L2Normalize(Var),
    Dot(Var, Var),
    Arccos(Var),
    Square(Var),
    Sqrt(Var),
    MaxConst(Var, f64),
    ResizeBilinear(Var),
    QuantizeSt(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add(..) => "add",
            OpKind::Sub(..) => "sub",
            OpKind::Mul(..) => "mul",
            OpKind::Div(..) => "div",
            OpKind::AddScalar(..) => "add_scalar",
            OpKind::Scale(..) => "scale",
            OpKind::MatMul(..) => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Filter2d { .. } => "filter2d",
            OpKind::Relu(..) => "relu",
            OpKind::Sum(..) => "sum",
            OpKind::Mean(..) => "mean",
            OpKind::Clamp { .. } => "clamp",
            OpKind::L2Normalize(..) => "l2_normalize",
            OpKind::Dot(..) => "dot",
            OpKind::Arccos(..) => "arccos",
            OpKind::Square(..) => "square",
            OpKind::Sqrt(..) => "sqrt",
            OpKind::MaxConst(..) => "max_const",
            OpKind::ResizeBilinear(..) => "resize_bilinear",
            OpKind::QuantizeSt(..) => "quantize",
            OpKind::GlobalAvgPool(..) => "global_avg_pool",
            OpKind::Reshape(..) => "reshape",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            OpKind::Leaf => vec![],
            OpKind::Add(a, b)
            | OpKind::Sub(a, b)
            | OpKind::Mul(a, b)
            | OpKind::Div(a, b)
            | OpKind::MatMul(a, b)
            | OpKind::Dot(a, b) => vec![*a, *b],
            OpKind::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            OpKind::AddScalar(a)
            | OpKind::Scale(a, _)
            | OpKind::Relu(a)
            | OpKind::Sum(a)
            | OpKind::Mean(a)
            | OpKind::L2Normalize(a)
            | OpKind::Arccos(a)
            | OpKind::Square(a)
            | OpKind::Sqrt(a)
            | OpKind::MaxConst(a, _)
            | OpKind::ResizeBilinear(a)
            | OpKind::QuantizeSt(a)
            | OpKind::GlobalAvgPool(a)
            | OpKind::Reshape(a) => vec![*a],
            OpKind::Filter2d { input, .. } | OpKind::Clamp { input, .. } => vec![*input],
            OpKind::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// A recorded operation with its forward value.
#[derive(Clone, Debug)]
pub struct ComputationNode {
    pub op: OpKind,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`; zeros when the node was not reached.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<ComputationNode>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Sampling taps for corner-aligned bilinear interpolation along one axis:
/// `(lower index, upper index, upper weight)` per output position.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = if out_len == 1 || in_len == 1 {
                0.0
            } else {
                (i * (in_len - 1)) as f64 / (out_len - 1) as f64
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Corner-aligned bilinear resize of an `[h, w, c]` buffer.
pub(crate) fn resize_hwc(
    src: &[f64],
    (h, w, c): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let a = src[(y0 * w + x0) * c + ch];
                let b = src[(y0 * w + x1) * c + ch];
                let cc = src[(y1 * w + x0) * c + ch];
                let d = src[(y1 * w + x1) * c + ch];
                let top = a + wx * (b - a);
                let bottom = cc + wx * (d - cc);
                out[(oy * out_w + ox) * c + ch] = top + wy * (bottom - top);
            }
        }
    }
    out
}

/// Snap to the nearest multiple of 1/255, halves away from zero.
pub fn quantize_value(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &ComputationNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, value, false)
    }

    fn push(&mut self, op: OpKind, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(ComputationNode {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: OpKind, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        op: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        self.same_shape(op.name(), a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        Ok(self.record(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(OpKind::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(OpKind::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(OpKind::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(OpKind::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.record(OpKind::AddScalar(a), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.record(OpKind::Scale(a, c), value)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(OpKind::MatMul(a, b), value))
    }

    /// Zero-padded strided convolution.
    ///
    /// `input: [h, w, ci]`, `weight: [k, k, ci, co]`, `bias: [co]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != si[2] {
            return Err(mismatch("conv2d", si, sw));
        }
        if sb != [sw[3]] {
            return Err(mismatch("conv2d", sw, sb));
        }
        let (h, w, ci) = (si[0], si[1], si[2]);
        let (k, co) = (sw[0], sw[3]);
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch("conv2d", si, sw));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; ho * wo * co];
        for oy in 0..ho {
            for ox in 0..wo {
                let acc = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                acc.copy_from_slice(bv);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * w + ix as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let x = xv[xbase + c];
                            let wrow = &wv[wbase + c * co..wbase + (c + 1) * co];
                            for (a, &wt) in acc.iter_mut().zip(wrow) {
                                *a += x * wt;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, co], out)?;
        Ok(self.record(
            OpKind::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            value,
        ))
    }

    /// Valid-mode correlation of every channel of `input: [h, w, c]` with a
    /// fixed `kernel: [kh, kw]`.
    pub fn filter2d(&mut self, input: Var, kernel: &Tensor) -> Result<Var, NumericsError> {
        let (si, sk) = (self.shape(input), kernel.shape());
        if si.len() != 3 || sk.len() != 2 || sk[0] > si[0] || sk[1] > si[1] {
            return Err(mismatch("filter2d", si, sk));
        }
        let (h, w, c) = (si[0], si[1], si[2]);
        let (kh, kw) = (sk[0], sk[1]);
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let xv = self.value(input).data();
        let kv = kernel.data();
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let acc = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kval = kv[ky * kw + kx];
                        let base = ((oy + ky) * w + ox + kx) * c;
                        for (a, &x) in acc.iter_mut().zip(&xv[base..base + c]) {
                            *a += kval * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, c], out)?;
        Ok(self.record(
            OpKind::Filter2d {
                input,
                kernel: kernel.clone(),
            },
            value,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.record(OpKind::Relu(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(OpKind::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record(OpKind::Mean(a), Tensor::scalar(s))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval and
    /// is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.record(OpKind::Clamp { input: a, lo, hi }, value)
    }

    /// Normalize each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("tensor has rank >= 1");
        let mut out = t.data().to_vec();
        for chunk in out.chunks_mut(n) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.record(OpKind::L2Normalize(a), value)
    }

    /// Inner product of two equally sized tensors, returned as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(mismatch("dot", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.record(OpKind::Dot(a, b), Tensor::scalar(s)))
    }

    /// `acos` of the input clamped to `[-1, 1]`. The derivative is taken at
    /// the cosine clamped to `[-1+1e-7, 1-1e-7]`, so it stays finite at
    /// identical or opposite vectors.
    pub fn arccos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.clamp(-1.0, 1.0).acos());
        self.record(OpKind::Arccos(a), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.record(OpKind::Square(a), value)
    }

    /// Elementwise square root; the input must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.record(OpKind::Sqrt(a), value)
    }

    /// `max(x, c)` elementwise; no gradient where `x <= c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x.max(c));
        self.record(OpKind::MaxConst(a, c), value)
    }

    /// Corner-aligned bilinear resize of `[h, w, c]` to `[out_h, out_w, c]`.
    pub fn resize_bilinear(
        &mut self,
        a: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, NumericsError> {
        let s = self.shape(a);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(mismatch("resize_bilinear", s, &[out_h, out_w]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let data = if (h, w) == (out_h, out_w) {
            self.value(a).data().to_vec()
        } else {
            resize_hwc(self.value(a).data(), (h, w, c), out_h, out_w)
        };
        let value = Tensor::new(vec![out_h, out_w, c], data)?;
        Ok(self.record(OpKind::ResizeBilinear(a), value))
    }

    /// 1/255 quantization; identity in the backward pass.
    pub fn quantize(&mut self, a: Var) -> Var {
        let value = self.value(a).map(quantize_value);
        self.record(OpKind::QuantizeSt(a), value)
    }

    /// Mean over height and width: `[h, w, c] -> [c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(mismatch("global_avg_pool", s, &[0, 0, 0]));
        }
        let (hw, c) = (s[0] * s[1], s[2]);
        let mut out = vec![0.0; c];
        for px in self.value(a).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        let value = Tensor::new(vec![c], out)?;
        Ok(self.record(OpKind::GlobalAvgPool(a), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = self.value(a).with_shape(shape.to_vec());
        Ok(self.record(OpKind::Reshape(a), value))
    }

    /// Negative log-softmax probability of `label` for a logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if label >= t.len() {
            return Err(mismatch("softmax_cross_entropy", t.shape(), &[label + 1]));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(t.data()[label] - max - z.ln());
        Ok(self.record(
            OpKind::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Smallest distance from any relu, clamp, or hinge input to its kink.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the
    /// probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            let (input, kinks): (Var, Vec<f64>) = match &node.op {
                OpKind::Relu(a) => (*a, vec![0.0]),
                OpKind::MaxConst(a, c) => (*a, vec![*c]),
                OpKind::Clamp { input, lo, hi } => (*input, vec![*lo, *hi]),
                _ => continue,
            };
            for &x in self.value(input).data() {
                for &k in &kinks {
                    margin = margin.min((x - k).abs());
                }
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(NumericsError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        out.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads: out,
            shapes,
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &ComputationNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            OpKind::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
                });
            }
            OpKind::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            OpKind::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            OpKind::AddScalar(a) | OpKind::Reshape(a) | OpKind::QuantizeSt(a) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
            }
            OpKind::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
                });
            }
            OpKind::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                });
            }
            OpKind::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(*input, *weight, *bias, *stride, *pad, node, g, grads),
            OpKind::Filter2d { input, kernel } => {
                let si = self.shape(*input);
                let (w, c) = (si[1], si[2]);
                let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
                let so = node.value.shape();
                let (ho, wo) = (so[0], so[1]);
                let kv = kernel.data();
                self.accumulate(grads, *input, |s| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gpx = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let kval = kv[ky * kw + kx];
                                    let base = ((oy + ky) * w + ox + kx) * c;
                                    for (sv, gv) in s[base..base + c].iter_mut().zip(gpx) {
                                        *sv += kval * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            OpKind::Relu(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            OpKind::Sum(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|v| *v += g[0]));
            }
            OpKind::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            OpKind::Clamp { input, lo, hi } => {
                let av = val(*input);
                self.accumulate(grads, *input, |s| {
                    for i in 0..s.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            OpKind::L2Normalize(a) => {
                let av = val(*a);
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                self.accumulate(grads, *a, |s| {
                    for start in (0..y.len()).step_by(n) {
                        let r = start..start + n;
                        let norm = av[r.clone()]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            .max(1e-12);
                        let yg: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        for i in r {
                            s[i] += (g[i] - y[i] * yg) / norm;
                        }
                    }
                });
            }
            OpKind::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(bv).for_each(|(s, b)| *s += g[0] * b)
                });
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(av).for_each(|(s, a)| *s += g[0] * a)
                });
            }
            OpKind::Arccos(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        let c = av[i].clamp(-ARCCOS_CLAMP, ARCCOS_CLAMP);
                        s[i] -= g[i] / (1.0 - c * c).sqrt();
                    }
                });
            }
            OpKind::Square(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            OpKind::Sqrt(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if y[i] > 0.0 {
                            s[i] += 0.5 * g[i] / y[i];
                        }
                    }
                });
            }
            OpKind::MaxConst(a, c) => {
                let av = val(*a);
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if av[i] > *c {
                            s[i] += g[i];
                        }
                    }
                });
            }
            OpKind::ResizeBilinear(a) => {
                let si = self.shape(*a);
                let (h, w, c) = (si[0], si[1], si[2]);
                let so = node.value.shape();
                let (oh, ow) = (so[0], so[1]);
                if (h, w) == (oh, ow) {
                    self.accumulate(grads, *a, |s| add_into(s, g));
                    return;
                }
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                self.accumulate(grads, *a, |s| {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            for ch in 0..c {
                                let gv = g[(oy * ow + ox) * c + ch];
                                s[(y0 * w + x0) * c + ch] += gv * (1.0 - wx) * (1.0 - wy);
                                s[(y0 * w + x1) * c + ch] += gv * wx * (1.0 - wy);
                                s[(y1 * w + x0) * c + ch] += gv * (1.0 - wx) * wy;
                                s[(y1 * w + x1) * c + ch] += gv * wx * wy;
                            }
                        }
                    }
                });
            }
            OpKind::GlobalAvgPool(a) => {
                let si = self.shape(*a);
                let (hw, c) = (si[0] * si[1], si[2]);
                self.accumulate(grads, *a, |s| {
                    for px in s.chunks_mut(c) {
                        for (v, gv) in px.iter_mut().zip(g) {
                            *v += gv / hw as f64;
                        }
                    }
                });
            }
            OpKind::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                self.accumulate(grads, *logits, |s| {
                    for (i, (sv, p)) in s.iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        *sv += g[0] * (p - target);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        node: &ComputationNode,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let (h, w, ci) = (si[0], si[1], si[2]);
        let (k, co) = (sw[0], sw[3]);
        let so = node.value.shape();
        let (ho, wo) = (so[0], so[1]);
        let xv = self.value(input).data();
        let wv = self.value(weight).data();

        // Valid (input offset, weight offset) pairs for every output pixel.
        let taps = |oy: usize, ox: usize| {
            let mut v = Vec::with_capacity(k * k);
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    v.push(((iy as usize * w + ix as usize) * ci, (ky * k + kx) * ci * co));
                }
            }
            v
        };

        self.accumulate(grads, bias, |s| {
            for px in g.chunks(co) {
                add_into(s, px);
            }
        });
        self.accumulate(grads, weight, |s| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gpx = &g[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    for (xb, wb) in taps(oy, ox) {
                        for c in 0..ci {
                            let x = xv[xb + c];
                            if x == 0.0 {
                                continue;
                            }
                            for (sv, gv) in s[wb + c * co..wb + (c + 1) * co].iter_mut().zip(gpx) {
                                *sv += x * gv;
                            }
                        }
                    }
                }
            }
        });
        self.accumulate(grads, input, |s| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gpx = &g[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    for (xb, wb) in taps(oy, ox) {
                        for c in 0..ci {
                            let wrow = &wv[wb + c * co..wb + (c + 1) * co];
                            s[xb + c] += wrow.iter().zip(gpx).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
