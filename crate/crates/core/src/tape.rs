//! Reverse-mode automatic differentiation on an append-only operation tape.
//!
//! A [`Tape`] records every operation applied to its [`Variable`]s in
//! execution order, which is already a topological order, so the backward
//! pass is a single reverse sweep. Gradients accumulate additively across
//! fan-out. A tape is single-lane: concurrent evaluation uses one tape per
//! lane over shared parameter tensors.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels;
use crate::kernels::Conv2dGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Invalid-argument error raised by graph operations: rank/shape mismatches,
/// odd pooling extents, out-of-range labels, mixed tapes, non-scalar
/// backward roots.
#[derive(Clone, Debug, thiserror::Error)]
#[error("{op}: {msg}")]
pub struct ShapeError {
    pub op: &'static str,
    pub msg: String,
}

impl ShapeError {
    pub fn new(op: &'static str, msg: impl Into<String>) -> Self {
        ShapeError {
            op,
            msg: msg.into(),
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        g: Conv2dGeom,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Conv1dChannels {
        v: usize,
        k: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    ElemwiseMax {
        a: usize,
        b: usize,
    },
    MaxChannelHalves {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddN {
        xs: Vec<usize>,
    },
    ScaleConst {
        x: usize,
        c: T,
    },
    ScaleChannels {
        x: usize,
        s: usize,
    },
    SliceChannels {
        x: usize,
        from: usize,
    },
    CropSpatial {
        x: usize,
        y0: usize,
        x0: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        x: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    /// Keep the gradient after backward (leaves created with
    /// `requires_grad = true`). Interior gradients are dropped once consumed.
    keep_grad: bool,
    op: Op<T>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// The recording context. Cloning is cheap and refers to the same tape.
pub struct Tape<T: Scalar = f32> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Records an input node. `requires_grad` marks it as a gradient sink:
    /// its gradient is retained by [`Variable::backward`].
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Variable<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            keep_grad: requires_grad,
            op: Op::Leaf,
        });
        Variable {
            tape: Rc::clone(&self.inner),
            id,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A tensor recorded on a tape, identified by its node id. Cloning refers to
/// the same node.
pub struct Variable<T: Scalar = f32> {
    tape: Rc<RefCell<TapeInner<T>>>,
    id: usize,
}

impl<T: Scalar> Clone for Variable<T> {
    fn clone(&self) -> Self {
        Variable {
            tape: Rc::clone(&self.tape),
            id: self.id,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Variable<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Variable")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Variable<T> {
    /// Node id on the owning tape.
    pub fn id(&self) -> usize {
        self.id
    }

    /// The node's value (shares storage; cheap).
    pub fn value(&self) -> Tensor<T> {
        self.tape.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// The gradient populated by [`Variable::backward`], retained only for
    /// `requires_grad` leaves.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.borrow().nodes[self.id].keep_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Variable<T> {
        let mut inner = self.tape.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            keep_grad: false,
            op,
        });
        Variable {
            tape: Rc::clone(&self.tape),
            id,
        }
    }

    fn same_tape(&self, other: &Variable<T>, op: &'static str) -> Result<(), ShapeError> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(ShapeError::new(op, "operands belong to different tapes"))
        }
    }

    /// 2-d convolution with zero padding; `kernel` is `[cout,cin,kh,kw]`.
    pub fn conv2d(
        &self,
        kernel: &Variable<T>,
        bias: &Variable<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "conv2d";
        self.same_tape(kernel, OP)?;
        self.same_tape(bias, OP)?;
        let (xv, kv, bv) = (self.value(), kernel.value(), bias.value());
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 4 {
            return Err(ShapeError::new(OP, format!("input must be [N,C,H,W], got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(ShapeError::new(
                OP,
                format!("kernel must be [Cout,Cin,kh,kw], got {ks:?}"),
            ));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(ShapeError::new(
                OP,
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if bv.shape() != [cout] {
            return Err(ShapeError::new(
                OP,
                format!("bias must be [{cout}], got {:?}", bv.shape()),
            ));
        }
        if stride == 0 {
            return Err(ShapeError::new(OP, "stride must be >= 1"));
        }
        let g = Conv2dGeom::new(n, cin, h, w, cout, kh, kw, stride, pad).ok_or_else(|| {
            ShapeError::new(
                OP,
                format!(
                    "kernel {kh}x{kw} stride {stride} pad {pad} has no integral output on {h}x{w}"
                ),
            )
        })?;
        let scratch = if g.is_pointwise() { 0 } else { g.ckk() * g.ohw() };
        let mut cols = vec![T::zero(); scratch];
        let mut out = vec![T::zero(); n * cout * g.ohw()];
        kernels::conv2d_forward(xv.data(), kv.data(), bv.data(), &g, &mut cols, &mut out);
        Ok(self.push(
            Tensor::from_vec(vec![n, cout, g.oh, g.ow], out),
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                b: bias.id,
                g,
            },
        ))
    }

    /// 2x2/2 max pooling; gradient routes to the argmax (first index on ties).
    pub fn maxpool2(&self) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "maxpool2";
        let xv = self.value();
        let xs = xv.shape();
        if xs.len() != 4 {
            return Err(ShapeError::new(OP, format!("input must be [N,C,H,W], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::new(
                OP,
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let mut out = vec![T::zero(); n * c * (h / 2) * (w / 2)];
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool2_forward(xv.data(), n, c, h, w, &mut out, &mut argmax);
        Ok(self.push(
            Tensor::from_vec(vec![n, c, h / 2, w / 2], out),
            Op::MaxPool2 { x: self.id, argmax },
        ))
    }

    /// 1-d convolution along the channel axis of `[N,C]` with zero padding
    /// `(k-1)/2` and no bias.
    pub fn conv1d_channels(&self, kernel: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "conv1d_channels";
        self.same_tape(kernel, OP)?;
        let (xv, kv) = (self.value(), kernel.value());
        let xs = xv.shape();
        if xs.len() != 2 {
            return Err(ShapeError::new(OP, format!("input must be [N,C], got {xs:?}")));
        }
        if kv.shape().len() != 1 {
            return Err(ShapeError::new(
                OP,
                format!("kernel must be rank 1, got {:?}", kv.shape()),
            ));
        }
        let (n, c, k) = (xs[0], xs[1], kv.numel());
        if k % 2 == 0 {
            return Err(ShapeError::new(OP, format!("kernel size must be odd, got {k}")));
        }
        if k > c {
            return Err(ShapeError::new(
                OP,
                format!("kernel size {k} exceeds channel count {c}"),
            ));
        }
        let mut out = vec![T::zero(); n * c];
        kernels::conv1d_channels_forward(xv.data(), kv.data(), n, c, &mut out);
        Ok(self.push(
            Tensor::from_vec(vec![n, c], out),
            Op::Conv1dChannels {
                v: self.id,
                k: kernel.id,
            },
        ))
    }

    /// Affine map `x*weight + bias` for `x: [N,D]`, `weight: [D,M]`.
    pub fn dense(&self, weight: &Variable<T>, bias: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "dense";
        self.same_tape(weight, OP)?;
        self.same_tape(bias, OP)?;
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(ShapeError::new(
                OP,
                format!("wants x [N,D] and weight [D,M], got {xs:?} and {ws:?}"),
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        if ws[0] != d {
            return Err(ShapeError::new(
                OP,
                format!("x inner dim {d} does not match weight rows {}", ws[0]),
            ));
        }
        if bv.shape() != [m] {
            return Err(ShapeError::new(
                OP,
                format!("bias must be [{m}], got {:?}", bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::dense_forward(xv.data(), wv.data(), bv.data(), n, d, m, &mut out);
        Ok(self.push(
            Tensor::from_vec(vec![n, m], out),
            Op::Dense {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
        ))
    }

    /// Elementwise maximum; gradient routes to the larger input, ties to
    /// `self`.
    pub fn elemwise_max(&self, other: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "elemwise_max";
        self.same_tape(other, OP)?;
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(ShapeError::new(
                OP,
                format!("shape mismatch: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&a, &b)| if a >= b { a } else { b })
            .collect();
        Ok(self.push(
            Tensor::from_vec(av.shape().to_vec(), out),
            Op::ElemwiseMax {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Elementwise maximum of the two channel halves of a rank-2 `[N, C]` or
    /// rank-4 `[N, C, H, W]` tensor, halving the channel count. Same result
    /// as slicing the halves and taking `elemwise_max`, fused into one pass;
    /// ties route the gradient to the first half.
    pub fn max_channel_halves(&self) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "max_channel_halves";
        let xv = self.value();
        let shape = xv.shape();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(ShapeError::new(
                OP,
                format!("input must be rank 2 or 4, got {shape:?}"),
            ));
        }
        let channels = shape[1];
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(ShapeError::new(
                OP,
                format!("channel count must be even and nonzero, got {channels}"),
            ));
        }
        let rest: usize = shape[2..].iter().product();
        let plane = (channels / 2) * rest;
        let x = xv.data();
        let mut out = Vec::with_capacity(shape[0] * plane);
        for i in 0..shape[0] {
            let base = i * channels * rest;
            let lo = &x[base..base + plane];
            let hi = &x[base + plane..base + 2 * plane];
            out.extend(lo.iter().zip(hi).map(|(&a, &b)| if a >= b { a } else { b }));
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = channels / 2;
        Ok(self.push(
            Tensor::from_vec(out_shape, out),
            Op::MaxChannelHalves { x: self.id },
        ))
    }

    pub fn sigmoid(&self) -> Variable<T> {
        let xv = self.value();
        let out = xv.map(|v| {
            // Stable in both tails.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid { x: self.id })
    }

    /// Mean over the spatial dims of `[N,C,H,W]`, giving `[N,C]`.
    /// Accumulates in f64.
    pub fn global_avg_pool(&self) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "global_avg_pool";
        let xv = self.value();
        let xs = xv.shape();
        if xs.len() != 4 {
            return Err(ShapeError::new(OP, format!("input must be [N,C,H,W], got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let mut acc = 0.0f64;
            for v in &xd[plane * hw..(plane + 1) * hw] {
                acc += v.as_f64();
            }
            out.push(T::from_f64(acc / hw as f64));
        }
        Ok(self.push(
            Tensor::from_vec(vec![n, c], out),
            Op::GlobalAvgPool { x: self.id },
        ))
    }

    /// Elementwise sum of two same-shape variables.
    pub fn add(&self, other: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "add";
        self.same_tape(other, OP)?;
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(ShapeError::new(
                OP,
                format!("shape mismatch: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::Add { a: self.id, b: other.id }))
    }

    /// Multiplication by a compile-time-known constant (not a tape input).
    pub fn scale_const(&self, c: T) -> Variable<T> {
        let out = self.value().map(|v| v * c);
        self.push(out, Op::ScaleConst { x: self.id, c })
    }

    /// Per-channel rescaling of `[N,C,H,W]` by `s: [N,C]`.
    pub fn scale_channels(&self, s: &Variable<T>) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "scale_channels";
        self.same_tape(s, OP)?;
        let (xv, sv) = (self.value(), s.value());
        let xs = xv.shape();
        if xs.len() != 4 {
            return Err(ShapeError::new(OP, format!("input must be [N,C,H,W], got {xs:?}")));
        }
        if sv.shape() != [xs[0], xs[1]] {
            return Err(ShapeError::new(
                OP,
                format!("scale must be [{},{}], got {:?}", xs[0], xs[1], sv.shape()),
            ));
        }
        let hw = xs[2] * xs[3];
        let (xd, sd) = (xv.data(), sv.data());
        let mut out = vec![T::zero(); xd.len()];
        for plane in 0..xs[0] * xs[1] {
            let sc = sd[plane];
            for (o, v) in out[plane * hw..(plane + 1) * hw]
                .iter_mut()
                .zip(&xd[plane * hw..(plane + 1) * hw])
            {
                *o = *v * sc;
            }
        }
        Ok(self.push(
            Tensor::from_vec(xs.to_vec(), out),
            Op::ScaleChannels { x: self.id, s: s.id },
        ))
    }

    /// The contiguous channel range `[from, to)` along axis 1 of a rank-2 or
    /// rank-4 tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "slice_channels";
        let xv = self.value();
        let xs = xv.shape();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(ShapeError::new(OP, format!("input must be rank 2 or 4, got {xs:?}")));
        }
        let c = xs[1];
        if from >= to || to > c {
            return Err(ShapeError::new(
                OP,
                format!("invalid channel range {from}..{to} for {c} channels"),
            ));
        }
        let rest: usize = xs[2..].iter().product();
        let cs = to - from;
        let xd = xv.data();
        let mut out = vec![T::zero(); xs[0] * cs * rest];
        for i in 0..xs[0] {
            out[i * cs * rest..(i + 1) * cs * rest]
                .copy_from_slice(&xd[(i * c + from) * rest..(i * c + to) * rest]);
        }
        let mut oshape = xs.to_vec();
        oshape[1] = cs;
        Ok(self.push(
            Tensor::from_vec(oshape, out),
            Op::SliceChannels { x: self.id, from },
        ))
    }

    /// The spatial window `[y0, y0+ch) x [x0, x0+cw)` of `[N,C,H,W]`.
    pub fn crop_spatial(
        &self,
        y0: usize,
        x0: usize,
        ch: usize,
        cw: usize,
    ) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "crop_spatial";
        let xv = self.value();
        let xs = xv.shape();
        if xs.len() != 4 {
            return Err(ShapeError::new(OP, format!("input must be [N,C,H,W], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w {
            return Err(ShapeError::new(
                OP,
                format!("window {y0}+{ch} x {x0}+{cw} exceeds {h}x{w}"),
            ));
        }
        let xd = xv.data();
        let mut out = vec![T::zero(); n * c * ch * cw];
        let mut o = 0usize;
        for plane in 0..n * c {
            let base = plane * h * w;
            for yy in 0..ch {
                let src = base + (y0 + yy) * w + x0;
                out[o..o + cw].copy_from_slice(&xd[src..src + cw]);
                o += cw;
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![n, c, ch, cw], out),
            Op::CropSpatial { x: self.id, y0, x0 },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilised by
    /// max subtraction and accumulated in f64. Returns a scalar.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Variable<T>, ShapeError> {
        const OP: &str = "softmax_cross_entropy";
        let lv = self.value();
        let ls = lv.shape();
        if ls.len() != 2 {
            return Err(ShapeError::new(OP, format!("logits must be [N,K], got {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(ShapeError::new(
                OP,
                format!("got {} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(ShapeError::new(
                OP,
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let ld = lv.data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let mut denom = 0.0f64;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                let e = (v - m).exp();
                *p = e;
                denom += e.as_f64();
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = T::from_f64(p.as_f64() / denom);
            }
            // -log softmax[label] = log(sum exp(z - m)) - (z[label] - m)
            total += denom.ln() - (row[labels[i]] - m).as_f64();
        }
        let loss = Tensor::scalar(T::from_f64(total / n as f64));
        Ok(self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs: Tensor::from_vec(vec![n, k], probs),
            },
        ))
    }

    /// Sum of all elements (f64 accumulation). Returns a scalar.
    pub fn sum(&self) -> Variable<T> {
        let total = self.value().sum_f64();
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum { x: self.id })
    }

    /// Reverse sweep from a scalar root. Populates `grad` for every
    /// `requires_grad` leaf reachable from the root; gradients accumulate
    /// additively across fan-out.
    pub fn backward(&self) -> Result<(), ShapeError> {
        const OP: &str = "backward";
        let mut inner = self.tape.borrow_mut();
        if inner.nodes[self.id].value.numel() != 1 {
            return Err(ShapeError::new(
                OP,
                format!(
                    "root must be scalar, got shape {:?}",
                    inner.nodes[self.id].value.shape()
                ),
            ));
        }
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        let root_shape = inner.nodes[self.id].value.shape().to_vec();
        inner.nodes[self.id].grad = Some(Tensor::full(root_shape, T::one()));
        for id in (0..=self.id).rev() {
            let Some(gy) = inner.nodes[id].grad.clone() else {
                continue;
            };
            let contribs = backward_op(&inner.nodes, id, &gy);
            for (src, contrib) in contribs {
                match &mut inner.nodes[src].grad {
                    slot @ None => *slot = Some(contrib),
                    Some(g) => g.add_assign(&contrib),
                }
            }
            if !inner.nodes[id].keep_grad {
                inner.nodes[id].grad = None;
            }
        }
        Ok(())
    }
}

/// Gradient contributions of node `id` to its inputs, as `(input id, d)`
/// pairs. Pure reads; accumulation happens at the caller.
fn backward_op<T: Scalar>(nodes: &[Node<T>], id: usize, gy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let value = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { x, k, b, g } => {
            let (xv, kv) = (value(*x), value(*k));
            let scratch = if g.is_pointwise() { 0 } else { g.ckk() * g.ohw() };
            let mut cols = vec![T::zero(); scratch];
            let mut dcols = vec![T::zero(); cols.len()];
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dk = vec![T::zero(); kv.numel()];
            let mut db = vec![T::zero(); g.cout];
            kernels::conv2d_backward(
                xv.data(),
                kv.data(),
                gy.data(),
                g,
                &mut cols,
                &mut dcols,
                &mut dx,
                &mut dk,
                &mut db,
            );
            vec![
                (*x, Tensor::from_vec(xv.shape().to_vec(), dx)),
                (*k, Tensor::from_vec(kv.shape().to_vec(), dk)),
                (*b, Tensor::from_vec(vec![g.cout], db)),
            ]
        }
        Op::MaxPool2 { x, argmax } => {
            let xv = value(*x);
            let mut dx = vec![T::zero(); xv.numel()];
            kernels::maxpool2_backward(gy.data(), argmax, &mut dx);
            vec![(*x, Tensor::from_vec(xv.shape().to_vec(), dx))]
        }
        Op::Conv1dChannels { v, k } => {
            let (vv, kv) = (value(*v), value(*k));
            let s = vv.shape();
            let mut dv = vec![T::zero(); vv.numel()];
            let mut dk = vec![T::zero(); kv.numel()];
            kernels::conv1d_channels_backward(
                vv.data(),
                kv.data(),
                gy.data(),
                s[0],
                s[1],
                &mut dv,
                &mut dk,
            );
            vec![
                (*v, Tensor::from_vec(s.to_vec(), dv)),
                (*k, Tensor::from_vec(kv.shape().to_vec(), dk)),
            ]
        }
        Op::Dense { x, w, b } => {
            let (xv, wv) = (value(*x), value(*w));
            let (n, d, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dw = vec![T::zero(); wv.numel()];
            let mut db = vec![T::zero(); m];
            kernels::dense_backward(
                xv.data(),
                wv.data(),
                gy.data(),
                n,
                d,
                m,
                &mut dx,
                &mut dw,
                &mut db,
            );
            vec![
                (*x, Tensor::from_vec(xv.shape().to_vec(), dx)),
                (*w, Tensor::from_vec(wv.shape().to_vec(), dw)),
                (*b, Tensor::from_vec(vec![m], db)),
            ]
        }
        Op::ElemwiseMax { a, b } => {
            let (av, bv) = (value(*a), value(*b));
            let gd = gy.data();
            let da: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .zip(gd)
                .map(|((&x, &y), &g)| if x >= y { g } else { T::zero() })
                .collect();
            let db: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .zip(gd)
                .map(|((&x, &y), &g)| if x >= y { T::zero() } else { g })
                .collect();
            vec![
                (*a, Tensor::from_vec(av.shape().to_vec(), da)),
                (*b, Tensor::from_vec(bv.shape().to_vec(), db)),
            ]
        }
        Op::MaxChannelHalves { x } => {
            let xv = value(*x);
            let shape = xv.shape();
            let channels = shape[1];
            let rest: usize = shape[2..].iter().product();
            let plane = (channels / 2) * rest;
            let xd = xv.data();
            let gd = gy.data();
            let mut dx = vec![T::zero(); xv.numel()];
            for i in 0..shape[0] {
                let base = i * channels * rest;
                let gbase = i * plane;
                for j in 0..plane {
                    if xd[base + j] >= xd[base + plane + j] {
                        dx[base + j] = gd[gbase + j];
                    } else {
                        dx[base + plane + j] = gd[gbase + j];
                    }
                }
            }
            vec![(*x, Tensor::from_vec(shape.to_vec(), dx))]
        }
        Op::Sigmoid { x } => {
            let yv = &nodes[id].value;
            let dx: Vec<T> = yv
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect();
            vec![(*x, Tensor::from_vec(yv.shape().to_vec(), dx))]
        }
        Op::GlobalAvgPool { x } => {
            let xv = value(*x);
            let xs = xv.shape();
            let hw = xs[2] * xs[3];
            let inv = T::from_f64(1.0 / hw as f64);
            let gd = gy.data();
            let mut dx = vec![T::zero(); xv.numel()];
            for plane in 0..xs[0] * xs[1] {
                let g = gd[plane] * inv;
                for v in &mut dx[plane * hw..(plane + 1) * hw] {
                    *v = g;
                }
            }
            vec![(*x, Tensor::from_vec(xs.to_vec(), dx))]
        }
        Op::Add { a, b } => vec![(*a, gy.clone()), (*b, gy.clone())],
        Op::AddN { xs } => xs.iter().map(|&x| (x, gy.clone())).collect(),
        Op::ScaleConst { x, c } => {
            let c = *c;
            vec![(*x, gy.map(|g| g * c))]
        }
        Op::ScaleChannels { x, s } => {
            let (xv, sv) = (value(*x), value(*s));
            let xs = xv.shape();
            let hw = xs[2] * xs[3];
            let (xd, sd, gd) = (xv.data(), sv.data(), gy.data());
            let mut dx = vec![T::zero(); xd.len()];
            let mut ds = vec![T::zero(); sd.len()];
            for plane in 0..xs[0] * xs[1] {
                let sc = sd[plane];
                let mut acc = 0.0f64;
                for i in plane * hw..(plane + 1) * hw {
                    dx[i] = gd[i] * sc;
                    acc += (gd[i] * xd[i]).as_f64();
                }
                ds[plane] = T::from_f64(acc);
            }
            vec![
                (*x, Tensor::from_vec(xs.to_vec(), dx)),
                (*s, Tensor::from_vec(sv.shape().to_vec(), ds)),
            ]
        }
        Op::SliceChannels { x, from } => {
            let xv = value(*x);
            let xs = xv.shape();
            let rest: usize = xs[2..].iter().product();
            let c = xs[1];
            let cs = gy.shape()[1];
            let gd = gy.data();
            let mut dx = vec![T::zero(); xv.numel()];
            for i in 0..xs[0] {
                dx[(i * c + from) * rest..(i * c + from + cs) * rest]
                    .copy_from_slice(&gd[i * cs * rest..(i + 1) * cs * rest]);
            }
            vec![(*x, Tensor::from_vec(xs.to_vec(), dx))]
        }
        Op::CropSpatial { x, y0, x0 } => {
            let xv = value(*x);
            let xs = xv.shape();
            let (h, w) = (xs[2], xs[3]);
            let (ch, cw) = (gy.shape()[2], gy.shape()[3]);
            let gd = gy.data();
            let mut dx = vec![T::zero(); xv.numel()];
            let mut o = 0usize;
            for plane in 0..xs[0] * xs[1] {
                let base = plane * h * w;
                for yy in 0..ch {
                    let dst = base + (y0 + yy) * w + x0;
                    dx[dst..dst + cw].copy_from_slice(&gd[o..o + cw]);
                    o += cw;
                }
            }
            vec![(*x, Tensor::from_vec(xs.to_vec(), dx))]
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let (n, k) = (probs.shape()[0], probs.shape()[1]);
            let g = gy.item();
            let inv_n = T::from_f64(1.0 / n as f64);
            let mut dl = probs.data().to_vec();
            for (i, &label) in labels.iter().enumerate() {
                dl[i * k + label] -= T::one();
            }
            for v in &mut dl {
                *v = *v * g * inv_n;
            }
            vec![(*logits, Tensor::from_vec(vec![n, k], dl))]
        }
        Op::Sum { x } => {
            let xv = value(*x);
            vec![(*x, Tensor::full(xv.shape().to_vec(), gy.item()))]
        }
    }
}

/// Elementwise sum of any number of same-shape variables, accumulated in
/// f64 per element (used to combine per-head losses).
pub fn add_n<T: Scalar>(vars: &[Variable<T>]) -> Result<Variable<T>, ShapeError> {
    const OP: &str = "add_n";
    let first = vars
        .first()
        .ok_or_else(|| ShapeError::new(OP, "needs at least one operand"))?;
    for v in &vars[1..] {
        first.same_tape(v, OP)?;
    }
    let values: Vec<Tensor<T>> = vars.iter().map(|v| v.value()).collect();
    let shape = values[0].shape().to_vec();
    for v in &values[1..] {
        if v.shape() != shape {
            return Err(ShapeError::new(
                OP,
                format!("shape mismatch: {:?} vs {:?}", shape, v.shape()),
            ));
        }
    }
    let numel = values[0].numel();
    let mut out = Vec::with_capacity(numel);
    for i in 0..numel {
        let mut acc = 0.0f64;
        for v in &values {
            acc += v.data()[i].as_f64();
        }
        out.push(T::from_f64(acc));
    }
    Ok(first.push(
        Tensor::from_vec(shape, out),
        Op::AddN {
            xs: vars.iter().map(|v| v.id).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn leaf32(t: &Tape<f32>, shape: Vec<usize>, data: Vec<f32>, rg: bool) -> Variable<f32> {
        t.leaf(Tensor::from_vec(shape, data), rg)
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect(), false);
        let k = leaf32(&t, vec![1, 1, 1, 1], vec![1.0], false);
        let b = leaf32(&t, vec![1], vec![0.0], false);
        let y = x.conv2d(&k, &b, 1, 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 3, 4, 4], vec![0.0; 48], false);
        let k = leaf32(&t, vec![2, 4, 3, 3], vec![0.0; 72], false);
        let b = leaf32(&t, vec![2], vec![0.0; 2], false);
        let err = x.conv2d(&k, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 1, 4, 4], vec![0.0; 16], false);
        let k = leaf32(&t, vec![1, 1, 3, 3], vec![0.0; 9], false);
        let b = leaf32(&t, vec![1], vec![0.0], false);
        assert!(x.conv2d(&k, &b, 2, 0).is_err());
    }

    #[test]
    fn maxpool2_rejects_odd_extent() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 1, 3, 4], vec![0.0; 12], false);
        assert!(x.maxpool2().is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let t = Tape::new();
        let x = leaf32(&t, vec![2], vec![0.0, 0.0], false);
        assert_eq!(x.sigmoid().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn gap_of_constant_map_is_the_constant() {
        let t = Tape::new();
        let x = t.leaf(Tensor::full(vec![2, 3, 4, 4], 2.5f32), false);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let t = Tape::new();
        let x = leaf32(&t, vec![3, 7], vec![0.0; 21], false);
        let loss = x.softmax_cross_entropy(&[0, 3, 6]).unwrap();
        assert!((loss.value().item() - (7f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_two_class_hand_case() {
        // N=1, K=2, logits=[0,0], label 0 -> gradient [-0.5, 0.5].
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 2], vec![0.0, 0.0], true);
        let loss = x.softmax_cross_entropy(&[0]).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 4], vec![0.0; 4], false);
        assert!(x.softmax_cross_entropy(&[4]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let t = Tape::new();
        let x = leaf32(&t, vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0], true);
        x.sum().backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x + x -> grad(x) = 2.
        let t = Tape::new();
        let x = leaf32(&t, vec![3], vec![1.0, 2.0, 3.0], true);
        let y = x.add(&x).unwrap();
        y.sum().backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn elemwise_max_ties_route_to_first_argument() {
        let t = Tape::new();
        let a = leaf32(&t, vec![2], vec![1.0, 5.0], true);
        let b = leaf32(&t, vec![2], vec![1.0, 2.0], true);
        let y = a.elemwise_max(&b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 5.0]);
        y.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(b.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn max_channel_halves_matches_slice_and_max_composition() {
        // The fused op and the slice/elemwise_max composition must agree
        // bit for bit in both value and gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..2 * 6 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f32> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let t1 = Tape::new();
        let x1 = leaf32(&t1, vec![2, 6, 3, 3], data.clone(), true);
        let fused = x1.max_channel_halves().unwrap();
        let w1 = leaf32(&t1, vec![2, 3], weights.clone(), false);
        fused.scale_channels(&w1).unwrap().sum().backward().unwrap();

        let t2 = Tape::new();
        let x2 = leaf32(&t2, vec![2, 6, 3, 3], data, true);
        let lo = x2.slice_channels(0, 3).unwrap();
        let hi = x2.slice_channels(3, 6).unwrap();
        let composed = lo.elemwise_max(&hi).unwrap();
        let w2 = leaf32(&t2, vec![2, 3], weights, false);
        composed.scale_channels(&w2).unwrap().sum().backward().unwrap();

        assert_eq!(fused.value().shape(), &[2, 3, 3, 3]);
        assert_eq!(fused.value().data(), composed.value().data());
        assert_eq!(x1.grad().unwrap().data(), x2.grad().unwrap().data());
    }

    #[test]
    fn max_channel_halves_ties_route_to_first_half() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 4], vec![2.0, 1.0, 2.0, 3.0], true);
        let y = x.max_channel_halves().unwrap();
        assert_eq!(y.value().shape(), &[1, 2]);
        assert_eq!(y.value().data(), &[2.0, 3.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_channel_halves_rejects_bad_shapes() {
        let t = Tape::new();
        let odd = leaf32(&t, vec![1, 3], vec![0.0; 3], false);
        assert!(odd.max_channel_halves().is_err());
        let rank3 = leaf32(&t, vec![1, 2, 2], vec![0.0; 4], false);
        assert!(rank3.max_channel_halves().is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let t = Tape::new();
        let x = leaf32(&t, vec![2], vec![1.0, 2.0], true);
        assert!(x.backward().is_err());
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = leaf32(&t1, vec![1], vec![1.0], false);
        let b = leaf32(&t2, vec![1], vec![1.0], false);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn slice_and_crop_round_trip_values() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect(), true);
        let hi = x.slice_channels(1, 2).unwrap();
        assert_eq!(hi.value().data(), &[4.0, 5.0, 6.0, 7.0]);
        let q = x.crop_spatial(1, 1, 1, 1).unwrap();
        assert_eq!(q.value().data(), &[3.0, 7.0]);
        q.sum().backward().unwrap();
        assert_eq!(
            x.grad().unwrap().data(),
            &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn add_n_sums_scalars() {
        let t = Tape::new();
        let vars: Vec<_> = (1..=5)
            .map(|i| t.leaf(Tensor::scalar(i as f32), true))
            .collect();
        let s = add_n(&vars).unwrap();
        assert_eq!(s.value().item(), 15.0);
        s.backward().unwrap();
        for v in &vars {
            assert_eq!(v.grad().unwrap().item(), 1.0);
        }
    }

    #[test]
    fn scale_channels_identity_when_scale_is_one() {
        let t = Tape::new();
        let x = leaf32(&t, vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], false);
        let s = leaf32(&t, vec![1, 2], vec![1.0, 1.0], false);
        let y = x.scale_channels(&s).unwrap();
        assert_eq!(y.value(), x.value());
    }
}
