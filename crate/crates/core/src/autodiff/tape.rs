//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The tape owns every value produced during a forward pass. Operations
//! append nodes in topological order (inputs always precede outputs), so
//! the backward sweep is a single reverse walk that visits each node once.
//! Gradients accumulate additively across fan-out.
//!
//! One tape is single-threaded; distinct tapes share nothing.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId {
    tape: u64,
    idx: usize,
}

/// Operator kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// 3x3 convolution, zero padding 1. Inputs: x [N,Cin,H,W], w [Cout,Cin,3,3], b [Cout].
    Conv2d { stride: usize },
    /// Inputs: x [in] or [N,in], w [out,in], b [out].
    Linear,
    Gelu,
    Sigmoid,
    Add,
    Mul,
    NearestUpsample2x,
    Mean,
    Sum,
    Log,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, stride: usize },
    Linear { x: usize, w: usize, b: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Softplus { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { x: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    PowConst { x: usize, p: f64 },
    Log { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Upsample2x { x: usize },
    Mean { x: usize },
    Sum { x: usize },
    ChannelBias { x: usize, v: usize },
    Reshape { x: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: vec![0.0; n],
            needs_grad,
            op,
        });
        ValueId {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, id: ValueId) -> Result<usize> {
        if id.tape != self.id || id.idx >= self.nodes.len() {
            return Err(Error::NotOnTape {
                id: id.idx,
                len: self.nodes.len(),
            });
        }
        Ok(id.idx)
    }

    /// Record a differentiable leaf from a tensor (copies the values).
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Result<ValueId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                detail: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data.to_vec(), false, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[self.check(id).expect("value id from another tape")].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[self.check(id).expect("value id from another tape")].shape
    }

    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.nodes[self.check(id).expect("value id from another tape")].grad
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    /// Dispatch by operator kind. Typed methods below are the primary API;
    /// this entry point exists for uniform driving of the operator set.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[ValueId]) -> Result<ValueId> {
        let arity_err = |want: usize| Error::InvalidArgument {
            what: "forward_op",
            detail: format!("{:?} expects {} inputs, got {}", kind, want, inputs.len()),
        };
        match kind {
            OpKind::Conv2d { stride } => {
                let [x, w, b] = *inputs else { return Err(arity_err(3)) };
                self.conv2d(x, w, b, stride)
            }
            OpKind::Linear => {
                let [x, w, b] = *inputs else { return Err(arity_err(3)) };
                self.linear(x, w, b)
            }
            OpKind::Gelu => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.gelu(x)
            }
            OpKind::Sigmoid => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.sigmoid(x)
            }
            OpKind::Add => {
                let [a, b] = *inputs else { return Err(arity_err(2)) };
                self.add(a, b)
            }
            OpKind::Mul => {
                let [a, b] = *inputs else { return Err(arity_err(2)) };
                self.mul(a, b)
            }
            OpKind::NearestUpsample2x => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.upsample2x(x)
            }
            OpKind::Mean => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.mean(x)
            }
            OpKind::Sum => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.sum(x)
            }
            OpKind::Log => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.log(x)
            }
            OpKind::Clamp { lo, hi } => {
                let [x] = *inputs else { return Err(arity_err(1)) };
                self.clamp(x, lo, hi)
            }
        }
    }

    // ── element-wise and reductions ─────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        Ok(())
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<ValueId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let data: Vec<f64> = self.nodes[ia]
            .data
            .iter()
            .zip(&self.nodes[ib].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(self.nodes[ia].shape.clone(), data, needs, op(ia, ib)))
    }

    fn elementwise1(
        &mut self,
        x: ValueId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<ValueId> {
        let ix = self.check(x)?;
        let data: Vec<f64> = self.nodes[ix].data.iter().map(|&v| f(v)).collect();
        let needs = self.nodes[ix].needs_grad;
        Ok(self.push(self.nodes[ix].shape.clone(), data, needs, op(ix)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise2("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise2("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise2("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise2("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn neg(&mut self, x: ValueId) -> Result<ValueId> {
        self.elementwise1(x, |v| -v, |x| Op::Neg { x })
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.elementwise1(x, |v| v * c, |x| Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.elementwise1(x, |v| v + c, |x| Op::AddScalar { x })
    }

    /// x^p for constant p; defined for x > 0 (and x >= 0 when p >= 1).
    pub fn pow_const(&mut self, x: ValueId, p: f64) -> Result<ValueId> {
        self.elementwise1(x, |v| v.powf(p), |x| Op::PowConst { x, p })
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        self.elementwise1(x, f64::ln, |x| Op::Log { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.elementwise1(x, sigmoid, |x| Op::Sigmoid { x })
    }

    /// ln(1 + e^x), evaluated in overflow-safe form; gradient is sigmoid(x).
    pub fn softplus(&mut self, x: ValueId) -> Result<ValueId> {
        self.elementwise1(x, softplus, |x| Op::Softplus { x })
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.elementwise1(x, gelu, |x| Op::Gelu { x })
    }

    /// Pass-through gradient inside [lo, hi], zero outside.
    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument {
                what: "clamp",
                detail: format!("lo {} must be < hi {}", lo, hi),
            });
        }
        self.elementwise1(x, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let ix = self.check(x)?;
        let n = self.nodes[ix].data.len();
        if n == 0 {
            return Err(Error::InvalidArgument {
                what: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s: f64 = self.nodes[ix].data.iter().sum();
        let needs = self.nodes[ix].needs_grad;
        Ok(self.push(vec![1], vec![s / n as f64], needs, Op::Mean { x: ix }))
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let ix = self.check(x)?;
        let s: f64 = self.nodes[ix].data.iter().sum();
        let needs = self.nodes[ix].needs_grad;
        Ok(self.push(vec![1], vec![s], needs, Op::Sum { x: ix }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let ix = self.check(x)?;
        if shape.iter().product::<usize>() != self.nodes[ix].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[ix].shape, shape),
            });
        }
        let data = self.nodes[ix].data.clone();
        let needs = self.nodes[ix].needs_grad;
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { x: ix }))
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// 3x3 convolution with zero padding 1 over [N,Cin,H,W].
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId, stride: usize) -> Result<ValueId> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument {
                what: "conv2d",
                detail: format!("stride must be 1 or 2, got {}", stride),
            });
        }
        let xs = self.nodes[ix].shape.clone();
        let ws = self.nodes[iw].shape.clone();
        let bs = self.nodes[ib].shape.clone();
        let shape_err = |detail: String| Error::ShapeMismatch { op: "conv2d", detail };
        let [n, cin, h, wdim] = xs[..] else {
            return Err(shape_err(format!("input must be [N,Cin,H,W], got {:?}", xs)));
        };
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(shape_err(format!("kernel must be [Cout,Cin,3,3], got {:?}", ws)));
        };
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(shape_err(format!(
                "kernel {:?} incompatible with input {:?}",
                ws, xs
            )));
        }
        if bs != [cout] {
            return Err(shape_err(format!("bias {:?} vs Cout {}", bs, cout)));
        }
        let ho = (h - 1) / stride + 1;
        let wo = (wdim - 1) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        {
            let xv = &self.nodes[ix].data;
            let wv = &self.nodes[iw].data;
            let bv = &self.nodes[ib].data;
            for ni in 0..n {
                for co in 0..cout {
                    let bias = bv[co];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = bias;
                            for ci in 0..cin {
                                let xbase = ((ni * cin + ci) * h) * wdim;
                                let wbase = ((co * cin + ci) * 3) * 3;
                                for kr in 0..3usize {
                                    let hi = (oh * stride + kr) as isize - 1;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    let row = xbase + hi as usize * wdim;
                                    for kc in 0..3usize {
                                        let wi = (ow * stride + kc) as isize - 1;
                                        if wi < 0 || wi >= wdim as isize {
                                            continue;
                                        }
                                        acc += xv[row + wi as usize] * wv[wbase + kr * 3 + kc];
                                    }
                                }
                            }
                            out[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                        }
                    }
                }
            }
        }
        let needs =
            self.nodes[ix].needs_grad || self.nodes[iw].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(
            vec![n, cout, ho, wo],
            out,
            needs,
            Op::Conv2d { x: ix, w: iw, b: ib, stride },
        ))
    }

    /// Affine map: x [in] or [N,in], w [out,in], b [out].
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let xs = self.nodes[ix].shape.clone();
        let ws = self.nodes[iw].shape.clone();
        let bs = self.nodes[ib].shape.clone();
        let shape_err = |detail: String| Error::ShapeMismatch { op: "linear", detail };
        let [out_f, in_f] = ws[..] else {
            return Err(shape_err(format!("weight must be [out,in], got {:?}", ws)));
        };
        if bs != [out_f] {
            return Err(shape_err(format!("bias {:?} vs out {}", bs, out_f)));
        }
        let (batch, flat_in, out_shape) = match xs[..] {
            [i] => (1, i, vec![out_f]),
            [n, i] => (n, i, vec![n, out_f]),
            _ => return Err(shape_err(format!("input must be 1-d or 2-d, got {:?}", xs))),
        };
        if flat_in != in_f {
            return Err(shape_err(format!("input {:?} vs weight {:?}", xs, ws)));
        }
        let mut out = vec![0.0; batch * out_f];
        {
            let xv = &self.nodes[ix].data;
            let wv = &self.nodes[iw].data;
            let bv = &self.nodes[ib].data;
            for nb in 0..batch {
                for o in 0..out_f {
                    let mut acc = bv[o];
                    let wrow = o * in_f;
                    let xrow = nb * in_f;
                    for i in 0..in_f {
                        acc += wv[wrow + i] * xv[xrow + i];
                    }
                    out[nb * out_f + o] = acc;
                }
            }
        }
        let needs =
            self.nodes[ix].needs_grad || self.nodes[iw].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(out_shape, out, needs, Op::Linear { x: ix, w: iw, b: ib }))
    }

    /// Nearest-neighbor 2x upsample over [N,C,H,W].
    pub fn upsample2x(&mut self, x: ValueId) -> Result<ValueId> {
        let ix = self.check(x)?;
        let xs = self.nodes[ix].shape.clone();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::ShapeMismatch {
                op: "nearest-upsample-2x",
                detail: format!("input must be [N,C,H,W], got {:?}", xs),
            });
        };
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        {
            let xv = &self.nodes[ix].data;
            for nc in 0..n * c {
                let src = nc * h * w;
                let dst = nc * h2 * w2;
                for r in 0..h {
                    for cc in 0..w {
                        let v = xv[src + r * w + cc];
                        let base = dst + 2 * r * w2 + 2 * cc;
                        out[base] = v;
                        out[base + 1] = v;
                        out[base + w2] = v;
                        out[base + w2 + 1] = v;
                    }
                }
            }
        }
        let needs = self.nodes[ix].needs_grad;
        Ok(self.push(vec![n, c, h2, w2], out, needs, Op::Upsample2x { x: ix }))
    }

    /// Broadcast-add a per-channel vector [C] over [N,C,H,W].
    pub fn channel_bias(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        let (ix, iv) = (self.check(x)?, self.check(v)?);
        let xs = self.nodes[ix].shape.clone();
        let vs = self.nodes[iv].shape.clone();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                detail: format!("input must be [N,C,H,W], got {:?}", xs),
            });
        };
        if vs != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                detail: format!("vector {:?} vs channels {}", vs, c),
            });
        }
        let mut out = self.nodes[ix].data.clone();
        {
            let vv = &self.nodes[iv].data;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let add = vv[ci];
                    for p in &mut out[base..base + h * w] {
                        *p += add;
                    }
                }
            }
        }
        let needs = self.nodes[ix].needs_grad || self.nodes[iv].needs_grad;
        Ok(self.push(xs, out, needs, Op::ChannelBias { x: ix, v: iv }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagate d(loss)/d(node) to every recorded node. The loss must be a
    /// scalar produced by this tape. Repeated calls re-run from zeroed grads.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].data.len() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.nodes[il].shape.clone(),
            });
        }
        if !self.nodes[il].data[0].is_finite() {
            return Err(Error::InvalidArgument {
                what: "backward",
                detail: format!("loss value {} is not finite", self.nodes[il].data[0]),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[il].grad[0] = 1.0;

        for i in (0..=il).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.axpy(a, 1.0, &go);
                    self.axpy(b, 1.0, &go);
                    self.nodes[i].grad = go;
                }
                Op::Sub { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.axpy(a, 1.0, &go);
                    self.axpy(b, -1.0, &go);
                    self.nodes[i].grad = go;
                }
                Op::Mul { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        let (av, bv) = (self.nodes[a].data[k], self.nodes[b].data[k]);
                        self.nodes[a].grad[k] += go[k] * bv;
                        self.nodes[b].grad[k] += go[k] * av;
                    }
                    self.nodes[i].grad = go;
                }
                Op::Div { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        let (av, bv) = (self.nodes[a].data[k], self.nodes[b].data[k]);
                        self.nodes[a].grad[k] += go[k] / bv;
                        self.nodes[b].grad[k] -= go[k] * av / (bv * bv);
                    }
                    self.nodes[i].grad = go;
                }
                Op::Neg { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.axpy(x, -1.0, &go);
                    self.nodes[i].grad = go;
                }
                Op::Scale { x, c } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.axpy(x, c, &go);
                    self.nodes[i].grad = go;
                }
                Op::AddScalar { x } | Op::Reshape { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.axpy(x, 1.0, &go);
                    self.nodes[i].grad = go;
                }
                Op::PowConst { x, p } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    if p != 0.0 {
                        for k in 0..go.len() {
                            let xv = self.nodes[x].data[k];
                            self.nodes[x].grad[k] += go[k] * p * xv.powf(p - 1.0);
                        }
                    }
                    self.nodes[i].grad = go;
                }
                Op::Log { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        self.nodes[x].grad[k] += go[k] / self.nodes[x].data[k];
                    }
                    self.nodes[i].grad = go;
                }
                Op::Sigmoid { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        let s = self.nodes[i].data[k];
                        self.nodes[x].grad[k] += go[k] * s * (1.0 - s);
                    }
                    self.nodes[i].grad = go;
                }
                Op::Softplus { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        self.nodes[x].grad[k] += go[k] * sigmoid(self.nodes[x].data[k]);
                    }
                    self.nodes[i].grad = go;
                }
                Op::Gelu { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        self.nodes[x].grad[k] += go[k] * gelu_grad(self.nodes[x].data[k]);
                    }
                    self.nodes[i].grad = go;
                }
                Op::Clamp { x, lo, hi } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    for k in 0..go.len() {
                        let xv = self.nodes[x].data[k];
                        if xv >= lo && xv <= hi {
                            self.nodes[x].grad[k] += go[k];
                        }
                    }
                    self.nodes[i].grad = go;
                }
                Op::Mean { x } => {
                    let g = self.nodes[i].grad[0] / self.nodes[x].data.len() as f64;
                    for gx in &mut self.nodes[x].grad {
                        *gx += g;
                    }
                }
                Op::Sum { x } => {
                    let g = self.nodes[i].grad[0];
                    for gx in &mut self.nodes[x].grad {
                        *gx += g;
                    }
                }
                Op::Upsample2x { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    let xs = &self.nodes[x].shape;
                    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let (h2, w2) = (2 * h, 2 * w);
                    for b in 0..nc {
                        let src = b * h2 * w2;
                        let dst = b * h * w;
                        for r in 0..h {
                            for cc in 0..w {
                                let base = src + 2 * r * w2 + 2 * cc;
                                self.nodes[x].grad[dst + r * w + cc] +=
                                    go[base] + go[base + 1] + go[base + w2] + go[base + w2 + 1];
                            }
                        }
                    }
                    self.nodes[i].grad = go;
                }
                Op::ChannelBias { x, v } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.axpy(x, 1.0, &go);
                    let xs = &self.nodes[x].shape;
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let s: f64 = go[base..base + hw].iter().sum();
                            self.nodes[v].grad[ci] += s;
                        }
                    }
                    self.nodes[i].grad = go;
                }
                Op::Conv2d { x, w, b, stride } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    self.conv2d_backward(i, x, w, b, stride, &go);
                    self.nodes[i].grad = go;
                }
                Op::Linear { x, w, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad);
                    let ws = self.nodes[w].shape.clone();
                    let (out_f, in_f) = (ws[0], ws[1]);
                    let batch = self.nodes[x].data.len() / in_f;
                    for nb in 0..batch {
                        for o in 0..out_f {
                            let g = go[nb * out_f + o];
                            if g == 0.0 {
                                continue;
                            }
                            self.nodes[b].grad[o] += g;
                            for ii in 0..in_f {
                                let xv = self.nodes[x].data[nb * in_f + ii];
                                let wv = self.nodes[w].data[o * in_f + ii];
                                self.nodes[x].grad[nb * in_f + ii] += g * wv;
                                self.nodes[w].grad[o * in_f + ii] += g * xv;
                            }
                        }
                    }
                    self.nodes[i].grad = go;
                }
            }
        }
        Ok(())
    }

    fn axpy(&mut self, dst: usize, scale: f64, g: &[f64]) {
        for (d, &s) in self.nodes[dst].grad.iter_mut().zip(g) {
            *d += scale * s;
        }
    }

    fn conv2d_backward(&mut self, out: usize, x: usize, w: usize, b: usize, stride: usize, go: &[f64]) {
        let os = self.nodes[out].shape.clone();
        let xs = self.nodes[x].shape.clone();
        let [n, cout, ho, wo] = os[..] else { unreachable!() };
        let [_, cin, h, wdim] = xs[..] else { unreachable!() };
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = go[((ni * cout + co) * ho + oh) * wo + ow];
                        if g == 0.0 {
                            continue;
                        }
                        self.nodes[b].grad[co] += g;
                        for ci in 0..cin {
                            let xbase = ((ni * cin + ci) * h) * wdim;
                            let wbase = ((co * cin + ci) * 3) * 3;
                            for kr in 0..3usize {
                                let hi = (oh * stride + kr) as isize - 1;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                let row = xbase + hi as usize * wdim;
                                for kc in 0..3usize {
                                    let wi = (ow * stride + kc) as isize - 1;
                                    if wi < 0 || wi >= wdim as isize {
                                        continue;
                                    }
                                    let xi = row + wi as usize;
                                    let wi_idx = wbase + kr * 3 + kc;
                                    let xv = self.nodes[x].data[xi];
                                    let wv = self.nodes[w].data[wi_idx];
                                    self.nodes[x].grad[xi] += g * wv;
                                    self.nodes[w].grad[wi_idx] += g * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// True when every stored value and gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.data.iter().all(|v| v.is_finite()) && n.grad.iter().all(|v| v.is_finite()))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_from(shape: &[usize], data: &[f64]) -> (Tape, ValueId) {
        let mut tape = Tape::new();
        let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad();
        let id = tape.leaf(&t);
        (tape, id)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let (mut tape, x) = leaf_from(&[1], &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn add_zero_is_identity() {
        let (mut tape, x) = leaf_from(&[4], &[1.0, -2.0, 3.5, 0.0]);
        let z = tape.constant(&[4], &[0.0; 4]).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_with_zero_kernel_annihilates() {
        let (mut tape, x) = leaf_from(&[1, 1, 4, 4], &[1.0; 16]);
        let w = tape.constant(&[2, 1, 3, 3], &[0.0; 18]).unwrap();
        let b = tape.constant(&[2], &[0.0; 2]).unwrap();
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_stride2_halves_spatial_dims() {
        let (mut tape, x) = leaf_from(&[1, 1, 6, 6], &[1.0; 36]);
        let w = tape.constant(&[1, 1, 3, 3], &[0.0; 9]).unwrap();
        let b = tape.constant(&[1], &[0.0]).unwrap();
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_shape_mismatch_names_operator() {
        let (mut tape, x) = leaf_from(&[1, 2, 4, 4], &[1.0; 32]);
        let w = tape.constant(&[1, 3, 3, 3], &[0.0; 27]).unwrap();
        let b = tape.constant(&[1], &[0.0]).unwrap();
        let err = tape.conv2d(x, w, b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "{}", msg);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut tape, x) = leaf_from(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_mean_square_at_ones() {
        let n = 8;
        let (mut tape, x) = leaf_from(&[n], &vec![1.0; n]);
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        let loss = tape.scale(m, 0.5).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(x) {
            assert!((g - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn fan_out_matches_explicit_double() {
        // y = x + x and y = 2x must produce the same gradient.
        let (mut tape, x) = leaf_from(&[3], &[1.0, -2.0, 0.5]);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let g_fanout = tape.grad(x).to_vec();

        let (mut tape2, x2) = leaf_from(&[3], &[1.0, -2.0, 0.5]);
        let y2 = tape2.scale(x2, 2.0).unwrap();
        let loss2 = tape2.sum(y2).unwrap();
        tape2.backward(loss2).unwrap();
        assert_eq!(g_fanout, tape2.grad(x2));
    }

    #[test]
    fn clamp_gradient_is_gated() {
        let (mut tape, x) = leaf_from(&[3], &[-1.0, 0.5, 2.0]);
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (mut tape, x) = leaf_from(&[2], &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(Error::LossNotScalar { .. })
        ));
    }

    #[test]
    fn backward_rejects_foreign_id() {
        let (_, foreign) = leaf_from(&[1], &[1.0]);
        let mut tape = Tape::new();
        let _ = tape.scalar(0.0);
        assert!(matches!(
            tape.backward(foreign),
            Err(Error::NotOnTape { .. })
        ));
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let (mut tape, x) = leaf_from(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        assert_eq!(tape.value(y)[0..4], [1.0, 1.0, 2.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[4.0; 4]);
    }

    #[test]
    fn dispatcher_matches_typed_ops() {
        let (mut tape, x) = leaf_from(&[2], &[0.0, 1.0]);
        let a = tape.forward_op(OpKind::Sigmoid, &[x]).unwrap();
        let b = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.forward_op(OpKind::Sigmoid, &[x, x]).is_err());
    }

    #[test]
    fn identical_tapes_are_bit_identical() {
        let run = || {
            let (mut tape, x) = leaf_from(&[4], &[0.3, -0.7, 1.1, 0.0]);
            let g = tape.gelu(x).unwrap();
            let s = tape.sigmoid(g).unwrap();
            let loss = tape.mean(s).unwrap();
            tape.backward(loss).unwrap();
            (tape.scalar_value(loss).to_bits(), tape.grad(x).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
