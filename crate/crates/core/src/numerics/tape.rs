//! Wengert-list reverse-mode differentiation over dense `f64` tensors.
//!
//! Every primitive appends one node holding its forward value. Node ids are
//! assigned in creation order, which is already a topological order, so the
//! backward sweep is a single reverse pass over the node list. Nodes whose
//! inputs never require a gradient are skipped entirely, which is what makes
//! frozen encoders cheap during interpreter training.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial axis for axial attention over `[C×H×W]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Tokens run along H; one attention problem per column.
    Height,
    /// Tokens run along W; one attention problem per row.
    Width,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    BatchMatMul(Var, Var),
    RepeatChannels {
        x: Var,
        times: usize,
    },
    SoftmaxRows {
        x: Var,
        scale: f64,
    },
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    RowStd(Var),
    L2Norm(Var),
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        beta: f64,
        norm: f64,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Axial {
        q: Var,
        k: Var,
        v: Var,
        axis: Axis,
        window: usize,
        scale: f64,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    bound: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const STD_EPS: f64 = 1e-12;
const LN_MIN_VAR: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Bind a parameter. Frozen parameters become constants and never
    /// receive a gradient. Binding the same name twice returns the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.tensor.clone(), !p.frozen);
        self.bound.insert(p.name.clone(), v);
        if !p.frozen {
            self.bindings.push((p.name.clone(), v));
        }
        v
    }

    /// Bind a parameter as a constant regardless of its frozen flag.
    pub fn param_detached(&mut self, p: &Parameter) -> Var {
        self.constant(p.tensor.clone())
    }

    /// Copy of `v`'s value cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Trainable parameters bound on this tape, in binding order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum. The subgradient goes to `a` on ties.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "maximum",
            |x, y| if y > x { y } else { x },
            Op::Max(a, b),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `x[C×…] + b[C]`, broadcasting `b` over the trailing dims.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_op(x, b, false)
    }

    /// `x[C×…] ⊙ g[C]`, broadcasting `g` over the trailing dims.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        self.channel_op(x, g, true)
    }

    fn channel_op(&mut self, x: Var, b: Var, mul: bool) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx
            .shape()
            .first()
            .ok_or_else(|| Error::shape("channel_op", "scalar input"))?;
        if tb.shape() != [c] {
            return Err(Error::shape(
                "channel_op",
                format!("{:?} with {:?}", tx.shape(), tb.shape()),
            ));
        }
        let inner = tx.numel() / c.max(1);
        let mut data = tx.data().to_vec();
        for ch in 0..c {
            let bv = tb.data()[ch];
            for v in &mut data[ch * inner..(ch + 1) * inner] {
                if mul {
                    *v *= bv;
                } else {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        let op = if mul {
            Op::MulChannel(x, b)
        } else {
            Op::AddChannel(x, b)
        };
        Ok(self.push(out, op, rg))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice_rows", self.value(x))?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], data),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// `a[B×m×k] · b[B×k×n]` per batch entry.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = rank3("batch_matmul", self.value(a))?;
        let (bb, k2, n) = rank3("batch_matmul", self.value(b))?;
        if ba != bb || k != k2 {
            return Err(Error::shape(
                "batch_matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            kernels::matmul_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![ba, m, n], out),
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Repeat every leading-dim slice `times` times: output slice `j` is input slice `j / times`.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx
            .shape()
            .first()
            .ok_or_else(|| Error::shape("repeat_channels", "scalar"))?;
        if times == 0 {
            return Err(Error::shape("repeat_channels", "times must be ≥ 1"));
        }
        let inner = tx.numel() / c.max(1);
        let mut data = Vec::with_capacity(tx.numel() * times);
        for ch in 0..c {
            for _ in 0..times {
                data.extend_from_slice(&tx.data()[ch * inner..(ch + 1) * inner]);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = c * times;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::RepeatChannels { x, times },
            rg,
        ))
    }

    // ---- normalisation -------------------------------------------------

    /// Row-wise `softmax(x / scale)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::NumericDomain {
                op: "softmax_rows",
                detail: format!("scale {scale}"),
            });
        }
        let (r, c) = rank2("softmax_rows", self.value(x))?;
        let src = self.value(x).data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(
                &src[i * c..(i + 1) * c],
                scale,
                &mut out[i * c..(i + 1) * c],
            );
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SoftmaxRows { x, scale },
            rg,
        ))
    }

    /// Standardise each row of a rank-2 tensor to zero mean and unit
    /// (population) variance; `eps` is added to the variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = rank2("layer_norm_rows", self.value(x))?;
        if c < 2 {
            return Err(Error::shape(
                "layer_norm_rows",
                "rows need at least 2 entries",
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).max(LN_MIN_VAR).sqrt();
            inv_std[i] = is;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNormRows { x, inv_std },
            rg,
        ))
    }

    /// Scale each row to unit L2 norm (zero rows stay zero).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("l2_normalize_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = kernels::dot(row, row).sqrt();
            norms[i] = n;
            if n > 0.0 {
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::L2NormalizeRows { x, norms },
            rg,
        ))
    }

    // ---- spatial -------------------------------------------------------

    /// 2-D convolution of `x[Cin×H×W]` with `w[Cout×Cin×k×k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = rank3("conv2d", self.value(x))?;
        let (cout, cin2, k, k2) = match self.value(w).shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight rank 4 expected, got {s:?}"),
                ))
            }
        };
        if cin != cin2 || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "kernel larger than padded input"))?;
        let p = geom.positions();
        let mut out = vec![0.0; cout * p];
        if k == 1 && stride == 1 && pad == 0 {
            kernels::matmul_acc(
                self.value(w).data(),
                self.value(x).data(),
                cout,
                cin,
                p,
                &mut out,
            );
        } else {
            let cols = kernels::im2col(self.value(x).data(), &geom);
            kernels::matmul_acc(self.value(w).data(), &cols, cout, geom.patch(), p, &mut out);
        }
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor::from_parts(vec![cout, geom.ho, geom.wo], out);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, rg))
    }

    /// Non-overlapping max pooling with kernel = stride = `k`.
    /// Ties resolve to the first element in row-major scan order.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = rank3("max_pool", self.value(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "max_pool",
                format!("{h}×{w} not divisible by {k}"),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = ch * h * w + oh * k * w + ow * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = ch * h * w + (oh * k + di) * w + ow * k + dj;
                            if src[idx] > best {
                                best = src[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = ch * ho * wo + oh * wo + ow;
                    out[o] = src[bi];
                    argmax[o] = bi;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Single-head scaled dot-product attention along one spatial axis of
    /// `[C×H×W]` maps. Tokens are the C-vectors at each position; position
    /// `i` attends to `j` only when both fall in the same block of `window`
    /// consecutive positions (the last block may be short, which is the same
    /// as padding and masking). `window ≥ axis length` gives global attention.
    pub fn axial_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        axis: Axis,
        window: usize,
    ) -> Result<Var> {
        let (c, h, w) = rank3("axial_attention", self.value(q))?;
        same_shape("axial_attention", self.value(q), self.value(k))?;
        same_shape("axial_attention", self.value(q), self.value(v))?;
        if window == 0 {
            return Err(Error::shape("axial_attention", "window must be ≥ 1"));
        }
        let scale = 1.0 / (c as f64).sqrt();
        let lay = AxialLayout::new(c, h, w, axis);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let l = lay.len;
        let mut weights = vec![0.0; lay.lines * l * l];
        let mut out = vec![0.0; c * h * w];
        let mut logits = vec![0.0; l];
        for line in 0..lay.lines {
            let a = &mut weights[line * l * l..(line + 1) * l * l];
            for i in 0..l {
                let (lo, hi) = block(i, window, l);
                for j in lo..hi {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += qd[lay.at(line, i, ch)] * kd[lay.at(line, j, ch)];
                    }
                    logits[j] = s;
                }
                softmax_into(&logits[lo..hi], 1.0 / scale, &mut a[i * l + lo..i * l + hi]);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for j in lo..hi {
                        acc += a[i * l + j] * vd[lay.at(line, j, ch)];
                    }
                    out[lay.at(line, i, ch)] = acc;
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let t = Tensor::from_parts(vec![c, h, w], out);
        Ok(self.push(
            t,
            Op::Axial {
                q,
                k,
                v,
                axis,
                window,
                scale,
                weights,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an [`Tape::axial_attention`] node, laid
    /// out as `[lines × len × len]` (zero outside each query's window).
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Axial { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of each row of a rank-2 tensor.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("row_mean", self.value(x))?;
        let src = self.value(x).data();
        let out = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r], out), Op::RowMean(x), rg))
    }

    /// Population standard deviation of each row, `sqrt(var + 1e-12)`.
    pub fn row_std(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("row_std", self.value(x))?;
        let src = self.value(x).data();
        let out = (0..r)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let m = row.iter().sum::<f64>() / c as f64;
                (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64 + STD_EPS).sqrt()
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r], out), Op::RowStd(x), rg))
    }

    /// Euclidean norm of all entries. Subgradient 0 at the origin.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let n = kernels::dot(d, d).sqrt();
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::L2Norm(x), rg)
    }

    // ---- fused losses --------------------------------------------------

    /// Binary focal loss summed over entries and divided by `norm`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::shape(
                "focal_loss",
                format!("{} logits, {} targets", z.len(), targets.len()),
            ));
        }
        let mut total = 0.0;
        for (&zi, &t) in z.iter().zip(&targets) {
            let (at, u) = if t > 0.5 {
                (alpha, zi)
            } else {
                (1.0 - alpha, -zi)
            };
            let one_minus_pt = kernels::sigmoid(-u);
            total += -at * one_minus_pt.powf(gamma) * kernels::log_sigmoid(u);
        }
        let rg = self.rg(logits);
        let op = Op::Focal {
            logits,
            targets,
            alpha,
            gamma,
            norm,
        };
        Ok(self.push(Tensor::scalar(total / norm), op, rg))
    }

    /// Weighted smooth-L1 between `pred` and a constant target, divided by `norm`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        beta: f64,
        norm: f64,
    ) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.len() != weight.len() {
            return Err(Error::shape(
                "smooth_l1",
                "pred/target/weight lengths differ",
            ));
        }
        let mut total = 0.0;
        for i in 0..p.len() {
            if weight[i] != 0.0 {
                total += weight[i] * smooth_l1_value(p[i] - target[i], beta);
            }
        }
        let rg = self.rg(pred);
        let op = Op::SmoothL1 {
            pred,
            target,
            weight,
            beta,
            norm,
        };
        Ok(self.push(Tensor::scalar(total / norm), op, rg))
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() || z.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                "logits/labels lengths differ",
            ));
        }
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(&labels)
            .map(|(&zi, &y)| zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceLogits { logits, labels },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(idx);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop_node(&self, node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.numel();
                f(lo[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| kernels::add_assign(d, g));
                acc(*b, &mut |d| kernels::add_assign(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| kernels::add_assign(d, g));
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i] * vb[i]));
                acc(*b, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i] * va[i]));
            }
            Op::Max(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    (0..d.len()).for_each(|i| {
                        if vb[i] <= va[i] {
                            d[i] += g[i]
                        }
                    })
                });
                acc(*b, &mut |d| {
                    (0..d.len()).for_each(|i| {
                        if vb[i] > va[i] {
                            d[i] += g[i]
                        }
                    })
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi)
            }),
            Op::AddScalar(x) => acc(*x, &mut |d| kernels::add_assign(d, g)),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|i| {
                        if vx[i] > 0.0 {
                            d[i] += g[i]
                        }
                    })
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|i| d[i] += g[i] * (1.0 - y[i] * y[i]))
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|i| d[i] += g[i] * y[i] * (1.0 - y[i]))
                });
            }
            Op::AddChannel(x, b) | Op::MulChannel(x, b) => {
                let is_mul = matches!(node.op, Op::MulChannel(..));
                let c = nodes[b.0].value.numel();
                let inner = g.len() / c.max(1);
                let (vx, vb) = (val(*x), val(*b));
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        let f = if is_mul { vb[ch] } else { 1.0 };
                        for i in ch * inner..(ch + 1) * inner {
                            d[i] += f * g[i];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for ch in 0..c {
                        let r = ch * inner..(ch + 1) * inner;
                        d[ch] += if is_mul {
                            kernels::dot(&g[r.clone()], &vx[r])
                        } else {
                            g[r].iter().sum()
                        };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| kernels::matmul_a_bt_acc(g, vb, m, n, k, d));
                acc(*b, &mut |d| kernels::matmul_at_b_acc(va, g, m, k, n, d));
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| kernels::add_assign(d, g)),
            Op::SliceRows { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |d| {
                    kernels::add_assign(&mut d[start * c..start * c + g.len()], g)
                });
            }
            Op::BatchMatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = nodes[b.0].value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..bn {
                        kernels::matmul_a_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bn {
                        kernels::matmul_at_b_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut d[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::RepeatChannels { x, times } => {
                let c = nodes[x.0].value.shape()[0];
                let inner = nodes[x.0].value.numel() / c.max(1);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for t in 0..*times {
                            let src = &g[(ch * times + t) * inner..(ch * times + t + 1) * inner];
                            kernels::add_assign(&mut d[ch * inner..(ch + 1) * inner], src);
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, scale } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = kernels::dot(gr, yr);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - s) / scale;
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let xhat = node.value.data();
                let c = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        let xr = &xhat[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = kernels::dot(gr, xr) / c as f64;
                        for j in 0..c {
                            dr[j] += inv_std[r] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = kernels::dot(gr, yr);
                        for j in 0..c {
                            dr[j] += (gr[j] - yr[j] * s) / norms[r];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let cout = nodes[w.0].value.shape()[0];
                let p = geom.positions();
                let pointwise = geom.k == 1 && geom.stride == 1 && geom.pad == 0;
                let (vx, vw) = (val(*x), val(*w));
                let need_x = nodes[x.0].requires_grad;
                if nodes[w.0].requires_grad {
                    let cols_owned;
                    let cols: &[f64] = if pointwise {
                        vx
                    } else {
                        cols_owned = kernels::im2col(vx, geom);
                        &cols_owned
                    };
                    acc(*w, &mut |d| {
                        kernels::matmul_a_bt_acc(g, cols, cout, p, geom.patch(), d)
                    });
                }
                if need_x {
                    acc(*x, &mut |d| {
                        if pointwise {
                            kernels::matmul_at_b_acc(vw, g, cout, geom.cin, p, d);
                        } else {
                            let mut dcols = vec![0.0; geom.patch() * p];
                            kernels::matmul_at_b_acc(vw, g, cout, geom.patch(), p, &mut dcols);
                            kernels::col2im_acc(&dcols, geom, d);
                        }
                    });
                }
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |d| {
                    argmax.iter().zip(g).for_each(|(&i, gi)| d[i] += gi)
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::RowMean(x) => {
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        dr.iter_mut().for_each(|v| *v += g[r] / c as f64);
                    }
                });
            }
            Op::RowStd(x) => {
                let vx = val(*x);
                let c = nodes[x.0].value.shape()[1];
                let sd = node.value.data();
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        let row = &vx[r * c..(r + 1) * c];
                        let m = row.iter().sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] += g[r] * (row[j] - m) / (c as f64 * sd[r]);
                        }
                    }
                });
            }
            Op::L2Norm(x) => {
                let n = node.value.item();
                let vx = val(*x);
                if n > 0.0 {
                    acc(*x, &mut |d| {
                        (0..d.len()).for_each(|i| d[i] += g[0] * vx[i] / n)
                    });
                }
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                norm,
            } => {
                let z = val(*logits);
                acc(*logits, &mut |d| {
                    for i in 0..d.len() {
                        let (at, s) = if targets[i] > 0.5 {
                            (*alpha, 1.0)
                        } else {
                            (1.0 - alpha, -1.0)
                        };
                        let u = s * z[i];
                        let pt = kernels::sigmoid(u);
                        let q = kernels::sigmoid(-u);
                        let dz = at
                            * s
                            * (gamma * q.powf(*gamma) * pt * kernels::log_sigmoid(u)
                                - q.powf(gamma + 1.0));
                        d[i] += g[0] * dz / norm;
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                weight,
                beta,
                norm,
            } => {
                let p = val(*pred);
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        if weight[i] != 0.0 {
                            let diff = p[i] - target[i];
                            let dd = if diff.abs() < *beta {
                                diff / beta
                            } else {
                                diff.signum()
                            };
                            d[i] += g[0] * weight[i] * dd / norm;
                        }
                    }
                });
            }
            Op::BceLogits { logits, labels } => {
                let z = val(*logits);
                let n = z.len() as f64;
                acc(*logits, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[0] * (kernels::sigmoid(z[i]) - labels[i]) / n;
                    }
                });
            }
            Op::Axial {
                q,
                k,
                v,
                axis,
                window,
                scale,
                weights,
            } => {
                let (c, h, w) = (
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                );
                let lay = AxialLayout::new(c, h, w, *axis);
                let l = lay.len;
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                // dlogits[line][i][j], computed once and shared by the q and k adjoints.
                let mut dlogits = vec![0.0; lay.lines * l * l];
                let mut da = vec![0.0; l];
                for line in 0..lay.lines {
                    let a = &weights[line * l * l..(line + 1) * l * l];
                    let dl = &mut dlogits[line * l * l..(line + 1) * l * l];
                    for i in 0..l {
                        let (lo, hi) = block(i, *window, l);
                        let mut s = 0.0;
                        for j in lo..hi {
                            let mut t = 0.0;
                            for ch in 0..c {
                                t += g[lay.at(line, i, ch)] * vd[lay.at(line, j, ch)];
                            }
                            da[j] = t;
                            s += a[i * l + j] * t;
                        }
                        for j in lo..hi {
                            dl[i * l + j] = a[i * l + j] * (da[j] - s);
                        }
                    }
                }
                acc(*v, &mut |d| {
                    for line in 0..lay.lines {
                        let a = &weights[line * l * l..(line + 1) * l * l];
                        for i in 0..l {
                            let (lo, hi) = block(i, *window, l);
                            for j in lo..hi {
                                let aij = a[i * l + j];
                                for ch in 0..c {
                                    d[lay.at(line, j, ch)] += aij * g[lay.at(line, i, ch)];
                                }
                            }
                        }
                    }
                });
                acc(*q, &mut |d| {
                    for line in 0..lay.lines {
                        let dl = &dlogits[line * l * l..(line + 1) * l * l];
                        for i in 0..l {
                            let (lo, hi) = block(i, *window, l);
                            for j in lo..hi {
                                let f = scale * dl[i * l + j];
                                for ch in 0..c {
                                    d[lay.at(line, i, ch)] += f * kd[lay.at(line, j, ch)];
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |d| {
                    for line in 0..lay.lines {
                        let dl = &dlogits[line * l * l..(line + 1) * l * l];
                        for i in 0..l {
                            let (lo, hi) = block(i, *window, l);
                            for j in lo..hi {
                                let f = scale * dl[i * l + j];
                                for ch in 0..c {
                                    d[lay.at(line, j, ch)] += f * qd[lay.at(line, i, ch)];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

/// `out = softmax(x / scale)`, stabilised by subtracting the row max.
fn softmax_into(x: &[f64], scale: f64, out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) / scale).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn block(i: usize, window: usize, len: usize) -> (usize, usize) {
    let lo = (i / window) * window;
    (lo, (lo + window).min(len))
}

/// Index arithmetic for lines of tokens through a `[C×H×W]` buffer.
struct AxialLayout {
    hw: usize,
    w: usize,
    axis: Axis,
    lines: usize,
    len: usize,
}

impl AxialLayout {
    fn new(_c: usize, h: usize, w: usize, axis: Axis) -> Self {
        let (lines, len) = match axis {
            Axis::Height => (w, h),
            Axis::Width => (h, w),
        };
        Self {
            hw: h * w,
            w,
            axis,
            lines,
            len,
        }
    }

    #[inline]
    fn at(&self, line: usize, pos: usize, ch: usize) -> usize {
        match self.axis {
            Axis::Height => ch * self.hw + pos * self.w + line,
            Axis::Width => ch * self.hw + line * self.w + pos,
        }
    }
}
