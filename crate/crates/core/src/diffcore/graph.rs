//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass and
//! replays the tape backwards once. Parameters live in a [`ParamStore`] the
//! graph borrows immutably, so independent graphs over the same store can be
//! built on different threads. Gradients come back as a [`Gradients`] value and
//! are folded into `Param::grad` by [`ParamStore::accumulate`].

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::tensor::MAX_RANK;
use super::Tensor;

// Graphs are rebuilt for every evaluation and most of their tensors are
// small, so value and gradient buffers are recycled per thread.
thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}
const POOL_MAX_BUFFERS: usize = 1024;
const POOL_MAX_LEN: usize = 4096;

/// Empty buffer with room for `cap` values.
fn pooled(cap: usize) -> Vec<f64> {
    let mut v = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    v.clear();
    v.reserve(cap);
    v
}

fn pooled_zeros(n: usize) -> Vec<f64> {
    let mut v = pooled(n);
    v.resize(n, 0.0);
    v
}

fn pooled_map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut v = pooled(t.len());
    v.extend(t.data().iter().map(|&x| f(x)));
    t.same_shape(v)
}

fn recycle(v: Vec<f64>) {
    if v.capacity() == 0 || v.capacity() > POOL_MAX_LEN {
        return;
    }
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        if p.len() < POOL_MAX_BUFFERS {
            p.push(v);
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }
}

/// Ordered collection of named parameters. Declaration order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param::new(value));
        self.names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn reset_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.params) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// All parameter values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.grad.data());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::dim(
                "assign_flat",
                format!(
                    "expected {} values, got {}",
                    self.num_scalars(),
                    values.len()
                ),
            ));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value
                .data_mut()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Affine {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    Row {
        x: Var,
        index: usize,
    },
    Stack {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    ScaleShift {
        x: Var,
        scale: ParamId,
        shift: ParamId,
    },
    ConvTranspose {
        x: Var,
        k: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    Conv {
        x: Var,
        k: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    // residual = mask * (target - pred)
    MaskedSse {
        pred: Var,
        residual: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    inputs: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Parameter gradients only, indexed by [`ParamId`].
    pub fn from_params(params: Vec<Option<Tensor>>) -> Self {
        Gradients {
            inputs: Vec::new(),
            params,
        }
    }

    /// Gradient with respect to a tracked input; `None` if it was not reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_wrt(&mut self, v: Var) -> Option<Tensor> {
        self.inputs.get_mut(v.0).and_then(Option::take)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    /// Adds another gradient set over the same parameter store.
    pub fn add_params(&mut self, other: &Gradients) {
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    /// Parameter gradients flattened in declaration order, zeros where unreached.
    pub fn flatten_params(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for id in store.ids() {
            match self.param(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(store.value(id).len())),
            }
        }
        out
    }
}

/// One forward computation recorded for reverse-mode differentiation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_grads: bool,
    consumed: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(64),
            param_grads: true,
            consumed: false,
        }
    }

    /// Graph whose backward pass skips parameter gradients (latent-only sweeps).
    pub fn without_param_grads(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(64),
            param_grads: false,
            consumed: false,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wt = self.store.value(w);
        let bt = self.store.value(b);
        let xt = self.value(x);
        if wt.shape().len() != 2 {
            return Err(Error::dim(
                "affine",
                format!("weights must be 2-D, got {:?}", wt.shape()),
            ));
        }
        let (n_out, n_in) = (wt.shape()[0], wt.shape()[1]);
        if bt.shape() != [n_out] {
            return Err(Error::dim(
                "affine",
                format!("bias {:?} vs weights {:?}", bt.shape(), wt.shape()),
            ));
        }
        if xt.last_dim() != n_in || xt.shape().is_empty() {
            return Err(Error::dim(
                "affine",
                format!("input {:?} vs weights {:?}", xt.shape(), wt.shape()),
            ));
        }
        let rows = xt.rows();
        let mut out = pooled_zeros(rows * n_out);
        let wd = wt.data();
        let bias = bt.data();
        for r in 0..rows {
            let xr = xt.row(r);
            let o = &mut out[r * n_out..(r + 1) * n_out];
            for j in 0..n_out {
                o[j] = bias[j] + dot(&wd[j * n_in..(j + 1) * n_in], xr);
            }
        }
        let shape = with_last(xt.shape(), n_out);
        let needs = self.needs(x) || self.param_grads;
        Ok(self.push(
            Tensor::new(&shape[..xt.shape().len()], out)?,
            Op::Affine { x, w, b },
            needs,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = pooled_map(self.value(x), |v| kind.apply(v));
        let needs = self.needs(x);
        self.push(out, Op::Act { x, kind }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let mut out = pooled_map(at, |v| v);
        out.add_assign(bt);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = pooled_map(self.value(x), |v| c * v);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// Concatenates along the last axis. 1-D parts are broadcast across the
    /// rows of 2-D parts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let mut rows: Option<usize> = None;
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            match t.shape().len() {
                1 => {}
                2 => match rows {
                    None => rows = Some(t.shape()[0]),
                    Some(r) if r == t.shape()[0] => {}
                    Some(r) => {
                        return Err(Error::dim(
                            "concat",
                            format!("row count {} vs {}", r, t.shape()[0]),
                        ))
                    }
                },
                _ => {
                    return Err(Error::dim(
                        "concat",
                        format!("expected 1-D or 2-D parts, got {:?}", t.shape()),
                    ))
                }
            }
            width += t.last_dim();
        }
        let n_rows = rows.unwrap_or(1);
        let mut out = pooled(n_rows * width);
        for r in 0..n_rows {
            for &p in parts {
                let t = self.value(p);
                let row = if t.shape().len() == 1 {
                    t.data()
                } else {
                    t.row(r)
                };
                out.extend_from_slice(row);
            }
        }
        let dims = [n_rows, width];
        let shape = if rows.is_some() {
            &dims[..]
        } else {
            &dims[1..]
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Row `index` of a 2-D node as a 1-D node.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || index >= t.shape()[0] {
            return Err(Error::dim(
                "row",
                format!("row {} of {:?}", index, t.shape()),
            ));
        }
        let mut buf = pooled(t.last_dim());
        buf.extend_from_slice(t.row(index));
        let out = Tensor::vector(buf);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Row { x, index }, needs))
    }

    /// Stacks equal-length 1-D nodes into a `[n, k]` node.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let k = parts.first().map_or(0, |&p| self.value(p).len());
        let mut out = pooled(parts.len() * k);
        for &p in parts {
            let t = self.value(p);
            if t.shape() != [k] {
                return Err(Error::dim(
                    "stack",
                    format!("part {:?} vs [{}]", t.shape(), k),
                ));
            }
            out.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&[parts.len(), k], out)?,
            Op::Stack {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// `len` entries of the last axis starting at `start`, for every row.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if start + len > c || t.shape().is_empty() {
            return Err(Error::dim(
                "slice",
                format!(
                    "[{}, {}) of last axis of {:?}",
                    start,
                    start + len,
                    t.shape()
                ),
            ));
        }
        let mut out = pooled(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let shape = with_last(t.shape(), len);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&shape[..t.shape().len()], out)?,
            Op::Slice { x, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Per-channel `x * scale + shift` over the last axis.
    pub fn scale_shift(&mut self, x: Var, scale: ParamId, shift: ParamId) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let (s, h) = (self.store.value(scale), self.store.value(shift));
        if s.shape() != [c] || h.shape() != [c] {
            return Err(Error::dim(
                "scale_shift",
                format!(
                    "channels {} vs scale {:?} shift {:?}",
                    c,
                    s.shape(),
                    h.shape()
                ),
            ));
        }
        let mut out = t.clone();
        for r in 0..t.rows() {
            let o = &mut out.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                o[j] = o[j] * s.data()[j] + h.data()[j];
            }
        }
        let needs = self.needs(x) || self.param_grads;
        Ok(self.push(out, Op::ScaleShift { x, scale, shift }, needs))
    }

    /// Transposed convolution, kernel `[k, k, c_in, c_out]`, input `[h, w, c_in]`
    /// or `[n, h, w, c_in]`. Output side is `(in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom { stride, pad };
        let (n, h, w, cin) = image_dims("conv_transpose2d", self.value(x))?;
        let (k, cout) = kernel_dims("conv_transpose2d", self.store, kernel, bias, cin)?;
        if h == 0 || w == 0 {
            return Err(Error::dim("conv_transpose2d", "empty spatial input"));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::dim("conv_transpose2d", "padding exceeds output"))?;
        let ow = ((w - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::dim("conv_transpose2d", "padding exceeds output"))?;
        let xd = self.value(x).data();
        let kd = self.store.value(kernel).data();
        let bd = self.store.value(bias).data();
        let mut out = vec![0.0; n * oh * ow * cout];
        for b in 0..n {
            for iy in 0..h {
                for ix in 0..w {
                    let xin = &xd[((b * h + iy) * w + ix) * cin..][..cin];
                    for ky in 0..k {
                        let Some(oy) = shifted(iy, ky, stride, pad, oh) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = shifted(ix, kx, stride, pad, ow) else {
                                continue;
                            };
                            let o = &mut out[((b * oh + oy) * ow + ox) * cout..][..cout];
                            for (ci, &xv) in xin.iter().enumerate() {
                                axpy(xv, &kd[((ky * k + kx) * cin + ci) * cout..][..cout], o);
                            }
                        }
                    }
                }
            }
        }
        for px in out.chunks_mut(cout) {
            for (o, &bv) in px.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let shape = if self.value(x).shape().len() == 4 {
            vec![n, oh, ow, cout]
        } else {
            vec![oh, ow, cout]
        };
        let needs = self.needs(x) || self.param_grads;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::ConvTranspose {
                x,
                k: kernel,
                b: bias,
                geom,
            },
            needs,
        ))
    }

    /// Strided convolution with zero padding, kernel `[k, k, c_in, c_out]`.
    /// Output side is `(in + 2 * pad - k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom { stride, pad };
        let (n, h, w, cin) = image_dims("conv2d", self.value(x))?;
        let (k, cout) = kernel_dims("conv2d", self.store, kernel, bias, cin)?;
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {}x{} too small for kernel {}", h, w, k),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.store.value(kernel).data();
        let bd = self.store.value(bias).data();
        let mut out = vec![0.0; n * oh * ow * cout];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[((b * oh + oy) * ow + ox) * cout..][..cout];
                    o.copy_from_slice(bd);
                    for ky in 0..k {
                        let Some(iy) = shifted(oy, ky, stride, pad, h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = shifted(ox, kx, stride, pad, w) else {
                                continue;
                            };
                            let xin = &xd[((b * h + iy) * w + ix) * cin..][..cin];
                            for (ci, &xv) in xin.iter().enumerate() {
                                axpy(xv, &kd[((ky * k + kx) * cin + ci) * cout..][..cout], o);
                            }
                        }
                    }
                }
            }
        }
        let shape = if self.value(x).shape().len() == 4 {
            vec![n, oh, ow, cout]
        } else {
            vec![oh, ow, cout]
        };
        let needs = self.needs(x) || self.param_grads;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv {
                x,
                k: kernel,
                b: bias,
                geom,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, needs)
    }

    /// `sum over visible entries of (target - pred)^2`. Entries with a false
    /// mask never read `target`.
    pub fn masked_sse(&mut self, pred: Var, target: &[f64], mask: Option<&[bool]>) -> Result<Var> {
        let p = self.value(pred);
        if target.len() != p.len() || mask.is_some_and(|m| m.len() != p.len()) {
            return Err(Error::dim(
                "masked_sse",
                format!(
                    "prediction has {} entries, target {}",
                    p.len(),
                    target.len()
                ),
            ));
        }
        let residual: Vec<f64> = match mask {
            Some(m) => p
                .data()
                .iter()
                .zip(m)
                .enumerate()
                .map(|(i, (&pv, &vis))| if vis { target[i] - pv } else { 0.0 })
                .collect(),
            None => p
                .data()
                .iter()
                .zip(target)
                .map(|(&pv, &tv)| tv - pv)
                .collect(),
        };
        let sse = residual.iter().map(|r| r * r).sum();
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(sse), Op::MaskedSse { pred, residual }, needs))
    }

    /// Residual `mask * (target - pred)` stored by a [`Graph::masked_sse`] node.
    pub fn residual(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::MaskedSse { residual, .. } => Some(residual),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar node. Each recorded forward can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this graph; record a new forward first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut pgrads);
            recycle(g.into_data());
        }

        let inputs = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                if matches!(n.op, Op::Input) && n.needs_grad {
                    g
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            inputs,
            params: pgrads,
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.needs(v) {
            return None;
        }
        let value = self.value(v);
        Some(grads[v.0].get_or_insert_with(|| value.same_shape(pooled_zeros(value.len()))))
    }

    fn param_slot<'g>(
        &self,
        pgrads: &'g mut [Option<Tensor>],
        id: ParamId,
    ) -> Option<&'g mut Tensor> {
        if !self.param_grads {
            return None;
        }
        let shape = self.store.value(id).shape();
        Some(pgrads[id.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        pgrads: &mut [Option<Tensor>],
    ) {
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Affine { x, w, b } => {
                let wt = self.store.value(*w);
                let (n_out, n_in) = (wt.shape()[0], wt.shape()[1]);
                let xt = self.value(*x);
                let rows = xt.rows();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for r in 0..rows {
                        let gxr = &mut gxd[r * n_in..(r + 1) * n_in];
                        for j in 0..n_out {
                            axpy(gd[r * n_out + j], &wt.data()[j * n_in..(j + 1) * n_in], gxr);
                        }
                    }
                }
                if let Some(gw) = self.param_slot(pgrads, *w) {
                    let gwd = gw.data_mut();
                    for r in 0..rows {
                        let xr = xt.row(r);
                        for j in 0..n_out {
                            axpy(gd[r * n_out + j], xr, &mut gwd[j * n_in..(j + 1) * n_in]);
                        }
                    }
                }
                if let Some(gb) = self.param_slot(pgrads, *b) {
                    for r in 0..rows {
                        axpy(1.0, &gd[r * n_out..(r + 1) * n_out], gb.data_mut());
                    }
                }
            }
            Op::Act { x, kind } => {
                let y = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    match kind {
                        Activation::Tanh => {
                            for i in 0..gd.len() {
                                gxd[i] += gd[i] * (1.0 - y[i] * y[i]);
                            }
                        }
                        Activation::Relu => {
                            for i in 0..gd.len() {
                                if y[i] > 0.0 {
                                    gxd[i] += gd[i];
                                }
                            }
                        }
                        Activation::Identity => axpy(1.0, gd, gxd),
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(1.0, gd, ga.data_mut());
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    axpy(1.0, gd, gb.data_mut());
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(*c, gd, gx.data_mut());
                }
            }
            Op::Concat { parts } => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let k = pt.last_dim();
                    let broadcast = pt.shape().len() == 1;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        let gpd = gp.data_mut();
                        for r in 0..rows {
                            let src = &gd[r * width + offset..r * width + offset + k];
                            let dst = if broadcast {
                                &mut gpd[..]
                            } else {
                                &mut gpd[r * k..(r + 1) * k]
                            };
                            axpy(1.0, src, dst);
                        }
                    }
                    offset += k;
                }
            }
            Op::Row { x, index } => {
                let k = gd.len();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(1.0, gd, &mut gx.data_mut()[index * k..(index + 1) * k]);
                }
            }
            Op::Stack { parts } => {
                let k = node.value.last_dim();
                for (r, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.grad_slot(grads, p) {
                        axpy(1.0, &gd[r * k..(r + 1) * k], gp.data_mut());
                    }
                }
            }
            Op::Slice { x, start } => {
                let len = node.value.last_dim();
                let c = self.value(*x).last_dim();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for r in 0..node.value.rows() {
                        axpy(
                            1.0,
                            &gd[r * len..(r + 1) * len],
                            &mut gxd[r * c + start..r * c + start + len],
                        );
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(1.0, gd, gx.data_mut());
                }
            }
            Op::ScaleShift { x, scale, shift } => {
                let xt = self.value(*x);
                let c = xt.last_dim();
                let s = self.store.value(*scale).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        gxd[i] += gv * s[i % c];
                    }
                }
                if let Some(gs) = self.param_slot(pgrads, *scale) {
                    let gsd = gs.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        gsd[i % c] += gv * xt.data()[i];
                    }
                }
                if let Some(gh) = self.param_slot(pgrads, *shift) {
                    let ghd = gh.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        ghd[i % c] += gv;
                    }
                }
            }
            Op::ConvTranspose {
                x,
                k: kid,
                b: bid,
                geom,
            } => {
                let xt = self.value(*x);
                let (n, h, w, cin) = image_dims("", xt).expect("checked in forward");
                let kt = self.store.value(*kid);
                let (k, cout) = (kt.shape()[0], kt.shape()[3]);
                let (_, oh, ow, _) = image_dims("", &node.value).expect("checked in forward");
                let (stride, pad) = (geom.stride, geom.pad);
                let kd = kt.data();
                let xd = xt.data();
                let mut gx = self.grad_slot(grads, *x).map(|t| t.data_mut());
                let mut gk = self.param_slot(pgrads, *kid).map(|t| t.data_mut());
                for b in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xoff = ((b * h + iy) * w + ix) * cin;
                            for ky in 0..k {
                                let Some(oy) = shifted(iy, ky, stride, pad, oh) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ox) = shifted(ix, kx, stride, pad, ow) else {
                                        continue;
                                    };
                                    let go = &gd[((b * oh + oy) * ow + ox) * cout..][..cout];
                                    for ci in 0..cin {
                                        let koff = ((ky * k + kx) * cin + ci) * cout;
                                        if let Some(gx) = gx.as_deref_mut() {
                                            gx[xoff + ci] += dot(&kd[koff..koff + cout], go);
                                        }
                                        if let Some(gk) = gk.as_deref_mut() {
                                            axpy(xd[xoff + ci], go, &mut gk[koff..koff + cout]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.param_slot(pgrads, *bid) {
                    for px in gd.chunks(cout) {
                        axpy(1.0, px, gb.data_mut());
                    }
                }
            }
            Op::Conv {
                x,
                k: kid,
                b: bid,
                geom,
            } => {
                let xt = self.value(*x);
                let (n, h, w, cin) = image_dims("", xt).expect("checked in forward");
                let kt = self.store.value(*kid);
                let (k, cout) = (kt.shape()[0], kt.shape()[3]);
                let (_, oh, ow, _) = image_dims("", &node.value).expect("checked in forward");
                let (stride, pad) = (geom.stride, geom.pad);
                let kd = kt.data();
                let xd = xt.data();
                let mut gx = self.grad_slot(grads, *x).map(|t| t.data_mut());
                let mut gk = self.param_slot(pgrads, *kid).map(|t| t.data_mut());
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = &gd[((b * oh + oy) * ow + ox) * cout..][..cout];
                            for ky in 0..k {
                                let Some(iy) = shifted(oy, ky, stride, pad, h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = shifted(ox, kx, stride, pad, w) else {
                                        continue;
                                    };
                                    let xoff = ((b * h + iy) * w + ix) * cin;
                                    for ci in 0..cin {
                                        let koff = ((ky * k + kx) * cin + ci) * cout;
                                        if let Some(gx) = gx.as_deref_mut() {
                                            gx[xoff + ci] += dot(&kd[koff..koff + cout], go);
                                        }
                                        if let Some(gk) = gk.as_deref_mut() {
                                            axpy(xd[xoff + ci], go, &mut gk[koff..koff + cout]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.param_slot(pgrads, *bid) {
                    for px in gd.chunks(cout) {
                        axpy(1.0, px, gb.data_mut());
                    }
                }
            }
            Op::Sum { x } => {
                let g0 = gd[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|v| *v += g0);
                }
            }
            Op::SumSquares { x } => {
                let g0 = gd[0];
                let xd = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(2.0 * g0, xd, gx.data_mut());
                }
            }
            Op::MaskedSse { pred, residual } => {
                if let Some(gp) = self.grad_slot(grads, *pred) {
                    axpy(-2.0 * gd[0], residual, gp.data_mut());
                }
            }
        }
    }
}

impl Drop for Graph<'_> {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            recycle(node.value.into_data());
        }
    }
}

/// `shape` with its last entry replaced, padded to the maximum rank.
fn with_last(shape: &[usize], last: usize) -> [usize; MAX_RANK] {
    let mut out = [0; MAX_RANK];
    out[..shape.len()].copy_from_slice(shape);
    out[shape.len() - 1] = last;
    out
}

/// Position on the larger grid reached from `small` through kernel tap `tap`.
#[inline]
fn shifted(small: usize, tap: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (small * stride + tap).checked_sub(pad)?;
    (pos < limit).then_some(pos)
}

fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::dim(
            op,
            format!("expected [h, w, c] or [n, h, w, c], got {:?}", t.shape()),
        )),
    }
}

fn kernel_dims(
    op: &'static str,
    store: &ParamStore,
    kernel: ParamId,
    bias: ParamId,
    cin: usize,
) -> Result<(usize, usize)> {
    let ks = store.value(kernel).shape();
    match *ks {
        [k, k2, ci, co] if k == k2 && ci == cin && store.value(bias).shape() == [co] => Ok((k, co)),
        _ => Err(Error::dim(
            op,
            format!(
                "kernel {:?} / bias {:?} incompatible with {} input channels",
                ks,
                store.value(bias).shape(),
                cin
            ),
        )),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
