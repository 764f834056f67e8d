use std::collections::HashMap;

use super::conv::{forward_with_geom, Conv2dSpec, ConvGeom};
use super::param::{Gradients, ParamId, ParamStore};
use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for operations implemented outside this module.
///
/// Returns one gradient slot per input, in the order the inputs were recorded.
pub trait Backward {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Upsample2x(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Bilinear {
        map: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    PadWidth(Var),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    /// Scalar-valued op whose local gradients were computed during the forward pass.
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// A dynamic tape. Operations append nodes in evaluation order, so node order is
/// a valid topological order for the reverse sweep.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied; their
/// gradients are read back with [`Graph::param_grads`].
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
    store: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_of(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            store: None,
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a parameter from the attached store. Repeated calls reuse one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        self.nodes.push(Node {
            value: Value::Borrowed(&store.get(id).tensor),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn binary_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_of(sa, sb) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {sb:?} does not broadcast onto {sa:?} (only trailing dimensions may be expanded)"
            )))
        }
    }

    /// `a + b`, where `b`'s shape must equal a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add")?;
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        let n = bv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "sub")?;
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        let n = bv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o -= x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product with the same trailing broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul")?;
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        let n = bv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.last_dim();
        out.data_mut().chunks_mut(c).for_each(softmax_in_place);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.last_dim();
        out.data_mut().chunks_mut(c).for_each(log_softmax_in_place);
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Maximum over all elements; the gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("max of an empty tensor".into()));
        }
        let (idx, m) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &v)| {
                if v > bm {
                    (i, v)
                } else {
                    (bi, bm)
                }
            });
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Max(a, idx), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::Shape(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution of an `HxWxC_in` input with a `kh x kw x C_in x C_out` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), spec)?;
        let (out, cols) = forward_with_geom(&geom, self.value(x), self.value(kernel));
        // The patch matrix is only needed for the kernel gradient.
        let cols = if self.requires_grad(kernel) { cols } else { None };
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(out, Op::Conv2d { x, k: kernel, geom, cols }, rg))
    }

    /// Nearest-neighbour 2x upsampling of an `HxWxC` map.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[h, w, c] = t.shape() else {
            return Err(Error::Shape(format!("upsample2x needs HxWxC, got {:?}", t.shape())));
        };
        let src = t.data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let s = ((y / 2) * w + x / 2) * c;
                let d = (y * 2 * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let out = Tensor::new(vec![2 * h, 2 * w, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Upsample2x(a), rg))
    }

    /// Concatenation along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat_last: leading extents {:?} vs {lead:?}",
                    &s[..s.len().saturating_sub(1)]
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Concatenation along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut n = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(Error::Shape(format!("concat_rows: {s:?} vs trailing {rest:?}")));
            }
            n += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![n];
        shape.extend(rest);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Bilinear interpolation of an `HxWxC` map at `(y, x)` grid coordinates,
    /// where integer coordinates address cell values exactly. Coordinates
    /// outside the grid are clamped to the border. Output is `N x C`.
    pub fn bilinear_sample(&mut self, map: Var, points: &[(f64, f64)]) -> Result<Var> {
        let t = self.value(map);
        let &[h, w, c] = t.shape() else {
            return Err(Error::Shape(format!("bilinear_sample needs HxWxC, got {:?}", t.shape())));
        };
        let taps: Vec<[(usize, f64); 4]> = points.iter().map(|&(y, x)| bilinear_taps(h, w, y, x)).collect();
        let src = t.data();
        let mut out = vec![0.0; points.len() * c];
        for (row, tap) in out.chunks_mut(c.max(1)).zip(&taps) {
            for &(cell, weight) in tap {
                if weight == 0.0 {
                    continue;
                }
                for (o, v) in row.iter_mut().zip(&src[cell * c..(cell + 1) * c]) {
                    *o += weight * v;
                }
            }
        }
        let out = if points.is_empty() {
            Tensor { shape: vec![0, c], data: Vec::new() }
        } else {
            Tensor::new(vec![points.len(), c], out)?
        };
        let rg = self.rg(&[map]);
        Ok(self.push(out, Op::Bilinear { map, taps }, rg))
    }

    /// Zero-pads an `HxWxC` tensor on the right to width `new_w`.
    pub fn pad_width(&mut self, a: Var, new_w: usize) -> Result<Var> {
        let t = self.value(a);
        let &[h, w, c] = t.shape() else {
            return Err(Error::Shape(format!("pad_width needs HxWxC, got {:?}", t.shape())));
        };
        if new_w < w {
            return Err(Error::Shape(format!("pad_width cannot shrink {w} to {new_w}")));
        }
        let mut out = vec![0.0; h * new_w * c];
        for y in 0..h {
            out[y * new_w * c..(y * new_w + w) * c].copy_from_slice(&t.data()[y * w * c..(y + 1) * w * c]);
        }
        let out = Tensor::new(vec![h, new_w, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::PadWidth(a), rg))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().first().unwrap_or(&0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather_rows index {bad} out of range {n}")));
        }
        let row = t.len() / n.max(1);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = if idx.is_empty() {
            Tensor { shape, data: Vec::new() }
        } else {
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Multiplies each row of `x` (viewed as `R x (len/R)`) by the matching entry of `a`
    /// (`R` values in any shape).
    pub fn scale_rows(&mut self, x: Var, a: Var) -> Result<Var> {
        let r = self.value(a).len();
        let xt = self.value(x);
        if r == 0 || xt.len() % r != 0 {
            return Err(Error::Shape(format!(
                "scale_rows: {} values cannot be split into {r} rows",
                xt.len()
            )));
        }
        let width = xt.len() / r;
        let mut out = xt.clone();
        for (row, s) in out.data_mut().chunks_mut(width).zip(self.value(a).data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(&[x, a]);
        Ok(self.push(out, Op::ScaleRows(x, a), rg))
    }

    /// Records a scalar whose gradient with respect to each input is already known.
    pub fn fused_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Var {
        let (vars, grads): (Vec<Var>, Vec<Tensor>) = inputs.into_iter().unzip();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(value), Op::Fused { inputs: vars, grads }, rg)
    }

    /// Records an arbitrary op given its forward value and backward rule.
    pub fn custom(&mut self, output: Tensor, inputs: &[Var], rule: Box<dyn Backward>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), rule }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever earlier
    /// calls left behind; use [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut g: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.propagate(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for (i, gi) in g.into_iter().enumerate() {
            if let Some(t) = gi {
                if self.nodes[i].requires_grad {
                    add_into(&mut self.grads[i], t);
                }
            }
        }
        Ok(())
    }

    /// Gradients of every parameter recorded on this graph.
    pub fn param_grads(&self) -> Gradients {
        let len = self.store.map_or(0, |s| s.len());
        let mut out: Vec<Option<Tensor>> = (0..len).map(|_| None).collect();
        for (id, v) in &self.param_nodes {
            if let Some(g) = self.grad(*v) {
                out[id.0] = Some(g.clone());
            }
        }
        Gradients(out)
    }

    fn send(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if self.nodes[v.0].requires_grad {
            add_into(&mut g[v.0], t);
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor, g: &mut [Option<Tensor>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let nb = gb.len();
                    for chunk in gout.data().chunks(nb) {
                        for (d, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *d += sign * v;
                        }
                    }
                    self.send(g, *b, gb);
                }
                self.send(g, *a, gout.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                if self.requires_grad(*a) {
                    let mut ga = gout.clone();
                    for chunk in ga.data_mut().chunks_mut(nb) {
                        for (d, x) in chunk.iter_mut().zip(bv.data()) {
                            *d *= x;
                        }
                    }
                    self.send(g, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    for (gc, ac) in gout.data().chunks(nb).zip(av.data().chunks(nb)) {
                        for ((d, x), y) in gb.data_mut().iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                    self.send(g, *b, gb);
                }
            }
            Op::Scale(a, f) => self.send(g, *a, gout.map(|v| v * f)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = gout.clone().reshaped(self.shape(*a)).expect("same numel");
                self.send(g, *a, t);
            }
            Op::Relu(a) => {
                let mut ga = gout.clone();
                for (d, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.send(g, *a, ga);
            }
            Op::Sigmoid(a) => self.send(g, *a, zip_map(gout, out, |d, y| d * y * (1.0 - y))),
            Op::Tanh(a) => self.send(g, *a, zip_map(gout, out, |d, y| d * (1.0 - y * y))),
            Op::Exp(a) => self.send(g, *a, zip_map(gout, out, |d, y| d * y)),
            Op::Log(a) => self.send(g, *a, zip_map(gout, self.value(*a), |d, x| d / x)),
            Op::Softmax(a) => {
                let c = out.last_dim();
                let mut ga = gout.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for (d, y) in gr.iter_mut().zip(yr) {
                        *d = y * (*d - dot);
                    }
                }
                self.send(g, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let c = out.last_dim();
                let mut ga = gout.clone();
                for (gr, lr) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for (d, l) in gr.iter_mut().zip(lr) {
                        *d -= l.exp() * total;
                    }
                }
                self.send(g, *a, ga);
            }
            Op::Sum(a) => self.send(g, *a, Tensor::full(self.shape(*a), gout.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.send(g, *a, Tensor::full(self.shape(*a), gout.item() / n));
            }
            Op::Max(a, idx) => {
                let mut ga = Tensor::zeros(self.shape(*a));
                ga.data_mut()[*idx] = gout.item();
                self.send(g, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, gout.data(), false, bv.data(), true, ga.data_mut(), false);
                    self.send(g, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, av.data(), true, gout.data(), false, gb.data_mut(), false);
                    self.send(g, *b, gb);
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let rows = geom.out_h * geom.out_w;
                let plen = geom.patch_len();
                let kv = self.value(*k);
                if self.requires_grad(*k) {
                    let mut gk = Tensor::zeros(kv.shape());
                    let a = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    gemm(plen, rows, geom.c_out, a, true, gout.data(), false, gk.data_mut(), false);
                    self.send(g, *k, gk);
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    if geom.is_pointwise() {
                        gemm(rows, geom.c_out, plen, gout.data(), false, kv.data(), true, gx.data_mut(), false);
                    } else {
                        let mut gcols = vec![0.0; rows * plen];
                        gemm(rows, geom.c_out, plen, gout.data(), false, kv.data(), true, &mut gcols, false);
                        geom.col2im(&gcols, gx.data_mut());
                    }
                    self.send(g, *x, gx);
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut ga = Tensor::zeros(s);
                let gd = gout.data();
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let d = ((y / 2) * w + x / 2) * c;
                        let s = (y * 2 * w + x) * c;
                        for ch in 0..c {
                            ga.data_mut()[d + ch] += gd[s + ch];
                        }
                    }
                }
                self.send(g, *a, ga);
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let s = r * total + offset;
                            gp.extend_from_slice(&gout.data()[s..s + w]);
                        }
                        let gp = Tensor::new(self.shape(p).to_vec(), gp).expect("concat part");
                        self.send(g, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        let gp = Tensor::new(self.shape(p).to_vec(), gout.data()[offset..offset + n].to_vec())
                            .expect("concat part");
                        self.send(g, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Bilinear { map, taps } => {
                let c = self.value(*map).last_dim();
                let mut gm = Tensor::zeros(self.shape(*map));
                for (row, tap) in gout.data().chunks(c.max(1)).zip(taps) {
                    for &(cell, weight) in tap {
                        if weight == 0.0 {
                            continue;
                        }
                        for (d, v) in gm.data_mut()[cell * c..(cell + 1) * c].iter_mut().zip(row) {
                            *d += weight * v;
                        }
                    }
                }
                self.send(g, *map, gm);
            }
            Op::PadWidth(a) => {
                let s = self.shape(*a);
                let (h, w, c) = (s[0], s[1], s[2]);
                let nw = out.shape()[1];
                let mut ga = Vec::with_capacity(h * w * c);
                for y in 0..h {
                    ga.extend_from_slice(&gout.data()[y * nw * c..(y * nw + w) * c]);
                }
                self.send(g, *a, Tensor::new(s.to_vec(), ga).expect("pad grad"));
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Tensor::zeros(self.shape(*a));
                let row = ga.len() / ga.shape()[0].max(1);
                for (j, &i) in idx.iter().enumerate() {
                    for (d, v) in ga.data_mut()[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&gout.data()[j * row..(j + 1) * row])
                    {
                        *d += v;
                    }
                }
                self.send(g, *a, ga);
            }
            Op::ScaleRows(x, a) => {
                let av = self.value(*a);
                let width = out.len() / av.len();
                if self.requires_grad(*x) {
                    let mut gx = gout.clone().reshaped(self.shape(*x)).expect("same numel");
                    for (row, s) in gx.data_mut().chunks_mut(width).zip(av.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.send(g, *x, gx);
                }
                if self.requires_grad(*a) {
                    let xv = self.value(*x).data();
                    let ga: Vec<f64> = gout
                        .data()
                        .chunks(width)
                        .zip(xv.chunks(width))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(p, q)| p * q).sum())
                        .collect();
                    self.send(g, *a, Tensor::new(av.shape().to_vec(), ga).expect("scale grad"));
                }
            }
            Op::Fused { inputs, grads } => {
                let s = gout.item();
                for (&v, local) in inputs.iter().zip(grads) {
                    self.send(g, v, local.map(|d| d * s));
                }
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (&v, gi) in inputs.iter().zip(rule.backward(gout, &vals, out)) {
                    if let Some(gi) = gi {
                        self.send(g, v, gi);
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

/// Four (flat cell index, weight) taps for a clamped bilinear sample.
pub(crate) fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = y - y0 as f64;
    let wx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
        (y0 * w + x1, (1.0 - wy) * wx),
        (y1 * w + x0, wy * (1.0 - wx)),
        (y1 * w + x1, wy * wx),
    ]
}
