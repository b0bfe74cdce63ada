use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[N,1,H,W]` against lhs `[N,C,H,W]`.
    Channel,
    /// rhs holds a single element.
    Scalar,
}

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize, mode: Broadcast },
    Mul { a: usize, b: usize, mode: Broadcast },
    Affine { x: usize, scale: T },
    Sigmoid { x: usize },
    Relu { x: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    GlobalAvgPool { x: usize },
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    SoftmaxRows { x: usize },
    Upsample { x: usize, factor: usize },
    Bmm { a: usize, b: usize, transpose_rhs: bool },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    MeanAxis { x: usize, axis: usize },
    ChannelDot { d: usize, k: usize },
    Sum { x: usize },
    Mean { x: usize },
    BceLogits { z: usize, target: Tensor<T> },
    Dice { z: usize, target: Tensor<T>, eps: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    param_ids: HashMap<String, usize>,
    consumed: bool,
}

/// Records operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order; `backward` walks them once in reverse.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("params", &inner.params.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(String, Tensor<T>)>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Gradient with respect to a leaf created by [`Tape::leaf`] or
    /// [`Tape::param`].
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    /// Parameter gradients in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: Vec::new(),
                param_ids: HashMap::new(),
                consumed: false,
            }),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].needs_grad)
    }

    /// Input that receives a gradient (retrievable via [`Gradients::wrt`]).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named trainable parameter. Registering the same name again
    /// returns the original node, so repeated uses accumulate into one gradient.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.inner.borrow().param_ids.get(name) {
            return Var { tape: self, id };
        }
        let var = self.push(value.clone(), Op::Leaf, true);
        let mut inner = self.inner.borrow_mut();
        inner.params.push((name.to_string(), var.id));
        inner.param_ids.insert(name.to_string(), var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Which side of the kink every recorded ReLU input is on (`x > 0`), in
    /// recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let inner = self.inner.borrow();
        let mut bits = Vec::new();
        for node in &inner.nodes {
            if let Op::Relu { x } = node.op {
                bits.extend(inner.nodes[x].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        bits
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let mut a = s.clone();
            let mut b = base.clone();
            a[axis] = 0;
            b[axis] = 0;
            if s.len() != base.len() || a != b {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner_len) = split_axis(&base, axis);
        let value = {
            let inner = self.inner.borrow();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &inner.nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner_len;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, needs))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (input, gi) in backprop(nodes, node, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gi) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        let params = inner
            .params
            .iter()
            .map(|(name, id)| {
                let g = leaves
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(nodes[*id].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params, leaves })
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add { a, b, mode } => {
            let gb = match mode {
                Broadcast::Same => g.to_vec(),
                Broadcast::Scalar => vec![T::of(g.iter().map(|v| v.as_f64()).sum())],
                Broadcast::Channel => unreachable!("add never broadcasts channels"),
            };
            vec![(*a, g.to_vec()), (*b, gb)]
        }
        Op::Mul { a, b, mode } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            match mode {
                Broadcast::Same => vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| *g * *b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| *g * *a).collect()),
                ],
                Broadcast::Scalar => {
                    let s = bv[0];
                    let gs: f64 = g.iter().zip(av).map(|(g, a)| (*g * *a).as_f64()).sum();
                    vec![(*a, g.iter().map(|g| *g * s).collect()), (*b, vec![T::of(gs)])]
                }
                Broadcast::Channel => {
                    let shape = val(*a).shape();
                    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                    let mut ga = vec![T::zero(); av.len()];
                    let mut gb = vec![T::zero(); bv.len()];
                    for ni in 0..n {
                        let mask = &bv[ni * plane..(ni + 1) * plane];
                        let gbn = &mut gb[ni * plane..(ni + 1) * plane];
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for p in 0..plane {
                                ga[off + p] = g[off + p] * mask[p];
                                gbn[p] += g[off + p] * av[off + p];
                            }
                        }
                    }
                    vec![(*a, ga), (*b, gb)]
                }
            }
        }
        Op::Affine { x, scale } => vec![(*x, g.iter().map(|v| *v * *scale).collect())],
        Op::Sigmoid { x } => {
            let y = node.value.data();
            vec![(*x, g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)).collect())]
        }
        Op::Relu { x } => {
            let y = node.value.data();
            vec![(*x, g.iter().zip(y).map(|(g, y)| if *y > T::zero() { *g } else { T::zero() }).collect())]
        }
        Op::Conv2d { x, w, b, geom } => {
            let grads = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, geom, needs(*x));
            let mut out = vec![(*w, grads.dw)];
            if let Some(dx) = grads.dx {
                out.push((*x, dx));
            }
            if let Some(b) = b {
                out.push((*b, grads.db));
            }
            out
        }
        Op::GlobalAvgPool { x } => {
            let s = val(*x).shape();
            let plane = s[2] * s[3];
            let inv = T::of(1.0 / plane as f64);
            let mut gx = Vec::with_capacity(val(*x).numel());
            for gv in g {
                gx.extend(std::iter::repeat(*gv * inv).take(plane));
            }
            vec![(*x, gx)]
        }
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let mut ga = vec![T::zero(); m * k];
            let mut gb = vec![T::zero(); k * n];
            T::gemm(m, n, k, g, (n, 1), val(*b).data(), (1, n), T::zero(), &mut ga, (k, 1));
            T::gemm(k, m, n, val(*a).data(), (1, k), g, (n, 1), T::zero(), &mut gb, (n, 1));
            vec![(*a, ga), (*b, gb)]
        }
        Op::Linear { x, w, b } => {
            let (m, k) = (val(*x).shape()[0], val(*x).shape()[1]);
            let n = val(*w).shape()[1];
            let mut gx = vec![T::zero(); m * k];
            let mut gw = vec![T::zero(); k * n];
            T::gemm(m, n, k, g, (n, 1), val(*w).data(), (1, n), T::zero(), &mut gx, (k, 1));
            T::gemm(k, m, n, val(*x).data(), (1, k), g, (n, 1), T::zero(), &mut gw, (n, 1));
            let gb = (0..n)
                .map(|j| T::of((0..m).map(|i| g[i * n + j].as_f64()).sum()))
                .collect();
            vec![(*x, gx), (*w, gw), (*b, gb)]
        }
        Op::SoftmaxRows { x } => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            let mut gx = vec![T::zero(); y.len()];
            for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| (*g * *y).as_f64()).sum();
                let dot = T::of(dot);
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = *y * (*g - dot);
                }
            }
            vec![(*x, gx)]
        }
        Op::Upsample { x, factor } => {
            let s = val(*x).shape();
            let dx = kernels::resize_bilinear_backward(g, s[0] * s[1], s[2], s[3], s[2] * factor, s[3] * factor);
            vec![(*x, dx)]
        }
        Op::Bmm { a, b, transpose_rhs } => {
            let sa = val(*a).shape();
            let sb = val(*b).shape();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *transpose_rhs { sb[1] } else { sb[2] };
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let mut ga = vec![T::zero(); ad.len()];
            let mut gb = vec![T::zero(); bd.len()];
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let gai = &mut ga[i * m * k..(i + 1) * m * k];
                let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                if *transpose_rhs {
                    // C = A·Bᵀ with B stored [n,k]: gA = G·B, gB = Gᵀ·A
                    T::gemm(m, n, k, gi, (n, 1), bi, (k, 1), T::zero(), gai, (k, 1));
                    T::gemm(n, m, k, gi, (1, n), ai, (k, 1), T::zero(), gbi, (k, 1));
                } else {
                    T::gemm(m, n, k, gi, (n, 1), bi, (1, n), T::zero(), gai, (k, 1));
                    T::gemm(k, m, n, ai, (1, k), gi, (n, 1), T::zero(), gbi, (n, 1));
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, _, inner) = split_axis(shape, *axis);
            let total_chunk = shape[*axis] * inner;
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let chunk = val(p).shape()[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total_chunk + offset;
                        gp.extend_from_slice(&g[base..base + chunk]);
                    }
                    offset += chunk;
                    (p, gp)
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            let taken = node.value.shape()[*axis];
            let mut gx = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                let src = o * taken * inner;
                gx[dst..dst + taken * inner].copy_from_slice(&g[src..src + taken * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Reshape { x } => vec![(*x, g.to_vec())],
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            let inv = T::of(1.0 / len as f64);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[(o * len + l) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::ChannelDot { d, k } => {
            let s = val(*d).shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let (dv, kv) = (val(*d).data(), val(*k).data());
            let mut gd = vec![T::zero(); dv.len()];
            let mut gk = vec![T::zero(); kv.len()];
            for ni in 0..n {
                let gn = &g[ni * plane..(ni + 1) * plane];
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    let kc = kv[ni * c + ci];
                    let mut acc = 0.0f64;
                    for p in 0..plane {
                        gd[off + p] = gn[p] * kc;
                        acc += (gn[p] * dv[off + p]).as_f64();
                    }
                    gk[ni * c + ci] = T::of(acc);
                }
            }
            vec![(*d, gd), (*k, gk)]
        }
        Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).numel()])],
        Op::Mean { x } => {
            let n = val(*x).numel();
            vec![(*x, vec![g[0] * T::of(1.0 / n as f64); n])]
        }
        Op::BceLogits { z, target } => {
            let zv = val(*z).data();
            let scale = g[0] * T::of(1.0 / zv.len() as f64);
            let gz = zv
                .iter()
                .zip(target.data())
                .map(|(z, t)| (kernels::sigmoid(*z) - *t) * scale)
                .collect();
            vec![(*z, gz)]
        }
        Op::Dice { z, target, eps } => {
            let zv = val(*z).data();
            let batch = val(*z).shape()[0];
            let per = zv.len() / batch;
            let mut gz = vec![T::zero(); zv.len()];
            for n in 0..batch {
                let zs = &zv[n * per..(n + 1) * per];
                let ts = &target.data()[n * per..(n + 1) * per];
                let (inter, denom) = dice_sums(zs, ts);
                let (num, den) = (2.0 * inter + eps, denom + eps);
                // d(1 - num/den)/dp = -(2t·den - num) / den²
                let scale = g[0].as_f64() / batch as f64;
                for ((out, z), t) in gz[n * per..(n + 1) * per].iter_mut().zip(zs).zip(ts) {
                    let p = kernels::sigmoid(*z).as_f64();
                    let dp = -(2.0 * t.as_f64() * den - num) / (den * den);
                    *out = T::of(scale * dp * p * (1.0 - p));
                }
            }
            vec![(*z, gz)]
        }
    }
}

/// `(Σ p·t, Σ p + Σ t)` with `p = σ(z)`, accumulated in `f64`.
fn dice_sums<T: Scalar>(z: &[T], t: &[T]) -> (f64, f64) {
    z.iter().zip(t).fold((0.0, 0.0), |(i, s), (z, t)| {
        let p = kernels::sigmoid(*z).as_f64();
        let t = t.as_f64();
        (i + p * t, s + p + t)
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn unary(
        &self,
        op_name: &'static str,
        make: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let value = self.with_value(make)?;
        check_finite(op_name, &value)?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, op, needs))
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        op_name: &'static str,
        make: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            make(&inner.nodes[self.id].value, &inner.nodes[other.id].value)?
        };
        check_finite(op_name, &value)?;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    /// Elementwise sum; `other` may also hold a single element.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mode = if sa == sb {
            Broadcast::Same
        } else if sb.iter().product::<usize>() == 1 {
            Broadcast::Scalar
        } else {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        };
        self.binary(
            other,
            "add",
            |a, b| {
                let data = match mode {
                    Broadcast::Same => a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect(),
                    _ => a.data().iter().map(|x| *x + b.data()[0]).collect(),
                };
                Tensor::new(a.shape().to_vec(), data)
            },
            Op::Add { a: self.id, b: other.id, mode },
        )
    }

    /// Elementwise product. A `[N,1,H,W]` map broadcasts over the channels of
    /// a `[N,C,H,W]` map (in either argument position); a one-element tensor
    /// broadcasts over everything.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let is_channel_bcast = |full: &[usize], mask: &[usize]| {
            full.len() == 4 && mask.len() == 4 && mask[1] == 1 && full[1] != 1
                && full[0] == mask[0] && full[2..] == mask[2..]
        };
        let (a, b, mode) = if sa == sb {
            (*self, *other, Broadcast::Same)
        } else if is_channel_bcast(&sa, &sb) {
            (*self, *other, Broadcast::Channel)
        } else if is_channel_bcast(&sb, &sa) {
            (*other, *self, Broadcast::Channel)
        } else if sb.iter().product::<usize>() == 1 {
            (*self, *other, Broadcast::Scalar)
        } else if sa.iter().product::<usize>() == 1 {
            (*other, *self, Broadcast::Scalar)
        } else {
            return Err(Error::shape("mul", format!("{sa:?} * {sb:?}")));
        };
        a.binary(
            &b,
            "mul",
            |x, y| {
                let data = match mode {
                    Broadcast::Same => x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect(),
                    Broadcast::Scalar => x.data().iter().map(|p| *p * y.data()[0]).collect(),
                    Broadcast::Channel => {
                        let s = x.shape();
                        let (c, plane) = (s[1], s[2] * s[3]);
                        x.data()
                            .iter()
                            .enumerate()
                            .map(|(i, p)| {
                                let n = i / (c * plane);
                                *p * y.data()[n * plane + i % plane]
                            })
                            .collect()
                    }
                };
                Tensor::new(x.shape().to_vec(), data)
            },
            Op::Mul { a: a.id, b: b.id, mode },
        )
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t, T>> {
        let (s, b) = (T::of(scale), T::of(shift));
        self.unary(
            "affine",
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| *v * s + b).collect()),
            Op::Affine { x: self.id, scale: s },
        )
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t, T>> {
        self.affine(s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Var<'t, T>> {
        self.affine(-1.0, 1.0)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(
            "sigmoid",
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| kernels::sigmoid(*v)).collect()),
            Op::Sigmoid { x: self.id },
        )
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(T::zero())).collect()),
            Op::Relu { x: self.id },
        )
    }

    /// 2-D convolution over `[N,Cin,H,W]` with weights `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if !matches!(ws[2], 1 | 3) || !matches!(ws[3], 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} stride {stride} unsupported", ws[2], ws[3]),
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?} smaller than kernel")));
        }
        if let Some(b) = b {
            if b.shape() != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", b.shape(), ws[0])));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let value = {
            let inner = self.tape.inner.borrow();
            let bias = b.map(|b| inner.nodes[b.id].value.data());
            let out = kernels::conv2d_forward(inner.nodes[self.id].value.data(), inner.nodes[w.id].value.data(), bias, &geom);
            Tensor::new([geom.batch, geom.c_out, geom.out_h(), geom.out_w()], out)?
        };
        check_finite("conv2d", &value)?;
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let needs = self.tape.needs(&ids);
        Ok(self.tape.push(value, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, needs))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        self.unary(
            "global_avg_pool",
            |x| {
                let plane = s[2] * s[3];
                let data = x
                    .data()
                    .chunks(plane)
                    .map(|c| T::of(c.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
                    .collect();
                Tensor::new([s[0], s[1]], data)
            },
            Op::GlobalAvgPool { x: self.id },
        )
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.binary(
            other,
            "matmul",
            |a, b| {
                let mut c = vec![T::zero(); m * n];
                T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), T::zero(), &mut c, (n, 1));
                Tensor::new([m, n], c)
            },
            Op::MatMul { a: self.id, b: other.id },
        )
    }

    /// `x·W + b` with `x: [m,k]`, `W: [k,n]`, `b: [n]`.
    pub fn linear(&self, w: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (xs, ws, bs) = (self.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape("linear", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let value = {
            let inner = self.tape.inner.borrow();
            let bias = inner.nodes[b.id].value.data();
            let mut out: Vec<T> = (0..m).flat_map(|_| bias.iter().copied()).collect();
            T::gemm(m, k, n, inner.nodes[self.id].value.data(), (k, 1), inner.nodes[w.id].value.data(), (n, 1), T::one(), &mut out, (n, 1));
            Tensor::new([m, n], out)?
        };
        check_finite("linear", &value)?;
        let needs = self.tape.needs(&[self.id, w.id, b.id]);
        Ok(self.tape.push(value, Op::Linear { x: self.id, w: w.id, b: b.id }, needs))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let cols = *s.last().ok_or_else(|| Error::shape("softmax_rows", "rank 0"))?;
        if cols == 0 {
            return Err(Error::shape("softmax_rows", "empty rows"));
        }
        self.unary(
            "softmax_rows",
            |x| {
                let mut out = Vec::with_capacity(x.numel());
                for row in x.data().chunks(cols) {
                    let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
                    let exps: Vec<f64> = row.iter().map(|v| (*v - max).as_f64().exp()).collect();
                    let total: f64 = exps.iter().sum();
                    out.extend(exps.iter().map(|e| T::of(e / total)));
                }
                Tensor::new(s.clone(), out)
            },
            Op::SoftmaxRows { x: self.id },
        )
    }

    /// Bilinear upsampling of `[N,C,H,W]` by an integer factor
    /// (half-pixel centres, edges clamped).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_bilinear", format!("{s:?} by {factor}")));
        }
        if factor == 1 {
            return self.reshape(s);
        }
        self.unary(
            "upsample_bilinear",
            |x| {
                let out = kernels::resize_bilinear(x.data(), s[0] * s[1], s[2], s[3], s[2] * factor, s[3] * factor);
                Tensor::new([s[0], s[1], s[2] * factor, s[3] * factor], out)
            },
            Op::Upsample { x: self.id, factor },
        )
    }

    /// Batched matmul over `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]ᵀ`
    /// when `transpose_rhs` is set.
    pub fn bmm(&self, other: &Var<'t, T>, transpose_rhs: bool) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let inner_rhs = if transpose_rhs { sb.get(2) } else { sb.get(1) };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || inner_rhs != Some(&sa[2]) {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (transpose_rhs={transpose_rhs})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        self.binary(
            other,
            "bmm",
            |a, b| {
                let mut c = vec![T::zero(); batch * m * n];
                for i in 0..batch {
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let bs = if transpose_rhs { (1, k) } else { (n, 1) };
                    T::gemm(m, k, n, ai, (k, 1), bi, bs, T::zero(), &mut c[i * m * n..(i + 1) * m * n], (n, 1));
                }
                Tensor::new([batch, m, n], c)
            },
            Op::Bmm { a: self.id, b: other.id, transpose_rhs },
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let mut shape = s.clone();
        shape[axis] = len;
        self.unary(
            "slice",
            |x| {
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    out.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                Tensor::new(shape, out)
            },
            Op::Slice { x: self.id, axis, start },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        self.unary("reshape", |x| x.clone().reshape(shape), Op::Reshape { x: self.id })
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("{s:?} axis {axis}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let mut shape = s.clone();
        shape.remove(axis);
        self.unary(
            "mean_axis",
            |x| {
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let acc: f64 = (0..len).map(|l| x.data()[(o * len + l) * inner + i].as_f64()).sum();
                        out.push(T::of(acc / len as f64));
                    }
                }
                Tensor::new(shape, out)
            },
            Op::MeanAxis { x: self.id, axis },
        )
    }

    /// Per-sample 1×1 convolution: `[N,C,H,W]` against kernels `[N,C]`,
    /// giving `[N,1,H,W]`.
    pub fn channel_dot(&self, kernel: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (ds, ks) = (self.shape(), kernel.shape());
        if ds.len() != 4 || ks != [ds[0], ds[1]] {
            return Err(Error::shape("channel_dot", format!("features {ds:?}, kernel {ks:?}")));
        }
        let (n, c, plane) = (ds[0], ds[1], ds[2] * ds[3]);
        self.binary(
            kernel,
            "channel_dot",
            |d, k| {
                let mut out = vec![T::zero(); n * plane];
                for ni in 0..n {
                    let dst = &mut out[ni * plane..(ni + 1) * plane];
                    for ci in 0..c {
                        let kc = k.data()[ni * c + ci];
                        let src = &d.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += kc * *v;
                        }
                    }
                }
                Tensor::new([n, 1, ds[2], ds[3]], out)
            },
            Op::ChannelDot { d: self.id, k: kernel.id },
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        self.unary("sum", |x| Ok(Tensor::scalar(T::of(x.sum_f64()))), Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        self.unary(
            "mean",
            |x| Ok(Tensor::scalar(T::of(x.sum_f64() / x.numel() as f64))),
            Op::Mean { x: self.id },
        )
    }

    /// Mean binary cross-entropy of logits against a `{0,1}` target, in the
    /// stable `max(z,0) - z·t + ln(1 + e^{-|z|})` form.
    pub fn bce_with_logits(&self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("bce_with_logits", format!("{:?} vs {:?}", self.shape(), target.shape())));
        }
        let t = target.clone();
        self.unary(
            "bce_with_logits",
            |z| {
                let total: f64 = z
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(z, t)| {
                        let (z, t) = (z.as_f64(), t.as_f64());
                        z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
                    })
                    .sum();
                Ok(Tensor::scalar(T::of(total / z.numel() as f64)))
            },
            Op::BceLogits { z: self.id, target: target.clone() },
        )
    }

    /// Soft Dice loss `1 - (2Σpt + ε)/(Σp + Σt + ε)` per sample, averaged
    /// over the leading batch axis.
    pub fn dice_loss(&self, target: &Tensor<T>, eps: f64) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s != target.shape() || s.is_empty() || s[0] == 0 {
            return Err(Error::shape("dice_loss", format!("{s:?} vs {:?}", target.shape())));
        }
        let t = target.clone();
        self.unary(
            "dice_loss",
            |z| {
                let per = z.numel() / s[0];
                let total: f64 = z
                    .data()
                    .chunks(per)
                    .zip(t.data().chunks(per))
                    .map(|(zs, ts)| {
                        let (inter, denom) = dice_sums(zs, ts);
                        1.0 - (2.0 * inter + eps) / (denom + eps)
                    })
                    .sum();
                Ok(Tensor::scalar(T::of(total / s[0] as f64)))
            },
            Op::Dice { z: self.id, target: target.clone(), eps },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let tape = Tape::<f64>::new();
        let x = t(&[3], &[0.5, -1.0, 2.0]);
        let w = tape.param("w", &t(&[3], &[0.1, 0.2, 0.3]));
        let xv = tape.constant(x.clone());
        let loss = w.mul(&xv).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &x);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[1], &[0.0]));
        let loss = z.sigmoid().unwrap().scale(3.0).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(z).unwrap().data(), &[0.75]);
    }

    #[test]
    fn reuse_sums_path_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        // loss = Σ x·x + Σ 3x  →  dx = 2x + 3
        let sq = x.mul(&x).unwrap().sum().unwrap();
        let lin = x.scale(3.0).unwrap().sum().unwrap();
        let loss = sq.add(&lin).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, -1.0]);
    }

    #[test]
    fn shared_param_registers_once() {
        let tape = Tape::<f64>::new();
        let p = t(&[1], &[2.0]);
        let a = tape.param("p", &p);
        let b = tape.param("p", &p);
        let loss = a.add(&b).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("p").unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1.0]));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64([1], &[f64::MAX]).unwrap());
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_known_row() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = x.softmax_rows().unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(c.value().data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let back = c.slice(1, 1, 2).unwrap();
        assert_eq!(back.value(), b.value());
    }
}
