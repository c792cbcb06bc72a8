use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::params::{Gradients, Partition};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Counters for backward passes executed on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Backward passes that produced parameter gradients.
    pub param_backwards: u64,
    /// Backward passes that produced gradients for input (probe) leaves only.
    pub input_backwards: u64,
    /// Backward passes run on tangent-carrying scalars (second-order work).
    pub tangent_backwards: u64,
}

thread_local! {
    static STATS: Cell<TapeStats> = Cell::new(TapeStats::default());
}

pub fn tape_stats() -> TapeStats {
    STATS.with(|s| s.get())
}

pub fn reset_tape_stats() {
    STATS.with(|s| s.set(TapeStats::default()));
}

fn bump(f: impl FnOnce(&mut TapeStats)) {
    STATS.with(|s| {
        let mut v = s.get();
        f(&mut v);
        s.set(v);
    });
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param { name: String, partition: Partition },
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, b: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Concat(Vec<usize>),
    MeanAxis0(usize),
    VarAxis0(usize),
    MaxAxis0 { x: usize, argmax: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Norm(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Constant | Input | Param { .. } | Detach => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Relu(a) | Tanh(a) | Sqrt(a)
            | MeanAxis0(a) | VarAxis0(a) | SumAll(a) | MeanAll(a) | Norm(a) | Softmax(a)
            | LogSoftmax(a) | Reshape(a) => vec![*a],
            MaxPool2d { x, .. } | MaxAxis0 { x, .. } => vec![*x],
            Conv2d { x, w, b } => vec![*x, *w, *b],
            Concat(v) => v.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant)
    }

    /// A non-parameter leaf whose gradient can be requested with [`Tape::grad_inputs`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Input)
    }

    pub fn param(&self, name: &str, partition: Partition, value: Tensor<T>) -> Var<'_, T> {
        self.push(
            value,
            Op::Param {
                name: name.to_string(),
                partition,
            },
        )
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::Detached)
        }
    }

    fn check_scalar_loss(&self, loss: &Var<'_, T>) -> Result<()> {
        self.check_owner(loss)?;
        let n = self.value(loss.id).numel();
        if n != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every parameter in the selected partitions.
    ///
    /// Parameters outside `wrt` are absent from the result. Selected
    /// parameters that do not influence `loss` get a zero gradient.
    pub fn backward(&self, loss: Var<'_, T>, wrt: &[Partition]) -> Result<Gradients<T>> {
        self.check_scalar_loss(&loss)?;
        let nodes = self.nodes.borrow();
        let selected: Vec<bool> = nodes
            .iter()
            .map(|n| matches!(&n.op, Op::Param { partition, .. } if wrt.contains(partition)))
            .collect();
        let grads = run_backward(&nodes, loss.id, &selected)?;
        let mut out = Gradients::default();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param { name, partition } = &node.op {
                if wrt.contains(partition) {
                    let g = grads[i]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                    out.insert(name.clone(), *partition, g);
                }
            }
        }
        bump(|s| {
            s.param_backwards += 1;
            if T::HAS_TANGENT {
                s.tangent_backwards += 1;
            }
        });
        Ok(out)
    }

    /// Gradients of `loss` with respect to the given leaves (typically [`Tape::input`]s).
    pub fn grad_inputs(&self, loss: Var<'_, T>, leaves: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        self.check_scalar_loss(&loss)?;
        for l in leaves {
            self.check_owner(l)?;
        }
        let nodes = self.nodes.borrow();
        let mut selected = vec![false; nodes.len()];
        for l in leaves {
            selected[l.id] = true;
        }
        let grads = run_backward(&nodes, loss.id, &selected)?;
        bump(|s| {
            s.input_backwards += 1;
            if T::HAS_TANGENT {
                s.tangent_backwards += 1;
            }
        });
        Ok(leaves
            .iter()
            .map(|l| {
                grads[l.id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[l.id].value.shape().to_vec()))
            })
            .collect())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Output shape when one operand's shape is a suffix of the other's.
fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() >= b.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *v;
            }
        }
        None => *slot = Some(g),
    }
}

fn run_backward<T: Scalar>(
    nodes: &[Node<T>],
    loss: usize,
    selected: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let n = loss + 1;
    let mut needs = vec![false; n];
    for i in 0..n {
        needs[i] = match &nodes[i].op {
            Op::Constant | Op::Input | Op::Param { .. } => selected[i],
            Op::Detach => false,
            op => op.inputs().iter().any(|&j| needs[j]),
        };
    }
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    if !needs[loss] {
        return Ok(grads);
    }
    grads[loss] = Some(Tensor::full(nodes[loss].value.shape().to_vec(), T::one()));

    for i in (0..n).rev() {
        if !needs[i] {
            continue;
        }
        let node = &nodes[i];
        let inputs = node.op.inputs();
        if inputs.is_empty() {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let contributions = vjp(nodes, &node.op, &node.value, &g)?;
        for (j, gj) in inputs.into_iter().zip(contributions) {
            if needs[j] {
                if let Some(gj) = gj {
                    accumulate(&mut grads[j], gj);
                }
            }
        }
    }
    Ok(grads)
}

/// Vector-Jacobian product for one node: one entry per op input.
fn vjp<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op,
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let val = |id: usize| &nodes[id].value;
    let gd = g.data();
    Ok(match op {
        Op::Constant | Op::Input | Op::Param { .. } | Op::Detach => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.numel(), bv.numel());
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = vec![T::zero(); na];
            let mut gb = vec![T::zero(); nb];
            for (i, &gi) in gd.iter().enumerate() {
                let (ia, ib) = (i % na, i % nb);
                match op {
                    Op::Add(..) => {
                        ga[ia] += gi;
                        gb[ib] += gi;
                    }
                    Op::Sub(..) => {
                        ga[ia] += gi;
                        gb[ib] -= gi;
                    }
                    Op::Mul(..) => {
                        ga[ia] += gi * bd[ib];
                        gb[ib] += gi * ad[ia];
                    }
                    _ => {
                        let q = gi / bd[ib];
                        ga[ia] += q;
                        gb[ib] -= q * ad[ia] / bd[ib];
                    }
                }
            }
            vec![
                Some(Tensor::new(av.shape().to_vec(), ga)?),
                Some(Tensor::new(bv.shape().to_vec(), gb)?),
            ]
        }
        Op::Scale(_, c) => {
            let c = T::from_f64(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Exp(_) => vec![Some(g.zip_map(out, |gi, y| gi * y)?)],
        Op::Log(a) => vec![Some(g.zip_map(val(*a), |gi, x| gi / x)?)],
        Op::Relu(a) => vec![Some(g.zip_map(val(*a), |gi, x| {
            if x.primal() > 0.0 {
                gi
            } else {
                T::zero()
            }
        })?)],
        Op::Tanh(_) => vec![Some(g.zip_map(out, |gi, y| gi * (T::one() - y * y))?)],
        Op::Sqrt(_) => vec![Some(g.zip_map(out, |gi, y| {
            // subgradient 0 at the kink keeps degenerate batches finite
            if y.primal() == 0.0 {
                T::zero()
            } else {
                gi / (T::from_f64(2.0) * y)
            }
        })?)],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = vec![T::zero(); m * k];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            let mut gb = vec![T::zero(); k * n];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let dst = &mut gb[p * n..(p + 1) * n];
                    for j in 0..n {
                        dst[j] += aip * grow[j];
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![m, k], ga)?),
                Some(Tensor::new(vec![k, n], gb)?),
            ]
        }
        Op::Conv2d { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (gx, gw, gb) = conv2d_backward(xv, wv, g);
            vec![Some(gx), Some(gw), Some(Tensor::new(val(*b).shape().to_vec(), gb)?)]
        }
        Op::MaxPool2d { x, argmax } | Op::MaxAxis0 { x, argmax } => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += gd[o];
            }
            vec![Some(Tensor::new(xv.shape().to_vec(), gx)?)]
        }
        Op::Concat(ids) => {
            let rows = gd.len() / out.shape().last().copied().unwrap_or(1).max(1);
            let total = *out.shape().last().unwrap_or(&1);
            let mut offset = 0;
            let mut res = Vec::with_capacity(ids.len());
            for &id in ids {
                let v = val(id);
                let w = *v.shape().last().unwrap_or(&1);
                let mut part = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    part.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                }
                offset += w;
                res.push(Some(Tensor::new(v.shape().to_vec(), part)?));
            }
            res
        }
        Op::MeanAxis0(a) => {
            let av = val(*a);
            let rows = av.shape()[0];
            let inv = T::from_f64(1.0 / rows as f64);
            let cols = gd.len();
            let gx: Vec<T> = (0..rows * cols).map(|i| gd[i % cols] * inv).collect();
            vec![Some(Tensor::new(av.shape().to_vec(), gx)?)]
        }
        Op::VarAxis0(a) => {
            let av = val(*a);
            let rows = av.shape()[0];
            let cols = gd.len();
            let mean = column_mean(av.data(), rows, cols);
            let c = T::from_f64(2.0 / rows as f64);
            let gx: Vec<T> = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| gd[i % cols] * c * (x - mean[i % cols]))
                .collect();
            vec![Some(Tensor::new(av.shape().to_vec(), gx)?)]
        }
        Op::SumAll(a) => vec![Some(Tensor::full(val(*a).shape().to_vec(), gd[0]))],
        Op::MeanAll(a) => {
            let av = val(*a);
            let s = gd[0] * T::from_f64(1.0 / av.numel() as f64);
            vec![Some(Tensor::full(av.shape().to_vec(), s))]
        }
        Op::Norm(a) => {
            let nrm = out.data()[0];
            let av = val(*a);
            if nrm.primal() == 0.0 {
                vec![Some(Tensor::zeros(av.shape().to_vec()))]
            } else {
                let s = gd[0] / nrm;
                vec![Some(av.map(|x| x * s))]
            }
        }
        Op::Softmax(_) => {
            let cols = *out.shape().last().unwrap_or(&1);
            let yd = out.data();
            let mut gx = vec![T::zero(); yd.len()];
            for r in 0..yd.len() / cols.max(1) {
                let s = r * cols;
                let mut dot = T::zero();
                for j in 0..cols {
                    dot += gd[s + j] * yd[s + j];
                }
                for j in 0..cols {
                    gx[s + j] = yd[s + j] * (gd[s + j] - dot);
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Op::LogSoftmax(_) => {
            let cols = *out.shape().last().unwrap_or(&1);
            let yd = out.data();
            let mut gx = vec![T::zero(); yd.len()];
            for r in 0..yd.len() / cols.max(1) {
                let s = r * cols;
                let mut total = T::zero();
                for j in 0..cols {
                    total += gd[s + j];
                }
                for j in 0..cols {
                    gx[s + j] = gd[s + j] - yd[s + j].exp() * total;
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Op::Reshape(a) => vec![Some(g.clone().reshape(val(*a).shape().to_vec())?)],
    })
}

fn column_mean<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut mean = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c];
        }
    }
    let inv = T::from_f64(1.0 / rows as f64);
    for m in &mut mean {
        *m *= inv;
    }
    mean
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * co * h * wd];
    for s in 0..n {
        for o in 0..co {
            let dst = &mut out[(s * co + o) * h * wd..(s * co + o + 1) * h * wd];
            for v in dst.iter_mut() {
                *v = bd[o];
            }
            for c in 0..ci {
                let src = &xd[(s * ci + c) * h * wd..(s * ci + c + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        for y in 0..h {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (wd as isize - dx).min(wd as isize).max(0) as usize;
                            let srow = &src[yy as usize * wd..(yy as usize + 1) * wd];
                            let drow = &mut dst[y * wd..(y + 1) * wd];
                            for xx in x0..x1 {
                                drow[xx] += wv * srow[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], out).expect("conv2d output shape")
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wdat.len()];
    let mut gb = vec![T::zero(); co];
    for s in 0..n {
        for o in 0..co {
            let gplane = &gd[(s * co + o) * h * wd..(s * co + o + 1) * h * wd];
            for &v in gplane {
                gb[o] += v;
            }
            for c in 0..ci {
                let base = (s * ci + c) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * ci + c) * k + ky) * k + kx;
                        let wv = wdat[widx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let mut acc = T::zero();
                        for y in 0..h {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (wd as isize - dx).min(wd as isize).max(0) as usize;
                            for xx in x0..x1 {
                                let src = base + yy as usize * wd + (xx as isize + dx) as usize;
                                let gv = gplane[y * wd + xx];
                                acc += gv * xd[src];
                                gx[src] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("conv2d grad x"),
        Tensor::new(w.shape().to_vec(), gw).expect("conv2d grad w"),
        gb,
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: &Var<'t, T>, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize, usize)> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let (na, nb) = (ad.len(), bd.len());
        let n = na.max(nb);
        let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        Ok((Tensor::new(shape, data)?, self.id, other.id))
    }

    /// Elementwise sum; one operand may broadcast over the other's leading axes.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.tape.push(v, Op::Add(a, b)))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.tape.push(v, Op::Mul(a, b)))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(other, "div", |x, y| x / y)?;
        Ok(self.tape.push(v, Op::Div(a, b)))
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let s = T::from_f64(c);
        self.unary(Op::Scale(self.id, c), |x| x * s)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let s = T::from_f64(c);
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|x| !(x.primal() > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {}", bad.primal())));
        }
        Ok(self.unary(Op::Log(self.id), |x| x.ln()))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| if x.primal() > 0.0 { x } else { T::zero() })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn sqrt(&self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|x| x.primal() < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {}", bad.primal())));
        }
        Ok(self.unary(Op::Sqrt(self.id), |x| x.sqrt()))
    }

    /// Forward-identical copy through which no gradient (and no tangent) flows.
    pub fn stop_gradient(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.detach());
        self.tape.push(v, Op::Detach)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let dst = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        dst[j] += aip * brow[j];
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    /// Affine map `x W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add(bias)
    }

    /// Same-padded stride-1 convolution: `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]` (odd k), `b: [Co]`.
    pub fn conv2d(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let v = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
            if sx.len() != 4
                || sw.len() != 4
                || sw[1] != sx[1]
                || sw[2] != sw[3]
                || sw[2] % 2 == 0
                || sb != [sw[0]]
            {
                return Err(shape_err("conv2d", sx, sw));
            }
            conv2d_forward(&x, &w, &b)
        };
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
        ))
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]` (odd trailing rows/cols dropped).
    pub fn maxpool2d(&self) -> Result<Var<'t, T>> {
        let (v, argmax) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                return Err(Error::contract(format!("maxpool2d on shape {s:?}")));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            let xd = x.data();
            let mut out = Vec::with_capacity(n * c * ho * wo);
            let mut argmax = Vec::with_capacity(n * c * ho * wo);
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = base + 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                            if xd[idx].primal() > xd[best].primal() {
                                best = idx;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::new(vec![n, c, ho, wo], out)?, argmax)
        };
        Ok(self.tape.push(v, Op::MaxPool2d { x: self.id, argmax }))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of an empty list"))?;
        let lead = {
            let s = first.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", &first.shape(), &s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, data)?;
        Ok(first
            .tape
            .push(v, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    fn axis0_dims(&self, name: &str) -> Result<(usize, usize, Vec<usize>)> {
        let s = self.shape();
        if s.is_empty() || s[0] == 0 {
            return Err(Error::contract(format!("{name} needs a non-empty leading axis, got {s:?}")));
        }
        let cols = s[1..].iter().product();
        Ok((s[0], cols, s[1..].to_vec()))
    }

    /// Mean over the leading (batch) axis.
    pub fn mean_axis0(&self) -> Result<Var<'t, T>> {
        let (rows, cols, rest) = self.axis0_dims("mean_axis0")?;
        let mean = column_mean(self.value().data(), rows, cols);
        Ok(self.tape.push(Tensor::new(rest, mean)?, Op::MeanAxis0(self.id)))
    }

    /// Population variance over the leading (batch) axis.
    pub fn var_axis0(&self) -> Result<Var<'t, T>> {
        let (rows, cols, rest) = self.axis0_dims("var_axis0")?;
        let var = {
            let x = self.value();
            let xd = x.data();
            let mean = column_mean(xd, rows, cols);
            let mut var = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    let d = xd[r * cols + c] - mean[c];
                    var[c] += d * d;
                }
            }
            let inv = T::from_f64(1.0 / rows as f64);
            var.iter_mut().for_each(|v| *v *= inv);
            var
        };
        Ok(self.tape.push(Tensor::new(rest, var)?, Op::VarAxis0(self.id)))
    }

    /// Max over the leading (batch) axis; ties resolve to the first row.
    pub fn max_axis0(&self) -> Result<Var<'t, T>> {
        let (rows, cols, rest) = self.axis0_dims("max_axis0")?;
        let (out, argmax) = {
            let x = self.value();
            let xd = x.data();
            let mut argmax: Vec<usize> = (0..cols).collect();
            for r in 1..rows {
                for c in 0..cols {
                    if xd[r * cols + c].primal() > xd[argmax[c]].primal() {
                        argmax[c] = r * cols + c;
                    }
                }
            }
            (argmax.iter().map(|&i| xd[i]).collect::<Vec<_>>(), argmax)
        };
        Ok(self
            .tape
            .push(Tensor::new(rest, out)?, Op::MaxAxis0 { x: self.id, argmax }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let s = {
            let v = self.value();
            v.sum() * T::from_f64(1.0 / v.numel().max(1) as f64)
        };
        self.tape.push(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(&self) -> Var<'t, T> {
        let s = self
            .value()
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt();
        self.tape.push(Tensor::scalar(s), Op::Norm(self.id))
    }

    fn last_axis_rows(&self, name: &str) -> Result<usize> {
        match self.shape().last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::contract(format!("{name} needs a non-empty last axis"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let cols = self.last_axis_rows("softmax")?;
        let v = {
            let x = self.value();
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let m = row.iter().fold(row[0], |a, &b| a.max_primal(b));
                let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                let z = e.iter().fold(T::zero(), |a, &b| a + b);
                out.extend(e.into_iter().map(|v| v / z));
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.tape.push(v, Op::Softmax(self.id)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let cols = self.last_axis_rows("log_softmax")?;
        let v = {
            let x = self.value();
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let m = row.iter().fold(row[0], |a, &b| a.max_primal(b));
                let z = row.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
                let lse = m + z.ln();
                out.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.tape.push(v, Op::LogSoftmax(self.id)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.value().clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let n = *s.first().ok_or_else(|| Error::contract("flatten of a scalar"))?;
        let rest = s[1..].iter().product::<usize>();
        self.reshape(vec![n, rest])
    }
}
