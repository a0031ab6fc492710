use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, COSINE_EPS};
use super::Tensor;
use crate::error::{MerlinError, Result};

/// Define-by-run record of executed primitives.
///
/// Node ids are assigned in execution order, so the node list is always a
/// valid topological order and the reverse pass is a single backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Relu { x: usize },
    Dropout { x: usize, scale: Vec<f64> },
    ConcatLast { parts: Vec<usize> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Square { x: usize },
    Abs { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    BroadcastLeading { x: usize, copies: usize },
    GatherExpand { table: usize, index: Vec<usize>, repeat: usize },
    MeanAxis1 { x: usize },
    InterleaveRows { a: usize, b: usize },
    CosineMatrix { x: usize },
    PairedCrossEntropy { s: usize, partner: Vec<usize>, tau: f64, probs: Vec<f64> },
    LogSoftmaxLast { x: usize },
    FaultySquare { x: usize },
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    /// Gradient for `var`, or zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn contains(&self, var: &Var<'_>) -> bool {
        self.by_leaf.contains_key(&var.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        self.push(tensor.clone(), Op::Leaf, requires_grad)
    }

    /// Registers a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.clone(), Op::Leaf, true)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor, Op::Leaf, false)
    }

    /// Number of trainable leaves currently on the tape.
    pub fn trainable_leaf_count(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(MerlinError::Usage("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(MerlinError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.by_leaf
                    .insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

fn accumulate<F>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: F)
where
    F: FnOnce(&mut [f64]),
{
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = xv.numel() / k;
            accumulate(nodes, grads, *x, |dx| {
                kernels::matmul_bt_acc(g, wv.data(), m, k, n, dx)
            });
            accumulate(nodes, grads, *w, |dw| {
                kernels::matmul_at_acc(xv.data(), g, m, k, n, dw)
            });
            accumulate(nodes, grads, *b, |db| {
                for row in g.chunks_exact(n) {
                    add_into(db, row);
                }
            });
        }
        Op::Relu { x } => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |dx| {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        Op::Dropout { x, scale } => {
            accumulate(nodes, grads, *x, |dx| {
                for ((d, &gi), &s) in dx.iter_mut().zip(g).zip(scale) {
                    *d += gi * s;
                }
            });
        }
        Op::ConcatLast { parts } => {
            let total = out.last_dim();
            let rows = out.numel() / total;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.last_dim();
                accumulate(nodes, grads, p, |dp| {
                    for r in 0..rows {
                        add_into(
                            &mut dp[r * width..(r + 1) * width],
                            &g[r * total + offset..r * total + offset + width],
                        );
                    }
                });
                offset += width;
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |da| add_into(da, g));
            accumulate(nodes, grads, *b, |db| add_into(db, g));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, |da| add_into(da, g));
            accumulate(nodes, grads, *b, |db| {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d -= gi;
                }
            });
        }
        Op::Mul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(nodes, grads, *a, |da| {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += gi * bi;
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += gi * ai;
                }
            });
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi * c;
                }
            });
        }
        Op::Square { x } => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |dx| {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *d += 2.0 * xi * gi;
                }
            });
        }
        Op::FaultySquare { x } => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |dx| {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *d += 3.0 * xi * gi;
                }
            });
        }
        Op::Abs { x } => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |dx| {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    // subgradient 0 at the kink
                    if *xi > 0.0 {
                        *d += gi;
                    } else if *xi < 0.0 {
                        *d -= gi;
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean { x } => {
            let n = nodes[*x].value.numel() as f64;
            accumulate(nodes, grads, *x, |dx| {
                dx.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, |dx| add_into(dx, g));
        }
        Op::BroadcastLeading { x, copies } => {
            let inner = nodes[*x].value.numel();
            accumulate(nodes, grads, *x, |dx| {
                for c in 0..*copies {
                    add_into(dx, &g[c * inner..(c + 1) * inner]);
                }
            });
        }
        Op::GatherExpand {
            table,
            index,
            repeat,
        } => {
            let d = nodes[*table].value.last_dim();
            accumulate(nodes, grads, *table, |dt| {
                for (b, &row) in index.iter().enumerate() {
                    for r in 0..*repeat {
                        let src = (b * repeat + r) * d;
                        add_into(&mut dt[row * d..(row + 1) * d], &g[src..src + d]);
                    }
                }
            });
        }
        Op::MeanAxis1 { x } => {
            let shape = nodes[*x].value.shape();
            let (b, v, f) = (shape[0], shape[1], shape[2]);
            let inv = 1.0 / v as f64;
            accumulate(nodes, grads, *x, |dx| {
                for bi in 0..b {
                    let g_row = &g[bi * f..(bi + 1) * f];
                    for vi in 0..v {
                        let dst = &mut dx[(bi * v + vi) * f..(bi * v + vi + 1) * f];
                        for (d, gi) in dst.iter_mut().zip(g_row) {
                            *d += gi * inv;
                        }
                    }
                }
            });
        }
        Op::InterleaveRows { a, b } => {
            let p = nodes[*a].value.last_dim();
            let rows = nodes[*a].value.numel() / p;
            accumulate(nodes, grads, *a, |da| {
                for r in 0..rows {
                    add_into(&mut da[r * p..(r + 1) * p], &g[2 * r * p..(2 * r + 1) * p]);
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for r in 0..rows {
                    add_into(&mut db[r * p..(r + 1) * p], &g[(2 * r + 1) * p..(2 * r + 2) * p]);
                }
            });
        }
        Op::CosineMatrix { x } => {
            let xv = &nodes[*x].value;
            let p = xv.last_dim();
            let n = xv.numel() / p;
            let data = xv.data();
            let norms: Vec<f64> = data
                .chunks_exact(p)
                .map(|r| kernels::dot(r, r).sqrt())
                .collect();
            let s = out.data();
            accumulate(nodes, grads, *x, |dx| {
                for i in 0..n {
                    let ai = &data[i * p..(i + 1) * p];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let aj = &data[j * p..(j + 1) * p];
                        let denom = norms[i] * norms[j];
                        // s_ij depends on both rows; both partials are added here.
                        let dst_i = &mut dx[i * p..(i + 1) * p];
                        if denom > COSINE_EPS {
                            let sij = s[i * n + j];
                            let ci = sij / (norms[i] * norms[i]);
                            for k in 0..p {
                                dst_i[k] += gij * (aj[k] / denom - ci * ai[k]);
                            }
                        } else {
                            for k in 0..p {
                                dst_i[k] += gij * aj[k] / COSINE_EPS;
                            }
                        }
                        let dst_j = &mut dx[j * p..(j + 1) * p];
                        if denom > COSINE_EPS {
                            let sij = s[i * n + j];
                            let cj = sij / (norms[j] * norms[j]);
                            for k in 0..p {
                                dst_j[k] += gij * (ai[k] / denom - cj * aj[k]);
                            }
                        } else {
                            for k in 0..p {
                                dst_j[k] += gij * ai[k] / COSINE_EPS;
                            }
                        }
                    }
                }
            });
        }
        Op::PairedCrossEntropy {
            s,
            partner,
            tau,
            probs,
        } => {
            let n = partner.len();
            let scale = g[0] / (n as f64 * tau);
            accumulate(nodes, grads, *s, |ds| {
                for i in 0..n {
                    for k in 0..n {
                        if k == i {
                            continue;
                        }
                        let target = if k == partner[i] { 1.0 } else { 0.0 };
                        ds[i * n + k] += scale * (probs[i * n + k] - target);
                    }
                }
            });
        }
        Op::LogSoftmaxLast { x } => {
            let f = out.last_dim();
            accumulate(nodes, grads, *x, |dx| {
                for ((d_row, g_row), o_row) in dx
                    .chunks_exact_mut(f)
                    .zip(g.chunks_exact(f))
                    .zip(out.data().chunks_exact(f))
                {
                    let g_sum: f64 = g_row.iter().sum();
                    for ((d, gi), lo) in d_row.iter_mut().zip(g_row).zip(o_row) {
                        *d += gi - lo.exp() * g_sum;
                    }
                }
            });
        }
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MerlinError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// `out[.., j] = Σ_k x[.., k]·w[k, j] + b[j]`.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = w.value();
        let bv = b.value();
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(MerlinError::Dimension(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        if bv.shape() != [n] {
            return Err(MerlinError::Dimension(format!(
                "linear: bias {:?} does not match weight {:?}",
                bv.shape(),
                wv.shape()
            )));
        }
        let m = xv.numel() / k;
        let mut data = vec![0.0; m * n];
        kernels::matmul(xv.data(), wv.data(), m, k, n, &mut data);
        for row in data.chunks_exact_mut(n) {
            add_into(row, bv.data());
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu { x: self.id })
    }

    /// Inverted dropout. Eval mode and `p == 0` return `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, train: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(MerlinError::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value();
        let scale: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(value, Op::Dropout { x: self.id, scale }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, v, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, v, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, v, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale { x: self.id, c })
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square { x: self.id })
    }

    /// Squares with a deliberately wrong derivative (3x instead of 2x).
    /// Exists only so gradient checking can prove it catches a broken rule.
    #[doc(hidden)]
    pub fn faulty_square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::FaultySquare { x: self.id })
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs { x: self.id })
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let xv = self.value();
        let v = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        self.unary(v, Op::Mean { x: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = Tensor::new(shape.to_vec(), self.value().data().to_vec())?;
        Ok(self.unary(v, Op::Reshape { x: self.id }))
    }

    /// Repeats the whole tensor `copies` times along a new leading axis.
    pub fn broadcast_leading(&self, copies: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let mut shape = vec![copies];
        shape.extend_from_slice(xv.shape());
        let data = xv.data().repeat(copies);
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(v, Op::BroadcastLeading { x: self.id, copies }))
    }

    /// Looks up rows of a `[rows, d]` table: `out[b, r, :] = table[index[b], :]`
    /// for every `r < repeat`.
    pub fn gather_expand(&self, index: &[usize], repeat: usize) -> Result<Var<'t>> {
        let tv = self.value();
        if tv.shape().len() != 2 {
            return Err(MerlinError::Dimension(format!(
                "gather_expand needs a 2-D table, got {:?}",
                tv.shape()
            )));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(index.len() * repeat * d);
        for &i in index {
            if i >= rows {
                return Err(MerlinError::Data(format!(
                    "embedding index {i} out of range for table with {rows} rows"
                )));
            }
            let row = &tv.data()[i * d..(i + 1) * d];
            for _ in 0..repeat {
                data.extend_from_slice(row);
            }
        }
        let v = Tensor::new(vec![index.len(), repeat, d], data)?;
        Ok(self.unary(
            v,
            Op::GatherExpand {
                table: self.id,
                index: index.to_vec(),
                repeat,
            },
        ))
    }

    /// Mean over axis 1 of a `[b, v, f]` tensor.
    pub fn mean_axis1(&self) -> Result<Var<'t>> {
        let xv = self.value();
        if xv.shape().len() != 3 {
            return Err(MerlinError::Dimension(format!(
                "mean_axis1 needs a 3-D tensor, got {:?}",
                xv.shape()
            )));
        }
        let (b, v, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = vec![0.0; b * f];
        for bi in 0..b {
            let dst = &mut data[bi * f..(bi + 1) * f];
            for vi in 0..v {
                add_into(dst, &xv.data()[(bi * v + vi) * f..(bi * v + vi + 1) * f]);
            }
            dst.iter_mut().for_each(|d| *d /= v as f64);
        }
        let out = Tensor::new(vec![b, f], data)?;
        Ok(self.unary(out, Op::MeanAxis1 { x: self.id }))
    }

    /// Interleaves the rows of two `[n, p]` tensors into `[2n, p]`:
    /// `a0, b0, a1, b1, ...`.
    pub fn interleave_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("interleave_rows", &a, &b)?;
        if a.shape().len() != 2 {
            return Err(MerlinError::Dimension(format!(
                "interleave_rows needs 2-D inputs, got {:?}",
                a.shape()
            )));
        }
        let (n, p) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(2 * n * p);
        for r in 0..n {
            data.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&b.data()[r * p..(r + 1) * p]);
        }
        let v = Tensor::new(vec![2 * n, p], data)?;
        Ok(self.binary(other, v, Op::InterleaveRows { a: self.id, b: other.id }))
    }

    /// Pairwise cosine similarity of the rows of an `[n, p]` tensor.
    pub fn cosine_matrix(&self) -> Result<Var<'t>> {
        let xv = self.value();
        if xv.shape().len() != 2 {
            return Err(MerlinError::Dimension(format!(
                "cosine_matrix needs a 2-D input, got {:?}",
                xv.shape()
            )));
        }
        let (n, p) = (xv.shape()[0], xv.shape()[1]);
        let rows: Vec<&[f64]> = xv.data().chunks_exact(p).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = kernels::cosine_sim(rows[i], rows[j]);
            }
        }
        let v = Tensor::new(vec![n, n], data)?;
        Ok(self.unary(v, Op::CosineMatrix { x: self.id }))
    }

    /// Mean over rows `i` of `−log(exp(s[i,p(i)]/τ) / Σ_{k≠i} exp(s[i,k]/τ))`,
    /// where `p` is the `partner` map and `self` is an `[n, n]` similarity matrix.
    pub fn paired_cross_entropy(&self, partner: &[usize], tau: f64) -> Result<Var<'t>> {
        let sv = self.value();
        let n = partner.len();
        if sv.shape() != [n, n] {
            return Err(MerlinError::Dimension(format!(
                "paired_cross_entropy: similarity {:?} vs {n} partners",
                sv.shape()
            )));
        }
        if !(tau > 0.0) {
            return Err(MerlinError::Config(format!("temperature must be > 0, got {tau}")));
        }
        let mut probs = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let p = partner[i];
            if p >= n || p == i {
                return Err(MerlinError::Usage(format!("invalid partner {p} for row {i}")));
            }
            let row = &sv.data()[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&k| k != i)
                .map(|k| row[k] / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in (0..n).filter(|&k| k != i) {
                let e = (row[k] / tau - max).exp();
                probs[i * n + k] = e;
                z += e;
            }
            for k in (0..n).filter(|&k| k != i) {
                probs[i * n + k] /= z;
            }
            let lse = max + z.ln();
            total += lse - row[p] / tau;
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.unary(
            v,
            Op::PairedCrossEntropy {
                s: self.id,
                partner: partner.to_vec(),
                tau,
                probs,
            },
        ))
    }

    pub fn log_softmax_last(&self) -> Var<'t> {
        let xv = self.value();
        let f = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(f) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.unary(v, Op::LogSoftmaxLast { x: self.id })
    }
}

/// Concatenates along the last axis; all leading dimensions must agree.
pub fn concat_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| MerlinError::Dimension("concat_last of zero parts".into()))?;
    if parts.len() == 1 {
        return Ok(*first);
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let lead = &values[0].shape()[..values[0].shape().len() - 1];
    for v in &values[1..] {
        if &v.shape()[..v.shape().len() - 1] != lead {
            return Err(MerlinError::Dimension(format!(
                "concat_last: {:?} incompatible with {:?}",
                values[0].shape(),
                v.shape()
            )));
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let rows = values[0].numel() / widths[0];
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let rg = parts.iter().any(Var::requires_grad);
    Ok(first.tape.push(
        Tensor::new(shape, data)?,
        Op::ConcatLast {
            parts: parts.iter().map(|p| p.id).collect(),
        },
        rg,
    ))
}
