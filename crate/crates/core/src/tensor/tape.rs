use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is always in
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
        shared_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Expand {
        a: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Pick {
        a: usize,
        idx: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_shared(Arc::new(value), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf_shared(Arc::new(value), false)
    }

    /// Leaf backed by shared storage, so parameters are bound without copying.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_arc(value, requires_grad, Op::Leaf)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable
    /// from `loss`. Calling it again without [`Tape::zero_grad`] adds to the
    /// stored gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, id, &node.op, g, &mut grads, &mut leaf_grads);
        }

        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b || (b.len() <= a.len() && a.ends_with(b)) {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows(x: &[f64], outer: usize, n: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                // Fully masked row: leave zeros.
                continue;
            }
            let sum: f64 = (0..n).map(|j| (x[at(j)] - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                for j in 0..n {
                    out[at(j)] = x[at(j)] - lse;
                }
            } else {
                for j in 0..n {
                    out[at(j)] = (x[at(j)] - max).exp() / sum;
                }
            }
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Clamped so the result stays representable inside (0, 1).
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn propagate(
    nodes: &[Node],
    id: usize,
    op: &Op,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
) {
    let mut send = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
        if nodes[target].requires_grad {
            let n = nodes[target].value.numel();
            let buf = grads[target].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        }
    };
    let out = &nodes[id].value;
    match op {
        Op::Leaf => leaf_grads.push((id, g)),
        Op::MatMul {
            a,
            b,
            batch,
            p,
            q,
            r,
            shared_b,
        } => {
            let (p, q, r) = (*p, *q, *r);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            send(*a, &mut |da| {
                for i in 0..*batch {
                    let b_off = if *shared_b { 0 } else { i * q * r };
                    gemm_nt(
                        &g[i * p * r..(i + 1) * p * r],
                        &bv.data()[b_off..b_off + q * r],
                        &mut da[i * p * q..(i + 1) * p * q],
                        p,
                        r,
                        q,
                    );
                }
            });
            send(*b, &mut |db| {
                if *shared_b {
                    gemm_tn(av.data(), &g, db, batch * p, q, r);
                } else {
                    for i in 0..*batch {
                        gemm_tn(
                            &av.data()[i * p * q..(i + 1) * p * q],
                            &g[i * p * r..(i + 1) * p * r],
                            &mut db[i * q * r..(i + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            });
        }
        Op::Add { a, b } => {
            send(*a, &mut |da| {
                for (d, x) in da.iter_mut().zip(&g) {
                    *d += x;
                }
            });
            send(*b, &mut |db| {
                let period = db.len();
                for chunk in g.chunks_exact(period) {
                    for (d, x) in db.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
            });
        }
        Op::Mul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let period = bv.numel();
            send(*a, &mut |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * bv.data()[i % period];
                }
            });
            send(*b, &mut |db| {
                for (i, x) in g.iter().enumerate() {
                    db[i % period] += x * av.data()[i];
                }
            });
        }
        Op::Scale { a, factor } => send(*a, &mut |da| {
            for (d, x) in da.iter_mut().zip(&g) {
                *d += x * factor;
            }
        }),
        Op::Relu { a } => send(*a, &mut |da| {
            for ((d, x), y) in da.iter_mut().zip(&g).zip(out.data()) {
                if *y > 0.0 {
                    *d += x;
                }
            }
        }),
        Op::Sigmoid { a } => send(*a, &mut |da| {
            for ((d, x), y) in da.iter_mut().zip(&g).zip(out.data()) {
                *d += x * y * (1.0 - y);
            }
        }),
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            send(*a, &mut |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            da[at(j)] += y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            send(*a, &mut |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let s: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            da[at(j)] += g[at(j)] - y[at(j)].exp() * s;
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = &nodes[*gamma].value;
            let d = gv.numel();
            send(*x, &mut |dx| {
                for (row, &rs) in rstd.iter().enumerate() {
                    let span = row * d..(row + 1) * d;
                    let gr = &g[span.clone()];
                    let xh = &xhat[span.clone()];
                    let dy: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let mean_dy = dy.iter().sum::<f64>() / d as f64;
                    let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, dyi), xhi) in dx[span].iter_mut().zip(&dy).zip(xh) {
                        *o += rs * (dyi - mean_dy - xhi * mean_dy_xh);
                    }
                }
            });
            send(*gamma, &mut |dg| {
                for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((o, a), b) in dg.iter_mut().zip(gr).zip(xh) {
                        *o += a * b;
                    }
                }
            });
            send(*beta, &mut |db| {
                for gr in g.chunks_exact(d) {
                    for (o, a) in db.iter_mut().zip(gr) {
                        *o += a;
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &input in inputs {
                let len = nodes[input].value.shape()[*axis];
                send(input, &mut |di| {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, x) in di[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *d += x;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let in_shape = nodes[*a].value.shape();
            let (outer, total, inner) = axis_split(in_shape, *axis);
            let len = out.shape()[*axis];
            send(*a, &mut |da| {
                for o in 0..outer {
                    let dst =
                        &mut da[(o * total + start) * inner..(o * total + start + len) * inner];
                    for (d, x) in dst
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += x;
                    }
                }
            });
        }
        Op::Reshape { a } => send(*a, &mut |da| {
            for (d, x) in da.iter_mut().zip(&g) {
                *d += x;
            }
        }),
        Op::Permute { a, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (back, _) = permute_data(&g, out.shape(), &inverse);
            send(*a, &mut |da| {
                for (d, x) in da.iter_mut().zip(&back) {
                    *d += x;
                }
            });
        }
        Op::Expand { a } => send(*a, &mut |da| {
            let period = da.len();
            for chunk in g.chunks_exact(period.max(1)) {
                for (d, x) in da.iter_mut().zip(chunk) {
                    *d += x;
                }
            }
        }),
        Op::Gather { table, ids } => {
            let d = out.last_dim();
            send(*table, &mut |dt| {
                for (row, &id) in ids.iter().enumerate() {
                    for (t, x) in dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                    {
                        *t += x;
                    }
                }
            });
        }
        Op::Pick { a, idx } => {
            let c = nodes[*a].value.last_dim();
            send(*a, &mut |da| {
                for (row, (&j, x)) in idx.iter().zip(&g).enumerate() {
                    da[row * c + j] += x;
                }
            });
        }
        Op::Sum { a } => send(*a, &mut |da| {
            for d in da.iter_mut() {
                *d += g[0];
            }
        }),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let c = nodes[*logits].value.last_dim();
            let scale = g[0] / *count as f64;
            send(*logits, &mut |dl| {
                for (row, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let span = row * c..(row + 1) * c;
                    for (d, p) in dl[span.clone()].iter_mut().zip(&probs[span]) {
                        *d += p * scale;
                    }
                    dl[row * c + t] -= scale;
                }
            });
        }
    }
}

// Fallible ops cannot implement `std::ops`, so `add` and `mul` are methods.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        (*self.tape.value(self.id)).clone()
    }

    /// Runs `f` on the forward value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Accumulated gradient; `None` until a backward pass reaches this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn arc(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    /// Batched matrix product: `[..., p, q] · [..., q, r]`. A rank-2 right
    /// operand is shared across all leading dimensions of the left one.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.arc();
        let b = other.arc();
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || Error::shape("matmul", format!("{sa:?} vs {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut c = vec![0.0; batch * p * r];
        if shared_b {
            gemm(a.data(), b.data(), &mut c, batch * p, q, r);
        } else {
            for i in 0..batch {
                gemm(
                    &a.data()[i * p * q..(i + 1) * p * q],
                    &b.data()[i * q * r..(i + 1) * q * r],
                    &mut c[i * p * r..(i + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([p, r]);
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, c)?,
            req,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                p,
                q,
                r,
                shared_b,
            },
        ))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let a = self.arc();
        let b = other.arc();
        suffix_broadcast(name, a.shape(), b.shape())?;
        let period = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % period]))
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(a.shape().to_vec(), data)?, req, op))
    }

    /// `self + other`; `other` may match a trailing suffix of `self`'s shape.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Add {
            a: self.id,
            b: other.id,
        };
        self.elementwise(other, "add", |x, y| x + y, op)
    }

    /// Elementwise product with the same suffix broadcasting as [`Var::add`].
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Mul {
            a: self.id,
            b: other.id,
        };
        self.elementwise(other, "mul", |x, y| x * y, op)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let v = self.arc();
        let data = v.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Scale { a: self.id, factor })
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.arc();
        let data = v.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Relu { a: self.id })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.arc();
        let data = v.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Sigmoid { a: self.id })
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Arc<Tensor>> {
        let v = self.arc();
        if axis >= v.rank() {
            return Err(Error::shape(
                op,
                format!("axis {axis} for shape {:?}", v.shape()),
            ));
        }
        Ok(v)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.check_axis("softmax", axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let data = softmax_rows(v.data(), outer, n, inner, false);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::Softmax { a: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.check_axis("log_softmax", axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let data = softmax_rows(v.data(), outer, n, inner, true);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::LogSoftmax { a: self.id, axis }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.arc();
        let (gv, bv) = (gamma.arc(), beta.arc());
        let d = x.last_dim();
        if x.rank() == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    x.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for (row, xr) in x.data().chunks_exact(d).enumerate() {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[row] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[row * d + j] = h;
                out[row * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let req = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            req,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.check_axis("slice", axis)?;
        let (outer, total, inner) = axis_split(v.shape(), axis);
        if len == 0 || start + len > total {
            return Err(Error::shape(
                "slice",
                format!(
                    "[{start}, {}) of axis {axis} in {:?}",
                    start + len,
                    v.shape()
                ),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &v.data()[(o * total + start) * inner..(o * total + start + len) * inner],
            );
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::new(shape, data)?,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.arc();
        let t = (*v).clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape { a: self.id }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.arc();
        let mut seen = vec![false; v.rank()];
        let valid = perm.len() == v.rank()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} for {:?}", v.shape()),
            ));
        }
        let (data, shape) = permute_data(v.data(), v.shape(), perm);
        Ok(self.unary(
            Tensor::new(shape, data)?,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.with_value(Tensor::rank);
        if rank < 2 {
            return Err(Error::shape("transpose", format!("rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Repeats the whole tensor along a new leading axis of size `times`.
    pub fn expand(self, times: usize) -> Result<Var<'t>> {
        if times == 0 {
            return Err(Error::shape("expand", "zero repetitions"));
        }
        let v = self.arc();
        let mut data = Vec::with_capacity(v.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        Ok(self.unary(Tensor::new(shape, data)?, Op::Expand { a: self.id }))
    }

    /// Row lookup into a `[rows, d]` table; result is `[ids.len(), d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let v = self.arc();
        if v.rank() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("table {:?}", v.shape()),
            ));
        }
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather_rows", format!("row {id} of {rows}")));
            }
            data.extend_from_slice(v.row(id));
        }
        Ok(self.unary(
            Tensor::new([ids.len(), d], data)?,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks one element per row of the last axis; result has one entry per row.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.arc();
        let c = v.last_dim();
        let rows = v.numel() / c.max(1);
        if idx.len() != rows || idx.iter().any(|&j| j >= c) {
            return Err(Error::shape(
                "pick",
                format!("{} indices into {:?}", idx.len(), v.shape()),
            ));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| v.data()[r * c + j])
            .collect();
        Ok(self.unary(
            Tensor::new([rows], data)?,
            Op::Pick {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|t| t.data().iter().sum());
        self.unary(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    /// Mean negative log-likelihood of `targets` under softmax(logits) over
    /// rows of the last axis, skipping rows whose target is `ignore_index`.
    pub fn cross_entropy(self, targets: &[u32], ignore_index: u32) -> Result<Var<'t>> {
        let v = self.arc();
        let c = v.last_dim();
        let rows = v.numel() / c.max(1);
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), v.shape()),
            ));
        }
        let mut parsed = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                parsed.push(None);
            } else if (t as usize) < c {
                parsed.push(Some(t as usize));
            } else {
                return Err(Error::TargetOutOfRange {
                    target: t as usize,
                    classes: c,
                });
            }
        }
        let count = parsed.iter().flatten().count();
        if count == 0 {
            return Err(Error::NoContributingPositions);
        }
        let probs = softmax_rows(v.data(), rows, c, 1, false);
        let mut loss = 0.0;
        for (row, t) in parsed.iter().enumerate() {
            if let Some(t) = t {
                let xr = v.row(row);
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + xr.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - xr[*t];
            }
        }
        loss /= count as f64;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: parsed,
                probs,
                count,
            },
        ))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let values: Vec<Arc<Tensor>> = parts.iter().map(Var::arc).collect();
    let base = values[0].shape();
    if axis >= base.len() {
        return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
    }
    for v in &values[1..] {
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter()
                .zip(base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{base:?} vs {s:?} on axis {axis}"),
            ));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    let req = parts.iter().any(Var::requires_grad);
    Ok(first.tape.push(
        Tensor::new(shape, data)?,
        req,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    ))
}
