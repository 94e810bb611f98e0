//! Tape-based reverse-mode automatic differentiation over f64 tensors.
//!
//! Tensors are immutable row-major buffers. A [`Tape`] records every op whose
//! inputs include at least one tracked tensor; [`Tape::backward`] replays the
//! record in reverse and accumulates gradients in a fixed order, so identical
//! programs produce bit-identical gradients. Ops on constants don't touch the
//! tape at all, which keeps pure inference allocation-light.

mod ops;
#[cfg(test)]
mod tests;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use ops::NodeOp;

/// Extension point for ops whose forward pass is cheaper to compute outside
/// the tensor language (e.g. rasterization). The implementor computes the
/// forward result itself, stashes whatever it needs, and answers `backward`
/// with one gradient buffer per declared input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Gradients in input order; `None` for inputs the op does not reach.
    fn backward(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
pub(crate) struct Storage {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
}

struct Node {
    op: NodeOp,
    inputs: Vec<Option<usize>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording context for reverse-mode differentiation. Cheap to clone.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.inner.borrow().nodes.len())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, op: NodeOp, inputs: Vec<Option<usize>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, inputs });
        inner.nodes.len() - 1
    }

    /// Create a tracked leaf tensor whose gradient `backward` will report.
    pub fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape("var", &data, shape)?;
        let node = self.push(NodeOp::Leaf, vec![]);
        Ok(Tensor {
            storage: Rc::new(Storage { shape: shape.to_vec(), data }),
            node: Some(node),
            tape: Some(self.clone()),
        })
    }

    /// Reverse sweep from a scalar loss. Gradients of every tracked tensor
    /// reachable from `loss` are accumulated; query them via [`Gradients::wrt`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let id = match (&loss.tape, loss.node) {
            (Some(t), Some(id)) if Rc::ptr_eq(&t.inner, &self.inner) => id,
            _ => {
                return Err(Error::Contract(
                    "backward: loss is not tracked on this tape".into(),
                ))
            }
        };
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let inner = self.inner.borrow();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        slots[id] = Some(vec![1.0]);
        for i in (0..=id).rev() {
            if slots[i].is_none() {
                continue;
            }
            let node = &inner.nodes[i];
            if matches!(node.op, NodeOp::Leaf) {
                continue;
            }
            let (lower, upper) = slots.split_at_mut(i);
            let g = upper[0].as_ref().unwrap();
            let contribs = node.op.backward(g);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (contrib, input) in contribs.into_iter().zip(&node.inputs) {
                let (Some(c), Some(j)) = (contrib, input) else { continue };
                match &mut lower[*j] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { slots, tape: Rc::downgrade(&self.inner) })
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    tape: std::rc::Weak<RefCell<TapeInner>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, as a constant tensor of `t`'s shape.
    /// Tensors the loss never reached (or from another tape) get zeros.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        let data = self.slot(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        Tensor::constant(data, t.shape().to_vec())
    }

    /// Borrowed view of the gradient buffer, `None` if the loss never
    /// reached `t`.
    pub fn slot(&self, t: &Tensor) -> Option<&[f64]> {
        let on_tape = t
            .tape
            .as_ref()
            .is_some_and(|tp| self.tape.upgrade().is_some_and(|s| Rc::ptr_eq(&s, &tp.inner)));
        if !on_tape {
            return None;
        }
        t.node
            .and_then(|id| self.slots.get(id))
            .and_then(|s| s.as_deref())
    }
}

/// Immutable f64 tensor. Cloning shares the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    storage: Rc<Storage>,
    node: Option<usize>,
    tape: Option<Tape>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<f64> = self.data().iter().take(4).copied().collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape(),
            if self.is_tracked() { "*" } else { "" },
            head,
            if self.len() > 4 { ".." } else { "" }
        )
    }
}

fn check_shape(op: &'static str, data: &[f64], shape: &[usize]) -> Result<()> {
    let n = ops::numel(shape);
    if n != data.len() {
        return Err(Error::dim(
            op,
            format!("shape {:?} implies {} elements, buffer has {}", shape, n, data.len()),
        ));
    }
    Ok(())
}

impl Tensor {
    fn constant(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor { storage: Rc::new(Storage { shape, data }), node: None, tape: None }
    }

    /// Untracked tensor from raw data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape("from_vec", &data, shape)?;
        Ok(Tensor::constant(data, shape.to_vec()))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], vec![])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; ops::numel(shape)], shape.to_vec())
    }

    /// (N, D) tensor from fixed-width rows.
    pub fn from_rows<const D: usize>(rows: &[[f64; D]]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * D);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::constant(data, vec![rows.len(), D])
    }

    pub fn shape(&self) -> &[usize] {
        &self.storage.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.storage.data
    }

    pub fn len(&self) -> usize {
        self.storage.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.data.is_empty()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor. Panics on misuse; this is an
    /// accessor for finished scalars, not an op.
    pub fn item(&self) -> f64 {
        assert!(self.len() == 1, "item() on tensor of shape {:?}", self.shape());
        self.storage.data[0]
    }

    /// Constant copy sharing the buffer; gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor { storage: Rc::clone(&self.storage), node: None, tape: None }
    }

    /// Common op plumbing: find the tape (if any input is tracked), verify
    /// all tracked inputs share it, record the node lazily.
    fn make(
        name: &'static str,
        inputs: &[&Tensor],
        data: Vec<f64>,
        shape: Vec<usize>,
        op: impl FnOnce() -> NodeOp,
    ) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            let Some(tp) = &t.tape else { continue };
            match tape {
                None => tape = Some(tp),
                Some(prev) if Rc::ptr_eq(&prev.inner, &tp.inner) => {}
                Some(_) => {
                    return Err(Error::Argument(format!(
                        "{name}: inputs belong to different tapes"
                    )))
                }
            }
        }
        let storage = Rc::new(Storage { shape, data });
        match tape {
            None => Ok(Tensor { storage, node: None, tape: None }),
            Some(tp) => {
                let ids = inputs.iter().map(|t| t.node).collect();
                let node = tp.push(op(), ids);
                Ok(Tensor { storage, node: Some(node), tape: Some(tp.clone()) })
            }
        }
    }

    fn bin_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
        if a.shape() == b.shape() {
            Ok(a.shape().to_vec())
        } else if a.len() == 1 && b.len() == 1 {
            // rank-0 vs rank-1 singleton: keep the more structured shape
            if a.shape().len() >= b.shape().len() {
                Ok(a.shape().to_vec())
            } else {
                Ok(b.shape().to_vec())
            }
        } else if b.len() == 1 {
            Ok(a.shape().to_vec())
        } else if a.len() == 1 {
            Ok(b.shape().to_vec())
        } else {
            Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} are incompatible", a.shape(), b.shape()),
            ))
        }
    }

    fn bin(
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce() -> NodeOp,
    ) -> Result<Tensor> {
        let shape = Tensor::bin_shape(name, a, b)?;
        let n = ops::numel(&shape);
        let (ad, bd) = (a.data(), b.data());
        let mut data = Vec::with_capacity(n);
        for j in 0..n {
            let av = if ad.len() == 1 { ad[0] } else { ad[j] };
            let bv = if bd.len() == 1 { bd[0] } else { bd[j] };
            data.push(f(av, bv));
        }
        Tensor::make(name, &[a, b], data, shape, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (al, bl) = (self.len(), other.len());
        Tensor::bin("add", self, other, |a, b| a + b, || NodeOp::Add { a_len: al, b_len: bl })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (al, bl) = (self.len(), other.len());
        Tensor::bin("sub", self, other, |a, b| a - b, || NodeOp::Sub { a_len: al, b_len: bl })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (Rc::clone(&self.storage), Rc::clone(&other.storage));
        Tensor::bin("mul", self, other, |a, b| a * b, || NodeOp::Mul { a, b })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (Rc::clone(&self.storage), Rc::clone(&other.storage));
        Tensor::bin("div", self, other, |a, b| a / b, || NodeOp::Div { a, b })
    }

    /// (m, k) x (k, n) -> (m, n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(), other.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let (a, b) = (Rc::clone(&self.storage), Rc::clone(&other.storage));
        Tensor::make("matmul", &[self, other], data, vec![m, n], || NodeOp::Matmul { a, b })
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(Rc<Storage>) -> NodeOp,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::make(name, &[self], data, self.shape().to_vec(), || {
            op(Rc::clone(&self.storage))
        })?;
        Ok(out)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.tanh()).collect();
        let storage = Rc::new(Storage { shape: self.shape().to_vec(), data });
        let y = Rc::clone(&storage);
        let out = Tensor::make("tanh", &[self], vec![], vec![], || NodeOp::Tanh { y })?;
        Ok(Tensor { storage, ..out })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |v| v.max(0.0), |x| NodeOp::Relu { x })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        let storage = Rc::new(Storage { shape: self.shape().to_vec(), data });
        let y = Rc::clone(&storage);
        let out = Tensor::make("sigmoid", &[self], vec![], vec![], || NodeOp::Sigmoid { y })?;
        Ok(Tensor { storage, ..out })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let storage = Rc::new(Storage { shape: self.shape().to_vec(), data });
        let y = Rc::clone(&storage);
        let out = Tensor::make("exp", &[self], vec![], vec![], || NodeOp::Exp { y })?;
        Ok(Tensor { storage, ..out })
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f64::ln, |x| NodeOp::Log { x })
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let name = if mean { "mean" } else { "sum" };
        if let Some(ax) = axis {
            if ax >= self.shape().len() {
                return Err(Error::dim(
                    name,
                    format!("axis {} out of range for shape {:?}", ax, self.shape()),
                ));
            }
        }
        let (data, shape) = ops::forward_reduce(self.data(), self.shape(), axis, mean);
        let x_shape = self.shape().to_vec();
        Tensor::make(name, &[self], data, shape, || NodeOp::Reduce { x_shape, axis, mean })
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.reduce(None, false)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), false)
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::dim("mean", "mean of an empty tensor".to_string()));
        }
        self.reduce(None, true)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), true)
    }

    fn norm(&self, name: &'static str, rows: bool, l2: bool) -> Result<Tensor> {
        if rows && self.shape().is_empty() {
            return Err(Error::dim(name, "row reduction needs rank >= 1".to_string()));
        }
        let (data, shape) = if l2 {
            ops::forward_l2(self.data(), self.shape(), rows)
        } else {
            ops::forward_l1(self.data(), self.shape(), rows)
        };
        let storage = Rc::new(Storage { shape, data });
        let (x, y) = (Rc::clone(&self.storage), Rc::clone(&storage));
        let out = Tensor::make(name, &[self], vec![], vec![], || {
            if l2 {
                NodeOp::L2Norm { x, y, rows }
            } else {
                NodeOp::L1Norm { x, rows }
            }
        })?;
        Ok(Tensor { storage, ..out })
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2norm(&self) -> Result<Tensor> {
        self.norm("l2norm", false, true)
    }

    /// Euclidean norm over the last axis; shape drops that axis.
    pub fn l2norm_rows(&self) -> Result<Tensor> {
        self.norm("l2norm", true, true)
    }

    pub fn l1norm(&self) -> Result<Tensor> {
        self.norm("l1norm", false, false)
    }

    pub fn l1norm_rows(&self) -> Result<Tensor> {
        self.norm("l1norm", true, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.shape().is_empty() || *self.shape().last().unwrap() == 0 {
            return Err(Error::dim("softmax", format!("bad shape {:?}", self.shape())));
        }
        let data = ops::forward_softmax(self.data(), self.shape());
        let storage = Rc::new(Storage { shape: self.shape().to_vec(), data });
        let y = Rc::clone(&storage);
        let out = Tensor::make("softmax", &[self], vec![], vec![], || NodeOp::Softmax { y })?;
        Ok(Tensor { storage, ..out })
    }

    /// Concatenate along the last axis. All leading extents must agree.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no tensors given".to_string()));
        }
        let lead_shape = &parts[0].shape()[..parts[0].shape().len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().is_empty() {
                return Err(Error::dim("concat", "rank-0 operand".to_string()));
            }
            let (head, tail) = p.shape().split_at(p.shape().len() - 1);
            if head != lead_shape {
                return Err(Error::dim(
                    "concat",
                    format!("leading dims differ: {:?} vs {:?}", head, lead_shape),
                ));
            }
            widths.push(tail[0]);
        }
        let lead = ops::numel(lead_shape);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(lead * total);
        for r in 0..lead {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape.to_vec();
        shape.push(total);
        let w2 = widths.clone();
        Tensor::make("concat", parts, data, shape, || NodeOp::Concat { widths: w2, lead })
    }

    /// Gather rows along axis 0.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::dim("index", "cannot index a rank-0 tensor".to_string()));
        }
        let rows = self.shape()[0];
        let inner: usize = self.shape()[1..].iter().product();
        for &i in idx {
            if i >= rows {
                return Err(Error::Argument(format!(
                    "index: row {} out of range (tensor has {} rows)",
                    i, rows
                )));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let saved = Rc::new(idx.to_vec());
        Tensor::make("index", &[self], data, shape, || NodeOp::IndexRows {
            x_rows: rows,
            inner,
            idx: saved,
        })
    }

    /// Bilinear sample of a (H, W) or (H, W, C) grid at (N, 2) pixel-space
    /// points (x right, y down; sample (i, j) sits at (j+0.5, i+0.5)).
    /// Queries are clamped to the border. Differentiable in both arguments.
    pub fn bilinear_gather(&self, coords: &Tensor) -> Result<Tensor> {
        let gs = self.shape();
        if !(gs.len() == 2 || gs.len() == 3) || gs[0] < 2 || gs[1] < 2 {
            return Err(Error::dim(
                "bilinear_gather",
                format!("grid must be (H>=2, W>=2[, C]), got {:?}", gs),
            ));
        }
        if coords.shape().len() != 2 || coords.shape()[1] != 2 {
            return Err(Error::dim(
                "bilinear_gather",
                format!("coords must be (N, 2), got {:?}", coords.shape()),
            ));
        }
        let (data, shape) = ops::forward_bilinear(&self.storage, &coords.storage);
        let (g, c) = (Rc::clone(&self.storage), Rc::clone(&coords.storage));
        Tensor::make("bilinear_gather", &[self, coords], data, shape, || {
            NodeOp::BilinearGather { grid: g, coords: c }
        })
    }

    /// Expand to `shape` with numpy-style right-aligned broadcasting.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() > shape.len() {
            return Err(Error::dim(
                "broadcast",
                format!("cannot broadcast {:?} to lower-rank {:?}", s, shape),
            ));
        }
        let off = shape.len() - s.len();
        for (k, &d) in s.iter().enumerate() {
            if d != 1 && d != shape[k + off] {
                return Err(Error::dim(
                    "broadcast",
                    format!("shape {:?} does not broadcast to {:?}", s, shape),
                ));
            }
        }
        let strides = ops::broadcast_strides(s, shape);
        let mut data = vec![0.0; ops::numel(shape)];
        let src = self.data();
        ops::for_each_broadcast(shape, &strides, |out_i, in_i| data[out_i] = src[in_i]);
        let (in_shape, out_shape) = (s.to_vec(), shape.to_vec());
        Tensor::make("broadcast", &[self], data, shape.to_vec(), || NodeOp::Broadcast {
            in_shape,
            out_shape,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if ops::numel(shape) != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Tensor::make("reshape", &[self], self.data().to_vec(), shape.to_vec(), || NodeOp::Reshape)
    }

    /// 2x2 average pooling over a (H, W, C) tensor; odd trailing row/column
    /// is dropped.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(Error::dim(
                "avg_pool2",
                format!("need (H>=2, W>=2, C), got {:?}", s),
            ));
        }
        let (data, shape) = ops::forward_avg_pool2(self.data(), s);
        let x_shape = s.to_vec();
        Tensor::make("avg_pool2", &[self], data, shape, || NodeOp::AvgPool2 { x_shape })
    }

    /// Record a caller-computed op. `output` is the forward result; `op`
    /// answers the backward pass for `inputs` in order.
    pub fn custom(
        inputs: &[&Tensor],
        output: (Vec<f64>, Vec<usize>),
        op: Box<dyn CustomOp>,
    ) -> Result<Tensor> {
        let (data, shape) = output;
        check_shape("custom", &data, &shape)?;
        Tensor::make(op.name(), inputs, data, shape, || NodeOp::Custom(op))
    }

    // Conveniences composed from the ops above.

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// |x| as relu(x) + relu(-x); gradient at 0 is 0.
    pub fn abs(&self) -> Result<Tensor> {
        self.relu()?.add(&self.neg()?.relu()?)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Op selector for the generic dispatcher. Parametrized variants carry the
/// extra arguments the op needs.
#[derive(Debug, Clone)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sum(Option<usize>),
    Mean(Option<usize>),
    L2Norm { rows: bool },
    L1Norm { rows: bool },
    Softmax,
    Concat,
    Index(Vec<usize>),
    BilinearGather,
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    AvgPool2,
}

/// Apply `op` to `inputs`. Arity is checked; unary ops take one input,
/// binary two, concat any number.
pub fn apply(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    fn arity(n: usize, inputs: &[&Tensor], name: &'static str) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::Argument(format!(
                "{name}: expected {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    }
    match op {
        OpKind::Add => {
            arity(2, inputs, "add")?;
            inputs[0].add(inputs[1])
        }
        OpKind::Sub => {
            arity(2, inputs, "sub")?;
            inputs[0].sub(inputs[1])
        }
        OpKind::Mul => {
            arity(2, inputs, "mul")?;
            inputs[0].mul(inputs[1])
        }
        OpKind::Div => {
            arity(2, inputs, "div")?;
            inputs[0].div(inputs[1])
        }
        OpKind::Matmul => {
            arity(2, inputs, "matmul")?;
            inputs[0].matmul(inputs[1])
        }
        OpKind::Tanh => {
            arity(1, inputs, "tanh")?;
            inputs[0].tanh()
        }
        OpKind::Relu => {
            arity(1, inputs, "relu")?;
            inputs[0].relu()
        }
        OpKind::Sigmoid => {
            arity(1, inputs, "sigmoid")?;
            inputs[0].sigmoid()
        }
        OpKind::Exp => {
            arity(1, inputs, "exp")?;
            inputs[0].exp()
        }
        OpKind::Log => {
            arity(1, inputs, "log")?;
            inputs[0].log()
        }
        OpKind::Sum(ax) => {
            arity(1, inputs, "sum")?;
            match ax {
                None => inputs[0].sum(),
                Some(a) => inputs[0].sum_axis(*a),
            }
        }
        OpKind::Mean(ax) => {
            arity(1, inputs, "mean")?;
            match ax {
                None => inputs[0].mean(),
                Some(a) => inputs[0].mean_axis(*a),
            }
        }
        OpKind::L2Norm { rows } => {
            arity(1, inputs, "l2norm")?;
            if *rows {
                inputs[0].l2norm_rows()
            } else {
                inputs[0].l2norm()
            }
        }
        OpKind::L1Norm { rows } => {
            arity(1, inputs, "l1norm")?;
            if *rows {
                inputs[0].l1norm_rows()
            } else {
                inputs[0].l1norm()
            }
        }
        OpKind::Softmax => {
            arity(1, inputs, "softmax")?;
            inputs[0].softmax()
        }
        OpKind::Concat => Tensor::concat(inputs),
        OpKind::Index(idx) => {
            arity(1, inputs, "index")?;
            inputs[0].index_rows(idx)
        }
        OpKind::BilinearGather => {
            arity(2, inputs, "bilinear_gather")?;
            inputs[0].bilinear_gather(inputs[1])
        }
        OpKind::Broadcast(shape) => {
            arity(1, inputs, "broadcast")?;
            inputs[0].broadcast_to(shape)
        }
        OpKind::Reshape(shape) => {
            arity(1, inputs, "reshape")?;
            inputs[0].reshape(shape)
        }
        OpKind::AvgPool2 => {
            arity(1, inputs, "avg_pool2")?;
            inputs[0].avg_pool2()
        }
    }
}

/// Compare the tape gradient of `f` at `x` against central finite
/// differences, returning the max relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all components of `x`.
///
/// `f` must build a scalar from its argument using tape ops; tensors it
/// captures should be constants. Non-finite values of `f` fail with the
/// offending component index.
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.var(x.data().to_vec(), x.shape())?;
    let y = f(&xv)?;
    if y.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: f must return a scalar, got shape {:?}",
            y.shape()
        )));
    }
    if !y.item().is_finite() {
        return Err(Error::Numeric("grad_check: f(x) is not finite".into()));
    }
    let analytic = tape.backward(&y)?.wrt(&xv);
    let ga = analytic.data();

    let mut max_err: f64 = 0.0;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let yp = f(&Tensor::from_vec(probe.clone(), x.shape())?)?.item();
        probe[i] = orig - eps;
        let ym = f(&Tensor::from_vec(probe.clone(), x.shape())?)?.item();
        probe[i] = orig;
        if !yp.is_finite() || !ym.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite probe value at component {i}"
            )));
        }
        let numeric = (yp - ym) / (2.0 * eps);
        let err = (ga[i] - numeric).abs() / ga[i].abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
