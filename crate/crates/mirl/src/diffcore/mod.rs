//! Dense-tensor reverse-mode differentiation on a Wengert tape.
//!
//! Every model component downstream builds on the ops defined here. Values
//! are stored in double precision so central-difference verification stays
//! meaningful; [`grad_check`] is the oracle that certifies every gradient
//! path. A [`Tape`] records one forward pass; parameters live outside the
//! tape in a [`ParamStore`] and are bound as leaves each pass. Gradients
//! accumulate until explicitly zeroed.

mod backward;
mod gradcheck;
mod params;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use params::{BoundParams, ParamStore, Parameter};

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::{MirlError, Result};

pub type Shape = Vec<usize>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Sentinel gather index that reads as 0.0 and receives no gradient.
pub const GATHER_PAD: usize = usize::MAX;

// Some payloads (scalar constants, detach sources) are only consulted during
// the forward construction but stay recorded for Debug output.
#[derive(Debug, Clone)]
#[allow(dead_code)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Neg(usize),
    Gelu(usize),
    Square(usize),
    Sqrt(usize),
    Ln(usize),
    Exp(usize),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    SumOver(usize, usize),
    MeanOver(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Concat(Vec<usize>, usize),
    SelectRows(usize, Rc<Vec<usize>>),
    ScatterRows {
        base: usize,
        rows: usize,
        indices: Rc<Vec<usize>>,
    },
    GatherElems {
        src: usize,
        indices: Rc<Vec<usize>>,
    },
    Detach(usize),
}

pub(crate) struct Node {
    pub shape: Shape,
    // shared so that reshape/detach views cost nothing
    pub value: Rc<Vec<f64>>,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct Graph {
    pub nodes: Vec<Node>,
    // Accumulated gradients, parallel to `nodes`. Persist across backward
    // calls; a second backward on the same loss adds on top.
    pub grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.grads.push(None);
        self.nodes.len() - 1
    }
}

/// Records a single forward pass for reverse-mode differentiation.
#[derive(Clone, Default)]
pub struct Tape {
    graph: Rc<RefCell<Graph>>,
}

/// Handle to one node on a tape. Cheap to clone; values are immutable after
/// construction, only gradient stores mutate.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Shape,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.graph.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.graph, &other.graph)
    }

    fn push(&self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        self.push_shared(shape, Rc::new(value), op, requires_grad)
    }

    fn push_shared(&self, shape: Shape, value: Rc<Vec<f64>>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let id = self.graph.borrow_mut().push(Node {
            shape: shape.clone(),
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn leaf(&self, shape: Shape, value: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(&shape) != value.len() {
            return Err(MirlError::shape(
                "leaf",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), value.len()),
            ));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(MirlError::shape("leaf", "non-finite input value"));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn constant(&self, shape: impl Into<Shape>, value: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape.into(), value, false)
    }

    /// Leaf that requires gradient; used by `ParamStore::bind`.
    pub fn variable(&self, shape: impl Into<Shape>, value: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape.into(), value, true)
    }

    pub fn zeros(&self, shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let g = self.graph.borrow();
        ids.iter().any(|&i| g.nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.graph.borrow().nodes[id].value)
    }
}

/// Broadcast forms accepted by the elementwise ops. Nothing beyond
/// leading-batch and trailing-singleton alignment is supported.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Bcast {
    Same,
    // rhs shape equals a suffix of lhs shape: [B,S,D] op [S,D] or [D]
    RhsSuffix,
    // rhs equals lhs except the last axis is 1: [B,D] op [B,1]
    RhsTrailOne,
}

pub(crate) fn bcast_kind(op: &'static str, l: &[usize], r: &[usize]) -> Result<Bcast> {
    if l == r {
        return Ok(Bcast::Same);
    }
    if r.len() < l.len() && l[l.len() - r.len()..] == *r {
        return Ok(Bcast::RhsSuffix);
    }
    if r.len() == l.len()
        && !r.is_empty()
        && r[r.len() - 1] == 1
        && l[..l.len() - 1] == r[..r.len() - 1]
    {
        return Ok(Bcast::RhsTrailOne);
    }
    Err(MirlError::shape(
        op,
        format!("cannot broadcast {:?} with {:?}", l, r),
    ))
}

fn ew_forward(
    kind: Bcast,
    l: &[f64],
    r: &[f64],
    lshape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match kind {
        Bcast::Same => l.iter().zip(r).map(|(a, b)| f(*a, *b)).collect(),
        Bcast::RhsSuffix => {
            let rn = r.len().max(1);
            l.iter()
                .enumerate()
                .map(|(i, a)| f(*a, r[i % rn]))
                .collect()
        }
        Bcast::RhsTrailOne => {
            let last = lshape[lshape.len() - 1];
            l.iter()
                .enumerate()
                .map(|(i, a)| f(*a, r[i / last]))
                .collect()
        }
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Handle to the tape this tensor lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Vec<f64> {
        (*self.tape.value_of(self.id)).clone()
    }

    /// Borrowed view of the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let g = self.tape.graph.borrow();
        f(&g.nodes[self.id].value)
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let g = self.tape.graph.borrow();
        let v = &g.nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.graph.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.graph.borrow().grads[self.id].clone()
    }

    pub fn grad_ref(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.tape.graph.borrow();
        if g.grads[self.id].is_some() {
            Some(Ref::map(g, |g| g.grads[self.id].as_ref().unwrap()))
        } else {
            None
        }
    }

    /// Reverse pass from this scalar. Gradients add onto whatever previous
    /// backward calls left in place.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(MirlError::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape),
            ));
        }
        self.tape.graph.borrow_mut().backprop(self.id);
        Ok(())
    }

    fn binary(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Bcast, Vec<f64>)> {
        if !self.tape.same_tape(&rhs.tape) {
            return Err(MirlError::TapeMismatch(op));
        }
        let kind = bcast_kind(op, &self.shape, &rhs.shape)?;
        let out =
            self.with_value(|l| rhs.with_value(|r| ew_forward(kind, l, r, &self.shape, f)));
        Ok((kind, out))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (_, out) = self.binary("add", rhs, |a, b| a + b)?;
        let req = self.tape.requires(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Add(self.id, rhs.id), req))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (_, out) = self.binary("sub", rhs, |a, b| a - b)?;
        let req = self.tape.requires(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Sub(self.id, rhs.id), req))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (_, out) = self.binary("mul", rhs, |a, b| a * b)?;
        let req = self.tape.requires(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Mul(self.id, rhs.id), req))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        let (_, out) = self.binary("div", rhs, |a, b| a / b)?;
        let req = self.tape.requires(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Div(self.id, rhs.id), req))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| a * c).collect());
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Scale(self.id, c), req))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| a + c).collect());
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::AddScalar(self.id, c), req))
    }

    pub fn neg(&self) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| -a).collect());
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(self.shape.clone(), out, Op::Neg(self.id), req))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|&a| gelu(a)).collect());
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(self.shape.clone(), out, Op::Gelu(self.id), req))
    }

    pub fn square(&self) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| a * a).collect());
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Square(self.id), req))
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&self) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| a.sqrt()).collect::<Vec<_>>());
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(self.shape.clone(), out, Op::Sqrt(self.id), req))
    }

    pub fn ln(&self) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| a.ln()).collect::<Vec<_>>());
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(self.shape.clone(), out, Op::Ln(self.id), req))
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.with_value(|v| v.iter().map(|a| a.exp()).collect::<Vec<_>>());
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(self.shape.clone(), out, Op::Exp(self.id), req))
    }

    /// Stop-gradient: value passes through, backward does not.
    pub fn detach(&self) -> Tensor {
        let out = self.tape.value_of(self.id);
        self.tape
            .push_shared(self.shape.clone(), out, Op::Detach(self.id), false)
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(MirlError::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        let out = self.tape.value_of(self.id);
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push_shared(shape, out, Op::Reshape(self.id), req))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(MirlError::shape(
                "permute",
                format!("axes {:?} not a permutation of 0..{}", axes, nd),
            ));
        }
        let out_shape: Shape = axes.iter().map(|&a| self.shape[a]).collect();
        let out = self.with_value(|v| permute_copy(v, &self.shape, axes));
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(out_shape, out, Op::Permute(self.id, axes.to_vec()), req))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&rhs.tape) {
            return Err(MirlError::TapeMismatch("matmul"));
        }
        let plan = MatmulPlan::resolve(&self.shape, &rhs.shape)?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        self.with_value(|a| {
            rhs.with_value(|b| plan.forward(a, b, &mut out));
        });
        let req = self.tape.requires(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(plan.out_shape.clone(), out, Op::Matmul(self.id, rhs.id), req))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("softmax", &self.shape, axis)?;
        let out = self.with_value(|v| softmax_forward(v, outer, n, inner));
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Softmax(self.id, axis), req))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("log_softmax", &self.shape, axis)?;
        let out = self.with_value(|v| log_softmax_forward(v, outer, n, inner));
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::LogSoftmax(self.id, axis), req))
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if !self.tape.same_tape(&gain.tape) || !self.tape.same_tape(&bias.tape) {
            return Err(MirlError::TapeMismatch("layer_norm"));
        }
        if eps <= 0.0 {
            return Err(MirlError::shape("layer_norm", "eps must be positive"));
        }
        let d = *self.shape.last().ok_or_else(|| {
            MirlError::shape("layer_norm", "input must have at least one axis")
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(MirlError::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{}]",
                    gain.shape(),
                    bias.shape(),
                    d
                ),
            ));
        }
        let out = self.with_value(|x| {
            gain.with_value(|g| bias.with_value(|b| layer_norm_forward(x, g, b, d, eps)))
        });
        let req = self.tape.requires(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            self.shape.clone(),
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            req,
        ))
    }

    pub fn sum_over(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("sum_over", &self.shape, axis)?;
        let out = self.with_value(|v| reduce_axis(v, outer, n, inner, false));
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(shape, out, Op::SumOver(self.id, axis), req))
    }

    pub fn mean_over(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("mean_over", &self.shape, axis)?;
        let out = self.with_value(|v| reduce_axis(v, outer, n, inner, true));
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(shape, out, Op::MeanOver(self.id, axis), req))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.with_value(|v| v.iter().sum());
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(vec![], vec![s], Op::SumAll(self.id), req))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.with_value(|v| v.iter().sum());
        let req = self.tape.requires(&[self.id]);
        Ok(self
            .tape
            .push(vec![], vec![s / n], Op::MeanAll(self.id), req))
    }

    /// Concatenate along `axis`; all inputs must agree on the other dims.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| MirlError::shape("concat", "empty input list"))?;
        let nd = first.shape.len();
        if axis >= nd {
            return Err(MirlError::shape("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for p in parts {
            if !first.tape.same_tape(&p.tape) {
                return Err(MirlError::TapeMismatch("concat"));
            }
            if p.shape.len() != nd
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(MirlError::shape(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?}", first.shape, p.shape),
                ));
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let block = p.shape[axis] * inner;
            p.with_value(|v| {
                for o in 0..outer {
                    let dst = o * axis_total * inner + offset;
                    out[dst..dst + block].copy_from_slice(&v[o * block..(o + 1) * block]);
                }
            });
            offset += block;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = first.tape.requires(&ids);
        Ok(first.tape.push(out_shape, out, Op::Concat(ids, axis), req))
    }

    /// Gather rows of a 2-D tensor. Indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(MirlError::shape("select_rows", "input must be 2-D"));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(MirlError::shape(
                "select_rows",
                format!("row index {bad} out of range 0..{rows}"),
            ));
        }
        let mut out = vec![0.0; indices.len() * cols];
        self.with_value(|v| {
            for (s, &r) in indices.iter().enumerate() {
                out[s * cols..(s + 1) * cols].copy_from_slice(&v[r * cols..(r + 1) * cols]);
            }
        });
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            vec![indices.len(), cols],
            out,
            Op::SelectRows(self.id, Rc::new(indices.to_vec())),
            req,
        ))
    }

    /// Overwrite rows of `self` (2-D) with `rows` at the given indices.
    /// Indices must be unique so the gradient split is well defined.
    pub fn scatter_rows(&self, indices: &[usize], rows: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&rows.tape) {
            return Err(MirlError::TapeMismatch("scatter_rows"));
        }
        if self.shape.len() != 2 || rows.shape.len() != 2 || self.shape[1] != rows.shape[1] {
            return Err(MirlError::shape(
                "scatter_rows",
                format!("base {:?} vs rows {:?}", self.shape, rows.shape),
            ));
        }
        if indices.len() != rows.shape[0] {
            return Err(MirlError::shape(
                "scatter_rows",
                format!("{} indices for {} rows", indices.len(), rows.shape[0]),
            ));
        }
        let (nrows, cols) = (self.shape[0], self.shape[1]);
        let mut seen = vec![false; nrows];
        for &r in indices {
            if r >= nrows {
                return Err(MirlError::shape(
                    "scatter_rows",
                    format!("row index {r} out of range 0..{nrows}"),
                ));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(MirlError::shape("scatter_rows", format!("duplicate row {r}")));
            }
        }
        let mut out = self.value();
        rows.with_value(|v| {
            for (s, &r) in indices.iter().enumerate() {
                out[r * cols..(r + 1) * cols].copy_from_slice(&v[s * cols..(s + 1) * cols]);
            }
        });
        let req = self.tape.requires(&[self.id, rows.id]);
        Ok(self.tape.push(
            self.shape.clone(),
            out,
            Op::ScatterRows {
                base: self.id,
                rows: rows.id,
                indices: Rc::new(indices.to_vec()),
            },
            req,
        ))
    }

    /// Arbitrary element gather: `out[i] = self[indices[i]]` over the
    /// flattened input. [`GATHER_PAD`] reads as zero.
    pub fn gather(&self, indices: Rc<Vec<usize>>, out_shape: impl Into<Shape>) -> Result<Tensor> {
        let out_shape = out_shape.into();
        if indices.len() != numel(&out_shape) {
            return Err(MirlError::shape(
                "gather",
                format!("{} indices for shape {:?}", indices.len(), out_shape),
            ));
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i != GATHER_PAD && i >= n) {
            return Err(MirlError::shape(
                "gather",
                format!("index {bad} out of range 0..{n}"),
            ));
        }
        let out = self.with_value(|v| {
            indices
                .iter()
                .map(|&i| if i == GATHER_PAD { 0.0 } else { v[i] })
                .collect()
        });
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            out_shape,
            out,
            Op::GatherElems {
                src: self.id,
                indices,
            },
            req,
        ))
    }
}

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// tanh form of GELU, as used by standard ViT MLPs.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(MirlError::shape(
            op,
            format!("axis {axis} out of range for shape {:?}", shape),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn softmax_forward(v: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(v[at(j)]);
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (v[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[at(j)] /= z;
            }
        }
    }
    out
}

fn log_softmax_forward(v: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(v[at(j)]);
            }
            let mut z = 0.0;
            for j in 0..n {
                z += (v[at(j)] - m).exp();
            }
            let lse = m + z.ln();
            for j in 0..n {
                out[at(j)] = v[at(j)] - lse;
            }
        }
    }
    out
}

fn layer_norm_forward(x: &[f64], gain: &[f64], bias: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mu) * inv * gain[j] + bias[j];
        }
    }
    out
}

fn reduce_axis(v: &[f64], outer: usize, n: usize, inner: usize, mean: bool) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out[o * inner + i] += v[(o * n + j) * inner + i];
            }
        }
    }
    if mean {
        let f = 1.0 / n as f64;
        for x in &mut out {
            *x *= f;
        }
    }
    out
}

pub(crate) fn permute_copy(v: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = row_major_strides(shape);
    // stride in the input for each output axis
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = v.len();
    let mut out = vec![0.0; total];
    let mut coords = vec![0usize; nd];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = v[src];
        // odometer increment over output coordinates
        for ax in (0..nd).rev() {
            coords[ax] += 1;
            src += strides[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matmul planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MatmulKind {
    // [m,k] x [k,n]
    Plain,
    // [..,m,k] x [k,n]: fold the leading axes into m
    FoldLeft,
    // [B..,m,k] x [B..,k,n] with equal leading axes: loop over batches
    Batched,
}

pub(crate) struct MatmulPlan {
    pub kind: MatmulKind,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Shape,
}

impl MatmulPlan {
    pub fn resolve(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
        let err = |msg: String| MirlError::shape("matmul", msg);
        if a.len() < 2 || b.len() < 2 {
            return Err(err(format!("need 2-D operands, got {:?} x {:?}", a, b)));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err(format!("inner dims differ: {:?} x {:?}", a, b)));
        }
        if b.len() == 2 {
            let batch: usize = a[..a.len() - 2].iter().product();
            let kind = if a.len() == 2 {
                MatmulKind::Plain
            } else {
                MatmulKind::FoldLeft
            };
            let mut out_shape = a[..a.len() - 2].to_vec();
            out_shape.push(m);
            out_shape.push(n);
            Ok(MatmulPlan {
                kind,
                batch,
                m,
                k,
                n,
                out_shape,
            })
        } else if a.len() == b.len() && a[..a.len() - 2] == b[..b.len() - 2] {
            let batch: usize = a[..a.len() - 2].iter().product();
            let mut out_shape = a[..a.len() - 2].to_vec();
            out_shape.push(m);
            out_shape.push(n);
            Ok(MatmulPlan {
                kind: MatmulKind::Batched,
                batch,
                m,
                k,
                n,
                out_shape,
            })
        } else {
            Err(err(format!("unsupported batching: {:?} x {:?}", a, b)))
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        match self.kind {
            MatmulKind::Plain | MatmulKind::FoldLeft => {
                gemm_nn(self.batch * self.m, self.k, self.n, a, b, out, 0.0);
            }
            MatmulKind::Batched => {
                let (am, bm, cm) = (self.m * self.k, self.k * self.n, self.m * self.n);
                for t in 0..self.batch {
                    gemm_nn(
                        self.m,
                        self.k,
                        self.n,
                        &a[t * am..(t + 1) * am],
                        &b[t * bm..(t + 1) * bm],
                        &mut out[t * cm..(t + 1) * cm],
                        0.0,
                    );
                }
            }
        }
    }
}

/// C = A(m x k) * B(k x n) + beta*C, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C += op(A) * op(B) where `ta`/`tb` transpose the row-major operands.
/// Logical dims after transposition are (m x k) * (k x n).
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
