use std::cell::{Cell, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::conv::ConvGeom;
use super::kernels::{self, Broadcast, MatMulPlan};
use super::ops::{BinaryKind, UnaryKind};
use super::{Result, Tensor, TensorError};

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        plan: MatMulPlan,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        plan: Broadcast,
    },
    Softmax {
        x: usize,
        axis: usize,
        log: bool,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        /// Source index of every output element.
        map: Vec<usize>,
    },
    Sum {
        x: usize,
        axis: Option<usize>,
        scale: f64,
    },
    Upsample2 {
        x: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    GradScale {
        x: usize,
        factor: f64,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Records the operations of one forward pass.
///
/// Nodes are appended in execution order, so the list is topologically sorted
/// by construction and backward is a single reverse sweep. A tape supports one
/// backward pass; build a fresh tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("spent", &self.spent.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// Records `t` as a leaf; gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_unchecked(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push_unchecked(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push_unchecked(Vec::new(), vec![value], false, Op::Leaf)
    }

    fn push_unchecked(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an operation node after checking its output is finite.
    pub(crate) fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[usize],
        op: Op,
    ) -> Result<Var<'_>> {
        debug_assert_eq!(super::numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(shape, data, requires_grad, op))
    }

    pub(crate) fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    /// Hash of every data-dependent branch taken in the forward pass: ReLU
    /// input signs, max-pool winners and clamp saturation. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Unary { x, kind } => {
                    let input = &nodes[*x].data;
                    match kind {
                        UnaryKind::Relu => {
                            for v in input {
                                (*v > 0.0).hash(&mut h);
                            }
                        }
                        UnaryKind::Clamp { lo, hi } => {
                            for v in input {
                                (*v >= *lo && *v <= *hi).hash(&mut h);
                            }
                        }
                        _ => {}
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates d(loss)/d(node) back to every gradient-requiring leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::ForeignVar);
        }
        if self.spent.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        self.spent.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()])
    }
}

/// Mutable gradient buffer for `id`, allocated on first touch.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]))
}

fn take_slot(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize) -> Option<Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(
        grads[id]
            .take()
            .unwrap_or_else(|| vec![0.0; nodes[id].data.len()]),
    )
}

fn restore_slot(grads: &mut [Option<Vec<f64>>], id: usize, buf: Option<Vec<f64>>) {
    if let Some(buf) = buf {
        match &mut grads[id] {
            // the same node was taken twice; fold the second buffer in
            Some(existing) => existing.iter_mut().zip(&buf).for_each(|(d, s)| *d += s),
            slot => *slot = Some(buf),
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, plan } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                plan.backward_a(g, &nodes[*b].data, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                plan.backward_b(g, &nodes[*a].data, gb);
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            geom,
        } => {
            // Borrow the three gradient buffers at once by moving them out.
            let mut gx = take_slot(nodes, grads, *x);
            let mut gk = take_slot(nodes, grads, *kernel);
            let mut gb = bias.and_then(|b| take_slot(nodes, grads, b));
            geom.backward(
                &nodes[*x].data,
                &nodes[*kernel].data,
                g,
                gx.as_deref_mut(),
                gk.as_deref_mut(),
                gb.as_deref_mut(),
            );
            restore_slot(grads, *x, gx);
            restore_slot(grads, *kernel, gk);
            if let Some(b) = bias {
                restore_slot(grads, *b, gb);
            }
        }
        Op::Unary { x, kind } => {
            let input = &nodes[*x].data;
            if let Some(gx) = slot(nodes, grads, *x) {
                kind.backward(input, out, g, gx);
            }
        }
        Op::Binary { a, b, kind, plan } => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                plan.for_each(|o, ia, ib| ga[ia] += g[o] * kind.d_lhs(ad[ia], bd[ib]));
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                plan.for_each(|o, ia, ib| gb[ib] += g[o] * kind.d_rhs(ad[ia], bd[ib]));
            }
        }
        Op::Softmax { x, axis, log } => {
            let dims = kernels::around_axis(&node.shape, *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::softmax_backward(out, g, dims, *log, gx);
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let total_len = node.shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * total_len + offset) * inner
                            ..(o * total_len + offset + len) * inner];
                        for (d, s) in gp[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let src_shape = &nodes[*x].shape;
            let (outer, full, inner) = kernels::around_axis(src_shape, *axis);
            let len = node.shape[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (d, s) in dst
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::Permute { x, map } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, gv) in map.iter().zip(g) {
                    gx[src] += gv;
                }
            }
        }
        Op::Sum { x, axis, scale } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                match axis {
                    None => {
                        let v = g[0] * scale;
                        gx.iter_mut().for_each(|d| *d += v);
                    }
                    Some(axis) => {
                        let (outer, len, inner) = kernels::around_axis(&nodes[*x].shape, *axis);
                        for o in 0..outer {
                            for j in 0..len {
                                let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += s * scale;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2 { x } => {
            let s = &nodes[*x].shape;
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for p in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
        }
        Op::Embed { table, ids } => {
            let dim = nodes[*table].shape[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * dim..(id + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                        *d += s;
                    }
                }
            }
        }
        Op::GradScale { x, factor } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s * factor;
                }
            }
        }
    }
}
