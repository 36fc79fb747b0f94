use super::conv::{ConvGeom, Padding};
use super::kernels::{self, Broadcast, MatMulPlan};
use super::tape::{Op, Tape, Var};
use super::{numel, Result, Tensor, TensorError};

/// Pointwise single-input operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
    Square,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    Clamp { lo: f64, hi: f64 },
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Neg => "neg",
            Self::Square => "square",
            Self::Sqrt => "sqrt",
            Self::Scale(_) => "scale",
            Self::AddScalar(_) => "add_scalar",
            Self::Clamp { .. } => "clamp",
        }
    }

    fn apply(self, x: f64) -> Result<f64> {
        Ok(match self {
            Self::Relu => x.max(0.0),
            Self::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Self::Exp => x.exp(),
            Self::Log => {
                if x <= 0.0 {
                    return Err(TensorError::Domain {
                        op: "log",
                        value: x,
                    });
                }
                x.ln()
            }
            Self::Neg => -x,
            Self::Square => x * x,
            Self::Sqrt => {
                if x < 0.0 {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        value: x,
                    });
                }
                x.sqrt()
            }
            Self::Scale(c) => c * x,
            Self::AddScalar(c) => x + c,
            Self::Clamp { lo, hi } => x.clamp(lo, hi),
        })
    }

    pub(crate) fn backward(self, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64]) {
        let it = gx.iter_mut().zip(g).zip(x.iter().zip(y));
        match self {
            Self::Relu => it.for_each(|((d, g), (x, _))| {
                if *x > 0.0 {
                    *d += g
                }
            }),
            Self::Sigmoid => it.for_each(|((d, g), (_, y))| *d += g * y * (1.0 - y)),
            Self::Exp => it.for_each(|((d, g), (_, y))| *d += g * y),
            Self::Log => it.for_each(|((d, g), (x, _))| *d += g / x),
            Self::Neg => it.for_each(|((d, g), _)| *d -= g),
            Self::Square => it.for_each(|((d, g), (x, _))| *d += 2.0 * g * x),
            Self::Sqrt => it.for_each(|((d, g), (_, y))| *d += 0.5 * g / y),
            Self::Scale(c) => it.for_each(|((d, g), _)| *d += c * g),
            Self::AddScalar(_) => it.for_each(|((d, g), _)| *d += g),
            Self::Clamp { lo, hi } => it.for_each(|((d, g), (x, _))| {
                if *x >= lo && *x <= hi {
                    *d += g
                }
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Div => a / b,
        }
    }

    pub(crate) fn d_lhs(self, _a: f64, b: f64) -> f64 {
        match self {
            Self::Add | Self::Sub => 1.0,
            Self::Mul => b,
            Self::Div => 1.0 / b,
        }
    }

    pub(crate) fn d_rhs(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Add => 1.0,
            Self::Sub => -1.0,
            Self::Mul => a,
            Self::Div => -a / (b * b),
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(self) -> usize {
        self.tape.with_node(self.id, |n| n.data.len())
    }

    pub fn requires_grad(self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    pub fn to_vec(self) -> Vec<f64> {
        self.tape.with_node(self.id, |n| n.data.clone())
    }

    pub fn value(self) -> Tensor {
        self.tape.with_node(self.id, |n| {
            Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape matches data")
        })
    }

    /// Value of a single-element variable.
    pub fn item(self) -> Option<f64> {
        self.tape
            .with_node(self.id, |n| (n.data.len() == 1).then(|| n.data[0]))
    }

    fn same_tape(self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (shape, data, plan) = self.tape.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[rhs.id]);
            let plan = MatMulPlan::new(&a.shape, &b.shape)?;
            let data = plan.forward(&a.data, &b.data);
            Ok::<_, TensorError>((plan.out_shape.clone(), data, plan))
        })?;
        self.tape.push(
            "matmul",
            shape,
            data,
            &[self.id, rhs.id],
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                plan,
            },
        )
    }

    /// 2-D cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        padding: Padding,
    ) -> Result<Var<'t>> {
        self.same_tape(kernel)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let (geom, data) = self.tape.with_nodes(|n| {
            let geom = ConvGeom::new(&n[self.id].shape, &n[kernel.id].shape, padding)?;
            let bias_data = match bias {
                Some(b) => {
                    if n[b.id].shape != [geom.cout] {
                        return Err(TensorError::ShapeMismatch {
                            op: "conv2d",
                            lhs: n[kernel.id].shape.clone(),
                            rhs: n[b.id].shape.clone(),
                        });
                    }
                    Some(n[b.id].data.as_slice())
                }
                None => None,
            };
            Ok((
                geom,
                geom.forward(&n[self.id].data, &n[kernel.id].data, bias_data),
            ))
        })?;
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.push(
            "conv2d",
            geom.out_shape(),
            data,
            &inputs,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        )
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_node(self.id, |n| {
            let data = n
                .data
                .iter()
                .map(|&v| kind.apply(v))
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, TensorError>((n.shape.clone(), data))
        })?;
        self.tape.push(
            kind.name(),
            shape,
            data,
            &[self.id],
            Op::Unary { x: self.id, kind },
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Clamp { lo, hi })
    }

    fn binary(self, rhs: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (plan, data) = self.tape.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[rhs.id]);
            let plan = Broadcast::new(kind.name(), &a.shape, &b.shape)?;
            let mut data = vec![0.0; numel(&plan.out_shape)];
            let mut zero_div = false;
            plan.for_each(|o, ia, ib| {
                if kind == BinaryKind::Div && b.data[ib] == 0.0 {
                    zero_div = true;
                }
                data[o] = kind.apply(a.data[ia], b.data[ib]);
            });
            if zero_div {
                return Err(TensorError::Domain {
                    op: "div",
                    value: 0.0,
                });
            }
            Ok((plan, data))
        })?;
        self.tape.push(
            kind.name(),
            plan.out_shape.clone(),
            data,
            &[self.id, rhs.id],
            Op::Binary {
                a: self.id,
                b: rhs.id,
                kind,
                plan,
            },
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Div)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_node(self.id, |n| {
            check_axis("softmax", axis, n.shape.len())?;
            let dims = kernels::around_axis(&n.shape, axis);
            Ok::<_, TensorError>((n.shape.clone(), kernels::softmax(&n.data, dims, log)))
        })?;
        self.tape.push(
            if log { "log_softmax" } else { "softmax" },
            shape,
            data,
            &[self.id],
            Op::Softmax {
                x: self.id,
                axis,
                log,
            },
        )
    }

    /// Softmax along `axis`, computed after subtracting the slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        for p in parts {
            first.same_tape(*p)?;
        }
        let tape = first.tape;
        let (shape, data) = tape.with_nodes(|n| {
            let base = &n[first.id].shape;
            check_axis("concat", axis, base.len())?;
            let mut total = 0;
            for p in parts {
                let s = &n[p.id].shape;
                let agrees = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !agrees {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.clone(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let len = n[p.id].shape[axis] * inner;
                    data.extend_from_slice(&n[p.id].data[o * len..(o + 1) * len]);
                }
            }
            Ok((shape, data))
        })?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            "concat",
            shape,
            data,
            &ids,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
        )
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_node(self.id, |n| {
            check_axis("narrow", axis, n.shape.len())?;
            if len == 0 || start + len > n.shape[axis] {
                return Err(TensorError::InvalidShape {
                    op: "narrow",
                    shape: n.shape.clone(),
                    reason: format!("range {start}..{} outside axis {axis}", start + len),
                });
            }
            let (outer, full, inner) = kernels::around_axis(&n.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(
                    &n.data[(o * full + start) * inner..(o * full + start + len) * inner],
                );
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            Ok((shape, data))
        })?;
        self.tape.push(
            "narrow",
            shape,
            data,
            &[self.id],
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let full = self.shape();
        check_axis("split", axis, full.len())?;
        if sizes.iter().sum::<usize>() != full[axis] {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape: full,
                reason: format!("sizes {sizes:?} do not cover axis {axis}"),
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let data = self.tape.with_node(self.id, |n| {
            if numel(&shape) != n.data.len() {
                return Err(TensorError::DataLength {
                    shape: shape.clone(),
                    len: n.data.len(),
                });
            }
            Ok(n.data.clone())
        })?;
        self.tape.push(
            "reshape",
            shape,
            data,
            &[self.id],
            Op::Reshape { x: self.id },
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let (shape, data, map) = self.tape.with_node(self.id, |n| {
            let mut seen = vec![false; n.shape.len()];
            let valid = perm.len() == n.shape.len()
                && perm
                    .iter()
                    .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(TensorError::InvalidShape {
                    op: "permute",
                    shape: n.shape.clone(),
                    reason: format!("{perm:?} is not a permutation of the axes"),
                });
            }
            let map = kernels::permute_map(&n.shape, perm);
            let data = map.iter().map(|&i| n.data[i]).collect();
            let shape = perm.iter().map(|&p| n.shape[p]).collect();
            Ok((shape, data, map))
        })?;
        self.tape.push(
            "permute",
            shape,
            data,
            &[self.id],
            Op::Permute { x: self.id, map },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let (shape, data, scale) = self.tape.with_node(self.id, |n| match axis {
            None => {
                let scale = if mean { 1.0 / n.data.len() as f64 } else { 1.0 };
                Ok((Vec::new(), vec![n.data.iter().sum::<f64>() * scale], scale))
            }
            Some(axis) => {
                check_axis("reduce", axis, n.shape.len())?;
                let dims = kernels::around_axis(&n.shape, axis);
                let scale = if mean { 1.0 / dims.1 as f64 } else { 1.0 };
                let mut data = kernels::reduce_sum(&n.data, dims);
                if mean {
                    data.iter_mut().for_each(|v| *v *= scale);
                }
                let mut shape = n.shape.clone();
                shape.remove(axis);
                Ok((shape, data, scale))
            }
        })?;
        self.tape.push(
            if mean { "mean" } else { "sum" },
            shape,
            data,
            &[self.id],
            Op::Sum {
                x: self.id,
                axis,
                scale,
            },
        )
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(None, false)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(None, true)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Some(axis), false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Some(axis), true)
    }

    /// Nearest-neighbour ×2 upsampling of `[B,C,H,W]`.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_node(self.id, |n| {
            let s = spatial_shape("upsample2", &n.shape)?;
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut data = Vec::with_capacity(n.data.len() * 4);
            for p in 0..planes {
                for i in 0..2 * h {
                    let row = &n.data[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
                    for v in row {
                        data.push(*v);
                        data.push(*v);
                    }
                }
            }
            Ok::<_, TensorError>((vec![s[0], s[1], 2 * h, 2 * w], data))
        })?;
        self.tape.push(
            "upsample2",
            shape,
            data,
            &[self.id],
            Op::Upsample2 { x: self.id },
        )
    }

    /// 2×2 max pooling with stride 2; ties go to the first element in row-major order.
    pub fn maxpool2(self) -> Result<Var<'t>> {
        let (shape, data, argmax) = self.tape.with_node(self.id, |n| {
            let s = spatial_shape("maxpool2", &n.shape)?;
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::InvalidShape {
                    op: "maxpool2",
                    shape: n.shape.clone(),
                    reason: "spatial dims must be even".into(),
                });
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut data = Vec::with_capacity(planes * ho * wo);
            let mut argmax = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        let base = (p * h + 2 * i) * w + 2 * j;
                        let mut best = base;
                        for cand in [base + 1, base + w, base + w + 1] {
                            if n.data[cand] > n.data[best] {
                                best = cand;
                            }
                        }
                        data.push(n.data[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((vec![s[0], s[1], ho, wo], data, argmax))
        })?;
        self.tape.push(
            "maxpool2",
            shape,
            data,
            &[self.id],
            Op::MaxPool2 { x: self.id, argmax },
        )
    }

    /// Row lookup into a `[V, D]` table; output shape is `ids_shape + [D]`.
    pub fn embed(self, ids: &[usize], ids_shape: &[usize]) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_node(self.id, |n| {
            if n.shape.len() != 2 {
                return Err(TensorError::InvalidShape {
                    op: "embed",
                    shape: n.shape.clone(),
                    reason: "table must be [V, D]".into(),
                });
            }
            if numel(ids_shape) != ids.len() {
                return Err(TensorError::DataLength {
                    shape: ids_shape.to_vec(),
                    len: ids.len(),
                });
            }
            let (v, d) = (n.shape[0], n.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::Index {
                        op: "embed",
                        index: id,
                        bound: v,
                    });
                }
                data.extend_from_slice(&n.data[id * d..(id + 1) * d]);
            }
            let mut shape = ids_shape.to_vec();
            shape.push(d);
            Ok((shape, data))
        })?;
        self.tape.push(
            "embed",
            shape,
            data,
            &[self.id],
            Op::Embed {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Identity in the forward pass; multiplies the gradient by `factor` on the way back.
    pub fn grad_scale(self, factor: f64) -> Result<Var<'t>> {
        let (shape, data) = self
            .tape
            .with_node(self.id, |n| (n.shape.clone(), n.data.clone()));
        self.tape.push(
            "grad_scale",
            shape,
            data,
            &[self.id],
            Op::GradScale { x: self.id, factor },
        )
    }
}

fn spatial_shape<'a>(op: &'static str, shape: &'a [usize]) -> Result<&'a [usize]> {
    if shape.len() != 4 {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected [B,C,H,W]".into(),
        });
    }
    Ok(shape)
}
