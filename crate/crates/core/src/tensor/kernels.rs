//! Raw forward and backward kernels over flat row-major buffers.

use super::{numel, strides, Result, TensorError};

/// `c = op(a) · op(b) + beta · c` for row-major operands.
///
/// `a` is `m×k` (or `k×m` stored, when `a_t`), `b` is `k×n` (or `n×k` stored,
/// when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assertion above guarantees every index dgemm touches with
    // these strides lies inside the three slices; `c` is uniquely borrowed.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index mapping for a numpy-style broadcast of two operands.
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    /// Per output axis, the element stride into each operand (0 when broadcast).
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    /// Both operands already have the output shape.
    same: bool,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&da, &db) in pa.iter().zip(&pb) {
            let d = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
            out_shape.push(d);
        }
        let masked = |padded: &[usize]| {
            strides(padded)
                .into_iter()
                .zip(padded)
                .map(|(s, &d)| if d == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            same: pa == out_shape && pb == out_shape,
            a_strides: masked(&pa),
            b_strides: masked(&pb),
            out_shape,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = numel(&self.out_shape);
        if self.same {
            for i in 0..total {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut o = 0;
        while o < total {
            for j in 0..inner {
                f(o + j, ia + j * sa, ib + j * sb);
            }
            o += inner;
            // advance the odometer over the leading axes
            let mut ax = last;
            while ax > 0 {
                ax -= 1;
                counter[ax] += 1;
                ia += self.a_strides[ax];
                ib += self.b_strides[ax];
                if counter[ax] < self.out_shape[ax] {
                    break;
                }
                ia -= self.a_strides[ax] * counter[ax];
                ib -= self.b_strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
    }
}

/// Batched matmul layout: `[..., m, k] × [..., k, n]` with broadcast batch axes.
#[derive(Debug, Clone)]
pub(crate) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// Matrix offsets (in units of whole matrices) per output batch entry.
    a_batches: Vec<usize>,
    b_batches: Vec<usize>,
}

impl MatMulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let plan = Broadcast::new("matmul", ab, bb).map_err(|_| mismatch())?;
        let mut a_batches = Vec::new();
        let mut b_batches = Vec::new();
        plan.for_each(|_, ia, ib| {
            a_batches.push(ia);
            b_batches.push(ib);
        });
        let mut out_shape = plan.out_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            a_batches,
            b_batches,
        })
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; numel(&self.out_shape)];
        for (i, (&ia, &ib)) in self.a_batches.iter().zip(&self.b_batches).enumerate() {
            gemm(
                m,
                k,
                n,
                &a[ia * m * k..],
                false,
                &b[ib * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        out
    }

    pub fn backward_a(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (i, (&ia, &ib)) in self.a_batches.iter().zip(&self.b_batches).enumerate() {
            // dA = dC · Bᵀ
            gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &b[ib * k * n..],
                true,
                &mut ga[ia * m * k..(ia + 1) * m * k],
                1.0,
            );
        }
    }

    pub fn backward_b(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (i, (&ia, &ib)) in self.a_batches.iter().zip(&self.b_batches).enumerate() {
            // dB = Aᵀ · dC
            gemm(
                k,
                m,
                n,
                &a[ia * m * k..],
                true,
                &g[i * m * n..],
                false,
                &mut gb[ib * k * n..(ib + 1) * k * n],
                1.0,
            );
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn softmax(
    x: &[f64],
    (outer, len, inner): (usize, usize, usize),
    log: bool,
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..len {
                    y[at(j)] = x[at(j)] - max - lse;
                }
            } else {
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
    }
    y
}

/// Backward of softmax given its output `y`; for log-softmax `y` is the log output.
pub(crate) fn softmax_backward(
    y: &[f64],
    g: &[f64],
    (outer, len, inner): (usize, usize, usize),
    log: bool,
    gx: &mut [f64],
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            if log {
                let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                for j in 0..len {
                    gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                }
            } else {
                let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                for j in 0..len {
                    gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
    }
}

/// For each output element (row-major over the permuted shape), the source index.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        let mut ax = out_shape.len();
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            src += moved[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= moved[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

pub(crate) fn reduce_sum(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    out
}
