use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::flow::spline;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Cos,
    Sin,
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// Left operand has one element.
    ScalarLeft,
    ScalarRight,
    /// Left operand matches the trailing axes of the right one.
    TrailingLeft(usize),
    TrailingRight(usize),
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Self, Vec<usize>)> {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        if a == b {
            Ok((Bcast::Same, a.to_vec()))
        } else if nb == 1 {
            Ok((Bcast::ScalarRight, a.to_vec()))
        } else if na == 1 {
            Ok((Bcast::ScalarLeft, b.to_vec()))
        } else if !a.is_empty() && &a[1..] == b {
            Ok((Bcast::TrailingRight(nb), a.to_vec()))
        } else if !b.is_empty() && &b[1..] == a {
            Ok((Bcast::TrailingLeft(na), b.to_vec()))
        } else {
            Err(Error::shape(op, format!("cannot combine {a:?} with {b:?}")))
        }
    }

    #[inline]
    fn idx(self, i: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::ScalarLeft => (0, i),
            Bcast::ScalarRight => (i, 0),
            Bcast::TrailingLeft(n) => (i % n, i),
            Bcast::TrailingRight(n) => (i, i % n),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Bcast),
    MatMul(Var, Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Unary(Var, UnaryKind),
    Pow(Var, f64),
    Softmax(Var, usize),
    Affine(Var, f64),
    SegmentMean(Var, Vec<usize>),
    RqSpline { u: Var, widths: Var, heights: Var, derivs: Var, bound: f64 },
    RqSplineInverse { v: Var, widths: Var, heights: Var, derivs: Var, bound: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is always a valid topological
/// order. A tape is single-threaded and meant to be rebuilt every step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// `(outer, len, inner)` strides for reducing or slicing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= a * b` for row-major `[m,k] x [k,n]` with explicit strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    // SAFETY: callers pass slices whose extents match (m, k, n) and the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximate floating-point operation count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, cost: usize) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.flops += cost as u64;
        crate::opcount::add(cost as u64);
        self.nodes.push(Node { value, op: kind });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, op: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bc, shape) = Bcast::resolve(op, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (ia, ib) = bc.idx(i);
                let (x, y) = (da[ia], db[ib]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        self.push(op, Tensor::from_parts(shape, out), Op::Binary(kind, a, b, bc), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("subtract", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("divide", BinaryKind::Div, a, b)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), 2 * m * k * n)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let shape = self.shape(a).to_vec();
        check_axis(name, &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let kind = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        self.push(name, Tensor::from_parts(oshape, out), kind, d.len())
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        let s: f64 = d.iter().sum();
        let n = d.len();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), n)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Repeats `a` along a new leading axis of length `count`.
    pub fn broadcast(&mut self, a: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::shape("broadcast", "zero repeat count"));
        }
        let t = self.value(a);
        let mut shape = vec![count];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(count);
        let n = data.len();
        self.push("broadcast", Tensor::from_parts(shape, data), Op::Broadcast(a), n)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concatenate", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concatenate", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concatenate", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let n = out.len();
        self.push("concatenate", Tensor::from_parts(shape, out), Op::Concat(inputs.to_vec(), axis), n)
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("{start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let n = out.len();
        self.push("slice", Tensor::from_parts(oshape, out), Op::Slice { input: a, axis, start }, n)
    }

    /// Selects rows (first-axis entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.shape().first().copied().unwrap_or(0);
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather", format!("indices out of range for {} rows", rows)));
        }
        let w: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let n = out.len();
        self.push("gather", Tensor::from_parts(shape, out), Op::GatherRows(a, indices.to_vec()), n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", value, Op::Reshape(a), 0)
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[r, c] = t.shape() else {
            return Err(Error::shape("transpose", format!("{:?} is not a matrix", t.shape())));
        };
        let value = Tensor::from_parts(vec![c, r], transposed(t.data(), r, c));
        self.push("transpose", value, Op::Transpose(a), 0)
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Tanh => ("tanh", f64::tanh),
            UnaryKind::Sigmoid => ("sigmoid", sigmoid),
            UnaryKind::Softplus => ("softplus", softplus),
            UnaryKind::Exp => ("exp", f64::exp),
            UnaryKind::Log => ("log", f64::ln),
            UnaryKind::Cos => ("cos", f64::cos),
            UnaryKind::Sin => ("sin", f64::sin),
        };
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let n = value.numel();
        self.push(name, value, Op::Unary(a, kind), n)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Cos)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sin)
    }

    /// Elementwise `a^p`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| x.powf(p)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let n = value.numel();
        self.push("power", value, Op::Pow(a, p), n)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let n = out.len();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a, axis), 3 * n)
    }

    /// `scale * a + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let n = value.numel();
        self.push("affine", value, Op::Affine(a, scale), n)
    }

    /// Mean over consecutive row segments: rows `offsets[i]..offsets[i+1]`
    /// of `a` become row `i` of the output.
    pub fn segment_mean(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.shape().first().copied().unwrap_or(0);
        let valid = offsets.len() >= 2
            && offsets[0] == 0
            && *offsets.last().unwrap() == rows
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(Error::shape("segment_mean", format!("offsets {offsets:?} for {rows} rows")));
        }
        let w: usize = t.shape()[1..].iter().product();
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * w];
        for s in 0..segs {
            let acc = &mut out[s * w..(s + 1) * w];
            for r in offsets[s]..offsets[s + 1] {
                for (o, v) in acc.iter_mut().zip(&t.data()[r * w..(r + 1) * w]) {
                    *o += v;
                }
            }
            let n = (offsets[s + 1] - offsets[s]) as f64;
            acc.iter_mut().for_each(|v| *v /= n);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = segs;
        let n = t.numel();
        self.push("segment_mean", Tensor::from_parts(shape, out), Op::SegmentMean(a, offsets.to_vec()), n)
    }

    fn spline_args(&self, op: &'static str, x: Var, widths: Var, heights: Var, derivs: Var) -> Result<(usize, usize)> {
        let n = self.value(x).numel();
        let (sw, sh, sd) = (self.shape(widths), self.shape(heights), self.shape(derivs));
        let ok = sw.len() == 2 && sw[0] == n && sw[1] >= 2 && sh == sw && sd.len() == 2 && sd[0] == n && sd[1] + 1 == sw[1];
        if !ok {
            return Err(Error::shape(
                op,
                format!("input {:?}, widths {sw:?}, heights {sh:?}, derivs {sd:?}", self.shape(x)),
            ));
        }
        let positive = [widths, heights, derivs]
            .iter()
            .all(|&v| self.value(v).data().iter().all(|&p| p > 0.0));
        if !positive {
            return Err(Error::InvalidArgument(format!("{op}: non-positive bin parameter")));
        }
        Ok((n, sw[1]))
    }

    /// Rational-quadratic spline applied row-wise. Output is `[N, 2]`
    /// holding `(v, log dv/du)` per row. `widths`/`heights` are `[N, K]`
    /// fractions of `[-bound, bound]`; `derivs` are `[N, K-1]`.
    pub fn rq_spline(&mut self, u: Var, widths: Var, heights: Var, derivs: Var, bound: f64) -> Result<Var> {
        let (n, k) = self.spline_args("rq_spline", u, widths, heights, derivs)?;
        let (du, dw, dh, dd) = (
            self.value(u).data(),
            self.value(widths).data(),
            self.value(heights).data(),
            self.value(derivs).data(),
        );
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let (w, h, d) = (&dw[i * k..(i + 1) * k], &dh[i * k..(i + 1) * k], &dd[i * (k - 1)..(i + 1) * (k - 1)]);
            match spline::locate_x(du[i], w, h, d, bound) {
                None => out.extend_from_slice(&[du[i], 0.0]),
                Some(bin) => {
                    let e = spline::eval_bin(du[i], &bin);
                    out.extend_from_slice(&[e.value, e.log_deriv]);
                }
            }
        }
        let op = Op::RqSpline { u, widths, heights, derivs, bound };
        self.push("rq_spline", Tensor::from_parts(vec![n, 2], out), op, 30 * n + 4 * n * k)
    }

    /// Inverse of [`Tape::rq_spline`]. Output is `[N, 2]` holding
    /// `(u, log du/dv)` per row.
    pub fn rq_spline_inverse(&mut self, v: Var, widths: Var, heights: Var, derivs: Var, bound: f64) -> Result<Var> {
        let (n, k) = self.spline_args("rq_spline_inverse", v, widths, heights, derivs)?;
        let (dv, dw, dh, dd) = (
            self.value(v).data(),
            self.value(widths).data(),
            self.value(heights).data(),
            self.value(derivs).data(),
        );
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let (w, h, d) = (&dw[i * k..(i + 1) * k], &dh[i * k..(i + 1) * k], &dd[i * (k - 1)..(i + 1) * (k - 1)]);
            match spline::locate_y(dv[i], w, h, d, bound) {
                None => out.extend_from_slice(&[dv[i], 0.0]),
                Some(bin) => {
                    let u = spline::invert_bin(dv[i], &bin);
                    let e = spline::eval_bin(u, &bin);
                    out.extend_from_slice(&[u, -e.log_deriv]);
                }
            }
        }
        let op = Op::RqSplineInverse { v, widths, heights, derivs, bound };
        self.push("rq_spline_inverse", Tensor::from_parts(vec![n, 2], out), op, 40 * n + 4 * n * k)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.rank() > 1 || rv.numel() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Binary(kind, a, b, bc) => {
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![0.0; da.len()];
                    let mut gb = vec![0.0; db.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = bc.idx(i);
                        match kind {
                            BinaryKind::Add => {
                                ga[ia] += gi;
                                gb[ib] += gi;
                            }
                            BinaryKind::Sub => {
                                ga[ia] += gi;
                                gb[ib] -= gi;
                            }
                            BinaryKind::Mul => {
                                ga[ia] += gi * db[ib];
                                gb[ib] += gi * da[ia];
                            }
                            BinaryKind::Div => {
                                ga[ia] += gi / db[ib];
                                gb[ib] -= gi * da[ia] / (db[ib] * db[ib]);
                            }
                        }
                    }
                    add_into(acc(&mut grads, &self.nodes, *a), &ga);
                    add_into(acc(&mut grads, &self.nodes, *b), &gb);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    // dA = G B^T, dB = A^T G
                    let ga = acc(&mut grads, &self.nodes, *a);
                    gemm(m, n, k, &g, (n, 1), db, (1, n), ga, 1.0);
                    let gb = acc(&mut grads, &self.nodes, *b);
                    gemm(k, m, n, da, (1, k), &g, (n, 1), gb, 1.0);
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let shape = self.shape(*a).to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                ga[(o * len + l) * inner + j] += scale * g[o * inner + j];
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Broadcast(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    let w = ga.len();
                    for chunk in g.chunks(w) {
                        add_into(ga, chunk);
                    }
                }
                Op::Concat(inputs, axis) => {
                    let shape = node.value.shape().to_vec();
                    let (outer, total, inner) = axis_split(&shape, *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis];
                        let gv = acc(&mut grads, &self.nodes, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let shape = self.shape(*input).to_vec();
                    let (outer, full, inner) = axis_split(&shape, *axis);
                    let len = node.value.shape()[*axis];
                    let gi = acc(&mut grads, &self.nodes, *input);
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut gi[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                Op::GatherRows(a, indices) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    let w = g.len() / indices.len();
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
                Op::Reshape(a) => add_into(acc(&mut grads, &self.nodes, *a), &g),
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let gt = transposed(&g, s[1], s[0]);
                    add_into(acc(&mut grads, &self.nodes, *a), &gt);
                }
                Op::Unary(a, kind) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Softplus => sigmoid(x[i]),
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Cos => -x[i].sin(),
                            UnaryKind::Sin => x[i].cos(),
                        };
                        ga[i] += g[i] * d;
                    }
                }
                Op::Pow(a, p) => {
                    let x = self.value(*a).data();
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * p * x[i].powf(p - 1.0);
                    }
                }
                Op::Softmax(a, axis) => {
                    let shape = node.value.shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let y = node.value.data();
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + j;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
                Op::Affine(a, scale) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for (o, gi) in ga.iter_mut().zip(&g) {
                        *o += scale * gi;
                    }
                }
                Op::SegmentMean(a, offsets) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    let w = g.len() / (offsets.len() - 1);
                    for s in 0..offsets.len() - 1 {
                        let n = (offsets[s + 1] - offsets[s]) as f64;
                        for r in offsets[s]..offsets[s + 1] {
                            for j in 0..w {
                                ga[r * w + j] += g[s * w + j] / n;
                            }
                        }
                    }
                }
                Op::RqSpline { u, widths, heights, derivs, bound } => {
                    let k = self.shape(*widths)[1];
                    let (du, dw, dh, dd) = (
                        self.value(*u).data(),
                        self.value(*widths).data(),
                        self.value(*heights).data(),
                        self.value(*derivs).data(),
                    );
                    let n = du.len();
                    let mut gu = vec![0.0; n];
                    let mut gw = vec![0.0; n * k];
                    let mut gh = vec![0.0; n * k];
                    let mut gd = vec![0.0; n * (k - 1)];
                    for i in 0..n {
                        let (cv, cl) = (g[2 * i], g[2 * i + 1]);
                        let (w, h, d) = (&dw[i * k..(i + 1) * k], &dh[i * k..(i + 1) * k], &dd[i * (k - 1)..(i + 1) * (k - 1)]);
                        match spline::locate_x(du[i], w, h, d, *bound) {
                            None => gu[i] += cv,
                            Some(bin) => {
                                let e = spline::eval_bin(du[i], &bin);
                                let (pv, pl) = spline::partial_u(&e);
                                gu[i] += cv * pv + cl * pl;
                                spline::scatter_partials(
                                    &bin,
                                    &e,
                                    cv,
                                    cl,
                                    *bound,
                                    &mut gw[i * k..(i + 1) * k],
                                    &mut gh[i * k..(i + 1) * k],
                                    &mut gd[i * (k - 1)..(i + 1) * (k - 1)],
                                );
                            }
                        }
                    }
                    add_into(acc(&mut grads, &self.nodes, *u), &gu);
                    add_into(acc(&mut grads, &self.nodes, *widths), &gw);
                    add_into(acc(&mut grads, &self.nodes, *heights), &gh);
                    add_into(acc(&mut grads, &self.nodes, *derivs), &gd);
                }
                Op::RqSplineInverse { v, widths, heights, derivs, bound } => {
                    let k = self.shape(*widths)[1];
                    let (dv, dw, dh, dd) = (
                        self.value(*v).data(),
                        self.value(*widths).data(),
                        self.value(*heights).data(),
                        self.value(*derivs).data(),
                    );
                    let out = node.value.data();
                    let n = dv.len();
                    let mut gv = vec![0.0; n];
                    let mut gw = vec![0.0; n * k];
                    let mut gh = vec![0.0; n * k];
                    let mut gd = vec![0.0; n * (k - 1)];
                    for i in 0..n {
                        let (g_u, g_l) = (g[2 * i], g[2 * i + 1]);
                        let (w, h, d) = (&dw[i * k..(i + 1) * k], &dh[i * k..(i + 1) * k], &dd[i * (k - 1)..(i + 1) * (k - 1)]);
                        match spline::locate_y(dv[i], w, h, d, *bound) {
                            None => gv[i] += g_u,
                            Some(bin) => {
                                // Implicit differentiation of s(u(v, p), p) = v.
                                let e = spline::eval_bin(out[2 * i], &bin);
                                let (s_u, l_u) = spline::partial_u(&e);
                                let g_v = (g_u - g_l * l_u) / s_u;
                                gv[i] += g_v;
                                spline::scatter_partials(
                                    &bin,
                                    &e,
                                    -g_v,
                                    -g_l,
                                    *bound,
                                    &mut gw[i * k..(i + 1) * k],
                                    &mut gh[i * k..(i + 1) * k],
                                    &mut gd[i * (k - 1)..(i + 1) * (k - 1)],
                                );
                            }
                        }
                    }
                    add_into(acc(&mut grads, &self.nodes, *v), &gv);
                    add_into(acc(&mut grads, &self.nodes, *widths), &gw);
                    add_into(acc(&mut grads, &self.nodes, *heights), &gh);
                    add_into(acc(&mut grads, &self.nodes, *derivs), &gd);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn transposed(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adjoints of the leaves reachable from a backward root.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zero when the leaf was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
