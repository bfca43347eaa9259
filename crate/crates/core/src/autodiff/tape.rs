//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value and the ids
//! of its inputs. Inputs always precede the node that consumes them, so the
//! insertion order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{shape_err, Error, Result};

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Affine { w: Var, b: Var, x: Var },
    MatVec { m: Var, v: Var },
    Gelu(Var),
    MaskMul { x: Var, mask: Tensor },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Exp(Var),
    RowSum(Var),
    SqDistGram(Var, Var),
    Sum(Var),
    OffDiagSum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only operation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    entries: Vec<(Var, Tensor)>,
}

impl GradMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Standard normal CDF via `erfc`, accurate deep into the lower tail.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
/// Sum that depends only on the multiset of values, not their order.
fn invariant_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameter leaves in insertion order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Param, value, &[]);
        self.params.push(v);
        v
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, &[])
    }

    fn check_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(shape_err(op, "a vector", s));
        }
        Ok(s[0])
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, "a matrix", s));
        }
        Ok((s[0], s[1]))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `W·x + b` for `W: [m×n]`, `b: [m]`, `x: [n]`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("affine", w)?;
        let xn = self.check_vector("affine", x)?;
        if xn != n {
            return Err(shape_err("affine (input)", [n], [xn]));
        }
        if self.shape(b) != [m] {
            return Err(shape_err("affine (bias)", [m], self.shape(b)));
        }
        let mut out = matvec(self.value(w), self.value(x).data());
        for (o, bi) in out.iter_mut().zip(self.value(b).data()) {
            *o += bi;
        }
        Ok(self.push(Op::Affine { w, b, x }, Tensor::from_parts(vec![m], out), &[w, b, x]))
    }

    /// `M·v` for `M: [m×n]`, `v: [n]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, n) = self.check_matrix("matvec", m)?;
        let vn = self.check_vector("matvec", v)?;
        if vn != n {
            return Err(shape_err("matvec (vector)", [n], [vn]));
        }
        let out = matvec(self.value(m), self.value(v).data());
        Ok(self.push(Op::MatVec { m, v }, Tensor::from_parts(vec![rows], out), &[m, v]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite("gelu input"));
        }
        let out = xv.map(gelu);
        Ok(self.push(Op::Gelu(x), out, &[x]))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(shape_err("mask_mul", self.shape(x), mask.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let out = Tensor::from_parts(mask.shape().to_vec(), data);
        Ok(self.push(Op::MaskMul { x, mask }, out, &[x]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(Op::Scale(x, c), out, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), out, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out, &[x])
    }

    /// Row sums of a matrix: `[m×n] → [m]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.check_matrix("row_sum", x)?;
        let xv = self.value(x);
        let data = (0..m).map(|i| xv.row(i).iter().sum()).collect();
        Ok(self.push(Op::RowSum(x), Tensor::from_parts(vec![m], data), &[x]))
    }

    /// Pairwise squared distances `D[i,j] = ‖a_i − b_j‖²` between the rows of
    /// `a: [m×d]` and `b: [n×d]`.
    pub fn sq_dist_gram(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.check_matrix("sq_dist_gram", a)?;
        let (n, db) = self.check_matrix("sq_dist_gram", b)?;
        if d != db {
            return Err(shape_err("sq_dist_gram (row dim)", d, db));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = av.row(i);
            for j in 0..n {
                let bj = bv.row(j);
                let mut s = 0.0;
                for k in 0..d {
                    let t = ai[k] - bj[k];
                    s += t * t;
                }
                data.push(s);
            }
        }
        Ok(self.push(Op::SqDistGram(a, b), Tensor::from_parts(vec![m, n], data), &[a, b]))
    }

    /// Sum of all entries, independent of their order.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = invariant_sum(self.value(x).data().iter().copied());
        self.push(Op::Sum(x), Tensor::from_parts(vec![1], vec![s]), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ_i a_i·b_i` as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Sum of the off-diagonal entries of a square matrix, independent of their order.
    pub fn off_diag_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("off_diag_sum", x)?;
        if m != n {
            return Err(shape_err("off_diag_sum", "a square matrix", [m, n]));
        }
        let xv = self.value(x);
        let s = invariant_sum(
            (0..m).flat_map(|i| xv.row(i).iter().enumerate().filter(move |&(j, _)| j != i).map(|(_, &v)| v)),
        );
        Ok(self.push(Op::OffDiagSum(x), Tensor::from_parts(vec![1], vec![s]), &[x]))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            self.check_vector("concat", p)?;
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(vec![n], data), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out, &[x]))
    }

    /// Reverse sweep from a scalar node. Returns a gradient for every
    /// parameter leaf (zeros when the output does not depend on it).
    pub fn backward(&self, output: Var) -> Result<GradMap> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "output node {} not on a tape of {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(Error::NotScalar(out_shape.to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let entries = self
            .params
            .iter()
            .map(|&p| {
                let shape = self.shape(p).to_vec();
                let t = match grads.get_mut(p.0).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(shape),
                };
                (p, t)
            })
            .collect();
        Ok(GradMap { entries })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulator for input `v`; `None` when `v` carries no gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Affine { w, b, x } => {
                let wv = self.value(*w);
                let xv = self.value(*x).data();
                let n = xv.len();
                acc(*w, &mut |gw| {
                    for (i, gi) in g.iter().enumerate() {
                        if *gi != 0.0 {
                            axpy(*gi, xv, &mut gw[i * n..(i + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| axpy(1.0, g, gb));
                acc(*x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        if *gi != 0.0 {
                            axpy(*gi, wv.row(i), gx);
                        }
                    }
                });
            }
            Op::MatVec { m, v } => {
                let mv = self.value(*m);
                let vv = self.value(*v).data();
                let n = vv.len();
                acc(*m, &mut |gm| {
                    for (i, gi) in g.iter().enumerate() {
                        axpy(*gi, vv, &mut gm[i * n..(i + 1) * n]);
                    }
                });
                acc(*v, &mut |gv| {
                    for (i, gi) in g.iter().enumerate() {
                        axpy(*gi, mv.row(i), gv);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((a, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gi * gelu_derivative(*xi);
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                acc(*x, &mut |gx| {
                    for ((a, gi), m) in gx.iter_mut().zip(g).zip(mask.data()) {
                        *a += gi * m;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(1.0, g, ga));
                acc(*b, &mut |gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(1.0, g, ga));
                acc(*b, &mut |gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((s, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *s += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((s, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *s += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| axpy(*c, g, gx)),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((s, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        // sign(0) = 0
                        if *xi > 0.0 {
                            *s += gi;
                        } else if *xi < 0.0 {
                            *s -= gi;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let out = node.value.data();
                acc(*x, &mut |gx| {
                    for ((s, gi), o) in gx.iter_mut().zip(g).zip(out) {
                        *s += gi * o;
                    }
                });
            }
            Op::RowSum(x) => {
                let cols = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        for s in &mut gx[i * cols..(i + 1) * cols] {
                            *s += gi;
                        }
                    }
                });
            }
            Op::SqDistGram(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, d) = (av.rows(), av.cols());
                let n = bv.rows();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let ai = av.row(i);
                        let gai = &mut ga[i * d..(i + 1) * d];
                        for j in 0..n {
                            let c = 2.0 * g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for ((s, x), y) in gai.iter_mut().zip(ai).zip(bv.row(j)) {
                                *s += c * (x - y);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..n {
                        let bj = bv.row(j);
                        let gbj = &mut gb[j * d..(j + 1) * d];
                        for i in 0..m {
                            let c = 2.0 * g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for ((s, y), x) in gbj.iter_mut().zip(bj).zip(av.row(i)) {
                                *s -= c * (x - y);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|s| *s += g0));
            }
            Op::OffDiagSum(x) => {
                let g0 = g[0];
                let n = self.value(*x).rows();
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                gx[i * n + j] += g0;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |gp| axpy(1.0, slice, gp));
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| axpy(1.0, g, gx)),
        }
    }
}
