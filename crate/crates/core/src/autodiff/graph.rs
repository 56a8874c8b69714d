//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. A node needs a
//! gradient iff one of its inputs does; constants (data, detached target
//! networks) never receive adjoints. The first non-finite forward value
//! poisons the tape and every later read reports it.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::{ParamSet, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Parameter names bound to leaf nodes of one graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Names under `prefix/`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Bound {
        let head = format!("{prefix}/");
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(head.as_str()).map(|rest| (rest.to_string(), *v)))
            .collect();
        Bound { vars }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    AddBias(usize, usize),
    MulRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Min(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    LayerNorm(usize),
    Exp(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Expectile(usize, f64),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    RowMax(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    RepeatRows(usize, usize),
    GroupMean(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    poisoned: Option<String>,
}

/// Adjoints computed by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for every parameter in `bound`; parameters the loss does not
    /// depend on get zero tensors.
    pub fn wrt(&self, bound: &Bound) -> ParamSet {
        bound
            .vars
            .iter()
            .map(|(name, v)| {
                let shape = self.shapes[v.0].clone();
                let t = match &self.adjoints[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("adjoint has node shape"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), t)
            })
            .collect()
    }

    pub fn of(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.adjoints[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("adjoint has node shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(name.to_string());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    /// Fails if any forward value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    /// Scalar value of a node, checking the tape is finite.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.check_finite()?;
        let t = self.val(v);
        if !t.is_scalar() {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.item())
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false, "constant")
    }

    /// Bind every parameter as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params.iter().map(|(k, t)| (k.clone(), self.leaf(t.clone()))).collect();
        Bound { vars }
    }

    /// Bind parameters as constants (detached; gradients never reach them).
    pub fn bind_const(&mut self, params: &ParamSet) -> Bound {
        let vars = params.iter().map(|(k, t)| (k.clone(), self.constant(t.clone()))).collect();
        Bound { vars }
    }

    /// Value-level detachment: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.val(v).clone();
        self.constant(t)
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.val(v).shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2(a, "matmul")?;
        let (k2, m) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul(n, k, m, self.val(a).data(), self.val(b).data(), &mut out, false);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a.0, b.0), ng, "matmul"))
    }

    /// `x[i, j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, m) = self.rank2(x, "add_bias")?;
        if self.val(b).numel() != m {
            return Err(shape_err("add_bias", format!("bias len {} vs cols {m}", self.val(b).numel())));
        }
        let bias = self.val(b).data().to_vec();
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x.0) || self.ng(b.0);
        Ok(self.push(out, Op::AddBias(x.0, b.0), ng, "add_bias"))
    }

    /// `x[i, j] * w[j]`.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (_, m) = self.rank2(x, "mul_row")?;
        if self.val(w).numel() != m {
            return Err(shape_err("mul_row", "row vector length differs from cols"));
        }
        let wv = self.val(w).data().to_vec();
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, ww) in row.iter_mut().zip(&wv) {
                *o *= ww;
            }
        }
        let ng = self.ng(x.0) || self.ng(w.0);
        Ok(self.push(out, Op::MulRow(x.0, w.0), ng, "mul_row"))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.val(a);
        let data = va.data().iter().zip(self.val(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, op, ng, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    /// Elementwise minimum; the gradient goes to `a` on ties.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Min(a.0, b.0), "min", f64::min)
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var {
        let out = self.val(x).map(f);
        let ng = self.ng(x.0);
        self.push(out, op, ng, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x.0, c), "scale", |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x.0), "add_scalar", |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x.0), "gelu", kernels::gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), "exp", f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), "square", |v| v * v)
    }

    /// Clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x.0, lo, hi), "clamp", |v| v.clamp(lo, hi))
    }

    /// Elementwise `|mu - 1(x < 0)| x²`.
    pub fn expectile(&mut self, x: Var, mu: f64) -> Var {
        self.unary(x, Op::Expectile(x.0, mu), "expectile", |v| kernels::expectile(v, mu))
    }

    /// Row-wise standardisation of a rank-2 tensor.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.rank2(x, "layer_norm")?;
        let mut out = vec![0.0; n * m];
        kernels::layer_norm_rows(self.val(x).data(), m, &mut out);
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::LayerNorm(x.0), ng, "layer_norm"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        let ng = self.ng(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(x.0);
        self.push(Tensor::scalar(s), Op::Mean(x.0), ng, "mean")
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.rank2(x, "sum_cols")?;
        let data = self.val(x).data().chunks_exact(m).map(|r| r.iter().sum()).collect();
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::matrix(n, 1, data)?, Op::SumCols(x.0), ng, "sum_cols"))
    }

    /// Row maxima: `[n, m] -> [n, 1]`; gradient to the first maximiser.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.rank2(x, "row_max")?;
        let data = self
            .val(x)
            .data()
            .chunks_exact(m)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::matrix(n, 1, data)?, Op::RowMax(x.0), ng, "row_max"))
    }

    /// Column-wise concatenation of rank-2 nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        if tensors.iter().any(|t| t.shape().len() != 2) {
            return Err(shape_err("concat", "all parts must be rank 2"));
        }
        let out = Tensor::hcat(&tensors)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect()), ng, "concat"))
    }

    /// Columns `start..end` of a rank-2 node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.rank2(x, "slice_cols")?;
        if start >= end || end > m {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {m}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for r in self.val(x).data().chunks_exact(m) {
            data.extend_from_slice(&r[start..end]);
        }
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::matrix(n, w, data)?, Op::Slice(x.0, start, end), ng, "slice_cols"))
    }

    /// Repeat each row `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        self.rank2(x, "repeat_rows")?;
        let out = self.val(x).repeat_rows(k);
        let ng = self.ng(x.0);
        Ok(self.push(out, Op::RepeatRows(x.0, k), ng, "repeat_rows"))
    }

    /// Mean over consecutive groups of `k` rows: `[n*k, m] -> [n, m]`.
    pub fn group_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let (nk, m) = self.rank2(x, "group_mean")?;
        if k == 0 || nk % k != 0 {
            return Err(shape_err("group_mean", format!("{nk} rows not divisible by {k}")));
        }
        let n = nk / k;
        let src = self.val(x).data();
        let mut data = vec![0.0; n * m];
        for g in 0..n {
            let dst = &mut data[g * m..(g + 1) * m];
            for r in 0..k {
                for (d, s) in dst.iter_mut().zip(&src[(g * k + r) * m..(g * k + r + 1) * m]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= k as f64;
            }
        }
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::GroupMean(x.0, k), ng, "group_mean"))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(x).clone().reshape(shape)?;
        let ng = self.ng(x.0);
        Ok(self.push(out, Op::Reshape(x.0), ng, "reshape"))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let lt = self.val(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (i, a) in adj.iter().enumerate() {
            if let Some(a) = a {
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }

    /// Convenience: gradients of `loss` with respect to one bound set.
    pub fn grads(&self, loss: Var, bound: &Bound) -> Result<ParamSet> {
        Ok(self.backward(loss)?.wrt(bound))
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let acc = |adj: &mut [Option<Vec<f64>>], j: usize| -> Option<usize> {
            if !nodes[j].needs_grad {
                return None;
            }
            if adj[j].is_none() {
                adj[j] = Some(vec![0.0; nodes[j].value.numel()]);
            }
            Some(j)
        };
        let out = &nodes[i].value;
        match nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let m = nodes[b].value.shape()[1];
                if let Some(a_) = acc(adj, a) {
                    let buf = adj[a_].as_mut().unwrap();
                    kernels::matmul_bt_acc(n, m, k, g, nodes[b].value.data(), buf);
                }
                if let Some(b_) = acc(adj, b) {
                    let buf = adj[b_].as_mut().unwrap();
                    kernels::matmul_at_acc(n, k, m, nodes[a].value.data(), g, buf);
                }
            }
            Op::AddBias(x, b) => {
                let m = out.cols();
                if let Some(x_) = acc(adj, x) {
                    add_into(adj[x_].as_mut().unwrap(), g);
                }
                if let Some(b_) = acc(adj, b) {
                    let buf = adj[b_].as_mut().unwrap();
                    for row in g.chunks_exact(m) {
                        add_into(buf, row);
                    }
                }
            }
            Op::MulRow(x, w) => {
                let m = out.cols();
                let wv = nodes[w].value.data();
                if let Some(x_) = acc(adj, x) {
                    let buf = adj[x_].as_mut().unwrap();
                    for (brow, grow) in buf.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                        for ((b, gg), ww) in brow.iter_mut().zip(grow).zip(wv) {
                            *b += gg * ww;
                        }
                    }
                }
                if let Some(w_) = acc(adj, w) {
                    let xv = nodes[x].value.data();
                    let buf = adj[w_].as_mut().unwrap();
                    for (xrow, grow) in xv.chunks_exact(m).zip(g.chunks_exact(m)) {
                        for ((b, gg), xx) in buf.iter_mut().zip(grow).zip(xrow) {
                            *b += gg * xx;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(a_) = acc(adj, a) {
                    add_into(adj[a_].as_mut().unwrap(), g);
                }
                if let Some(b_) = acc(adj, b) {
                    add_into(adj[b_].as_mut().unwrap(), g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(a_) = acc(adj, a) {
                    add_into(adj[a_].as_mut().unwrap(), g);
                }
                if let Some(b_) = acc(adj, b) {
                    for (d, gg) in adj[b_].as_mut().unwrap().iter_mut().zip(g) {
                        *d -= gg;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(a_) = acc(adj, a) {
                    let bv = nodes[b].value.data();
                    for ((d, gg), y) in adj[a_].as_mut().unwrap().iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                }
                if let Some(b_) = acc(adj, b) {
                    let av = nodes[a].value.data();
                    for ((d, gg), x) in adj[b_].as_mut().unwrap().iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                if let Some(a_) = acc(adj, a) {
                    let buf = adj[a_].as_mut().unwrap();
                    for (k, gg) in g.iter().enumerate() {
                        if av[k] <= bv[k] {
                            buf[k] += gg;
                        }
                    }
                }
                if let Some(b_) = acc(adj, b) {
                    let buf = adj[b_].as_mut().unwrap();
                    for (k, gg) in g.iter().enumerate() {
                        if av[k] > bv[k] {
                            buf[k] += gg;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(x_) = acc(adj, x) {
                    for (d, gg) in adj[x_].as_mut().unwrap().iter_mut().zip(g) {
                        *d += gg * c;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(x_) = acc(adj, x) {
                    add_into(adj[x_].as_mut().unwrap(), g);
                }
            }
            Op::Gelu(x) => self.unary_back(i, x, g, adj, |xv, _| kernels::gelu_grad(xv)),
            Op::Exp(x) => self.unary_back(i, x, g, adj, |_, y| y),
            Op::Square(x) => self.unary_back(i, x, g, adj, |xv, _| 2.0 * xv),
            Op::Clamp(x, lo, hi) => {
                self.unary_back(i, x, g, adj, |xv, _| if (lo..=hi).contains(&xv) { 1.0 } else { 0.0 })
            }
            Op::Expectile(x, mu) => self.unary_back(i, x, g, adj, |xv, _| kernels::expectile_grad(xv, mu)),
            Op::LayerNorm(x) => {
                if let Some(x_) = acc(adj, x) {
                    let m = out.cols();
                    let buf = adj[x_].as_mut().unwrap();
                    kernels::layer_norm_rows_backward(nodes[x].value.data(), out.data(), g, m, buf);
                }
            }
            Op::Sum(x) => {
                if let Some(x_) = acc(adj, x) {
                    for d in adj[x_].as_mut().unwrap().iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(x_) = acc(adj, x) {
                    let s = g[0] / nodes[x].value.numel() as f64;
                    for d in adj[x_].as_mut().unwrap().iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumCols(x) => {
                if let Some(x_) = acc(adj, x) {
                    let m = nodes[x].value.cols();
                    for (row, gg) in adj[x_].as_mut().unwrap().chunks_exact_mut(m).zip(g) {
                        for d in row {
                            *d += gg;
                        }
                    }
                }
            }
            Op::RowMax(x) => {
                if let Some(x_) = acc(adj, x) {
                    let m = nodes[x].value.cols();
                    let xv = nodes[x].value.data();
                    let buf = adj[x_].as_mut().unwrap();
                    for (r, gg) in g.iter().enumerate() {
                        let row = &xv[r * m..(r + 1) * m];
                        let mut best = 0;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        buf[r * m + best] += gg;
                    }
                }
            }
            Op::Concat(ref parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if let Some(p_) = acc(adj, p) {
                        let buf = adj[p_].as_mut().unwrap();
                        for (brow, grow) in buf.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(brow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start, end) => {
                if let Some(x_) = acc(adj, x) {
                    let m = nodes[x].value.cols();
                    let w = end - start;
                    let buf = adj[x_].as_mut().unwrap();
                    for (brow, grow) in buf.chunks_exact_mut(m).zip(g.chunks_exact(w)) {
                        add_into(&mut brow[start..end], grow);
                    }
                }
            }
            Op::RepeatRows(x, k) => {
                if let Some(x_) = acc(adj, x) {
                    let m = nodes[x].value.cols();
                    let buf = adj[x_].as_mut().unwrap();
                    for (r, brow) in buf.chunks_exact_mut(m).enumerate() {
                        for rep in 0..k {
                            let off = (r * k + rep) * m;
                            add_into(brow, &g[off..off + m]);
                        }
                    }
                }
            }
            Op::GroupMean(x, k) => {
                if let Some(x_) = acc(adj, x) {
                    let m = out.cols();
                    let buf = adj[x_].as_mut().unwrap();
                    for (r, brow) in buf.chunks_exact_mut(m).enumerate() {
                        let grp = r / k;
                        for (d, gg) in brow.iter_mut().zip(&g[grp * m..(grp + 1) * m]) {
                            *d += gg / k as f64;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(x_) = acc(adj, x) {
                    add_into(adj[x_].as_mut().unwrap(), g);
                }
            }
        }
    }

    fn unary_back(&self, i: usize, x: usize, g: &[f64], adj: &mut [Option<Vec<f64>>], d: impl Fn(f64, f64) -> f64) {
        if !self.nodes[x].needs_grad {
            return;
        }
        let xv = self.nodes[x].value.data();
        let yv = self.nodes[i].value.data();
        let buf = adj[x].get_or_insert_with(|| vec![0.0; xv.len()]);
        for (((b, gg), &xx), &yy) in buf.iter_mut().zip(g).zip(xv).zip(yv) {
            *b += gg * d(xx, yy);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
