//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is always
//! topologically sorted and backward is a single reverse sweep. Parameter leaves
//! read directly from a borrowed [`ParamStore`] rather than copying it.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`]. Together with the graph it plays
/// the role of a differentiable array: shape, data, on-demand grad, node id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    CausalMask(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Gather { input: Var, index: Vec<usize> },
    SelectRows { input: Var, rows: Vec<usize> },
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose data lives in the store.
    data: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// How an operand of an elementwise binary op maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

/// Computation graph over `f64` arrays.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameter access; every leaf is an explicit input.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.data, &node.op) {
            (Some(d), _) => d,
            (None, Op::Param(id)) => self
                .params
                .expect("param node without store")
                .get(*id)
                .data(),
            (None, _) => unreachable!("non-param node without data"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "item() on non-scalar node");
        d[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data: Some(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input. Gradients are still reported for it by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// A constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.params.expect("graph was created without a parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), Layout::N, self.value(b), Layout::N, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    fn broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sa.last() == sb.last() {
            Ok(Broadcast::Row)
        } else if nb == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mode = self.broadcast(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = match mode {
            Broadcast::Same => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Row => {
                let c = vb.len();
                va.iter().enumerate().map(|(i, x)| f(*x, vb[i % c])).collect()
            }
            Broadcast::Scalar => va.iter().map(|x| f(*x, vb[0])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    /// Elementwise sum; `b` may also be a row vector or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "minimum",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// `log(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let c = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LogSoftmax(a), rg)
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "causal_mask")?;
        if r != c {
            return Err(Error::Shape {
                op: "causal_mask",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], out, Op::CausalMask(a), rg))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::usage(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `input[r, index[r]]` for every row, giving a vector of length `rows`.
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(input, "gather")?;
        if index.len() != r {
            return Err(Error::Shape {
                op: "gather",
                left: vec![r, c],
                right: vec![index.len()],
            });
        }
        if let Some(bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::usage(format!("gather index {bad} out of range for {c} columns")));
        }
        let src = self.value(input);
        let out = index.iter().enumerate().map(|(row, &j)| src[row * c + j]).collect();
        let rg = self.rg(input);
        Ok(self.push(
            vec![r],
            out,
            Op::Gather {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of a matrix, in the given order (duplicates allowed).
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(input, "select_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::usage(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(input);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `[t, d1] ++ [t, d2] -> [t, d1 + d2]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_cols")?;
        let (rb, cb) = self.dims2(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                left: vec![ra, ca],
                right: vec![rb, cb],
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![ra, ca + cb], out, Op::ConcatCols(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Vec::new(), vec![m], Op::Mean(a), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (vx, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n_root: usize = self.shape(root).iter().product();
        if n_root != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.data.as_deref().unwrap_or(&[]);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k, n) = (sa[0], sa[1], self.shape(*b)[1]);
                if self.rg(*a) {
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, Layout::N, self.value(*b), Layout::T, buf);
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), Layout::T, g, Layout::N, buf);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let buf = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => {
                let buf = slot(grads, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let buf = slot(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.rg(*b) {
                    let nb = self.value(*b).len();
                    let buf = slot(grads, *b, nb);
                    for (j, gj) in g.iter().enumerate() {
                        buf[j % nb] += sign * gj;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if self.rg(*a) {
                    let buf = slot(grads, *a, g.len());
                    for (j, gj) in g.iter().enumerate() {
                        buf[j] += gj * vb[j % nb];
                    }
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, nb);
                    for (j, gj) in g.iter().enumerate() {
                        buf[j % nb] += gj * va[j];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let buf = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        if va[j] <= vb[j] {
                            buf[j] += g[j];
                        }
                    }
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        if va[j] > vb[j] {
                            buf[j] += g[j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let buf = slot(grads, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::Exp(a) => {
                let buf = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    buf[j] += g[j] * out[j];
                }
            }
            Op::Tanh(a) => {
                let buf = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    buf[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let buf = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    buf[j] += g[j] * gelu_grad(x[j]);
                }
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let buf = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    // d/dx log(sigmoid(x)) = sigmoid(-x)
                    buf[j] += g[j] * sigmoid(-x[j]);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let buf = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    if x[j] > *lo && x[j] < *hi {
                        buf[j] += g[j];
                    }
                }
            }
            Op::Softmax(a) => {
                let c = *node.shape.last().unwrap_or(&1);
                let buf = slot(grads, *a, g.len());
                for ((p, gr), b) in out.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                    let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        b[j] += p[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = *node.shape.last().unwrap_or(&1);
                let buf = slot(grads, *a, g.len());
                for ((lp, gr), b) in out.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        b[j] += gr[j] - lp[j].exp() * total;
                    }
                }
            }
            Op::CausalMask(a) => {
                let c = node.shape[1];
                let buf = slot(grads, *a, g.len());
                for r in 0..node.shape[0] {
                    for j in 0..=r {
                        buf[r * c + j] += g[r * c + j];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let n = self.value(*table).len();
                let buf = slot(grads, *table, n);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::Gather { input, index } => {
                let c = self.shape(*input)[1];
                let n = self.value(*input).len();
                let buf = slot(grads, *input, n);
                for (row, &j) in index.iter().enumerate() {
                    buf[row * c + j] += g[row];
                }
            }
            Op::SelectRows { input, rows } => {
                let c = node.shape[1];
                let n = self.value(*input).len();
                let buf = slot(grads, *input, n);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        buf[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let rows = node.shape[0];
                if self.rg(*a) {
                    let buf = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        for j in 0..ca {
                            buf[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        for j in 0..cb {
                            buf[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let buf = slot(grads, *a, n);
                buf.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let buf = slot(grads, *a, n);
                let s = g[0] / n as f64;
                buf.iter_mut().for_each(|x| *x += s);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap_or(&1);
                let rows = g.len() / d;
                let gam = self.value(*gamma);
                if self.rg(*gamma) {
                    let buf = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let buf = slot(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let buf = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[r * d + j] += inv_std[r] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Result of [`Graph::backward`]: gradient buffers for every reached node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::wrt`] but returns zeros for unreached nodes.
    pub fn wrt_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// Parameter gradients, ordered by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        let mut p = self.params.clone();
        p.sort_by_key(|(id, _)| *id);
        p.into_iter().filter_map(move |(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

#[derive(Clone, Copy)]
enum Layout {
    N,
    T,
}

/// `c += op(a) * op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
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

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
