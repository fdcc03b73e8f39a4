//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly and records what backward needs; [`Graph::backward`] then walks the
//! nodes once in reverse append order, summing partials into each input.
//! Nodes whose inputs do not require gradients are never visited.
//!
//! ```
//! use ceat_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0]).with_requires_grad(true));
//! let sq = g.square(x);
//! let y = g.sum(sq, None).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Pick(Var, Vec<usize>),
    Margin {
        scores: Var,
        labels: Vec<usize>,
        runner_up: Vec<usize>,
    },
    ClampMin(Var, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Inserts an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Inserts a constant (never receives a gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|input|` seen by any ReLU in the graph, `+inf` if none.
    /// Finite-difference checks use it to stay clear of the kink.
    pub fn min_relu_input_magnitude(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.values().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(format!("{what} must be a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = tensor::matmul_kernel(self.vals(a), self.vals(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds the bias vector `b[M]` to every row of `x[N×M]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, m) = self.matrix_dims(x, "add_bias input")?;
        if self.shape(b) != [m] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match rows of width {m}",
                self.shape(b)
            )));
        }
        let bias = self.vals(b);
        let mut out = self.vals(x).to_vec();
        if m > 0 {
            for row in out.chunks_exact_mut(m) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, b), rg))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::dim(format!("conv2d input must be N×C×H×W, got {s:?}"))),
        };
        let f = match *self.shape(k) {
            [f, kc, 3, 3] if kc == c => f,
            ref s => {
                return Err(Error::dim(format!(
                    "conv2d kernel {s:?} incompatible with input {:?} (need F×{c}×3×3)",
                    self.shape(x)
                )))
            }
        };
        let out = tensor::conv2d_forward(self.vals(x), self.vals(k), (n, c, h, w), f);
        let rg = self.rg(&[x, k]);
        Ok(self.push(Tensor::new(vec![n, f, h, w], out)?, Op::Conv2d(x, k), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Row-wise softmax over the last axis of an `N×K` matrix.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(logits, "softmax input")?;
        let out = tensor::softmax_rows(self.vals(logits), k);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::Softmax(logits), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[y]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(logits, "cross_entropy logits")?;
        check_labels(labels, n, k)?;
        let z = self.vals(logits);
        let mut total = 0.0;
        for (row, &y) in z.chunks_exact(k.max(1)).zip(labels) {
            total += tensor::log_sum_exp(row) - row[y];
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let probs = tensor::softmax_rows(z, k);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural logarithm; inputs are expected to be positive.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// `max(x, floor)` elementwise; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, out) = self.reduce(x, axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum(x, axis), rg))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let count = match axis {
            None => self.value(x).len(),
            Some(a) => self.shape(x).get(a).copied().unwrap_or(0),
        };
        let (shape, mut out) = self.reduce(x, axis)?;
        if count > 0 {
            for v in out.iter_mut() {
                *v /= count as f64;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean(x, axis), rg))
    }

    /// `x[n, labels[n]]` for an `N×K` matrix, giving a length-`N` vector.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(x, "pick input")?;
        check_labels(labels, n, k)?;
        let xv = self.vals(x);
        let out = labels.iter().enumerate().map(|(i, &y)| xv[i * k + y]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Pick(x, labels.to_vec()), rg))
    }

    /// Per-row margin `s[y] - max_{j≠y} s[j]` of an `N×K` score matrix.
    /// The runner-up is the lowest index among tied maxima.
    pub fn margin(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(scores, "margin input")?;
        if k < 2 {
            return Err(Error::input("margin needs at least two classes"));
        }
        check_labels(labels, n, k)?;
        let sv = self.vals(scores);
        let mut out = Vec::with_capacity(n);
        let mut runner_up = Vec::with_capacity(n);
        for (row, &y) in sv.chunks_exact(k).zip(labels) {
            let mut best = if y == 0 { 1 } else { 0 };
            for (j, &v) in row.iter().enumerate() {
                if j != y && v > row[best] {
                    best = j;
                }
            }
            out.push(row[y] - row[best]);
            runner_up.push(best);
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::Margin {
                scores,
                labels: labels.to_vec(),
                runner_up,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.vals(x).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let out: Vec<f64> = t.values().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out).expect("unary op preserves length"),
            op,
            rg,
        )
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (shape, out): (Vec<usize>, Vec<f64>) = if ta.shape() == tb.shape() {
            let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), out)
        } else if tb.len() == 1 {
            let y = tb.values()[0];
            (ta.shape().to_vec(), ta.values().iter().map(|&x| f(x, y)).collect())
        } else if ta.len() == 1 {
            let x = ta.values()[0];
            (tb.shape().to_vec(), tb.values().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    fn reduce(&self, x: Var, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.value(x);
        match axis {
            None => Ok((Vec::new(), vec![t.values().iter().sum()])),
            Some(a) => {
                let shape = t.shape();
                if a >= shape.len() {
                    return Err(Error::input(format!(
                        "reduction axis {a} out of range for shape {shape:?}"
                    )));
                }
                let (outer, len, inner) = axis_split(shape, a);
                let mut out = vec![0.0; outer * inner];
                let v = t.values();
                for o in 0..outer {
                    for i in 0..len {
                        let src = &v[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let mut out_shape = shape.to_vec();
                out_shape.remove(a);
                Ok((out_shape, out))
            }
        }
    }

    /// Populates `grad` on every node that requires one, starting from the
    /// scalar `root` with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::usage("backward already ran on this graph"));
        }
        if self.value(root).len() != 1 {
            return Err(Error::usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::usage("backward root does not depend on any tracked input"));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.values();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(a, "matmul lhs")?;
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let bt = tensor::transpose(self.vals(b), k, n);
                    accumulate(grads, a, tensor::matmul_kernel(g, &bt, m, n, k));
                }
                if self.requires_grad(b) {
                    let at = tensor::transpose(self.vals(a), m, k);
                    accumulate(grads, b, tensor::matmul_kernel(&at, g, k, m, n));
                }
            }
            &Op::AddBias(x, b) => {
                if self.requires_grad(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.requires_grad(b) {
                    let m = self.value(b).len();
                    let mut db = vec![0.0; m];
                    if m > 0 {
                        for row in g.chunks_exact(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Conv2d(x, k) => {
                let s = self.shape(x);
                let dims = (s[0], s[1], s[2], s[3]);
                let f = self.shape(k)[0];
                let (dx, dk) = tensor::conv2d_backward(
                    self.vals(x),
                    self.vals(k),
                    g,
                    dims,
                    f,
                    self.requires_grad(x),
                    self.requires_grad(k),
                );
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, k, dk);
                }
            }
            &Op::Relu(x) => {
                let xv = self.vals(x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, d);
            }
            &Op::Softmax(x) => {
                let k = self.shape(x)[1];
                let mut d = vec![0.0; out.len()];
                if k > 0 {
                    for ((p, gr), dr) in out.chunks_exact(k).zip(g.chunks_exact(k)).zip(d.chunks_exact_mut(k)) {
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &pv), &gv) in dr.iter_mut().zip(p).zip(gr) {
                            *dv = pv * (gv - dot);
                        }
                    }
                }
                accumulate(grads, x, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = self.matrix_dims(*logits, "cross_entropy logits")?;
                let scale = g[0] / n.max(1) as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, d);
            }
            &Op::Add(a, b) => {
                self.elementwise_back(grads, a, g, |_, _| 1.0, b, true);
                self.elementwise_back(grads, b, g, |_, _| 1.0, a, true);
            }
            &Op::Sub(a, b) => {
                self.elementwise_back(grads, a, g, |_, _| 1.0, b, true);
                self.elementwise_back(grads, b, g, |_, _| -1.0, a, true);
            }
            &Op::Mul(a, b) => {
                // d(a·b)/da = b
                self.elementwise_back(grads, a, g, |_, other| other, b, false);
                self.elementwise_back(grads, b, g, |_, other| other, a, false);
            }
            &Op::Square(x) => self.unary_back(grads, x, g, |v, _| 2.0 * v),
            &Op::Abs(x) => self.unary_back(grads, x, g, |v, _| tensor::sign(v)),
            &Op::Exp(x) => {
                let d = g.iter().zip(out).map(|(gv, o)| gv * o).collect();
                accumulate(grads, x, d);
            }
            &Op::Log(x) => self.unary_back(grads, x, g, |v, _| 1.0 / v),
            &Op::Scale(x, f) => self.unary_back(grads, x, g, move |_, _| f),
            &Op::ClampMin(x, floor) => {
                self.unary_back(grads, x, g, move |v, _| if v > floor { 1.0 } else { 0.0 })
            }
            &Op::Sum(x, axis) => {
                let d = self.broadcast_back(x, axis, g, 1.0);
                accumulate(grads, x, d);
            }
            &Op::Mean(x, axis) => {
                let count = match axis {
                    None => self.value(x).len(),
                    Some(a) => self.shape(x)[a],
                };
                let d = self.broadcast_back(x, axis, g, 1.0 / count.max(1) as f64);
                accumulate(grads, x, d);
            }
            Op::Pick(x, labels) => {
                let k = self.shape(*x)[1];
                let mut d = vec![0.0; self.value(*x).len()];
                for (i, (&y, &gv)) in labels.iter().zip(g).enumerate() {
                    d[i * k + y] = gv;
                }
                accumulate(grads, *x, d);
            }
            Op::Margin {
                scores,
                labels,
                runner_up,
            } => {
                let k = self.shape(*scores)[1];
                let mut d = vec![0.0; self.value(*scores).len()];
                for (i, ((&y, &r), &gv)) in labels.iter().zip(runner_up).zip(g).enumerate() {
                    d[i * k + y] += gv;
                    d[i * k + r] -= gv;
                }
                accumulate(grads, *scores, d);
            }
            &Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
        }
        Ok(())
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        if !self.requires_grad(x) {
            return;
        }
        let d = g
            .iter()
            .zip(self.vals(x))
            .map(|(&gv, &v)| gv * deriv(v, 0.0))
            .collect();
        accumulate(grads, x, d);
    }

    /// Backward of a binary elementwise op for operand `x` whose partial is
    /// `deriv(x_i, other_i)`. Handles scalar broadcasting in either direction.
    /// `constant_partial` marks partials that do not read the operands.
    fn elementwise_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
        other: Var,
        constant_partial: bool,
    ) {
        if !self.requires_grad(x) {
            return;
        }
        let xv = self.vals(x);
        let ov = self.vals(other);
        let at = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
        let per_elem: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = if constant_partial {
                    deriv(0.0, 0.0)
                } else {
                    deriv(at(xv, i), at(ov, i))
                };
                g[i] * p
            })
            .collect();
        if xv.len() == per_elem.len() {
            accumulate(grads, x, per_elem);
        } else {
            // x was broadcast from a scalar
            accumulate(grads, x, vec![per_elem.iter().sum()]);
        }
    }

    fn broadcast_back(&self, x: Var, axis: Option<usize>, g: &[f64], factor: f64) -> Vec<f64> {
        let t = self.value(x);
        match axis {
            None => vec![g[0] * factor; t.len()],
            Some(a) => {
                let (outer, len, inner) = axis_split(t.shape(), a);
                let mut d = vec![0.0; t.len()];
                for o in 0..outer {
                    for i in 0..len {
                        let dst = &mut d[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (dv, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv = gv * factor;
                        }
                    }
                }
                d
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}
