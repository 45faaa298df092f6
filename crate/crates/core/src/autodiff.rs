//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! Nodes hold dense `f64` vectors or row-major matrices. A [`Graph`] is
//! built fresh for every example; parameters live outside the graph in a
//! slice of [`Tensor`]s and are copied in as leaves with [`Graph::param`].
//! [`Graph::backward`] accumulates into those tensors' `grad` buffers.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// A dense parameter or value buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape must have one or two positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel], requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => unreachable!("validated in Tensor::new"),
        }
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }
}

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatVec(usize, usize),
    MatTVec(usize, usize),
    Row(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    LnFloored(usize, f64),
    Softmax(usize),
    Pick(usize, usize),
    Sum(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// The tape. Single-threaded; build one per example.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once [`Graph::backward`] has run.
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn owns(&self, v: Var) -> bool {
        v.graph == self.id && v.index < self.nodes.len()
    }

    fn idx(&self, v: Var) -> usize {
        assert!(self.owns(v), "variable belongs to a different graph");
        v.index
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::MatVec(a, b)
            | Op::MatTVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b) => self.nodes[*a].requires_grad || self.nodes[*b].requires_grad,
            Op::Row(a, _)
            | Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::LnFloored(a, _)
            | Op::Softmax(a)
            | Op::Pick(a, _)
            | Op::Sum(a) => self.nodes[*a].requires_grad,
            Op::Concat(xs) | Op::Stack(xs) => xs.iter().any(|&x| self.nodes[x].requires_grad),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A constant vector leaf.
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(values, n, 1, Op::Input)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], 1, 1, Op::Input)
    }

    /// Copies `tensor` into the graph as a leaf bound to `slot` of the
    /// parameter slice later handed to [`Graph::backward`].
    pub fn param(&mut self, slot: usize, tensor: &Tensor) -> Var {
        let (rows, cols) = tensor.dims();
        let op = if tensor.requires_grad {
            Op::Param(slot)
        } else {
            Op::Input
        };
        self.push(tensor.values.clone(), rows, cols, op)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.idx(v)].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[self.idx(v)];
        assert_eq!(node.value.len(), 1, "expected a scalar node");
        node.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    fn vec_len(&self, i: usize) -> usize {
        let n = &self.nodes[i];
        assert_eq!(n.cols, 1, "expected a vector, got {}x{}", n.rows, n.cols);
        n.rows
    }

    /// Matrix-vector product `W x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wi, xi) = (self.idx(w), self.idx(x));
        let (r, c) = (self.nodes[wi].rows, self.nodes[wi].cols);
        assert_eq!(self.vec_len(xi), c, "matvec shape mismatch");
        let wv = &self.nodes[wi].value;
        let xv = &self.nodes[xi].value;
        let out = (0..r)
            .map(|i| wv[i * c..(i + 1) * c].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(out, r, 1, Op::MatVec(wi, xi))
    }

    /// Transposed matrix-vector product `Wᵀ v`.
    pub fn mat_t_vec(&mut self, w: Var, v: Var) -> Var {
        let (wi, vi) = (self.idx(w), self.idx(v));
        let (r, c) = (self.nodes[wi].rows, self.nodes[wi].cols);
        assert_eq!(self.vec_len(vi), r, "mat_t_vec shape mismatch");
        let wv = &self.nodes[wi].value;
        let vv = &self.nodes[vi].value;
        let mut out = vec![0.0; c];
        for i in 0..r {
            let s = vv[i];
            for (o, w) in out.iter_mut().zip(&wv[i * c..(i + 1) * c]) {
                *o += s * w;
            }
        }
        self.push(out, c, 1, Op::MatTVec(wi, vi))
    }

    /// Row `row` of a matrix, as a vector.
    pub fn row(&mut self, m: Var, row: usize) -> Var {
        let mi = self.idx(m);
        let (r, c) = (self.nodes[mi].rows, self.nodes[mi].cols);
        assert!(row < r, "row {row} out of range for {r} rows");
        let out = self.nodes[mi].value[row * c..(row + 1) * c].to_vec();
        self.push(out, c, 1, Op::Row(mi, row))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        assert!(
            na.rows == nb.rows && na.cols == nb.cols,
            "elementwise shape mismatch {}x{} vs {}x{}",
            na.rows,
            na.cols,
            nb.rows,
            nb.cols
        );
        let (rows, cols) = (na.rows, na.cols);
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        self.push(out, rows, cols, op(ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ai = self.idx(a);
        let n = &self.nodes[ai];
        let (rows, cols) = (n.rows, n.cols);
        let out = n.value.iter().map(|&x| f(x)).collect();
        self.push(out, rows, cols, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ai = self.idx(a);
        self.unary(a, |x| c * x, Op::Scale(ai, c))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.unary(a, |x| 1.0 - x, Op::OneMinus(ai))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.unary(a, sigmoid, Op::Sigmoid(ai))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.unary(a, f64::tanh, Op::Tanh(ai))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.unary(a, f64::exp, Op::Exp(ai))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floored(&mut self, a: Var, floor: f64) -> Var {
        let ai = self.idx(a);
        self.unary(a, |x| x.max(floor).ln(), Op::LnFloored(ai, floor))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let n = self.vec_len(ai);
        let out = softmax(&self.nodes[ai].value);
        self.push(out, n, 1, Op::Softmax(ai))
    }

    /// Element `i` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let ai = self.idx(a);
        let v = self.nodes[ai].value[i];
        self.push(vec![v], 1, 1, Op::Pick(ai, i))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.nodes[ai].value.iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(ai))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        assert_eq!(self.vec_len(ai), self.vec_len(bi), "dot length mismatch");
        let s = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![s], 1, 1, Op::Dot(ai, bi))
    }

    /// Concatenates vectors (scalars included) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let mut out = Vec::new();
        for &i in &idx {
            self.vec_len(i);
            out.extend_from_slice(&self.nodes[i].value);
        }
        let n = out.len();
        self.push(out, n, 1, Op::Concat(idx))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "cannot stack zero rows");
        let idx: Vec<usize> = rows.iter().map(|&p| self.idx(p)).collect();
        let c = self.vec_len(idx[0]);
        let mut out = Vec::with_capacity(c * idx.len());
        for &i in &idx {
            assert_eq!(self.vec_len(i), c, "stack rows differ in length");
            out.extend_from_slice(&self.nodes[i].value);
        }
        let r = idx.len();
        self.push(out, r, c, Op::Stack(idx))
    }

    /// Reverse pass from the scalar `root`, accumulating into the `grad`
    /// buffers of `params`. Afterwards every tensor with `requires_grad`
    /// carries a gradient (zeros if it did not influence `root`).
    pub fn backward(&mut self, root: Var, params: &mut [Tensor]) -> Result<()> {
        if root.graph != self.id || root.index >= self.nodes.len() {
            return Err(Error::state("loss does not belong to this graph"));
        }
        if self.consumed {
            return Err(Error::state("backward already ran on this graph"));
        }
        if self.nodes[root.index].value.len() != 1 {
            return Err(Error::invalid("backward needs a scalar root"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        grads[root.index] = Some(vec![1.0]);
        for i in (0..=root.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, params)?;
        }
        for t in params.iter_mut().filter(|t| t.requires_grad) {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.values.len()]);
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut [Tensor],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Input => {}
            Op::Param(slot) => {
                let t = params.get_mut(*slot).ok_or_else(|| {
                    Error::state(format!("parameter slot {slot} missing from store"))
                })?;
                if t.values.len() != g.len() {
                    return Err(Error::state(format!(
                        "parameter slot {slot} has {} values, graph leaf has {}",
                        t.values.len(),
                        g.len()
                    )));
                }
                t.accumulate_grad(g);
            }
            &Op::MatVec(w, x) => {
                let c = nodes[w].cols;
                if wants(w) {
                    let xv = &nodes[x].value;
                    let gw = slot(grads, w, nodes[w].value.len());
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (dst, xj) in gw[r * c..(r + 1) * c].iter_mut().zip(xv) {
                                *dst += gr * xj;
                            }
                        }
                    }
                }
                if wants(x) {
                    let wv = &nodes[w].value;
                    let gx = slot(grads, x, c);
                    for (r, &gr) in g.iter().enumerate() {
                        for (dst, wrj) in gx.iter_mut().zip(&wv[r * c..(r + 1) * c]) {
                            *dst += gr * wrj;
                        }
                    }
                }
            }
            &Op::MatTVec(w, v) => {
                let (r, c) = (nodes[w].rows, nodes[w].cols);
                if wants(w) {
                    let vv = &nodes[v].value;
                    let gw = slot(grads, w, r * c);
                    for (ri, &vr) in vv.iter().enumerate() {
                        for (dst, gj) in gw[ri * c..(ri + 1) * c].iter_mut().zip(g) {
                            *dst += vr * gj;
                        }
                    }
                }
                if wants(v) {
                    let wv = &nodes[w].value;
                    let gv = slot(grads, v, r);
                    for (ri, dst) in gv.iter_mut().enumerate() {
                        *dst += wv[ri * c..(ri + 1) * c]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            &Op::Row(m, row) => {
                let c = nodes[m].cols;
                let gm = slot(grads, m, nodes[m].value.len());
                for (dst, x) in gm[row * c..(row + 1) * c].iter_mut().zip(g) {
                    *dst += x;
                }
            }
            &Op::Add(a, b) => {
                for (j, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(j) {
                        axpy(slot(grads, j, g.len()), sign, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (j, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(j) {
                        axpy(slot(grads, j, g.len()), sign, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = &nodes[b].value;
                    let ga = slot(grads, a, g.len());
                    for ((dst, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *dst += gi * bi;
                    }
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    let gb = slot(grads, b, g.len());
                    for ((dst, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *dst += gi * ai;
                    }
                }
            }
            &Op::Scale(a, c) => axpy(slot(grads, a, g.len()), c, g),
            &Op::OneMinus(a) => axpy(slot(grads, a, g.len()), -1.0, g),
            &Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = slot(grads, a, g.len());
                for ((dst, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *dst += gi * yi * (1.0 - yi);
                }
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                let ga = slot(grads, a, g.len());
                for ((dst, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *dst += gi * (1.0 - yi * yi);
                }
            }
            &Op::Exp(a) => {
                let y = &node.value;
                let ga = slot(grads, a, g.len());
                for ((dst, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *dst += gi * yi;
                }
            }
            &Op::LnFloored(a, floor) => {
                let x = &nodes[a].value;
                let ga = slot(grads, a, g.len());
                for ((dst, gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                    if xi > floor {
                        *dst += gi / xi;
                    }
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let inner: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                let ga = slot(grads, a, g.len());
                for ((dst, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *dst += yi * (gi - inner);
                }
            }
            &Op::Pick(a, k) => {
                let ga = slot(grads, a, nodes[a].value.len());
                ga[k] += g[0];
            }
            &Op::Sum(a) => {
                let ga = slot(grads, a, nodes[a].value.len());
                for dst in ga.iter_mut() {
                    *dst += g[0];
                }
            }
            &Op::Dot(a, b) => {
                if wants(a) {
                    axpy(slot(grads, a, nodes[a].value.len()), g[0], &nodes[b].value);
                }
                if wants(b) {
                    axpy(slot(grads, b, nodes[b].value.len()), g[0], &nodes[a].value);
                }
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    if wants(p) {
                        axpy(slot(grads, p, n), 1.0, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, xi) in dst.iter_mut().zip(x) {
        *d += a * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Central-difference estimate of `d loss / d params`, one coordinate at a
/// time. `loss_fn` must be deterministic; freeze any rng it uses.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &[Tensor], epsilon: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..work.len() {
        let mut g = vec![0.0; work[t].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[t].values[k];
            work[t].values[k] = orig + epsilon;
            let plus = loss_fn(&work)?;
            work[t].values[k] = orig - epsilon;
            let minus = loss_fn(&work)?;
            work[t].values[k] = orig;
            *gk = (plus - minus) / (2.0 * epsilon);
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![v], true).unwrap()]
    }

    #[test]
    fn square_derivative() {
        let mut params = scalar_param(3.0);
        let mut g = Graph::new();
        let x = g.param(0, &params[0]);
        let y = g.mul(x, x);
        let y = g.sum(y);
        g.backward(y, &mut params).unwrap();
        assert!((params[0].grad().unwrap()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut params = scalar_param(3.0);
        let mut g = Graph::new();
        let _x = g.param(0, &params[0]);
        let c = g.scalar(5.0);
        g.backward(c, &mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut params = scalar_param(1.0);
        let mut g = Graph::new();
        let x = g.param(0, &params[0]);
        let y = g.sum(x);
        g.backward(y, &mut params).unwrap();
        assert!(matches!(g.backward(y, &mut params), Err(Error::State(_))));
    }

    #[test]
    fn foreign_root_is_a_state_error() {
        let mut params = scalar_param(1.0);
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.param(0, &params[0]);
        let y = g1.sum(x);
        let _ = g2.scalar(0.0);
        assert!(matches!(g2.backward(y, &mut params), Err(Error::State(_))));
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3], true).is_err());
        assert!(Tensor::new(vec![], vec![], true).is_err());
        assert!(Tensor::new(vec![2, 0], vec![], true).is_err());
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let c = [0.5, -2.0, 3.25];
        let params = vec![Tensor::new(vec![3], vec![0.1, 0.2, -0.3], true).unwrap()];
        let grad = finite_diff_gradient(
            |p| Ok(p[0].values().iter().zip(&c).map(|(a, b)| a * b).sum()),
            &params,
            1e-4,
        )
        .unwrap();
        for (g, c) in grad[0].iter().zip(&c) {
            assert!((g - c).abs() < 1e-9);
        }

        // θᵀAθ with symmetric A → 2Aθ
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let params = vec![Tensor::new(vec![2], vec![0.3, -0.7], true).unwrap()];
        let grad = finite_diff_gradient(
            |p| {
                let t = p[0].values();
                Ok((0..2)
                    .flat_map(|i| (0..2).map(move |j| (i, j)))
                    .map(|(i, j)| t[i] * a[i][j] * t[j])
                    .sum())
            },
            &params,
            1e-4,
        )
        .unwrap();
        let t = params[0].values();
        for i in 0..2 {
            let expected = 2.0 * (a[i][0] * t[0] + a[i][1] * t[1]);
            assert!((grad[0][i] - expected).abs() < 1e-7);
        }
    }

    // softmax cross-entropy through matvec + softmax + ln, against finite differences
    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let params = vec![
            Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.25], true).unwrap(),
            Tensor::new(vec![2], vec![0.7, -1.1], true).unwrap(),
        ];
        let loss = |p: &[Tensor], g: &mut Graph| {
            let w = g.param(0, &p[0]);
            let x = g.param(1, &p[1]);
            let logits = g.matvec(w, x);
            let probs = g.softmax(logits);
            let picked = g.pick(probs, 2);
            let ll = g.ln_floored(picked, 1e-12);
            g.scale(ll, -1.0)
        };
        let mut analytic = params.clone();
        let mut g = Graph::new();
        let root = loss(&analytic, &mut g);
        g.backward(root, &mut analytic).unwrap();
        let numeric = finite_diff_gradient(
            |p| {
                let mut g = Graph::new();
                let r = loss(p, &mut g);
                Ok(g.scalar_value(r))
            },
            &params,
            1e-5,
        )
        .unwrap();
        for (t, num) in analytic.iter().zip(&numeric) {
            for (a, n) in t.grad().unwrap().iter().zip(num) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
                assert!(rel < 1e-6, "analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let params = vec![
            Tensor::new(vec![2, 3], vec![0.2, -0.4, 0.6, 0.1, 0.3, -0.2], true).unwrap(),
            Tensor::new(vec![3], vec![0.5, -0.3, 0.8], true).unwrap(),
            Tensor::new(vec![2], vec![-0.6, 0.9], true).unwrap(),
        ];
        let build = |p: &[Tensor], g: &mut Graph| {
            let w = g.param(0, &p[0]);
            let x = g.param(1, &p[1]);
            let v = g.param(2, &p[2]);
            let a = g.matvec(w, x);
            let b = g.mat_t_vec(w, v);
            let s = g.sigmoid(a);
            let t = g.tanh(v);
            let m = g.mul(s, t);
            let om = g.one_minus(m);
            let e = g.exp(om);
            let sub = g.sub(e, v);
            let add = g.add(sub, a);
            let r = g.row(w, 1);
            let st = g.stack(&[x, r, b]);
            let stx = g.matvec(st, x);
            let cat = g.concat(&[add, stx]);
            let sm = g.softmax(cat);
            let p0 = g.pick(sm, 0);
            let lp = g.ln_floored(p0, 1e-12);
            let d = g.dot(b, x);
            let d = g.scale(d, 0.3);
            let tot = g.sum(sm);
            let y = g.add(lp, d);
            g.add(y, tot)
        };
        let mut analytic = params.clone();
        let mut g = Graph::new();
        let root = build(&analytic, &mut g);
        g.backward(root, &mut analytic).unwrap();
        let numeric = finite_diff_gradient(
            |p| {
                let mut g = Graph::new();
                let r = build(p, &mut g);
                Ok(g.scalar_value(r))
            },
            &params,
            1e-5,
        )
        .unwrap();
        for (t, num) in analytic.iter().zip(&numeric) {
            for (a, n) in t.grad().unwrap().iter().zip(num) {
                assert!((a - n).abs() < 1e-8, "analytic {a} numeric {n}");
            }
        }
    }
}
