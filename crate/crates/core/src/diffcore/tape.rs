//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass. Operations
//! append a node and return a [`Var`] handle; since a node can only refer to
//! handles that already exist, the node list is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.

use super::ops::{self, ImageGeom, LOG_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    StopGradient,
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    IndexSelectRows { src: Var, index: Vec<usize> },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ImageGeom,
        kernel: usize,
    },
    MaxPool2d { input: Var, source: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded forward computation.
///
/// Not `Sync`-shared: one tape belongs to one training graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "parameter")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op, what: &str) -> Result<Var> {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, what)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op, what: &str) -> Result<Var> {
        let rg = self.rg(a);
        self.push(value, op, rg, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.binary(a, b, v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        self.binary(a, b, v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        self.binary(a, b, v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = ops::scale(self.value(a), factor);
        self.unary(a, v, Op::Scale(a, factor), "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.binary(a, b, v, Op::MatMul(a, b), "matmul")
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = ops::add_row_bias(self.value(a), self.value(bias))?;
        self.binary(a, bias, v, Op::AddRowBias(a, bias), "bias add")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = ops::relu(self.value(a));
        self.unary(a, v, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = ops::exp(self.value(a));
        self.unary(a, v, Op::Exp(a), "exp")
    }

    /// Natural log with inputs floored at [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = ops::log_clamped(self.value(a));
        self.unary(a, v, Op::Log(a), "log")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = ops::sum(self.value(a));
        self.unary(a, v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = ops::mean(self.value(a))?;
        self.unary(a, v, Op::Mean(a), "mean")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_rows(self.value(a))?;
        self.unary(a, v, Op::Softmax(a), "softmax")
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false, "stop_gradient")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = ops::slice_rows(self.value(a), start, end)?;
        self.unary(a, v, Op::SliceRows { src: a, start }, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat_rows(&values)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn index_select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = ops::index_select_rows(self.value(a), index)?;
        let op = Op::IndexSelectRows {
            src: a,
            index: index.to_vec(),
        };
        self.unary(a, v, op, "index_select")
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ImageGeom, kernel: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(input), self.value(weight), self.value(bias), geom, kernel)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            kernel,
        };
        self.push(v, op, rg, "conv2d")
    }

    pub fn maxpool2d(&mut self, input: Var, geom: ImageGeom) -> Result<Var> {
        let (v, source) = ops::maxpool2d(self.value(input), geom)?;
        self.unary(input, v, Op::MaxPool2d { input, source }, "maxpool2d")
    }

    /// Reverse sweep from a scalar `loss`, adding `d loss / d leaf` into the
    /// gradient of every trainable leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }

        for (i, a) in adj.into_iter().enumerate() {
            let (Some(a), node) = (a, &mut self.nodes[i]) else { continue };
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            a.ensure_finite("backward")?;
            match &mut node.grad {
                Some(existing) => existing.add_assign(&a)?,
                None => node.grad = Some(a),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contribution: Tensor| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => {
                    *slot = Some(contribution);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, ops::scale(g, -1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, ops::mul(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    send(*b, ops::mul(g, self.value(*a))?)?;
                }
            }
            Op::Scale(a, f) => send(*a, ops::scale(g, *f))?,
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), 0.0, &mut da);
                    send(*a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.rg(*b) {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), 0.0, &mut db);
                    send(*b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            Op::AddRowBias(a, bias) => {
                send(*a, g.clone())?;
                if self.rg(*bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.row_iter() {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::new(shape, db)?)?;
                }
            }
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Exp(a) => send(*a, ops::mul(g, out)?)?,
            Op::Log(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &x)| if x > LOG_EPS { d / x } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                send(*a, Tensor::filled(x.shape(), g.data()[0]))?;
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                send(*a, Tensor::filled(x.shape(), g.data()[0] / x.len() as f64))?;
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, d)| y * d).sum();
                    for ((o, y), d) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (d - dot);
                    }
                }
                send(*a, Tensor::new(out.shape().to_vec(), dx)?)?;
            }
            Op::SliceRows { src, start } => {
                let s = self.value(*src);
                let mut full = Tensor::zeros(s.shape());
                let cols = s.cols();
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                send(*src, full)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = Tensor::new(
                        self.value(p).shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )?;
                    send(p, piece)?;
                    offset += n;
                }
            }
            Op::IndexSelectRows { src, index } => {
                let s = self.value(*src);
                let mut full = Tensor::zeros(s.shape());
                for (r, &i) in index.iter().enumerate() {
                    for (d, v) in full.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                send(*src, full)?;
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                kernel,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let n = x.rows();
                let hw = geom.height * geom.width;
                let (out_ch, patch) = (w.rows(), w.cols());
                // Re-layout G from [n, out_ch*hw] to [n*hw, out_ch].
                let mut gt = vec![0.0; n * hw * out_ch];
                for s in 0..n {
                    for co in 0..out_ch {
                        for p in 0..hw {
                            gt[(s * hw + p) * out_ch + co] = g.data()[(s * out_ch + co) * hw + p];
                        }
                    }
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; out_ch];
                    for row in gt.chunks(out_ch) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::new(shape, db)?)?;
                }
                if self.rg(*weight) {
                    let cols = ops::im2col(x, *geom, *kernel);
                    let mut dw = vec![0.0; out_ch * patch];
                    ops::gemm(out_ch, n * hw, patch, &gt, (1, out_ch), &cols, (patch, 1), 0.0, &mut dw);
                    send(*weight, Tensor::new(vec![out_ch, patch], dw)?)?;
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; n * hw * patch];
                    ops::gemm(n * hw, out_ch, patch, &gt, (out_ch, 1), w.data(), (patch, 1), 0.0, &mut dcols);
                    let dx = ops::col2im(&dcols, n, *geom, *kernel);
                    send(*input, Tensor::new(x.shape().to_vec(), dx)?)?;
                }
            }
            Op::MaxPool2d { input, source } => {
                let x = self.value(*input);
                let mut dx = Tensor::zeros(x.shape());
                for (&src, &d) in source.iter().zip(g.data()) {
                    dx.data_mut()[src] += d;
                }
                send(*input, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
        assert!(matches!(Tape::new().backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn stop_gradient_blocks_everything_upstream() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -1.0])).unwrap();
        let e = t.exp(x).unwrap();
        let d = t.stop_gradient(e).unwrap();
        assert_eq!(t.value(d), t.value(e));
        let s = t.sum(d).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn log_of_zero_is_finite_with_zero_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0, 0.5])).unwrap();
        let l = t.log(x).unwrap();
        let s = t.sum(l).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(t.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(Tensor::from_rows(&[[0.3, -0.7], [1.1, 0.2]]).unwrap()).unwrap();
            let b = t.param(Tensor::from_rows(&[[0.5, 0.1, -0.4], [0.9, -0.2, 0.3]]).unwrap()).unwrap();
            let z = t.matmul(a, b).unwrap();
            let p = t.softmax(z).unwrap();
            let l = t.log(p).unwrap();
            let s = t.sum(l).unwrap();
            t.backward(s).unwrap();
            (t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
