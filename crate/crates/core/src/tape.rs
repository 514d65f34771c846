//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward operation appends a node holding its result and the op that
//! produced it. `backward` walks the tape in reverse, accumulating gradients
//! into per-node buffers. A tape is single-use: once backward has run it is
//! consumed and a second call is an error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2PI: f64 = 2.5066282746310002;

/// Standard normal CDF, exact-erf formulation.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// GELU on a scalar: x * Phi(x).
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddConst { a: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize },
    SumAll { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by the node ids of the
/// forward pass that produced them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, materializing zeros of the given shape when the
    /// node did not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

// C[m,n] += A[m,k] . B[k,n]
fn matmul_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// C[m,n] += A[m,k] . B^T, with B stored as [n,k]
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

// C[k,n] += A^T . B, with A stored as [m,k] and B as [m,n]
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Record an input tensor. Leaves receive gradients but propagate nothing.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "add_bias",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    fn binary_elementwise(
        &mut self,
        context: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                context,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(value, op)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_scalar, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Column-wise concatenation of two rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "concat_cols",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (rows, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![rows, ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 || start + len > ta.shape()[1] {
            return Err(Error::ShapeMismatch {
                context: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { a, start }))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    /// Reverse pass from a scalar loss node. Consumes the tape's gradient
    /// capacity: a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let s = self.value(a).shape();
                        (s[0], s[1])
                    };
                    let n = self.value(b).shape()[1];
                    {
                        let ga = self.ensure_grad(&mut grads, a);
                        matmul_nt_acc(g.data(), self.nodes[b.0].value.data(), ga, m, n, k);
                    }
                    {
                        let gb = self.ensure_grad(&mut grads, b);
                        matmul_tn_acc(self.nodes[a.0].value.data(), g.data(), gb, m, k, n);
                    }
                }
                Op::AddBias { a, bias } => {
                    let n = self.value(a).shape()[1];
                    {
                        let ga = self.ensure_grad(&mut grads, a);
                        for (gv, gi) in ga.iter_mut().zip(g.data()) {
                            *gv += gi;
                        }
                    }
                    {
                        let gb = self.ensure_grad(&mut grads, bias);
                        for row in g.data().chunks(n) {
                            for (bv, gv) in gb.iter_mut().zip(row) {
                                *bv += gv;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, a, g.data(), |gi| gi);
                    self.accumulate(&mut grads, b, g.data(), |gi| gi);
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, a, g.data(), |gi| gi);
                    self.accumulate(&mut grads, b, g.data(), |gi| -gi);
                }
                Op::Mul { a, b } => {
                    let vb: Vec<f64> = self.value(b).data().to_vec();
                    let va: Vec<f64> = self.value(a).data().to_vec();
                    self.accumulate_with(&mut grads, a, g.data(), &vb);
                    self.accumulate_with(&mut grads, b, g.data(), &va);
                }
                Op::Scale { a, factor } => {
                    self.accumulate(&mut grads, a, g.data(), |gi| gi * factor);
                }
                Op::AddConst { a } => {
                    self.accumulate(&mut grads, a, g.data(), |gi| gi);
                }
                Op::Gelu { a } => {
                    let din: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .map(|&x| normal_cdf(x) + x * normal_pdf(x))
                        .collect();
                    self.accumulate_with(&mut grads, a, g.data(), &din);
                }
                Op::Sigmoid { a } => {
                    let din: Vec<f64> = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .map(|&s| s * (1.0 - s))
                        .collect();
                    self.accumulate_with(&mut grads, a, g.data(), &din);
                }
                Op::Tanh { a } => {
                    let din: Vec<f64> = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .map(|&t| 1.0 - t * t)
                        .collect();
                    self.accumulate_with(&mut grads, a, g.data(), &din);
                }
                Op::Exp { a } => {
                    let din: Vec<f64> = self.nodes[idx].value.data().to_vec();
                    self.accumulate_with(&mut grads, a, g.data(), &din);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.value(a).shape()[1];
                    let cb = self.value(b).shape()[1];
                    let rows = self.value(a).shape()[0];
                    {
                        let ga = self.ensure_grad(&mut grads, a);
                        for r in 0..rows {
                            let src = &g.data()[r * (ca + cb)..r * (ca + cb) + ca];
                            for (gv, sv) in ga[r * ca..(r + 1) * ca].iter_mut().zip(src) {
                                *gv += sv;
                            }
                        }
                    }
                    {
                        let gb = self.ensure_grad(&mut grads, b);
                        for r in 0..rows {
                            let src = &g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                            for (gv, sv) in gb[r * cb..(r + 1) * cb].iter_mut().zip(src) {
                                *gv += sv;
                            }
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let cols = self.value(a).shape()[1];
                    let rows = self.value(a).shape()[0];
                    let len = g.data().len() / rows;
                    let ga = self.ensure_grad(&mut grads, a);
                    for r in 0..rows {
                        let src = &g.data()[r * len..(r + 1) * len];
                        let dst = &mut ga[r * cols + start..r * cols + start + len];
                        for (gv, sv) in dst.iter_mut().zip(src) {
                            *gv += sv;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let gv = g.data()[0];
                    let ga = self.ensure_grad(&mut grads, a);
                    for v in ga.iter_mut() {
                        *v += gv;
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }

    /// Gradient buffer for a node, created zeroed on first touch.
    fn ensure_grad<'g>(
        &self,
        grads: &'g mut [Option<Tensor>],
        id: NodeId,
    ) -> &'g mut [f64] {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.value(id).shape()));
        }
        grads[id.0].as_mut().expect("just created").data_mut()
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        g: &[f64],
        f: impl Fn(f64) -> f64,
    ) {
        let buf = self.ensure_grad(grads, id);
        for (bv, gi) in buf.iter_mut().zip(g) {
            *bv += f(*gi);
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], id: NodeId, g: &[f64], w: &[f64]) {
        let buf = self.ensure_grad(grads, id);
        for ((bv, gv), wv) in buf.iter_mut().zip(g).zip(w) {
            *bv += gv * wv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w^2) at w = [3] has gradient [6]
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![3.0]));
        let unused = tape.leaf(Tensor::from_vec(vec![5.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(
            grads.get_or_zeros(unused, &[1]).data(),
            &[0.0],
            "materialized gradient for unused parameter is exactly zero"
        );
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2.0]));
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_shapes_checked() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn gelu_reference_values() {
        // Phi(1) = 0.84134474606854294859 (high-precision normal CDF)
        assert!((gelu_scalar(1.0) - 0.841344746068543).abs() < 1e-12);
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(gelu_scalar(-10.0).abs() < 1e-8);
        assert!((gelu_scalar(2.3) - 2.2753345469501456).abs() < 1e-12);
        assert!((gelu_scalar(-1.5) - (-0.10021080190328710)).abs() < 1e-12);
    }

    #[test]
    fn gelu_shape_and_limits() {
        // Increasing on x >= 0; bounded below by the dip near x = -0.75.
        let mut prev = 0.0;
        for i in 0..=600 {
            let x = i as f64 / 20.0;
            let y = gelu_scalar(x);
            assert!(y >= prev, "gelu not increasing at {x}");
            prev = y;
        }
        for i in -600..0 {
            let x = i as f64 / 20.0;
            let y = gelu_scalar(x);
            assert!((-0.2..=0.0).contains(&y), "gelu({x}) = {y} outside dip range");
        }
        assert!((gelu_scalar(30.0) - 30.0).abs() < 1e-9);
        assert!(gelu_scalar(-30.0).abs() < 1e-9);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice_cols(c, 2, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0]);
    }
}
