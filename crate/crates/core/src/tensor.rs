//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! The tape records every primitive in execution order, so node ids are a
//! valid topological order by construction. [`Tape::backward`] walks the tape
//! once in reverse and returns a [`Gradients`] table indexed by node id.
//!
//! Broadcasting is limited to the bias-add pattern (`[m, n] + [n]`).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Input(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a matrix; a vector counts as one row per element.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Copies the selected rows of a matrix into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Elementwise sum. Accepts equal shapes or `[m, n] + [n]`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let out = va.zip_with(vb, |x, y| x + y);
            return Ok(self.push(out, Op::Add(a, b)));
        }
        if va.rank() == 2 && vb.rank() == 1 && va.shape()[1] == vb.shape()[0] {
            let n = vb.len();
            let mut out = va.clone();
            for (i, x) in out.data.iter_mut().enumerate() {
                *x += vb.data[i % n];
            }
            return Ok(self.push(out, Op::AddRow(a, b)));
        }
        Err(Error::dim("add", va.shape(), vb.shape()))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let out = va.zip_with(vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[NodeId]) -> Result<NodeId> {
        match (op, inputs) {
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            (Elementwise::Relu, &[a]) => Ok(self.relu(a)),
            (Elementwise::Tanh, &[a]) => Ok(self.tanh(a)),
            _ => Err(Error::Usage(format!(
                "{op:?} called with {} inputs",
                inputs.len()
            ))),
        }
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rank() != 2 || v.rows() != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                v.shape(),
                &[labels.len()],
            ));
        }
        let classes = v.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = softmax_rows(v);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += log_z - row[label];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, node has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let da = g.matmul(&vb.transpose()?)?;
                    let db = va.transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let n = self.value(*b).len();
                    let mut db = Tensor::zeros(&[n]);
                    for (i, &x) in g.data.iter().enumerate() {
                        db.data[i % n] += x;
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_with(self.value(*b), |x, y| x * y);
                    let db = g.zip_with(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let da = g.zip_with(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip_with(&node.value, |x, t| x * (1.0 - t * t));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let s = g.data[0];
                    let da = self.value(*a).map(|_| s);
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    let c = d.cols();
                    for (r, &label) in labels.iter().enumerate() {
                        d.data[r * c + label] -= 1.0;
                    }
                    for x in &mut d.data {
                        *x *= scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax of a matrix, stabilised by the row maximum.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

/// Gradients of leaf nodes after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf. Leaves off every path to the loss get zeros.
    pub fn get(&self, id: NodeId) -> Tensor {
        self.grads
            .get(id.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

/// Central finite differences of `loss` at `at`, one scalar at a time.
pub fn finite_diff_grad<F>(at: &Tensor, h: f64, mut loss: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = loss(&probe);
        probe.data[i] = orig - h;
        let down = loss(&probe);
        probe.data[i] = orig;
        out.data[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
///
/// The floor keeps entries whose true value is ~0 from turning round-off
/// into huge ratios.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let col = t(&[vec![5.0], vec![7.0]]);
        assert_eq!(Tensor::identity(2).matmul(&col).unwrap(), col);
        let r = t(&[vec![1.0, 2.0]])
            .matmul(&t(&[vec![3.0], vec![4.0]]))
            .unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3])
            .matmul(&Tensor::zeros(&[2, 3]))
            .unwrap_err();
        assert_eq!(err, Error::dim("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.elementwise(Elementwise::Relu, &[x]).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.elementwise(Elementwise::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let z = tape.leaf(Tensor::vector(vec![0.0]));
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).data(), &[0.0]);

        let m = tape.leaf(Tensor::zeros(&[2, 3]));
        let v = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(m, v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let cases: [(Vec<f64>, usize, f64, f64); 3] = [
            (vec![0.0, 0.0], 0, std::f64::consts::LN_2, 1e-12),
            (vec![100.0, 0.0], 0, 0.0, 1e-10),
            (vec![1.0, 1.0, 1.0], 2, 3f64.ln(), 1e-12),
        ];
        for (logits, label, expected, tol) in cases {
            let mut tape = Tape::new();
            let l = tape.leaf(t(&[logits]));
            let loss = tape.softmax_cross_entropy(l, &[label]).unwrap();
            let got = tape.value(loss).item().unwrap();
            assert!((got - expected).abs() < tol, "{got} vs {expected}");
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn backward_examples() {
        // sum(x^2)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);

        // constant loss
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);

        // x * y
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).data(), &[5.0]);
        assert_eq!(g.get(y).data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let empty = Tape::new();
        assert!(matches!(empty.backward(NodeId(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(&Tensor::scalar(1.0), 1e-5, |t| t.data()[0].powi(2));
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        let g = finite_diff_grad(&Tensor::scalar(1.0), 1e-5, |_| 4.2);
        assert!(g.data()[0].abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[vec![0.0, 0.0], vec![1.0, -1.0]]));
        let loss = tape.softmax_cross_entropy(l, &[0, 1]).unwrap();
        let g = tape.backward(loss).unwrap().get(l);
        let p = softmax_rows(tape.value(l));
        let expected = [
            (p.at(0, 0) - 1.0) / 2.0,
            p.at(0, 1) / 2.0,
            p.at(1, 0) / 2.0,
            (p.at(1, 1) - 1.0) / 2.0,
        ];
        for (a, b) in g.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
