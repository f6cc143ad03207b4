//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records one forward pass. Parameters enter through
//! [`Graph::leaf`] (tracked), data through [`Graph::constant`] (untracked).
//! Untracked nodes never receive an adjoint, so frozen networks cost no
//! gradient memory. After [`Graph::backward`] the caller harvests leaf
//! adjoints into its parameter tensors; adjoints for one leaf accumulate
//! there across passes until the caller zeroes them.
//!
//! The tape is append-only, so tape order is a valid topological order and
//! the backward sweep is a single reverse scan.

use crate::tensor::{gemm, sigmoid, Tensor, TensorError};

/// Handle to a node of one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[r x c] + [c]` with the row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
}

struct Node {
    value: Tensor,
    adjoint: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            adjoint: None,
            op,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Insert a tracked leaf (a parameter); its adjoint is available after
    /// [`Graph::backward`].
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Insert an untracked constant (data, frozen parameters).
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Constant, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Adjoint of a node after backward; `None` if it was never reached.
    pub fn adjoint(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].adjoint.as_deref()
    }

    /// Accumulate the adjoint of `id` (zero if unreached) into `param.grad`.
    pub fn harvest_into(&self, id: NodeId, param: &mut Tensor) {
        if let Some(adj) = self.adjoint(id) {
            param.accumulate_grad(adj);
        } else {
            param.accumulate_grad(&vec![0.0; param.numel()]);
        }
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            m,
            k,
            n,
            va.values(),
            false,
            vb.values(),
            false,
            out.values_mut(),
            false,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let values = va
                .values()
                .iter()
                .zip(vb.values())
                .map(|(x, y)| x + y)
                .collect();
            let out = Tensor::new(va.shape().to_vec(), values)?;
            let tracked = self.tracked(a) || self.tracked(b);
            return Ok(self.push(out, Op::Add(a, b), tracked));
        }
        // Row-vector broadcast: [r x c] + [c].
        if va.shape().len() == 2 && vb.shape().len() == 1 && va.shape()[1] == vb.shape()[0] {
            let c = vb.numel();
            let mut out = va.clone();
            for row in out.values_mut().chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(vb.values()) {
                    *x += y;
                }
            }
            let tracked = self.tracked(a) || self.tracked(b);
            return Ok(self.push(out, Op::AddRow(a, b), tracked));
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let values = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), values)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let values = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), values)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x += c);
        let tracked = self.tracked(a);
        self.push(out, Op::AddScalar(a), tracked)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x *= c);
        let tracked = self.tracked(a);
        self.push(out, Op::MulScalar(a, c), tracked)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        let tracked = self.tracked(a);
        self.push(out, Op::Sigmoid(a), tracked)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x = x.tanh());
        let tracked = self.tracked(a);
        self.push(out, Op::Tanh(a), tracked)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x = *x * *x);
        let tracked = self.tracked(a);
        self.push(out, Op::Square(a), tracked)
    }

    /// Natural log. Callers must clamp probabilities first; any input `<= 0`
    /// is a domain error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if let Some((index, &value)) = va.values().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(TensorError::LogDomain { value, index });
        }
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x = x.ln());
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Log(a), tracked))
    }

    /// Elementwise clamp with pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        out.values_mut().iter_mut().for_each(|x| *x = x.clamp(lo, hi));
        let tracked = self.tracked(a);
        self.push(out, Op::Clamp(a, lo, hi), tracked)
    }

    /// Sum of all entries, a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.values().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Mean of all entries, a scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.values().iter().sum::<f64>() / v.numel() as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Concatenate 2-D nodes with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut col = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let c = v.cols();
            for r in 0..rows {
                out.values_mut()[r * total + col..r * total + col + c]
                    .copy_from_slice(&v.values()[r * c..(r + 1) * c]);
            }
            col += c;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Columns `[start, start+len)` of a 2-D node.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 2 || start + len > va.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                lhs: va.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(vec![rows, len]);
        for r in 0..rows {
            out.values_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&va.values()[r * cols + start..r * cols + start + len]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::SliceCols(a, start, len), tracked))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`; adjoints land on tracked nodes.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        self.backward_done = true;
        if !loss_node.tracked {
            // Nothing on the path depends on a tracked leaf; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].adjoint = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            if !node.tracked || node.adjoint.is_none() {
                continue;
            }
            let adj = node.adjoint.as_ref().unwrap();
            let value = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, n) = (value.rows(), value.cols());
                    let k = before[a.0].value.cols();
                    if before[a.0].tracked {
                        let bv = before[b.0].value.values().to_vec();
                        let ga = grad_buf(&mut before[a.0]);
                        gemm(m, n, k, adj, false, &bv, true, ga, true);
                    }
                    if before[b.0].tracked {
                        let av = before[a.0].value.values().to_vec();
                        let gb = grad_buf(&mut before[b.0]);
                        gemm(k, m, n, &av, true, adj, false, gb, true);
                    }
                }
                Op::Add(a, b) => {
                    for &src in [a, b].iter() {
                        if before[src.0].tracked {
                            let g = grad_buf(&mut before[src.0]);
                            for (gi, ai) in g.iter_mut().zip(adj) {
                                *gi += ai;
                            }
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if before[a.0].tracked {
                        let g = grad_buf(&mut before[a.0]);
                        for (gi, ai) in g.iter_mut().zip(adj) {
                            *gi += ai;
                        }
                    }
                    if before[b.0].tracked {
                        let c = before[b.0].value.numel();
                        let g = grad_buf(&mut before[b.0]);
                        for row in adj.chunks(c) {
                            for (gi, ai) in g.iter_mut().zip(row) {
                                *gi += ai;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if before[a.0].tracked {
                        let g = grad_buf(&mut before[a.0]);
                        for (gi, ai) in g.iter_mut().zip(adj) {
                            *gi += ai;
                        }
                    }
                    if before[b.0].tracked {
                        let g = grad_buf(&mut before[b.0]);
                        for (gi, ai) in g.iter_mut().zip(adj) {
                            *gi -= ai;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if before[a.0].tracked {
                        let bv = before[b.0].value.values().to_vec();
                        let g = grad_buf(&mut before[a.0]);
                        for ((gi, ai), bi) in g.iter_mut().zip(adj).zip(&bv) {
                            *gi += ai * bi;
                        }
                    }
                    if before[b.0].tracked {
                        let av = before[a.0].value.values().to_vec();
                        let g = grad_buf(&mut before[b.0]);
                        for ((gi, ai), av) in g.iter_mut().zip(adj).zip(&av) {
                            *gi += ai * av;
                        }
                    }
                }
                Op::AddScalar(a) => {
                    if before[a.0].tracked {
                        let g = grad_buf(&mut before[a.0]);
                        for (gi, ai) in g.iter_mut().zip(adj) {
                            *gi += ai;
                        }
                    }
                }
                Op::MulScalar(a, c) => {
                    if before[a.0].tracked {
                        let c = *c;
                        let g = grad_buf(&mut before[a.0]);
                        for (gi, ai) in g.iter_mut().zip(adj) {
                            *gi += c * ai;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if before[a.0].tracked {
                        let s = value.values().to_vec();
                        let g = grad_buf(&mut before[a.0]);
                        for ((gi, ai), si) in g.iter_mut().zip(adj).zip(&s) {
                            *gi += ai * si * (1.0 - si);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if before[a.0].tracked {
                        let t = value.values().to_vec();
                        let g = grad_buf(&mut before[a.0]);
                        for ((gi, ai), ti) in g.iter_mut().zip(adj).zip(&t) {
                            *gi += ai * (1.0 - ti * ti);
                        }
                    }
                }
                Op::Square(a) => {
                    if before[a.0].tracked {
                        let x = before[a.0].value.values().to_vec();
                        let g = grad_buf(&mut before[a.0]);
                        for ((gi, ai), xi) in g.iter_mut().zip(adj).zip(&x) {
                            *gi += 2.0 * xi * ai;
                        }
                    }
                }
                Op::Log(a) => {
                    if before[a.0].tracked {
                        let x = before[a.0].value.values().to_vec();
                        let g = grad_buf(&mut before[a.0]);
                        for ((gi, ai), xi) in g.iter_mut().zip(adj).zip(&x) {
                            *gi += ai / xi;
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if before[a.0].tracked {
                        let (lo, hi) = (*lo, *hi);
                        let x = before[a.0].value.values().to_vec();
                        let g = grad_buf(&mut before[a.0]);
                        for ((gi, ai), xi) in g.iter_mut().zip(adj).zip(&x) {
                            if (lo..=hi).contains(xi) {
                                *gi += ai;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if before[a.0].tracked {
                        let s = adj[0];
                        let g = grad_buf(&mut before[a.0]);
                        g.iter_mut().for_each(|gi| *gi += s);
                    }
                }
                Op::Mean(a) => {
                    if before[a.0].tracked {
                        let n = before[a.0].value.numel() as f64;
                        let s = adj[0] / n;
                        let g = grad_buf(&mut before[a.0]);
                        g.iter_mut().for_each(|gi| *gi += s);
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = value.rows();
                    let total = value.cols();
                    let adj = adj.clone();
                    let mut col = 0;
                    for p in parts {
                        let c = before[p.0].value.cols();
                        if before[p.0].tracked {
                            let g = grad_buf(&mut before[p.0]);
                            for r in 0..rows {
                                for j in 0..c {
                                    g[r * c + j] += adj[r * total + col + j];
                                }
                            }
                        }
                        col += c;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    if before[a.0].tracked {
                        let (start, len) = (*start, *len);
                        let rows = value.rows();
                        let cols = before[a.0].value.cols();
                        let adj = adj.clone();
                        let g = grad_buf(&mut before[a.0]);
                        for r in 0..rows {
                            for j in 0..len {
                                g[r * cols + start + j] += adj[r * len + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_buf(node: &mut Node) -> &mut [f64] {
    let n = node.value.numel();
    node.adjoint.get_or_insert_with(|| vec![0.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(&Tensor::matrix(2, 2, vec![3.0, -1.0, 2.5, 7.0]).unwrap());
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out).values(), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(&Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).values(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).values()[0], 0.5);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            g.log(x),
            Err(TensorError::LogDomain { index: 1, .. })
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(x^2), x = [3] => dloss/dx = [6]
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.square(x);
        assert!(matches!(
            g.backward(sq),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(2.0));
        let loss = g.square(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(2.0));
        let c = g.constant(&Tensor::scalar(5.0));
        let loss = g.square(c);
        g.backward(loss).unwrap();
        assert!(g.adjoint(x).is_none());
        let mut p = Tensor::scalar(2.0).with_grad();
        g.harvest_into(x, &mut p);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn untracked_nodes_never_get_adjoints() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(1.5));
        let c = g.constant(&Tensor::scalar(3.0));
        let prod = g.mul(x, c).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert!(g.adjoint(c).is_none());
        assert_eq!(g.adjoint(x).unwrap(), &[3.0]);
    }

    #[test]
    fn harvest_accumulates_across_passes() {
        let mut p = Tensor::scalar(2.0).with_grad();
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.leaf(&p);
            let loss = g.square(x);
            g.backward(loss).unwrap();
            g.harvest_into(x, &mut p);
        }
        assert_eq!(p.grad().unwrap(), &[8.0]); // 2 passes of d(x^2)/dx = 4
    }
}
