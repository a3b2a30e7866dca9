//! Minimal reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! Training builds one [`Graph`] per optimization step: model parameters and
//! batch tensors enter as leaves, every forward operation appends a node, and
//! a single [`Graph::backward`] sweep accumulates gradients for all leaves.
//! Nodes are stored in creation order, which is already a topological order,
//! so the backward pass is one reverse iteration — no sorting, no recursion,
//! and bit-for-bit deterministic accumulation.
//!
//! All values are `f64` matrices. Vectors are 1×d or d×1 matrices; scalars are
//! 1×1. The op set is deliberately small and closed: each op knows its own
//! forward and backward rule, and every rule is covered by a central
//! finite-difference test.

mod op;

pub use op::Op;

use ndarray::Array2;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Array2<f64>,
}

/// A tape of executed operations plus their values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node in a graph.
/// Nodes the output does not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, if the differentiated output depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Remove and return the gradient for `id`, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, parents: Vec::new(), value });
        NodeId(self.nodes.len() - 1)
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-1x1 node");
        v[[0, 0]]
    }

    /// Execute `op` on `parents`, append the result, and return its handle.
    ///
    /// Shape violations panic: graph construction is an internal concern and
    /// public entry points validate shapes before building.
    pub fn apply(&mut self, op: Op, parents: &[NodeId]) -> NodeId {
        let value = {
            let pvals: Vec<&Array2<f64>> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            op.forward(&pvals)
        };
        self.nodes.push(Node { op, parents: parents.to_vec(), value });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a 1×1 `loss` node. Returns gradients for every node
    /// the loss depends on, leaves included.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward() expects a scalar (1x1) loss node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                let pvals: Vec<&Array2<f64>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let pgrads = node.op.backward(&g, &node.value, &pvals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[pid.0] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // Convenience wrappers. These keep call sites readable; all of them defer
    // to `apply`.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Op::MatMul { ta: false, tb: false }, &[a, b])
    }
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        self.apply(Op::MatMul { ta, tb }, &[a, b])
    }
    /// `a + row` where `row` is 1×d, broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.apply(Op::AddRow, &[a, row])
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.apply(Op::SliceCols { start, end }, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.apply(Op::ConcatCols, parts)
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.apply(Op::ConcatRows, parts)
    }
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        self.apply(Op::GatherRows(rows), &[a])
    }
    /// Scatter `kept` rows to positions `keep` and a broadcast `filler` row to
    /// positions `fill` of a fresh (keep.len() + fill.len())-row matrix.
    pub fn compose_rows(
        &mut self,
        kept: NodeId,
        filler: NodeId,
        keep: Vec<usize>,
        fill: Vec<usize>,
    ) -> NodeId {
        self.apply(Op::ComposeRows { keep, fill }, &[kept, filler])
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::SoftmaxRows, &[a])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Gelu, &[a])
    }
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::MeanRows, &[a])
    }
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::RowNormalize, &[a])
    }
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::RowSum, &[a])
    }
    pub fn take_diag(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::TakeDiag, &[a])
    }
    pub fn row_log_sum_exp(&mut self, a: NodeId, exclude_diag: bool) -> NodeId {
        self.apply(Op::RowLogSumExp { exclude_diag }, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Exp, &[a])
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Ln, &[a])
    }
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::MeanAll, &[a])
    }
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::SumAll, &[a])
    }
}

#[cfg(test)]
mod tests;
