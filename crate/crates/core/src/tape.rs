//! Reverse-mode gradient tape over the fixed operation set used by the
//! intensity model and its losses.
//!
//! Nodes are appended in evaluation order, so every node's inputs have a
//! smaller index than the node itself and walking the node list backwards is
//! a reverse topological traversal. Forward values are computed eagerly when a
//! node is recorded.

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Transpose(NodeId),
    LogSoftmaxCols(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    WeightedSum {
        input: NodeId,
        weights: Matrix,
        scale: f64,
    },
    PoissonNll {
        logits: NodeId,
        counts: Matrix,
        scale: f64,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Matrix,
        scale: f64,
    },
    SumSquares {
        inputs: Vec<NodeId>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id)
            .as_scalar()
            .ok_or_else(|| Error::Contract(format!("node {} is not scalar", id.0)))
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable leaf (a trainable parameter).
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that receives no gradient (inputs, fixed labels).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// `input · weights + bias`; `bias` is a `1 × D_out` row.
    pub fn affine(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = matrix::affine(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(
            Op::Affine {
                input,
                weights,
                bias,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = matrix::relu(self.value(input));
        let rg = self.needs(&[input]);
        self.push(Op::Relu(input), value, rg)
    }

    /// Elementwise sum, used for residual connections and for adding scalars.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matrix::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn residual_add(&mut self, layer_in: NodeId, layer_out: NodeId) -> Result<NodeId> {
        self.add(layer_in, layer_out)
    }

    pub fn transpose(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).transpose();
        let rg = self.needs(&[input]);
        self.push(Op::Transpose(input), value, rg)
    }

    /// Log-softmax of each column over the rows of the batch.
    pub fn log_softmax_over_sites(&mut self, logits: NodeId) -> Result<NodeId> {
        let value = matrix::log_softmax_cols(self.value(logits))?;
        let rg = self.needs(&[logits]);
        Ok(self.push(Op::LogSoftmaxCols(logits), value, rg))
    }

    /// Log-softmax of each row over the columns.
    pub fn log_softmax_over_species(&mut self, logits: NodeId) -> NodeId {
        let value = matrix::log_softmax_rows(self.value(logits));
        let rg = self.needs(&[logits]);
        self.push(Op::LogSoftmaxRows(logits), value, rg)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(Op::SumAll(input), value, rg)
    }

    /// `scale · Σ weights ∘ input`.
    pub fn weighted_sum(&mut self, input: NodeId, weights: Matrix, scale: f64) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::dim(
                "weighted_sum",
                format!("input {:?} vs weights {:?}", x.shape(), weights.shape()),
            ));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(v, w)| v * w)
            .sum();
        let rg = self.needs(&[input]);
        Ok(self.push(
            Op::WeightedSum {
                input,
                weights,
                scale,
            },
            Matrix::scalar(scale * s),
            rg,
        ))
    }

    /// `scale · Σ (exp(z) − y·z)` over log-intensities `z`.
    pub fn poisson_nll(&mut self, logits: NodeId, counts: Matrix, scale: f64) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape() != counts.shape() {
            return Err(Error::dim(
                "poisson_nll",
                format!("logits {:?} vs counts {:?}", z.shape(), counts.shape()),
            ));
        }
        let s: f64 = z
            .data()
            .iter()
            .zip(counts.data())
            .map(|(z, y)| z.exp() - y * z)
            .sum();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::PoissonNll {
                logits,
                counts,
                scale,
            },
            Matrix::scalar(scale * s),
            rg,
        ))
    }

    /// `scale · Σ −[t·ln σ(z) + (1−t)·ln(1−σ(z))]`, evaluated as
    /// `softplus(z) − t·z`.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: Matrix,
        scale: f64,
    ) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let s: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| matrix::softplus(z) - t * z)
            .sum();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets,
                scale,
            },
            Matrix::scalar(scale * s),
            rg,
        ))
    }

    /// `scale · Σ_k ‖inputs_k‖²`.
    pub fn sum_squares(&mut self, inputs: &[NodeId], scale: f64) -> NodeId {
        let s: f64 = inputs.iter().map(|&id| self.value(id).sum_squares()).sum();
        let rg = self.needs(inputs);
        self.push(
            Op::SumSquares {
                inputs: inputs.to_vec(),
                scale,
            },
            Matrix::scalar(scale * s),
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Matrix>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (n.requires_grad && i <= loss.0).then(|| Matrix::zeros(n.value.rows(), n.value.cols()))
            })
            .collect();
        if let Some(g) = grads[loss.0].as_mut() {
            g.data_mut()[0] = 1.0;
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Matrix,
        upstream: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut accumulate = |id: NodeId, contribution: Matrix| {
            if let Some(g) = grads[id.0].as_mut() {
                g.add_assign(&contribution);
            }
        };
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;

        match op {
            Op::Leaf => {}
            Op::Affine {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                if wants(*input) {
                    accumulate(*input, matrix::matmul_nt(upstream, w)?);
                }
                if wants(*weights) {
                    accumulate(*weights, matrix::matmul_tn(x, upstream)?);
                }
                if wants(*bias) {
                    accumulate(*bias, Matrix::row_vector(&upstream.column_sums()));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let mut g = upstream.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                accumulate(*input, g);
            }
            Op::Add(a, b) => {
                accumulate(*a, upstream.clone());
                accumulate(*b, upstream.clone());
            }
            Op::Transpose(input) => accumulate(*input, upstream.transpose()),
            Op::LogSoftmaxCols(input) => {
                let sums = upstream.column_sums();
                let mut g = upstream.clone();
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let p = value.get(r, c).exp();
                        g.set(r, c, upstream.get(r, c) - p * sums[c]);
                    }
                }
                accumulate(*input, g);
            }
            Op::LogSoftmaxRows(input) => {
                let sums = upstream.row_sums();
                let mut g = upstream.clone();
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let p = value.get(r, c).exp();
                        g.set(r, c, upstream.get(r, c) - p * sums[r]);
                    }
                }
                accumulate(*input, g);
            }
            Op::SumAll(input) => {
                let x = self.value(*input);
                accumulate(*input, Matrix::filled(x.rows(), x.cols(), upstream.data()[0]));
            }
            Op::WeightedSum {
                input,
                weights,
                scale,
            } => {
                let s = scale * upstream.data()[0];
                accumulate(*input, weights.map(|w| s * w));
            }
            Op::PoissonNll {
                logits,
                counts,
                scale,
            } => {
                let s = scale * upstream.data()[0];
                let z = self.value(*logits);
                let mut g = z.clone();
                for (gv, y) in g.data_mut().iter_mut().zip(counts.data()) {
                    *gv = s * (gv.exp() - y);
                }
                accumulate(*logits, g);
            }
            Op::BceWithLogits {
                logits,
                targets,
                scale,
            } => {
                let s = scale * upstream.data()[0];
                let z = self.value(*logits);
                let mut g = z.clone();
                for (gv, t) in g.data_mut().iter_mut().zip(targets.data()) {
                    *gv = s * (matrix::sigmoid(*gv) - t);
                }
                accumulate(*logits, g);
            }
            Op::SumSquares { inputs, scale } => {
                let s = 2.0 * scale * upstream.data()[0];
                for &id in inputs {
                    if wants(id) {
                        accumulate(id, self.value(id).map(|v| s * v));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::from_rows(&[[1.0, -2.0], [3.5, 0.0]]).unwrap());
        let s = tape.sum(p);
        assert_eq!(tape.scalar(s).unwrap(), 2.5);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_gradient_is_piecewise() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::row_vector(&[3.0, -3.0, 0.0]));
        let r = tape.relu(p);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn residual_add_routes_gradient_to_both_inputs() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        let b = tape.param(Matrix::row_vector(&[3.0, 4.0]));
        let c = tape.residual_add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, 2.0]));
        let w = tape.param(Matrix::from_rows(&[[1.0], [1.0]]).unwrap());
        let b = tape.param(Matrix::row_vector(&[0.0]));
        let y = tape.affine(x, w, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn repeated_backward_starts_from_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        let s = tape.sum_squares(&[p], 0.5);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(p), g2.get(p));
        assert_eq!(g1.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
