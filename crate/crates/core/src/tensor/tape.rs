//! Reverse-mode differentiation over the operations in [`super::ops`].
//!
//! A [`GradTape`] records every operation as it executes. Calling
//! [`GradTape::backward`] walks the record in reverse, visiting each node
//! once, and accumulates gradients additively into every operand.

use super::ops::{self, BinaryOp};
use super::{ConvSpec, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
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
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        spec: ConvSpec,
    },
    Relu(Var),
    Concat(Vec<Var>),
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MseLoss { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if `var` does
    /// not influence the loss or does not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of recorded operations the backward pass processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient [`backward`](Self::backward) reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `bias` is stored as a `[1, Cout, 1, 1]` tensor.
    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weights),
            self.value(bias).data(),
            &spec,
        )?;
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let out = ops::elementwise(self.value(a), self.value(b), op)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = ops::add_scalar(self.value(a), c);
        let rg = self.needs(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Scalar loss stored as a `[1, 1, 1, 1]` tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = ops::mse_loss(self.value(pred), self.value(target))?;
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss { pred, target }, rg))
    }

    /// Smallest `|x|` over the inputs of every recorded ReLU, or infinity if
    /// there are none. Finite-difference checks need this well above the
    /// step size so no perturbation crosses a kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x)),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    spec,
                } => {
                    let g = ops::conv2d_backward(
                        &grad,
                        self.value(*input),
                        self.value(*weights),
                        spec,
                    )?;
                    self.accumulate(&mut grads, *input, g.input);
                    self.accumulate(&mut grads, *weights, g.weights);
                    let bias_shape = self.value(*bias).shape();
                    self.accumulate(&mut grads, *bias, Tensor::new(bias_shape, g.bias)?);
                }
                Op::Relu(x) => {
                    let g = ops::relu_backward(self.value(*x), &grad)?;
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Concat(inputs) => {
                    let channels: Vec<usize> =
                        inputs.iter().map(|&v| self.value(v).channels()).collect();
                    let parts = ops::split_channels(&grad, &channels)?;
                    for (&v, part) in inputs.iter().zip(parts) {
                        self.accumulate(&mut grads, v, part);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (ga, gb) =
                        ops::elementwise_backward(self.value(*a), self.value(*b), *op, &grad)?;
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::AddScalar(a) => self.accumulate(&mut grads, *a, grad),
                Op::MseLoss { pred, target } => {
                    let upstream = grad.data()[0];
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let gp = ops::mse_loss_backward(p, t, upstream)?;
                    if self.needs(*target) {
                        self.accumulate(&mut grads, *target, gp.map(|v| -v));
                    }
                    self.accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}
