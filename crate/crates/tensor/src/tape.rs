//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every op appends one node holding its output value. Node order is
//! execution order, so walking the record backwards is a valid reverse
//! topological order. Leaf gradients persist across `backward` calls and
//! accumulate until `zero_grad`.

use crate::element::Element;
use crate::error::{mismatch, Result, TensorError};
use crate::ops::conv::{self, Conv3dGeometry, ConvDims};
use crate::ops::norm::{self, NormDims, NormMode};
use crate::ops::{activation, dense, loss, pool, reduce};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: given the input values, the output
/// value, and the upstream gradient, return one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T: Element> {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        dims: NormDims,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: (usize, usize, usize),
    },
    LogSoftmax(Var),
    WeightedNll {
        input: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    WeightedBce {
        input: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of executed operations.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.zero_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Records a trainable input.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Smallest |x| over every ReLU input on the tape, `None` if there are no ReLUs.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the step.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(T::infinity(), |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(T::min)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let needs = inputs.iter().any(|&v| self.value(v).requires_grad());
        let value = if shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::from_vec(shape, data).expect("op produced a consistent shape")
        };
        self.push(value.with_requires_grad(needs), op)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: Conv3dGeometry) -> Result<Var> {
        let dims = ConvDims::new(self.value(input).shape(), self.value(kernel).shape(), geom)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [dims.cout] {
                return Err(mismatch(
                    "conv3d",
                    format!("bias shape {:?} does not match {} output channels", self.value(b).shape(), dims.cout),
                ));
            }
        }
        let out = conv::forward(
            &dims,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push_op(&dims.output_shape(), out, &inputs, Op::Conv3d { input, kernel, bias, dims }))
    }

    pub fn batch_norm3d(&mut self, input: Var, gamma: Var, beta: Var, eps: T, mode: NormMode<'_, T>) -> Result<Var> {
        norm::check_eps(eps)?;
        let shape = self.value(input).shape().to_vec();
        let dims = NormDims::new(&shape, self.value(gamma).numel(), self.value(beta).numel())?;
        let (x, g, b) = (self.value(input).data(), self.value(gamma).data(), self.value(beta).data());
        let (fwd, batch_stats) = match mode {
            NormMode::Train { running, momentum } => {
                let (fwd, mean, var) = norm::forward_train(&dims, x, g, b, eps);
                norm::update_running(&dims, running, momentum, &mean, &var);
                (fwd, true)
            }
            NormMode::Eval { running } => {
                if running.mean.len() != dims.c || running.var.len() != dims.c {
                    return Err(mismatch("batch_norm3d", "running statistics do not match channel count"));
                }
                (norm::normalize(&dims, x, g, b, &running.mean, &running.var, eps), false)
            }
        };
        Ok(self.push_op(
            &shape,
            fwd.out,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                dims,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let shape = self.value(input).shape().to_vec();
        let out = activation::relu_forward(self.value(input).data());
        self.push_op(&shape, out, &[input], Op::Relu(input))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push_op(&shape, out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push_op(&shape, out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let shape = self.value(input).shape().to_vec();
        let out = self.value(input).data().iter().map(|&x| x * factor).collect();
        self.push_op(&shape, out, &[input], Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = reduce::sum(self.value(input).data());
        self.push_op(&[], vec![s], &[input], Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s = reduce::sum(v.data()) / T::from_usize(v.numel()).unwrap();
        self.push_op(&[], vec![s], &[input], Op::Mean(input))
    }

    pub fn global_avg_pool3d(&mut self, input: Var) -> Result<Var> {
        let (shape, out) = pool::global_avg_forward(self.value(input).shape(), self.value(input).data())?;
        Ok(self.push_op(&shape, out, &[input], Op::GlobalAvgPool(input)))
    }

    pub fn max_pool3d(&mut self, input: Var, kernel: [usize; 3], geom: Conv3dGeometry) -> Result<Var> {
        let (shape, out, argmax) = pool::max_forward(self.value(input).shape(), self.value(input).data(), kernel, geom)?;
        Ok(self.push_op(&shape, out, &[input], Op::MaxPool { input, argmax }))
    }

    /// `input[N,F] * weightᵀ[F,O] + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let dims = dense::check(
            self.value(input).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
        )?;
        let (n, f, o) = dims;
        let out = dense::forward(
            n,
            f,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(&[n, o], out, &inputs, Op::Linear { input, weight, bias, dims }))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (_, c) = activation::rows(&shape, "log_softmax")?;
        let out = activation::log_softmax_forward(c, self.value(input).data());
        Ok(self.push_op(&shape, out, &[input], Op::LogSoftmax(input)))
    }

    /// Mean over rows of `-w_i * logp[i, labels[i]]`; also returns the per-row terms.
    pub fn weighted_nll(&mut self, log_probs: Var, labels: &[usize], weights: &[T]) -> Result<(Var, Vec<T>)> {
        const OP: &str = "weighted_nll";
        let (n, c) = activation::rows(self.value(log_probs).shape(), OP)?;
        loss::check_targets(n, c, labels, weights, OP)?;
        let rows = loss::nll_rows(c, self.value(log_probs).data(), labels, weights);
        let mean = rows.iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let op = Op::WeightedNll {
            input: log_probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok((self.push_op(&[], vec![mean], &[log_probs], op), rows))
    }

    /// Mean over rows of `w_i * sum_c BCE(sigmoid(z_ic), onehot(labels[i])_c)`.
    pub fn weighted_bce_with_logits(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<(Var, Vec<T>)> {
        const OP: &str = "weighted_bce_with_logits";
        let (n, c) = activation::rows(self.value(logits).shape(), OP)?;
        loss::check_targets(n, c, labels, weights, OP)?;
        let rows = loss::bce_rows(c, self.value(logits).data(), labels, weights);
        let mean = rows.iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let op = Op::WeightedBce {
            input: logits,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok((self.push_op(&[], vec![mean], &[logits], op), rows))
    }

    /// Records an op whose forward value the caller has already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let needs = inputs.iter().any(|&v| self.value(v).requires_grad());
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(output.with_requires_grad(needs), op)
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient and
    /// accumulates the result into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !root_value.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.node_backward(idx, &g) {
                if !self.value(parent).requires_grad() {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[idx].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.value(v).requires_grad()
    }

    fn node_backward(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias, dims } => {
                let need = [self.needs(*input), self.needs(*kernel), bias.is_some_and(|b| self.needs(b))];
                let grads = conv::backward(dims, self.value(*input).data(), self.value(*kernel).data(), g, need);
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.kernel.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let grads = norm::backward(dims, xhat, inv_std, self.value(*gamma).data(), g, *batch_stats);
                out.push((*input, grads.input));
                out.push((*gamma, grads.gamma));
                out.push((*beta, grads.beta));
            }
            Op::Relu(x) => out.push((*x, activation::relu_backward(self.value(*x).data(), g))),
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                out.push((*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(x, k) => out.push((*x, g.iter().map(|&g| g * *k).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::GlobalAvgPool(x) => out.push((*x, pool::global_avg_backward(self.value(*x).shape(), g))),
            Op::MaxPool { input, argmax } => {
                out.push((*input, pool::max_backward(self.value(*input).numel(), argmax, g)));
            }
            Op::Linear {
                input,
                weight,
                bias,
                dims: (n, f, o),
            } => {
                if self.needs(*input) {
                    out.push((*input, dense::backward_input(*n, *f, *o, self.value(*weight).data(), g)));
                }
                if self.needs(*weight) {
                    out.push((*weight, dense::backward_weight(*n, *f, *o, self.value(*input).data(), g)));
                }
                if let Some(b) = bias {
                    out.push((*b, dense::backward_bias(*o, g)));
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                out.push((*x, activation::log_softmax_backward(c, node.value.data(), g)));
            }
            Op::WeightedNll { input, labels, weights } => {
                let c = self.value(*input).shape()[1];
                out.push((*input, loss::nll_backward(c, labels, weights, g[0])));
            }
            Op::WeightedBce { input, labels, weights } => {
                let c = self.value(*input).shape()[1];
                out.push((*input, loss::bce_backward(c, self.value(*input).data(), labels, weights, g[0])));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                for (v, d) in inputs.iter().zip(backward(&values, &node.value, g)) {
                    if let Some(d) = d {
                        assert_eq!(d.len(), self.value(*v).numel(), "custom backward returned a misshaped gradient");
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}
