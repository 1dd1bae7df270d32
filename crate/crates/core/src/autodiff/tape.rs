//! Wengert-list reverse-mode differentiation.
//!
//! Every differentiable call appends a node holding its output value and
//! whatever it needs for the backward pass. Nodes are appended in execution
//! order, so the list is topologically sorted by construction and backward is
//! a single reverse sweep.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ops::activation::{activate, activation_backward, sigmoid_scalar, Activation};
use crate::ops::conv::{conv_nd, conv_nd_backward};
use crate::ops::dense::{dense, dense_backward};
use crate::ops::norm;
use crate::ops::pool::{global_avg_pool, global_avg_pool_backward, max_pool_backward, max_pool_nd};
use crate::ops::resample::{resize_nd, resize_nd_backward, UpsampleMode};
use crate::tensor::{Element, Tensor};

/// Probability clamp used by the loss values.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User supplied vector-Jacobian product: `(grad_out, inputs) -> grad per input`.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Result<Vec<Tensor<T>>>>;

enum Op<T: Element> {
    Constant,
    Variable,
    Param(ParamId),
    Conv { input: Var, kernel: Var, bias: Option<Var>, stride: Vec<usize>, padding: Vec<usize> },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    BatchNormInfer { input: Var, gamma: Var, beta: Var, xhat: Tensor<T>, running_var: Tensor<T>, eps: f64 },
    Dense { input: Var, weight: Var, bias: Var },
    Act { input: Var, kind: Activation },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    WeightedSum { input: Var, weights: Tensor<T> },
    Resize { input: Var, mode: UpsampleMode },
    ConcatChannels { inputs: Vec<Var> },
    Bce { logits: Var, labels: Vec<T> },
    PixelCe { probs: Var, mask: Vec<u8> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, true)
    }

    /// Snapshot of a stored parameter; its gradient is accumulated back into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Var> {
        let value = conv_nd(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), stride, padding)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv { input, kernel, bias, stride: stride.to_vec(), padding: padding.to_vec() },
            rg,
        ))
    }

    pub fn max_pool(&mut self, input: Var, window: &[usize], stride: &[usize], padding: &[usize]) -> Result<Var> {
        let out = max_pool_nd(self.value(input), window, stride, padding)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out.output, Op::MaxPool { input, argmax: out.argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let value = global_avg_pool(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// Batch-statistics normalization. Also returns the batch mean and
    /// biased variance so the caller can update running statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let r = norm::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            r.output,
            Op::BatchNormTrain { input, gamma, beta, xhat: r.xhat, inv_std: r.inv_std },
            rg,
        );
        Ok((v, r.mean, r.var))
    }

    /// Normalization with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (out, xhat) =
            norm::batch_norm_infer(self.value(input), self.value(gamma), self.value(beta), running_mean, running_var, eps)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormInfer { input, gamma, beta, xhat, running_var: running_var.clone(), eps },
            rg,
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let value = activate(self.value(input), kind)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Act { input, kind }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).scale(factor);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    /// `sum(input * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        self.value(input).expect_same_shape(&weights, "weighted_sum")?;
        let s = self.value(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, rg))
    }

    /// Spatial resize to `target` extents (see [`crate::ops::resize_nd`]).
    pub fn resize(&mut self, input: Var, target: &[usize], mode: UpsampleMode) -> Result<Var> {
        let value = resize_nd(self.value(input), target, mode)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Resize { input, mode }, rg))
    }

    pub fn upsample(&mut self, input: Var, factor: &[usize], mode: UpsampleMode) -> Result<Var> {
        let spatial = self.value(input).spatial().to_vec();
        if factor.len() != spatial.len() || factor.contains(&0) {
            return Err(Error::invalid(format!("bad upsample factor {factor:?} for spatial {spatial:?}")));
        }
        let target: Vec<usize> = spatial.iter().zip(factor).map(|(&s, &f)| s * f).collect();
        self.resize(input, &target, mode)
    }

    /// Concatenation along the channel dim.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() < 2 {
            return Err(Error::shape(format!("concat needs [N, C, ..], got {s0:?}")));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {s0:?}")));
            }
            channels += s[1];
        }
        let n = s0[0];
        let mut shape = s0.clone();
        shape[1] = channels;
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.len() / n;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatChannels { inputs: inputs.to_vec() }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    ///
    /// The probability is clamped to `[1e-7, 1 - 1e-7]` for the loss value;
    /// the gradient with respect to the logits is `(p - y) / N`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "bce: logits {:?} vs {} labels",
                z.shape(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::invalid(format!("bce: label {} at index {i} is not 0 or 1", labels[i])));
        }
        let n = labels.len() as f64;
        let mut total = 0.0;
        for (&zi, &yi) in z.data().iter().zip(labels) {
            let p = sigmoid_scalar(zi.as_f64()).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = yi.as_f64();
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / n)),
            Op::Bce { logits, labels: labels.to_vec() },
            rg,
        ))
    }

    /// Mean over pixels of `-ln p[true class]` for class probabilities `[N, C, s..]`.
    pub fn pixel_cross_entropy(&mut self, probs: Var, mask: &[u8]) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() < 3 {
            return Err(Error::shape(format!("pixel loss needs [N, C, s..], got {:?}", p.shape())));
        }
        let (n, c) = (p.shape()[0], p.shape()[1]);
        let plane: usize = p.spatial().iter().product();
        if mask.len() != n * plane {
            return Err(Error::shape(format!(
                "mask has {} entries, probabilities {:?} need {}",
                mask.len(),
                p.shape(),
                n * plane
            )));
        }
        if let Some(i) = mask.iter().position(|&m| m as usize >= c) {
            return Err(Error::invalid(format!("mask value {} at {i} exceeds {c} classes", mask[i])));
        }
        let mut total = 0.0;
        for b in 0..n {
            for q in 0..plane {
                let k = mask[b * plane + q] as usize;
                let v = p.data()[(b * c + k) * plane + q].as_f64();
                total -= v.clamp(PROB_CLAMP, 1.0).ln();
            }
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / (n * plane) as f64)),
            Op::PixelCe { probs, mask: mask.to_vec() },
            rg,
        ))
    }

    /// Operation with a caller supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store` (accumulating across calls); all node gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.sweep(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate(*id, g)?;
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss)
    }

    fn sweep(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(self.value(loss).map(|_| T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Conv { input, kernel, bias, stride, padding } => {
                let need_input = self.requires_grad(*input);
                let r = conv_nd_backward(self.value(*input), self.value(*kernel), g, stride, padding, need_input)?;
                if need_input {
                    self.accum(grads, *input, r.input)?;
                }
                self.accum(grads, *kernel, r.kernel)?;
                if let Some(b) = bias {
                    self.accum(grads, *b, r.bias)?;
                }
            }
            Op::MaxPool { input, argmax } => {
                let dx = max_pool_backward(self.value(*input).shape(), argmax, g)?;
                self.accum(grads, *input, dx)?;
            }
            Op::GlobalAvgPool { input } => {
                let dx = global_avg_pool_backward(self.value(*input).shape(), g)?;
                self.accum(grads, *input, dx)?;
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                let r = norm::batch_norm_train_backward(g, xhat, inv_std, self.value(*gamma))?;
                self.accum(grads, *input, r.input)?;
                self.accum(grads, *gamma, r.gamma)?;
                self.accum(grads, *beta, r.beta)?;
            }
            Op::BatchNormInfer { input, gamma, beta, xhat, running_var, eps } => {
                let r = norm::batch_norm_infer_backward(g, xhat, self.value(*gamma), running_var, *eps)?;
                self.accum(grads, *input, r.input)?;
                self.accum(grads, *gamma, r.gamma)?;
                self.accum(grads, *beta, r.beta)?;
            }
            Op::Dense { input, weight, bias } => {
                let (dx, dw, db) = dense_backward(self.value(*input), self.value(*weight), g)?;
                self.accum(grads, *input, dx)?;
                self.accum(grads, *weight, dw)?;
                self.accum(grads, *bias, db)?;
            }
            Op::Act { input, kind } => {
                let dx = activation_backward(*kind, self.value(*input), &node.value, g)?;
                self.accum(grads, *input, dx)?;
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::Mul { a, b } => {
                let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                self.accum(grads, *a, da)?;
                self.accum(grads, *b, db)?;
            }
            Op::Scale { input, factor } => {
                self.accum(grads, *input, g.scale(*factor))?;
            }
            Op::Sum { input } => {
                let s = g.data()[0];
                self.accum(grads, *input, self.value(*input).map(|_| s))?;
            }
            Op::WeightedSum { input, weights } => {
                self.accum(grads, *input, weights.scale(g.data()[0]))?;
            }
            Op::Resize { input, mode } => {
                let dx = resize_nd_backward(self.value(*input).shape(), g, *mode)?;
                self.accum(grads, *input, dx)?;
            }
            Op::ConcatChannels { inputs } => {
                let n = g.shape()[0];
                let per_total = g.len() / n;
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.value(v).shape().to_vec();
                    let per = self.value(v).len() / n;
                    let mut data = Vec::with_capacity(per * n);
                    for b in 0..n {
                        let s = b * per_total + offset;
                        data.extend_from_slice(&g.data()[s..s + per]);
                    }
                    offset += per;
                    self.accum(grads, v, Tensor::new(&shape, data)?)?;
                }
            }
            Op::Bce { logits, labels } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let data = z.data().iter().zip(labels).map(|(&zi, &y)| (sigmoid_scalar(zi) - y) * scale).collect();
                self.accum(grads, *logits, Tensor::new(z.shape(), data)?)?;
            }
            Op::PixelCe { probs, mask } => {
                let p = self.value(*probs);
                let (n, c) = (p.shape()[0], p.shape()[1]);
                let plane: usize = p.spatial().iter().product();
                let scale = g.data()[0] / T::from_f64((n * plane) as f64);
                let mut dp = p.zeros_like();
                for b in 0..n {
                    for q in 0..plane {
                        let k = mask[b * plane + q] as usize;
                        let i = (b * c + k) * plane + q;
                        let v = p.data()[i].max(T::min_positive_value());
                        dp.data_mut()[i] = -scale / v;
                    }
                }
                self.accum(grads, *probs, dp)?;
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(g, &vals)?;
                if gs.len() != inputs.len() {
                    return Err(Error::invalid("custom backward returned the wrong number of gradients"));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    self.accum(grads, v, gi)?;
                }
            }
        }
        Ok(())
    }
}
