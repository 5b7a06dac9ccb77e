//! Operation recording and reverse-mode replay.

use super::ops::{self, Bn2dSpec, Conv2dSpec, DepthwiseSpec, Pool2dSpec};
use super::{Tensor, TensorError};

/// Handle to a tensor recorded on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running batch-norm statistics owned by a network layer.
///
/// Statistics start uninitialized; the first train-mode pass flips the flag.
/// Inference before that is an error.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub initialized: bool,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

enum Op {
    Leaf,
    Relu {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: Conv2dSpec,
    },
    DepthwiseConv2d {
        x: NodeId,
        w: NodeId,
        spec: DepthwiseSpec,
    },
    BatchNorm2d {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        spec: Bn2dSpec,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        through_stats: bool,
    },
    AvgPool2d {
        x: NodeId,
        spec: Pool2dSpec,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
        n: usize,
        k: usize,
        h: usize,
        w: usize,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    FullyConnected {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        n: usize,
        d: usize,
        o: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f32,
    },
    Sum {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f32>,
    },
    Pick {
        x: NodeId,
        index: usize,
    },
    LogitMargin {
        x: NodeId,
    },
    SigmoidBceMean {
        margins: NodeId,
        targets: Vec<f32>,
    },
    SoftmaxCeMean {
        logits: NodeId,
        classes: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations with the inputs saved for backward.
///
/// Backward replays the tape in exact reverse execution order and returns a
/// gradient for every recorded node, shape-matching its value. One training
/// step owns one tape exclusively.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape, produced by [`GradientTape::backward`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Record an input or parameter leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let spec = Conv2dSpec::from_shapes(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).numel(),
            stride,
            padding,
        )?;
        let data = ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &spec,
        );
        let out = Tensor::new(&spec.out_shape(), data)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let spec =
            DepthwiseSpec::from_shapes(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        let data = ops::depthwise_forward(self.value(x).data(), self.value(w).data(), &spec);
        let out = Tensor::new(&spec.out_shape(), data)?;
        Ok(self.push(out, Op::DepthwiseConv2d { x, w, spec }))
    }

    /// Batch normalization over the channel axis.
    ///
    /// Train mode normalizes by batch statistics and folds them into `state`
    /// with the given momentum; infer mode reads `state` and fails when it
    /// was never initialized.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        state: &mut BnState,
        eps: f32,
        momentum: f32,
    ) -> Result<NodeId, TensorError> {
        let spec = Bn2dSpec::from_shapes(self.value(x).shape(), state.channels())?;
        if self.value(gamma).numel() != spec.c || self.value(beta).numel() != spec.c {
            return Err(TensorError::ShapeMismatch(format!(
                "batchnorm gamma/beta must have {} entries",
                spec.c
            )));
        }
        let (mean, var, through_stats) = match mode {
            BnMode::Train => {
                let (mean, var) = ops::channel_moments(self.value(x).data(), &spec);
                if state.initialized {
                    for c in 0..spec.c {
                        state.running_mean[c] =
                            (1.0 - momentum) * state.running_mean[c] + momentum * mean[c];
                        state.running_var[c] =
                            (1.0 - momentum) * state.running_var[c] + momentum * var[c];
                    }
                } else {
                    state.running_mean.copy_from_slice(&mean);
                    state.running_var.copy_from_slice(&var);
                    state.initialized = true;
                }
                (mean, var, true)
            }
            BnMode::Infer => {
                if !state.initialized {
                    return Err(TensorError::UninitializedBatchNorm);
                }
                (state.running_mean.clone(), state.running_var.clone(), false)
            }
        };
        let (data, inv_std) = ops::batchnorm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            eps,
            &spec,
        );
        let out = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(out, Op::BatchNorm2d { x, gamma, beta, spec, mean, inv_std, through_stats }))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId, TensorError> {
        let spec = Pool2dSpec::from_shapes(self.value(x).shape(), window, stride)?;
        let out = Tensor::new(&spec.out_shape(), ops::avg_pool_forward(self.value(x).data(), &spec))?;
        Ok(self.push(out, Op::AvgPool2d { x, spec }))
    }

    pub fn max_pool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId, TensorError> {
        let spec = Pool2dSpec::from_shapes(self.value(x).shape(), window, stride)?;
        let (data, argmax) = ops::max_pool_forward(self.value(x).data(), &spec);
        let out = Tensor::new(&spec.out_shape(), data)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (n, k, h, w, batched) = ops::gap_spec(self.value(x).shape())?;
        let data = ops::gap_forward(self.value(x).data(), n, k, h, w);
        let shape: Vec<usize> = if batched { vec![n, k] } else { vec![k] };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x, n, k, h, w }))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (n, d, o, batched) = ops::fc_spec(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).numel(),
        )?;
        let data = ops::fc_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, d, o);
        let shape: Vec<usize> = if batched { vec![n, o] } else { vec![o] };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::FullyConnected { x, w, b, n, d, o }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add requires equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.value(x).shape(), data).expect("shape preserved");
        self.push(out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Inner product with a constant weight vector, as a scalar node.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f32]) -> Result<NodeId, TensorError> {
        if weights.len() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} weights for {} elements",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let total: f32 = self.value(x).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights: weights.to_vec() }))
    }

    /// Select one element by flat index, as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let len = self.value(x).numel();
        if index >= len {
            return Err(TensorError::IndexOutOfBounds { index, len });
        }
        let v = self.value(x).data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// Binary-decision margin of Nx2 logits: z[:,1] - z[:,0].
    pub fn logit_margin(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let n = match shape.as_slice() {
            [n, 2] => *n,
            other => {
                return Err(TensorError::InvalidShape(format!(
                    "logit_margin expects Nx2 logits, got {other:?}"
                )))
            }
        };
        let src = self.value(x).data();
        let data: Vec<f32> = (0..n).map(|i| src[i * 2 + 1] - src[i * 2]).collect();
        let out = Tensor::new(&[n], data)?;
        Ok(self.push(out, Op::LogitMargin { x }))
    }

    /// Binary cross entropy of a single logit node against a 0/1 target.
    pub fn sigmoid_bce(&mut self, logit: NodeId, target: f32) -> Result<NodeId, TensorError> {
        if !self.value(logit).is_scalar() {
            return Err(TensorError::InvalidShape(format!(
                "sigmoid_bce expects a scalar logit, got {:?}",
                self.value(logit).shape()
            )));
        }
        self.sigmoid_bce_mean(logit, &[target])
    }

    /// Mean binary cross entropy of N margins against 0/1 targets.
    pub fn sigmoid_bce_mean(&mut self, margins: NodeId, targets: &[f32]) -> Result<NodeId, TensorError> {
        let n = self.value(margins).numel();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "{} targets for {n} margins",
                targets.len()
            )));
        }
        let data = self.value(margins).data();
        let mean = data
            .iter()
            .zip(targets)
            .map(|(&z, &t)| ops::bce_with_logit(z as f64, t as f64))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(mean as f32),
            Op::SigmoidBceMean { margins, targets: targets.to_vec() },
        ))
    }

    /// Mean softmax cross entropy of NxC logits against class indices.
    pub fn softmax_cross_entropy_mean(
        &mut self,
        logits: NodeId,
        classes: &[usize],
    ) -> Result<NodeId, TensorError> {
        let shape = self.value(logits).shape().to_vec();
        let (n, c) = match shape.as_slice() {
            [n, c] => (*n, *c),
            other => {
                return Err(TensorError::InvalidShape(format!(
                    "softmax_cross_entropy_mean expects NxC logits, got {other:?}"
                )))
            }
        };
        if classes.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "{} class labels for {n} rows",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfBounds { index: bad, len: c });
        }
        let loss = ops::softmax_ce_mean_forward(self.value(logits).data(), classes, n, c);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCeMean { logits, classes: classes.to_vec() },
        ))
    }

    /// Reverse-mode gradients of a scalar output with respect to every
    /// recorded node. Deterministic for a given tape.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, TensorError> {
        let out_value = self.value(output);
        if !out_value.is_scalar() {
            return Err(TensorError::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Vec<f32>> =
            self.nodes.iter().map(|n| vec![0.0f32; n.value.numel()]).collect();
        grads[output.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if i > output.0 {
                continue;
            }
            // split off the upstream gradient so input slots can be accumulated
            let upstream = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let gx = &mut grads[x.0];
                    for ((&g, &v), slot) in upstream.iter().zip(xv).zip(gx.iter_mut()) {
                        if v > 0.0 {
                            *slot += g;
                        }
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &upstream,
                        spec,
                    );
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[w.0], &dw);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::DepthwiseConv2d { x, w, spec } => {
                    let (dx, dw) = ops::depthwise_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &upstream,
                        spec,
                    );
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[w.0], &dw);
                }
                Op::BatchNorm2d { x, gamma, beta, spec, mean, inv_std, through_stats } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_backward(
                        self.value(*x).data(),
                        self.value(*gamma).data(),
                        mean,
                        inv_std,
                        &upstream,
                        spec,
                        *through_stats,
                    );
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[gamma.0], &dgamma);
                    accumulate(&mut grads[beta.0], &dbeta);
                }
                Op::AvgPool2d { x, spec } => {
                    let dx = ops::avg_pool_backward(&upstream, spec);
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::MaxPool2d { x, argmax } => {
                    let dx = ops::max_pool_backward(&upstream, argmax, self.value(*x).numel());
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::GlobalAvgPool { x, n, k, h, w } => {
                    let dx = ops::gap_backward(&upstream, *n, *k, *h, *w);
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::ConcatChannels { parts } => {
                    self.concat_backward(parts, &upstream, &mut grads);
                }
                Op::FullyConnected { x, w, b, n, d, o } => {
                    let (dx, dw, db) = ops::fc_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &upstream,
                        *n,
                        *d,
                        *o,
                    );
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[w.0], &dw);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], &upstream);
                    accumulate(&mut grads[b.0], &upstream);
                }
                Op::Scale { x, factor } => {
                    let gx = &mut grads[x.0];
                    for (&g, slot) in upstream.iter().zip(gx.iter_mut()) {
                        *slot += g * factor;
                    }
                }
                Op::Sum { x } => {
                    let g = upstream[0];
                    for v in grads[x.0].iter_mut() {
                        *v += g;
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let g = upstream[0];
                    for (v, &w) in grads[x.0].iter_mut().zip(weights) {
                        *v += g * w;
                    }
                }
                Op::Pick { x, index } => {
                    grads[x.0][*index] += upstream[0];
                }
                Op::LogitMargin { x } => {
                    let gx = &mut grads[x.0];
                    for (&g, pair) in upstream.iter().zip(gx.chunks_exact_mut(2)) {
                        pair[0] -= g;
                        pair[1] += g;
                    }
                }
                Op::SigmoidBceMean { margins, targets } => {
                    let g = upstream[0] as f64 / targets.len() as f64;
                    let zs = self.value(*margins).data();
                    let gm = &mut grads[margins.0];
                    for ((&z, &t), slot) in zs.iter().zip(targets).zip(gm.iter_mut()) {
                        *slot += (g * (ops::sigmoid64(z as f64) - t as f64)) as f32;
                    }
                }
                Op::SoftmaxCeMean { logits, classes } => {
                    let shape = self.value(*logits).shape();
                    let dz = ops::softmax_ce_mean_backward(
                        self.value(*logits).data(),
                        classes,
                        shape[0],
                        shape[1],
                        upstream[0],
                    );
                    accumulate(&mut grads[logits.0], &dz);
                }
            }
            grads[i] = upstream;
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| Tensor::new(n.value.shape(), g).expect("gradient shape matches value"))
            .collect();
        Ok(Gradients { grads })
    }

    fn concat_backward(&self, parts: &[NodeId], upstream: &[f32], grads: &mut [Vec<f32>]) {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
        let rank = shapes[0].len();
        if rank == 3 {
            let mut offset = 0usize;
            for &p in parts {
                let len = self.value(p).numel();
                accumulate(&mut grads[p.0], &upstream[offset..offset + len]);
                offset += len;
            }
        } else {
            let n = shapes[0][0];
            let mut offset = 0usize;
            for i in 0..n {
                for &p in parts {
                    let sample = self.value(p).numel() / n;
                    let dst = &mut grads[p.0][i * sample..(i + 1) * sample];
                    for (d, &g) in dst.iter_mut().zip(&upstream[offset..offset + sample]) {
                        *d += g;
                    }
                    offset += sample;
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
