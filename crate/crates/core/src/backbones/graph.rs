//! Network graph representation and execution.
//!
//! A [`Network`] is a topologically ordered list of [`GraphOp`] nodes over a
//! named parameter store. Execution always goes through a [`GradientTape`]
//! so inference, training, and Grad-CAM share one forward path.

use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnState, GradientTape, NodeId, Tensor, TensorError};

use super::{ArchConfig, BN_EPS, BN_MOMENTUM};

/// One node of a network graph. Indices refer to earlier graph nodes
/// (`input`, `lhs`, ...) or into the parameter / batch-norm state stores.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphOp {
    Input,
    Conv { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    DepthwiseConv { input: usize, weight: usize, stride: usize, padding: usize },
    BatchNorm { input: usize, gamma: usize, beta: usize, state: usize },
    Relu { input: usize },
    AvgPool { input: usize, window: usize, stride: usize },
    GlobalAvgPool { input: usize },
    Concat { inputs: Vec<usize> },
    Add { lhs: usize, rhs: usize },
    FullyConnected { input: usize, weight: usize, bias: usize },
}

/// Named parameter tensor. `frozen` parameters are skipped by optimizers.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Running statistics of one batch-norm layer, keyed by its name prefix.
#[derive(Clone, Debug)]
pub struct BnLayerState {
    pub name: String,
    pub state: BnState,
}

/// A built backbone: architecture descriptor, ordered named parameters,
/// batch-norm state, and the handle to the final convolutional feature map
/// (the tensor consumed by global average pooling).
#[derive(Clone, Debug)]
pub struct Network {
    pub(crate) config: ArchConfig,
    pub(crate) num_outputs: usize,
    pub(crate) graph: Vec<GraphOp>,
    pub(crate) params: Vec<Param>,
    pub(crate) bn_states: Vec<BnLayerState>,
    pub(crate) final_conv: usize,
    pub(crate) gap_node: usize,
}

/// Forward pass recorded on a tape: per-graph-node tape ids, parameter leaf
/// ids, and the logits / final-conv handles.
pub struct TracedForward {
    pub tape: GradientTape,
    pub nodes: Vec<NodeId>,
    pub param_nodes: Vec<NodeId>,
    pub logits: NodeId,
    pub final_conv: NodeId,
}

impl Network {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn input_resolution(&self) -> usize {
        self.config.input_resolution()
    }

    pub fn graph(&self) -> &[GraphOp] {
        &self.graph
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Total number of parameter elements.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bn_states(&self) -> &[BnLayerState] {
        &self.bn_states
    }

    pub(crate) fn bn_states_mut(&mut self) -> &mut [BnLayerState] {
        &mut self.bn_states
    }

    /// Graph index of the final convolutional feature map.
    pub fn final_conv_node(&self) -> usize {
        self.final_conv
    }

    /// Mark every parameter whose name starts with `prefix` as frozen;
    /// returns how many were affected. Used for transfer-learning setups
    /// where a loaded backbone is kept fixed and only the head trains.
    pub fn freeze_parameters(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let r = self.input_resolution();
        let ok = match input.shape() {
            [c, h, w] => *c == 3 && *h == r && *w == r,
            [_, c, h, w] => *c == 3 && *h == r && *w == r,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Tensor(TensorError::ShapeMismatch(format!(
                "network expects 3x{r}x{r} images (optionally batched), got {:?}",
                input.shape()
            ))))
        }
    }

    /// Inference-mode forward pass recorded on a fresh tape.
    ///
    /// Requires initialized batch-norm statistics (train at least one step
    /// or load a trained checkpoint first).
    pub fn trace_infer(&self, input: &Tensor) -> Result<TracedForward> {
        self.check_input(input)?;
        let mut states: Vec<BnState> = self.bn_states.iter().map(|s| s.state.clone()).collect();
        run_graph(&self.graph, &self.params, &mut states, BnMode::Infer, input, self.final_conv)
    }

    /// Train-mode forward pass; batch statistics update the running stats.
    pub fn trace_train(&mut self, input: &Tensor) -> Result<TracedForward> {
        self.check_input(input)?;
        let mut states: Vec<BnState> =
            self.bn_states.iter().map(|s| s.state.clone()).collect();
        let traced =
            run_graph(&self.graph, &self.params, &mut states, BnMode::Train, input, self.final_conv)?;
        for (slot, state) in self.bn_states.iter_mut().zip(states) {
            slot.state = state;
        }
        Ok(traced)
    }

    /// Inference logits for a single image or a batch.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let traced = self.trace_infer(input)?;
        Ok(traced.tape.value(traced.logits).clone())
    }

    /// Re-run only the head: execute the graph from global average pooling
    /// onward with `activations` standing in for the final conv output.
    pub fn head_forward(&self, activations: &Tensor) -> Result<Tensor> {
        if !matches!(activations.rank(), 3 | 4) {
            return Err(Error::Tensor(TensorError::InvalidShape(format!(
                "final-conv activations must be KxHxW or NxKxHxW, got {:?}",
                activations.shape()
            ))));
        }
        let mut tape = GradientTape::new();
        let mut nodes: Vec<Option<NodeId>> = vec![None; self.graph.len()];
        nodes[self.final_conv] = Some(tape.input(activations.clone()));
        let mut param_nodes: Vec<Option<NodeId>> = vec![None; self.params.len()];
        let mut states: Vec<BnState> = self.bn_states.iter().map(|s| s.state.clone()).collect();
        let mut last = None;
        for idx in self.gap_node..self.graph.len() {
            let id = execute_node(
                &self.graph[idx],
                &mut tape,
                &nodes,
                &mut param_nodes,
                &self.params,
                &mut states,
                BnMode::Infer,
            )?;
            nodes[idx] = Some(id);
            last = Some(id);
        }
        let logits = last.expect("head is non-empty");
        Ok(tape.value(logits).clone())
    }
}

fn run_graph(
    graph: &[GraphOp],
    params: &[Param],
    states: &mut [BnState],
    mode: BnMode,
    input: &Tensor,
    final_conv: usize,
) -> Result<TracedForward> {
    let mut tape = GradientTape::new();
    let mut nodes: Vec<Option<NodeId>> = vec![None; graph.len()];
    let mut param_nodes: Vec<Option<NodeId>> = vec![None; params.len()];
    let mut last = None;
    for (idx, op) in graph.iter().enumerate() {
        let id = match op {
            GraphOp::Input => tape.input(input.clone()),
            _ => execute_node(op, &mut tape, &nodes, &mut param_nodes, params, states, mode)?,
        };
        nodes[idx] = Some(id);
        last = Some(id);
    }
    let logits = last.ok_or_else(|| Error::Build("empty graph".into()))?;
    let final_conv_id = nodes[final_conv].expect("final conv executed");
    let nodes: Vec<NodeId> = nodes.into_iter().map(|n| n.expect("all nodes executed")).collect();
    let param_nodes: Vec<NodeId> = param_nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| match n {
            Some(id) => id,
            // parameters untouched by the graph still get a leaf so training
            // can address every parameter uniformly
            None => tape.input(params[i].value.clone()),
        })
        .collect();
    Ok(TracedForward { tape, nodes, param_nodes, logits, final_conv: final_conv_id })
}

fn execute_node(
    op: &GraphOp,
    tape: &mut GradientTape,
    nodes: &[Option<NodeId>],
    param_nodes: &mut [Option<NodeId>],
    params: &[Param],
    states: &mut [BnState],
    mode: BnMode,
) -> Result<NodeId> {
    let node = |i: usize| nodes[i].expect("graph is topologically ordered");
    let mut leaf = |tape: &mut GradientTape, i: usize| -> NodeId {
        if let Some(id) = param_nodes[i] {
            id
        } else {
            let id = tape.input(params[i].value.clone());
            param_nodes[i] = Some(id);
            id
        }
    };
    let id = match op {
        GraphOp::Input => unreachable!("handled by caller"),
        GraphOp::Conv { input, weight, bias, stride, padding } => {
            let w = leaf(tape, *weight);
            let b = leaf(tape, *bias);
            tape.conv2d(node(*input), w, b, *stride, *padding)?
        }
        GraphOp::DepthwiseConv { input, weight, stride, padding } => {
            let w = leaf(tape, *weight);
            tape.depthwise_conv2d(node(*input), w, *stride, *padding)?
        }
        GraphOp::BatchNorm { input, gamma, beta, state } => {
            let g = leaf(tape, *gamma);
            let b = leaf(tape, *beta);
            tape.batchnorm2d(node(*input), g, b, mode, &mut states[*state], BN_EPS, BN_MOMENTUM)?
        }
        GraphOp::Relu { input } => tape.relu(node(*input)),
        GraphOp::AvgPool { input, window, stride } => tape.avg_pool2d(node(*input), *window, *stride)?,
        GraphOp::GlobalAvgPool { input } => tape.global_avg_pool(node(*input))?,
        GraphOp::Concat { inputs } => {
            let ids: Vec<NodeId> = inputs.iter().map(|&i| node(i)).collect();
            tape.concat_channels(&ids)?
        }
        GraphOp::Add { lhs, rhs } => tape.add(node(*lhs), node(*rhs))?,
        GraphOp::FullyConnected { input, weight, bias } => {
            let w = leaf(tape, *weight);
            let b = leaf(tape, *bias);
            tape.fully_connected(node(*input), w, b)?
        }
    };
    Ok(id)
}
