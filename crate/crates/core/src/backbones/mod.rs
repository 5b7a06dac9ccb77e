//! Micro-scale convolutional backbones with an appended FC head.
//!
//! Two families are provided: a dense-block network (each layer consumes
//! the channel concatenation of all layers before it) and an inverted
//! bottleneck network (pointwise expand, depthwise conv, pointwise project,
//! optional residual skip). Both end in global average pooling and a
//! fully-connected head, and both record the final convolutional feature
//! map for saliency extraction.

mod checkpoint;
mod graph;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, network_from_bytes, save_checkpoint};
pub use graph::{BnLayerState, GraphOp, Network, Param, TracedForward};

use crate::error::{Error, Result};
use crate::tensor::{BnState, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::fmt::Write as _;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// One dense block: `num_layers` layers each contributing `growth_rate`
/// channels on top of the block input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth_rate: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroDenseConfig {
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub blocks: Vec<DenseBlockSpec>,
    /// Channel fraction kept by each transition's 1x1 conv, in (0, 1].
    pub transition_compression: f32,
    pub head_hidden: Vec<usize>,
}

impl Default for MicroDenseConfig {
    /// Desk-scale default at 64x64 input.
    fn default() -> Self {
        MicroDenseConfig {
            input_resolution: 64,
            stem_channels: 16,
            blocks: vec![
                DenseBlockSpec { num_layers: 4, growth_rate: 8 },
                DenseBlockSpec { num_layers: 4, growth_rate: 8 },
            ],
            transition_compression: 0.5,
            head_hidden: vec![32],
        }
    }
}

impl MicroDenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 8 {
            return Err(Error::Build(format!(
                "input resolution {} below minimum 8",
                self.input_resolution
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::Build("stem_channels must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Build("at least one dense block required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.num_layers == 0 || b.growth_rate == 0 {
                return Err(Error::Build(format!(
                    "dense block {i} needs num_layers >= 1 and growth_rate >= 1"
                )));
            }
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return Err(Error::Build(format!(
                "transition_compression {} outside (0, 1]",
                self.transition_compression
            )));
        }
        Ok(())
    }
}

/// One inverted-bottleneck stage, repeated `repeats` times; only the first
/// repeat applies `stride` and the channel change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MbBlockSpec {
    pub expansion_ratio: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroEffConfig {
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub blocks: Vec<MbBlockSpec>,
    pub head_hidden: Vec<usize>,
}

impl Default for MicroEffConfig {
    /// Desk-scale default at 64x64 input: three inverted-bottleneck stages.
    fn default() -> Self {
        MicroEffConfig {
            input_resolution: 64,
            stem_channels: 16,
            blocks: vec![
                MbBlockSpec { expansion_ratio: 2, out_channels: 16, stride: 2, repeats: 1 },
                MbBlockSpec { expansion_ratio: 2, out_channels: 24, stride: 2, repeats: 2 },
                MbBlockSpec { expansion_ratio: 2, out_channels: 32, stride: 2, repeats: 2 },
            ],
            head_hidden: vec![32],
        }
    }
}

impl MicroEffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 8 {
            return Err(Error::Build(format!(
                "input resolution {} below minimum 8",
                self.input_resolution
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::Build("stem_channels must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Build("at least one MBConv stage required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.expansion_ratio == 0 {
                return Err(Error::Build(format!("stage {i}: expansion_ratio must be >= 1")));
            }
            if !(b.stride == 1 || b.stride == 2) {
                return Err(Error::Build(format!("stage {i}: stride must be 1 or 2")));
            }
            if b.out_channels == 0 || b.repeats == 0 {
                return Err(Error::Build(format!("stage {i}: out_channels and repeats must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Compound-scaling coefficients: depth, width, resolution multipliers and
/// the scaling exponent phi.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: u32,
}

impl ScalingCoefficients {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1.0 || self.beta < 1.0 || self.gamma < 1.0 {
            return Err(Error::Build("scaling coefficients must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scale a base config: repeats by ceil(r * alpha^phi), channels up to the
/// next multiple of four of c * beta^phi, resolution to the nearest even
/// value of r * gamma^phi.
pub fn compound_scale(base: &MicroEffConfig, s: &ScalingCoefficients) -> Result<MicroEffConfig> {
    s.validate()?;
    if s.phi == 0 {
        return Ok(base.clone());
    }
    let depth = s.alpha.powi(s.phi as i32);
    let width = s.beta.powi(s.phi as i32);
    let reso = s.gamma.powi(s.phi as i32);
    let scale_channels = |c: usize| -> usize {
        let scaled = c as f64 * width;
        (((scaled / 4.0).ceil()) as usize).max(1) * 4
    };
    let mut cfg = base.clone();
    cfg.stem_channels = scale_channels(base.stem_channels);
    for b in &mut cfg.blocks {
        b.repeats = (b.repeats as f64 * depth).ceil() as usize;
        b.out_channels = scale_channels(b.out_channels);
    }
    let r = base.input_resolution as f64 * reso;
    cfg.input_resolution = ((r / 2.0).round() as usize).max(1) * 2;
    Ok(cfg)
}

/// Architecture descriptor: which family plus its configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchConfig {
    Dense(MicroDenseConfig),
    Eff(MicroEffConfig),
}

impl ArchConfig {
    pub fn input_resolution(&self) -> usize {
        match self {
            ArchConfig::Dense(c) => c.input_resolution,
            ArchConfig::Eff(c) => c.input_resolution,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ArchConfig::Dense(_) => "micro-dense",
            ArchConfig::Eff(_) => "micro-eff",
        }
    }
}

fn join_usizes(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usizes(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.parse::<usize>().ok()).collect()
}

/// Canonical key=value descriptor used in checkpoints. Parsing then
/// re-serializing reproduces the exact byte string.
pub fn descriptor_string(config: &ArchConfig, num_outputs: usize) -> String {
    let mut out = String::new();
    match config {
        ArchConfig::Dense(c) => {
            writeln!(out, "kind = micro-dense").unwrap();
            writeln!(out, "input_resolution = {}", c.input_resolution).unwrap();
            writeln!(out, "stem_channels = {}", c.stem_channels).unwrap();
            let blocks: Vec<String> =
                c.blocks.iter().map(|b| format!("{}x{}", b.num_layers, b.growth_rate)).collect();
            writeln!(out, "blocks = {}", blocks.join(",")).unwrap();
            writeln!(out, "transition_compression = {}", c.transition_compression).unwrap();
            writeln!(out, "head_hidden = {}", join_usizes(&c.head_hidden)).unwrap();
        }
        ArchConfig::Eff(c) => {
            writeln!(out, "kind = micro-eff").unwrap();
            writeln!(out, "input_resolution = {}", c.input_resolution).unwrap();
            writeln!(out, "stem_channels = {}", c.stem_channels).unwrap();
            let blocks: Vec<String> = c
                .blocks
                .iter()
                .map(|b| format!("e{}c{}s{}r{}", b.expansion_ratio, b.out_channels, b.stride, b.repeats))
                .collect();
            writeln!(out, "blocks = {}", blocks.join(",")).unwrap();
            writeln!(out, "head_hidden = {}", join_usizes(&c.head_hidden)).unwrap();
        }
    }
    writeln!(out, "num_outputs = {num_outputs}").unwrap();
    out
}

pub fn parse_descriptor(text: &str) -> Result<(ArchConfig, usize)> {
    let mut kv = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Build(format!("malformed descriptor line: {line:?}")))?;
        kv.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Build(format!("descriptor missing key {key}")))
    };
    let bad = |key: &str| Error::Build(format!("descriptor has invalid value for {key}"));
    let kind = get("kind")?;
    let input_resolution: usize = get("input_resolution")?.parse().map_err(|_| bad("input_resolution"))?;
    let stem_channels: usize = get("stem_channels")?.parse().map_err(|_| bad("stem_channels"))?;
    let head_hidden = parse_usizes(get("head_hidden")?).ok_or_else(|| bad("head_hidden"))?;
    let num_outputs: usize = get("num_outputs")?.parse().map_err(|_| bad("num_outputs"))?;
    let config = match kind {
        "micro-dense" => {
            let mut blocks = Vec::new();
            for part in get("blocks")?.split(',') {
                let (n, k) = part.split_once('x').ok_or_else(|| bad("blocks"))?;
                blocks.push(DenseBlockSpec {
                    num_layers: n.parse().map_err(|_| bad("blocks"))?,
                    growth_rate: k.parse().map_err(|_| bad("blocks"))?,
                });
            }
            let transition_compression: f32 =
                get("transition_compression")?.parse().map_err(|_| bad("transition_compression"))?;
            ArchConfig::Dense(MicroDenseConfig {
                input_resolution,
                stem_channels,
                blocks,
                transition_compression,
                head_hidden,
            })
        }
        "micro-eff" => {
            let mut blocks = Vec::new();
            for part in get("blocks")?.split(',') {
                let rest = part.strip_prefix('e').ok_or_else(|| bad("blocks"))?;
                let (e, rest) = rest.split_once('c').ok_or_else(|| bad("blocks"))?;
                let (c, rest) = rest.split_once('s').ok_or_else(|| bad("blocks"))?;
                let (s, r) = rest.split_once('r').ok_or_else(|| bad("blocks"))?;
                blocks.push(MbBlockSpec {
                    expansion_ratio: e.parse().map_err(|_| bad("blocks"))?,
                    out_channels: c.parse().map_err(|_| bad("blocks"))?,
                    stride: s.parse().map_err(|_| bad("blocks"))?,
                    repeats: r.parse().map_err(|_| bad("blocks"))?,
                });
            }
            ArchConfig::Eff(MicroEffConfig { input_resolution, stem_channels, blocks, head_hidden })
        }
        other => return Err(Error::Build(format!("unknown architecture kind {other:?}"))),
    };
    Ok((config, num_outputs))
}

// ── construction ────────────────────────────────────────────────────

struct Builder {
    graph: Vec<GraphOp>,
    params: Vec<Param>,
    bn_states: Vec<BnLayerState>,
    rng: StdRng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            graph: vec![GraphOp::Input],
            params: Vec::new(),
            bn_states: Vec::new(),
            rng: StdRng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, op: GraphOp) -> usize {
        self.graph.push(op);
        self.graph.len() - 1
    }

    /// Kaiming-style fan-in uniform init.
    fn init_tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f32).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::new(shape, data).expect("valid init shape")
    }

    fn add_param(&mut self, name: String, value: Tensor) -> usize {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, frozen: false });
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        input: usize,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        let weight = self.init_tensor(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
        let w = self.add_param(format!("{name}.weight"), weight);
        let b = self.add_param(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        self.push(GraphOp::Conv { input, weight: w, bias: b, stride, padding })
    }

    fn depthwise(&mut self, input: usize, name: &str, channels: usize, kernel: usize, stride: usize) -> usize {
        let weight = self.init_tensor(&[channels, kernel, kernel], kernel * kernel);
        let w = self.add_param(format!("{name}.weight"), weight);
        self.push(GraphOp::DepthwiseConv { input, weight: w, stride, padding: kernel / 2 })
    }

    fn batchnorm(&mut self, input: usize, name: &str, channels: usize) -> usize {
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0));
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.bn_states.push(BnLayerState { name: name.to_string(), state: BnState::new(channels) });
        let state = self.bn_states.len() - 1;
        self.push(GraphOp::BatchNorm { input, gamma, beta, state })
    }

    fn relu(&mut self, input: usize) -> usize {
        self.push(GraphOp::Relu { input })
    }

    fn fc(&mut self, input: usize, name: &str, d_in: usize, d_out: usize) -> usize {
        let weight = self.init_tensor(&[d_out, d_in], d_in);
        let w = self.add_param(format!("{name}.weight"), weight);
        let b = self.add_param(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        self.push(GraphOp::FullyConnected { input, weight: w, bias: b })
    }

    /// GAP plus the FC head; returns (gap node, logits node).
    fn head(&mut self, input: usize, features: usize, hidden: &[usize], num_outputs: usize) -> (usize, usize) {
        let gap = self.push(GraphOp::GlobalAvgPool { input });
        let mut node = gap;
        let mut d = features;
        for (i, &width) in hidden.iter().enumerate() {
            node = self.fc(node, &format!("head.fc{i}"), d, width);
            node = self.relu(node);
            d = width;
        }
        let logits = self.fc(node, &format!("head.fc{}", hidden.len()), d, num_outputs);
        (gap, logits)
    }

    fn finish(self, config: ArchConfig, num_outputs: usize, final_conv: usize, gap_node: usize) -> Network {
        Network {
            config,
            num_outputs,
            graph: self.graph,
            params: self.params,
            bn_states: self.bn_states,
            final_conv,
            gap_node,
        }
    }
}

/// Build the dense-block backbone:
/// stem conv, then per block [dense layers, transition], then BN, ReLU,
/// global average pool and the FC head.
pub fn build_micro_densenet(cfg: &MicroDenseConfig, num_outputs: usize, seed: u64) -> Result<Network> {
    cfg.validate()?;
    if num_outputs == 0 {
        return Err(Error::Build("num_outputs must be >= 1".into()));
    }
    let mut b = Builder::new(seed);
    let mut h = cfg.input_resolution;
    let input = 0usize;

    let mut node = b.conv(input, "stem", 3, cfg.stem_channels, 3, 1, 1);
    let mut channels = cfg.stem_channels;

    for (bi, block) in cfg.blocks.iter().enumerate() {
        // dense block: every layer sees the concatenation of all predecessors
        let mut features = vec![node];
        for li in 0..block.num_layers {
            let layer_in = if features.len() == 1 {
                features[0]
            } else {
                b.push(GraphOp::Concat { inputs: features.clone() })
            };
            let c_in = channels + li * block.growth_rate;
            let name = format!("block{bi}.layer{li}");
            let y = b.batchnorm(layer_in, &format!("{name}.bn"), c_in);
            let y = b.relu(y);
            let y = b.conv(y, &format!("{name}.conv"), c_in, block.growth_rate, 3, 1, 1);
            features.push(y);
        }
        node = b.push(GraphOp::Concat { inputs: features });
        channels += block.num_layers * block.growth_rate;

        // transition: BN, ReLU, compressing 1x1 conv, 2x2 average pool
        let compressed = ((channels as f32 * cfg.transition_compression).floor() as usize).max(1);
        let name = format!("transition{bi}");
        node = b.batchnorm(node, &format!("{name}.bn"), channels);
        node = b.relu(node);
        node = b.conv(node, &format!("{name}.conv"), channels, compressed, 1, 1, 0);
        if h < 2 {
            return Err(Error::Build(format!(
                "transition {bi}: spatial extent {h}x{h} too small for its 2x2 average pool; \
                 increase input_resolution or drop a block"
            )));
        }
        node = b.push(GraphOp::AvgPool { input: node, window: 2, stride: 2 });
        channels = compressed;
        h /= 2;
    }

    node = b.batchnorm(node, "final.bn", channels);
    let final_conv = b.relu(node);
    let (gap_node, _logits) = b.head(final_conv, channels, &cfg.head_hidden, num_outputs);
    Ok(b.finish(ArchConfig::Dense(cfg.clone()), num_outputs, final_conv, gap_node))
}

/// Build the inverted-bottleneck backbone:
/// stem conv, then stages of MBConv-lite blocks, then global average pool
/// and the FC head.
pub fn build_micro_efficientnet(cfg: &MicroEffConfig, num_outputs: usize, seed: u64) -> Result<Network> {
    cfg.validate()?;
    if num_outputs == 0 {
        return Err(Error::Build("num_outputs must be >= 1".into()));
    }
    let mut b = Builder::new(seed);
    let input = 0usize;
    let mut node = b.conv(input, "stem", 3, cfg.stem_channels, 3, 1, 1);
    let mut channels = cfg.stem_channels;

    for (si, stage) in cfg.blocks.iter().enumerate() {
        for rep in 0..stage.repeats {
            let stride = if rep == 0 { stage.stride } else { 1 };
            let name = format!("stage{si}.block{rep}");
            let block_in = node;
            let c_in = channels;
            let mid = stage.expansion_ratio * c_in;

            let mut y = block_in;
            if stage.expansion_ratio > 1 {
                y = b.conv(y, &format!("{name}.expand"), c_in, mid, 1, 1, 0);
                y = b.batchnorm(y, &format!("{name}.expand_bn"), mid);
                y = b.relu(y);
            }
            y = b.depthwise(y, &format!("{name}.dw"), mid, 3, stride);
            y = b.batchnorm(y, &format!("{name}.dw_bn"), mid);
            y = b.relu(y);
            y = b.conv(y, &format!("{name}.project"), mid, stage.out_channels, 1, 1, 0);
            y = b.batchnorm(y, &format!("{name}.project_bn"), stage.out_channels);
            if stride == 1 && c_in == stage.out_channels {
                y = b.push(GraphOp::Add { lhs: block_in, rhs: y });
            }
            node = y;
            channels = stage.out_channels;
        }
    }

    let final_conv = node;
    let (gap_node, _logits) = b.head(final_conv, channels, &cfg.head_hidden, num_outputs);
    Ok(b.finish(ArchConfig::Eff(cfg.clone()), num_outputs, final_conv, gap_node))
}

/// Build either family from an [`ArchConfig`].
pub fn build_network(config: &ArchConfig, num_outputs: usize, seed: u64) -> Result<Network> {
    match config {
        ArchConfig::Dense(c) => build_micro_densenet(c, num_outputs, seed),
        ArchConfig::Eff(c) => build_micro_efficientnet(c, num_outputs, seed),
    }
}
