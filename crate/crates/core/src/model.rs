//! Spatiotemporal graph convolution blocks, the 10-block backbone and its
//! truncated variants with task heads.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, RunningStats, Tape, Tensor, Var};
use crate::cycles::GaitCycle;
use crate::error::{Error, Result};
use crate::graph::{PartitionedGraph, SUBSETS};
use crate::rng::{derive_seed, seeded, tag, SeededRng};

pub const TEMPORAL_KERNEL: usize = 9;
/// x, y and detection confidence.
pub const INPUT_CHANNELS: usize = 3;
pub const BACKBONE_CHANNELS: [usize; 10] = [64, 64, 64, 64, 128, 128, 128, 256, 256, 256];
pub const BACKBONE_DROPOUT: f64 = 0.5;
/// Blocks (1-based) that carry dropout in the backbone.
pub const DROPOUT_BLOCKS: usize = 4;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Regression,
    /// The 400-way head of the pre-training backbone.
    BackboneFcn,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification => 2,
            HeadKind::Regression => 1,
            HeadKind::BackboneFcn => 400,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::Regression => "regression",
            HeadKind::BackboneFcn => "backbone_fcn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub residual: bool,
    pub dropout_p: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Model("block channels must be positive".into()));
        }
        if !matches!(self.temporal_stride, 1 | 2) {
            return Err(Error::Model(format!(
                "temporal stride must be 1 or 2, got {}",
                self.temporal_stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Model(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Residual path needs a strided 1x1 projection rather than identity.
    pub fn projects(&self) -> bool {
        self.residual && (self.in_channels != self.out_channels || self.temporal_stride != 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub blocks: Vec<BlockConfig>,
    pub head: Option<HeadKind>,
    pub temporal_kernel: usize,
    pub input_channels: usize,
    pub joints: usize,
    pub edge_importance: bool,
}

impl ModelSpec {
    /// The 10-block backbone with its 400-way head.
    pub fn backbone(joints: usize) -> Self {
        let mut prev = INPUT_CHANNELS;
        let blocks = BACKBONE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let cfg = BlockConfig {
                    in_channels: prev,
                    out_channels: out,
                    temporal_stride: if i > 0 && out != prev { 2 } else { 1 },
                    residual: i > 0,
                    dropout_p: if i < DROPOUT_BLOCKS { BACKBONE_DROPOUT } else { 0.0 },
                };
                prev = out;
                cfg
            })
            .collect();
        Self {
            blocks,
            head: Some(HeadKind::BackboneFcn),
            temporal_kernel: TEMPORAL_KERNEL,
            input_channels: INPUT_CHANNELS,
            joints,
            edge_importance: true,
        }
    }

    /// First `l` blocks, no head.
    pub fn truncated(&self, l: usize) -> Result<Self> {
        if l == 0 || l > self.blocks.len() {
            return Err(Error::Model(format!(
                "truncation level {l} outside 1..={}",
                self.blocks.len()
            )));
        }
        Ok(Self {
            blocks: self.blocks[..l].to_vec(),
            head: None,
            ..self.clone()
        })
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = Some(head);
        self
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.input_channels == 0 {
            return Err(Error::Model("joints and input channels must be positive".into()));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Model("temporal kernel must be odd".into()));
        }
        let mut prev = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != prev {
                return Err(Error::Model(format!(
                    "block {} expects {} input channels but receives {prev}",
                    i + 1,
                    b.in_channels
                )));
            }
            prev = b.out_channels;
        }
        Ok(())
    }
}

fn uniform_param(name: String, shape: &[usize], fan_in: usize, seed: u64) -> Parameter {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = seeded(derive_seed(seed, tag(&name)));
    let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
    Parameter::new(name, value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RunningStats,
    prefix: String,
}

impl BatchNorm {
    fn new(prefix: String, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn forward(&self, tape: &mut Tape, x: Var, train: bool, updates: &mut Vec<RunningStats>) -> Result<Var> {
        let (g, b) = (tape.param(&self.gamma), tape.param(&self.beta));
        let out = tape.batch_norm(x, g, b, &self.stats, train, BN_MOMENTUM, BN_EPS)?;
        updates.extend(out.updated);
        Ok(out.output)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Residual {
    None,
    Identity,
    Projection {
        weight: Parameter,
        bias: Parameter,
        bn: BatchNorm,
    },
}

/// Spatial graph convolution, then BN, ReLU, temporal convolution, BN and
/// dropout, a residual path and a final ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    config: BlockConfig,
    gcn_weight: Parameter,
    gcn_bias: Parameter,
    edge_importance: Option<Parameter>,
    bn1: BatchNorm,
    tcn_weight: Parameter,
    tcn_bias: Parameter,
    bn2: BatchNorm,
    residual: Residual,
}

impl Block {
    fn new(index: usize, config: BlockConfig, spec: &ModelSpec, seed: u64) -> Self {
        let p = format!("blocks.{index}");
        let (cin, cout, k) = (config.in_channels, config.out_channels, spec.temporal_kernel);
        let residual = if config.projects() {
            Residual::Projection {
                weight: uniform_param(format!("{p}.residual.conv.weight"), &[cout, cin, 1], cin, seed),
                bias: uniform_param(format!("{p}.residual.conv.bias"), &[cout], cin, seed),
                bn: BatchNorm::new(format!("{p}.residual.bn"), cout),
            }
        } else if config.residual {
            Residual::Identity
        } else {
            Residual::None
        };
        let j = spec.joints;
        Self {
            config,
            gcn_weight: uniform_param(format!("{p}.gcn.weight"), &[SUBSETS, cin, cout], cin, seed),
            gcn_bias: uniform_param(format!("{p}.gcn.bias"), &[SUBSETS, cout], cin, seed),
            edge_importance: spec.edge_importance.then(|| {
                Parameter::new(format!("{p}.edge_importance"), Tensor::full(&[SUBSETS, j, j], 1.0))
            }),
            bn1: BatchNorm::new(format!("{p}.tcn.bn1"), cout),
            tcn_weight: uniform_param(format!("{p}.tcn.conv.weight"), &[cout, cout, k], cout * k, seed),
            tcn_bias: uniform_param(format!("{p}.tcn.conv.bias"), &[cout], cout * k, seed),
            bn2: BatchNorm::new(format!("{p}.tcn.bn2"), cout),
            residual,
        }
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.gcn_weight, &self.gcn_bias];
        out.extend(&self.edge_importance);
        out.extend([&self.bn1.gamma, &self.bn1.beta, &self.tcn_weight, &self.tcn_bias]);
        out.extend([&self.bn2.gamma, &self.bn2.beta]);
        if let Residual::Projection { weight, bias, bn } = &self.residual {
            out.extend([weight, bias, &bn.gamma, &bn.beta]);
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.gcn_weight, &mut self.gcn_bias];
        out.extend(&mut self.edge_importance);
        out.extend([&mut self.bn1.gamma, &mut self.bn1.beta, &mut self.tcn_weight, &mut self.tcn_bias]);
        out.extend([&mut self.bn2.gamma, &mut self.bn2.beta]);
        if let Residual::Projection { weight, bias, bn } = &mut self.residual {
            out.extend([weight, bias, &mut bn.gamma, &mut bn.beta]);
        }
        out
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = vec![&self.bn1, &self.bn2];
        if let Residual::Projection { bn, .. } = &self.residual {
            out.push(bn);
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = vec![&mut self.bn1, &mut self.bn2];
        if let Residual::Projection { bn, .. } = &mut self.residual {
            out.push(bn);
        }
        out
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        adjacency: Var,
        rng: &mut Option<&mut SeededRng>,
        updates: &mut Vec<RunningStats>,
    ) -> Result<Var> {
        let train = rng.is_some();
        let adj = match &self.edge_importance {
            Some(mask) => {
                let m = tape.param(mask);
                tape.mul(adjacency, m)?
            }
            None => adjacency,
        };
        let (w, b) = (tape.param(&self.gcn_weight), tape.param(&self.gcn_bias));
        let mut h = tape.graph_conv(x, adj, w, Some(b))?;
        h = self.bn1.forward(tape, h, train, updates)?;
        h = tape.relu(h)?;
        let (w, b) = (tape.param(&self.tcn_weight), tape.param(&self.tcn_bias));
        h = tape.temporal_conv(h, w, Some(b), self.config.temporal_stride)?;
        h = self.bn2.forward(tape, h, train, updates)?;
        h = tape.dropout(h, self.config.dropout_p, rng.as_deref_mut())?;
        let res = match &self.residual {
            Residual::None => None,
            Residual::Identity => Some(x),
            Residual::Projection { weight, bias, bn } => {
                let (w, b) = (tape.param(weight), tape.param(bias));
                let r = tape.temporal_conv(x, w, Some(b), self.config.temporal_stride)?;
                Some(bn.forward(tape, r, train, updates)?)
            }
        };
        if let Some(r) = res {
            h = tape.add(h, r)?;
        }
        tape.relu(h)
    }
}

/// Global average pooling followed by a 1x1 map to the task outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    kind: HeadKind,
    weight: Parameter,
    bias: Parameter,
}

impl Head {
    fn new(kind: HeadKind, channels: usize, seed: u64) -> Self {
        let o = kind.outputs();
        Self {
            kind,
            weight: uniform_param("head.weight".into(), &[channels, o], channels, seed),
            bias: Parameter::new("head.bias", Tensor::zeros(&[o])),
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }
}

pub enum Mode<'a> {
    /// Batch statistics and dropout masks drawn from the generator.
    Train(&'a mut SeededRng),
    /// Running statistics, no dropout.
    Eval,
}

pub struct Forward {
    pub output: Var,
    /// Updated running statistics in [`Model::batch_norms`] order (train
    /// mode only); apply with [`Model::commit_stats`].
    pub stats: Vec<RunningStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    graph: PartitionedGraph,
    stem: BatchNorm,
    blocks: Vec<Block>,
    head: Option<Head>,
}

/// The full 10-block backbone with its 400-way head.
pub fn build_backbone(graph: PartitionedGraph, seed: u64) -> Result<Model> {
    let spec = ModelSpec::backbone(graph.joint_count());
    Model::new(spec, graph, seed)
}

impl Model {
    pub fn new(spec: ModelSpec, graph: PartitionedGraph, seed: u64) -> Result<Self> {
        spec.validate()?;
        let j = graph.joint_count();
        if j != spec.joints || graph.adjacency.shape() != [SUBSETS, j, j] {
            return Err(Error::Model(format!(
                "graph with {j} joints does not fit a {}-joint spec",
                spec.joints
            )));
        }
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, &cfg)| Block::new(i, cfg, &spec, seed))
            .collect();
        let head = spec.head.map(|kind| Head::new(kind, spec.output_channels(), seed));
        Ok(Self {
            stem: BatchNorm::new("stem.bn".into(), spec.input_channels * j),
            spec,
            graph,
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &PartitionedGraph {
        &self.graph
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head_kind(&self) -> Option<HeadKind> {
        self.head.as_ref().map(Head::kind)
    }

    /// Stem plus the first `l` blocks; the head is dropped.
    pub fn truncate(&self, l: usize) -> Result<Self> {
        let spec = self.spec.truncated(l)?;
        Ok(Self {
            spec,
            graph: self.graph.clone(),
            stem: self.stem.clone(),
            blocks: self.blocks[..l].to_vec(),
            head: None,
        })
    }

    /// Fresh, seeded head on a headless model.
    pub fn attach_head(&self, kind: HeadKind, seed: u64) -> Result<Self> {
        if let Some(h) = &self.head {
            return Err(Error::Model(format!(
                "model already has a {} head",
                h.kind.as_str()
            )));
        }
        let mut out = self.clone();
        out.head = Some(Head::new(kind, self.spec.output_channels(), seed));
        out.spec.head = Some(kind);
        Ok(out)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.stem.gamma, &self.stem.beta];
        for b in &self.blocks {
            out.extend(b.parameters());
        }
        if let Some(h) = &self.head {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.stem.gamma, &mut self.stem.beta];
        for b in &mut self.blocks {
            out.extend(b.parameters_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.extend(b.batch_norms());
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.blocks {
            out.extend(b.batch_norms_mut());
        }
        out
    }

    /// Learnable scalars, batch-norm affine terms and edge masks included,
    /// running statistics excluded. Frozen parameters still count.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.parameters_mut() {
            p.trainable = trainable;
        }
    }

    pub fn commit_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        let mut bns = self.batch_norms_mut();
        if stats.len() != bns.len() {
            return Err(Error::Model(format!(
                "{} running-stat updates for {} batch-norm layers",
                stats.len(),
                bns.len()
            )));
        }
        for (bn, s) in bns.iter_mut().zip(stats) {
            bn.stats = s;
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [n, c, t, j] if n > 0 && t > 0 && c == self.spec.input_channels && j == self.spec.joints => Ok(()),
            _ => Err(Error::Shape(format!(
                "model input must be [N, {}, T, {}], got {shape:?}",
                self.spec.input_channels, self.spec.joints
            ))),
        }
    }

    /// `[N, C, T, J]` input to `[N, outputs]` with a head, or to the final
    /// `[N, C', T', J]` feature map without one.
    pub fn forward(&self, tape: &mut Tape, input: Var, mode: Mode<'_>) -> Result<Forward> {
        let shape = tape.value(input).shape().to_vec();
        self.check_input(&shape)?;
        let [n, c, t, j] = [shape[0], shape[1], shape[2], shape[3]];
        let mut rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Eval => None,
        };
        let train = rng.is_some();
        let mut stats = Vec::new();

        // stem: batch norm over the C*J (channel, joint) pairs
        let mut h = tape.swap_last_two(input)?;
        h = tape.reshape(h, &[n, c * j, t])?;
        h = self.stem.forward(tape, h, train, &mut stats)?;
        h = tape.reshape(h, &[n, c, j, t])?;
        h = tape.swap_last_two(h)?;

        let adjacency = tape.constant(self.graph.adjacency.clone());
        for block in &self.blocks {
            h = block.forward(tape, h, adjacency, &mut rng, &mut stats)?;
        }
        if let Some(head) = &self.head {
            let pooled = tape.global_avg_pool(h)?;
            let (w, b) = (tape.param(&head.weight), tape.param(&head.bias));
            h = tape.linear(pooled, w, b)?;
        }
        Ok(Forward { output: h, stats })
    }

    /// Eval-mode forward pass.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.output).clone())
    }

    /// Every persisted tensor by name: parameters, then running statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.parameters().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for bn in self.batch_norms() {
            let c = bn.stats.channels();
            out.push((format!("{}.running_mean", bn.prefix), Tensor::from_fn(&[c], |i| bn.stats.mean[i])));
            out.push((format!("{}.running_var", bn.prefix), Tensor::from_fn(&[c], |i| bn.stats.var[i])));
        }
        out
    }

    /// Overwrites every persisted tensor from `state`; each name must be
    /// present with a matching shape.
    pub fn load_state(&mut self, mut state: BTreeMap<String, Tensor>) -> Result<()> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = state.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for p in self.parameters_mut() {
            let shape = p.value.shape().to_vec();
            p.value = take(&p.name, &shape)?;
        }
        for bn in self.batch_norms_mut() {
            let c = [bn.stats.channels()];
            bn.stats.mean = take(&format!("{}.running_mean", bn.prefix), &c)?.into_data();
            bn.stats.var = take(&format!("{}.running_var", bn.prefix), &c)?.into_data();
        }
        if let Some(extra) = state.keys().next() {
            return Err(Error::Model(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Stacks cycles into a `[N, 3, T, J]` batch of x, y and confidence.
pub fn cycles_to_tensor(cycles: &[&GaitCycle]) -> Result<Tensor> {
    let first = cycles.first().ok_or_else(|| Error::Empty("no cycles to batch".into()))?;
    let t = first.frames.len();
    let j = first.frames.first().map_or(0, |f| f.len());
    let mut data = Vec::with_capacity(cycles.len() * INPUT_CHANNELS * t * j);
    for cycle in cycles {
        if cycle.frames.len() != t {
            return Err(Error::Shape(format!(
                "cycle of {} frames in a batch of {t}-frame cycles",
                cycle.frames.len()
            )));
        }
        for ch in 0..INPUT_CHANNELS {
            for frame in &cycle.frames {
                data.extend(frame.iter().map(|k| match ch {
                    0 => k.x,
                    1 => k.y,
                    _ => k.confidence,
                }));
            }
        }
    }
    Tensor::new(vec![cycles.len(), INPUT_CHANNELS, t, j], data)
}
