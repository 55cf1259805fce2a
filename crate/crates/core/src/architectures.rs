//! Width-scaled ResNet18, ResNet50 and UNet assemblies with per-block
//! strategies.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, Var};
use crate::config::{parse_fraction, Config};
use crate::error::{invalid, Error, Result};
use crate::layers::{
    even_labels, make_block, Block, BlockKind, BlockSpec, BlockStrategy, ConvBn, ConvLayer, ConvLayerSpec,
    ConvStrategy, Ctx, Linear, ParamKind, ParamStore,
};
use crate::relmatrix::{count_groups, grouped_u, sparsity, ChannelGroups, RelationshipMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    ResNet18,
    ResNet50,
    UNet,
}

pub const RESNET_BLOCKS: [&str; 5] = ["InConv", "Layer1", "Layer2", "Layer3", "Layer4"];
pub const UNET_BLOCKS: [&str; 9] = ["InConv", "Down1", "Down2", "Down3", "Down4", "Up1", "Up2", "Up3", "Up4"];

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Self::ResNet18),
            "resnet50" => Ok(Self::ResNet50),
            "unet" => Ok(Self::UNet),
            _ => invalid(format!("unknown architecture {s:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ResNet18 => "resnet18",
            Self::ResNet50 => "resnet50",
            Self::UNet => "unet",
        }
    }

    /// Named blocks in forward order.
    pub fn block_names(self) -> &'static [&'static str] {
        match self {
            Self::ResNet18 | Self::ResNet50 => &RESNET_BLOCKS,
            Self::UNet => &UNET_BLOCKS,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Self::UNet => Task::Segmentation,
            _ => Task::PatchClassification,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    PatchClassification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub family: Family,
    pub width_scale: f64,
    pub block_strategies: BTreeMap<String, BlockStrategy>,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channel widths of the input sources, used to group the first layer.
    pub input_groups: Option<Vec<usize>>,
    pub zero_init_residual: bool,
}

/// Nearest power of two of `c * scale`, at least 8.
pub fn scale_width(c: usize, scale: f64) -> usize {
    let v = (c as f64 * scale).max(1.0);
    let p = 1usize << v.log2().round() as u32;
    p.max(8)
}

impl ArchSpec {
    /// Every block uses `strategy`.
    pub fn new(
        family: Family,
        width_scale: f64,
        in_channels: usize,
        num_classes: usize,
        strategy: BlockStrategy,
    ) -> Self {
        let block_strategies = family.block_names().iter().map(|b| (b.to_string(), strategy.clone())).collect();
        Self {
            family,
            width_scale,
            block_strategies,
            num_classes,
            in_channels,
            input_groups: None,
            zero_init_residual: true,
        }
    }

    pub fn task(&self) -> Task {
        self.family.task()
    }

    pub fn with_block(mut self, block: &str, strategy: BlockStrategy) -> Result<Self> {
        match self.block_strategies.get_mut(block) {
            Some(s) => *s = strategy,
            None => {
                return invalid(format!(
                    "unknown block {block:?} for {}; expected one of {:?}",
                    self.family,
                    self.family.block_names()
                ))
            }
        }
        Ok(self)
    }

    pub fn with_input_groups(mut self, widths: Vec<usize>) -> Self {
        self.input_groups = Some(widths);
        self
    }

    pub fn strategy(&self, block: &str) -> &BlockStrategy {
        &self.block_strategies[block]
    }

    /// Strategies in block order.
    pub fn strategies(&self) -> Vec<(&'static str, &BlockStrategy)> {
        self.family.block_names().iter().map(|&b| (b, &self.block_strategies[b])).collect()
    }

    /// Reads `arch.*` and `strategy.<Block>` keys.
    pub fn from_config(cfg: &Config, in_channels: usize, num_classes: usize) -> Result<Self> {
        let family = Family::parse(cfg.get("arch.family").unwrap_or("resnet18")).map_err(usage)?;
        let scale = parse_fraction(cfg.get("arch.width_scale").unwrap_or("1/8"))?;
        let strategy = BlockStrategy::parse(cfg.get("arch.strategy").unwrap_or("sepdgconv")).map_err(usage)?;
        let mut spec = Self::new(family, scale, in_channels, num_classes, strategy);
        spec.zero_init_residual = cfg.parse_or("arch.zero_init_residual", true)?;
        for (block, s) in cfg.strategy_overrides() {
            spec = spec.with_block(block, BlockStrategy::parse(s).map_err(usage)?).map_err(usage)?;
        }
        Ok(spec)
    }

    /// Output width of every named block.
    pub fn channel_plan(&self) -> Vec<usize> {
        let s = |c| scale_width(c, self.width_scale);
        match self.family {
            Family::ResNet18 => vec![s(64), s(64), s(128), s(256), s(512)],
            Family::ResNet50 => vec![s(64), s(256), s(512), s(1024), s(2048)],
            Family::UNet => [64, 128, 256, 512, 1024, 512, 256, 128, 64].iter().map(|&c| s(c)).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return invalid("network needs at least one input channel and one class");
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return invalid(format!("width scale {} outside (0, 1]", self.width_scale));
        }
        if let Some(g) = &self.input_groups {
            if g.iter().sum::<usize>() != self.in_channels || g.contains(&0) {
                return invalid(format!("input groups {g:?} do not cover {} channels", self.in_channels));
            }
        }
        Ok(())
    }
}

fn usage(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Usage(m),
        other => other,
    }
}

fn groups_of(s: &BlockStrategy) -> Option<usize> {
    match s {
        BlockStrategy::Group { groups } | BlockStrategy::FgConv { groups } => Some(*groups),
        _ => None,
    }
}

/// Labels of the network input for a grouped first layer.
fn input_labels(spec: &ArchSpec, strategy: &BlockStrategy) -> Result<Option<Vec<usize>>> {
    let Some(g) = groups_of(strategy) else { return Ok(None) };
    match &spec.input_groups {
        Some(widths) if widths.len() == g => {
            Ok(Some(widths.iter().enumerate().flat_map(|(i, &w)| std::iter::repeat_n(i, w)).collect()))
        }
        Some(widths) => invalid(format!("{} input groups for a {g}-group first layer", widths.len())),
        None => even_labels(spec.in_channels, g).map(Some),
    }
}

/// Stride-2, kernel-2 transposed convolution with bias.
#[derive(Debug, Clone)]
pub struct TransposeConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub mask: Option<RelationshipMatrix>,
}

impl TransposeConv {
    fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: Option<usize>,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let mask = match groups {
            Some(g) => Some(grouped_u(ChannelGroups { input: even_labels(c_in, g)?, output: even_labels(c_out, g)? })?),
            None => None,
        };
        let bound = (6.0 / (c_in * 4) as f64).sqrt();
        let w = Tensor::from_fn(&[c_out, c_in, 2, 2], |_| rng.gen_range(-bound..bound));
        let weight = store.add(format!("{name}.up.weight"), ParamKind::Weight, w);
        let bias = store.add(format!("{name}.up.bias"), ParamKind::Bias, Tensor::zeros(&[c_out]));
        Ok(Self { weight, bias, c_in, c_out, mask })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut w = ctx.param(self.weight);
        if let Some(m) = &self.mask {
            let mv = ctx.graph.constant(Tensor::new(vec![m.rows(), m.cols()], m.to_f64())?);
            w = ctx.graph.mask_weight(w, mv)?;
        }
        let y = ctx.graph.transpose_conv2d(x, w, 2)?;
        let b = ctx.param(self.bias);
        ctx.graph.bias_add(y, b)
    }

    pub fn params(&self) -> usize {
        self.c_out * self.c_in * 4 + self.c_out
    }

    fn describe(&self) -> String {
        let mask = self.mask.as_ref().map_or("dense".to_string(), |m| format!("{:?}", m.entries()));
        format!("tconv {}->{} k2 s2 {mask}", self.c_in, self.c_out)
    }
}

#[derive(Debug, Clone)]
pub enum StageBody {
    /// Single conv + BN + ReLU.
    Stem(ConvBn),
    Blocks(Vec<Block>),
    /// 2x2 max pooling, then a block.
    Down(Block),
    /// Upsampling, concatenation with the skip tensor, then a block.
    Up {
        up: TransposeConv,
        block: Block,
    },
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub strategy: BlockStrategy,
    pub body: StageBody,
}

impl Stage {
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        match &self.body {
            StageBody::Stem(u) => vec![&u.conv],
            StageBody::Blocks(bs) => bs.iter().flat_map(Block::layers).collect(),
            StageBody::Down(b) | StageBody::Up { block: b, .. } => b.layers().collect(),
        }
    }

    fn units_mut(&mut self) -> Vec<&mut ConvBn> {
        match &mut self.body {
            StageBody::Stem(u) => vec![u],
            StageBody::Blocks(bs) => bs.iter_mut().flat_map(Block::layers_mut).collect(),
            StageBody::Down(b) | StageBody::Up { block: b, .. } => b.layers_mut().collect(),
        }
    }

    /// Dense conv weights, batch-norm affine parameters and upsampling
    /// weights; gates are not counted.
    pub fn dense_params(&self) -> usize {
        match &self.body {
            StageBody::Stem(u) => u.dense_params(),
            StageBody::Blocks(bs) => bs.iter().map(Block::dense_params).sum(),
            StageBody::Down(b) => b.dense_params(),
            StageBody::Up { up, block } => up.params() + block.dense_params(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Classifier(Linear),
    Segmenter { conv: ConvLayer, bias: ParamId },
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ArchSpec,
    pub store: ParamStore,
    pub stages: Vec<Stage>,
    pub head: Head,
}

pub fn build(spec: &ArchSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let plan = spec.channel_plan();
    let names = spec.family.block_names();
    let mut stages = Vec::new();
    let head = match spec.family {
        Family::ResNet18 | Family::ResNet50 => {
            let strategy = spec.strategy("InConv").clone();
            let labels = input_labels(spec, &strategy)?;
            let stem_spec = BlockSpec::with_strategy(
                BlockKind::DoubleConv,
                spec.in_channels,
                plan[0],
                1,
                false,
                &strategy,
                labels.as_deref(),
            )?;
            let cs = ConvLayerSpec::new(spec.in_channels, plan[0], 3, 1, 1, stem_spec.strategies[0].clone());
            let stem = ConvBn::new("InConv", cs, false, &mut store, &mut rng)?;
            stages.push(Stage { name: "InConv".into(), strategy, body: StageBody::Stem(stem) });
            let (kind, depths): (BlockKind, [usize; 4]) = match spec.family {
                Family::ResNet18 => (BlockKind::DoubleConv, [2, 2, 2, 2]),
                _ => (BlockKind::Bottleneck, [2, 3, 5, 2]),
            };
            let mut c_in = plan[0];
            for (li, &depth) in depths.iter().enumerate() {
                let name = names[li + 1];
                let strategy = spec.strategy(name).clone();
                let c_out = plan[li + 1];
                let mut blocks = Vec::new();
                for bi in 0..depth {
                    let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                    let mut bs = BlockSpec::with_strategy(kind, c_in, c_out, stride, true, &strategy, None)?;
                    bs.zero_init_last_bn = spec.zero_init_residual;
                    blocks.push(make_block(&format!("{name}.{bi}"), &bs, &mut store, &mut rng)?);
                    c_in = c_out;
                }
                stages.push(Stage { name: name.into(), strategy, body: StageBody::Blocks(blocks) });
            }
            Head::Classifier(Linear::new("fc", c_in, spec.num_classes, &mut store, &mut rng))
        }
        Family::UNet => {
            let double = |c_in, c_out, strategy: &BlockStrategy, labels: Option<&[usize]>| {
                BlockSpec::with_strategy(BlockKind::DoubleConv, c_in, c_out, 1, false, strategy, labels)
            };
            let strategy = spec.strategy("InConv").clone();
            let labels = input_labels(spec, &strategy)?;
            let bs = double(spec.in_channels, plan[0], &strategy, labels.as_deref())?;
            let block = make_block("InConv", &bs, &mut store, &mut rng)?;
            stages.push(Stage { name: "InConv".into(), strategy, body: StageBody::Blocks(vec![block]) });
            for i in 1..=4 {
                let strategy = spec.strategy(names[i]).clone();
                let bs = double(plan[i - 1], plan[i], &strategy, None)?;
                let block = make_block(names[i], &bs, &mut store, &mut rng)?;
                stages.push(Stage { name: names[i].into(), strategy, body: StageBody::Down(block) });
            }
            let mut prev = plan[4];
            for i in 5..=8 {
                let name = names[i];
                let strategy = spec.strategy(name).clone();
                let skip = plan[8 - i];
                let half = (prev / 2).max(1);
                let groups = groups_of(&strategy);
                let up = TransposeConv::new(name, prev, half, groups, &mut store, &mut rng)?;
                let labels = match groups {
                    Some(g) => {
                        let mut l = even_labels(skip, g)?;
                        l.extend(even_labels(half, g)?);
                        Some(l)
                    }
                    None => None,
                };
                let bs = double(skip + half, plan[i], &strategy, labels.as_deref())?;
                let block = make_block(name, &bs, &mut store, &mut rng)?;
                stages.push(Stage { name: name.into(), strategy, body: StageBody::Up { up, block } });
                prev = plan[i];
            }
            let cs = ConvLayerSpec::new(prev, spec.num_classes, 1, 1, 0, ConvStrategy::Regular);
            let conv = ConvLayer::new("OutConv", cs, &mut store, &mut rng)?;
            let bias = store.add("OutConv.bias", ParamKind::Bias, Tensor::zeros(&[spec.num_classes]));
            Head::Segmenter { conv, bias }
        }
    };
    Ok(Network { spec: spec.clone(), store, stages, head })
}

/// One masked layer of a [`GroupReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub block: String,
    pub layer: String,
    pub index: usize,
    pub strategy: &'static str,
    pub groups: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub records: Vec<GroupRecord>,
    pub warning: Option<String>,
}

/// Group count and sparsity of every masked convolution, in forward order.
pub fn group_structure_report(net: &Network) -> Result<GroupReport> {
    let mut records = Vec::new();
    let mut index = 0;
    for stage in &net.stages {
        for layer in stage.conv_layers() {
            if let Some(m) = layer.mask(&net.store)? {
                records.push(GroupRecord {
                    block: stage.name.clone(),
                    layer: layer.name.clone(),
                    index,
                    strategy: layer.spec.strategy.name(),
                    groups: count_groups(&m),
                    sparsity: sparsity(&m),
                });
            }
            index += 1;
        }
    }
    let warning = records.is_empty().then(|| "network has no masked layers".to_string());
    Ok(GroupReport { records, warning })
}

impl Network {
    /// Runs a forward pass in a fresh graph and hands the logits to `f`.
    pub fn run<T>(&mut self, x: &Tensor, train: bool, f: impl FnOnce(&mut Ctx, Var) -> Result<T>) -> Result<T> {
        let Network { store, stages, head, .. } = self;
        let mut ctx = Ctx::new(store, train);
        let xv = ctx.graph.constant(x.clone());
        let logits = forward(stages, head, &mut ctx, xv)?;
        f(&mut ctx, logits)
    }

    /// Logits in evaluation mode.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false, |ctx, y| Ok(ctx.graph.value(y).clone()))
    }

    /// Every convolution with its stage name, in forward order.
    pub fn conv_layers(&self) -> Vec<(&str, &ConvLayer)> {
        let mut out: Vec<(&str, &ConvLayer)> = Vec::new();
        for s in &self.stages {
            out.extend(s.conv_layers().into_iter().map(|l| (s.name.as_str(), l)));
        }
        out
    }

    /// `(block, dense parameter count)` in block order.
    pub fn block_param_counts(&self) -> Vec<(String, usize)> {
        self.stages.iter().map(|s| (s.name.clone(), s.dense_params())).collect()
    }

    pub fn head_params(&self) -> usize {
        match &self.head {
            Head::Classifier(l) => l.params(),
            Head::Segmenter { conv, .. } => conv.dense_params() + self.spec.num_classes,
        }
    }

    pub fn param_count(&self, include_gates: bool) -> usize {
        self.store.count(include_gates)
    }

    /// Structural description; parameter values are not included.
    pub fn describe(&self) -> String {
        let mut lines =
            vec![format!("{} in={} classes={}", self.spec.family, self.spec.in_channels, self.spec.num_classes)];
        for s in &self.stages {
            lines.push(format!("[{}]", s.name));
            if let StageBody::Up { up, .. } = &s.body {
                lines.push(up.describe());
            }
            if let StageBody::Down(_) = &s.body {
                lines.push("maxpool2".into());
            }
            for l in s.conv_layers() {
                lines.push(format!("{} {:?}", l.spec, l.spec.strategy));
            }
        }
        match &self.head {
            Head::Classifier(l) => lines.push(format!("gap linear {}->{}", l.c_in, l.c_out)),
            Head::Segmenter { conv, .. } => lines.push(format!("out {}", conv.spec)),
        }
        lines.join("\n")
    }

    pub fn arch_hash(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameters in store order, then running means and variances of every
    /// batch norm in forward order.
    pub fn state_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.store.entries().iter().map(|e| e.value.clone()).collect();
        for s in &self.stages {
            let units: Vec<&ConvBn> = match &s.body {
                StageBody::Stem(u) => vec![u],
                StageBody::Blocks(bs) => bs.iter().flat_map(|b| b.units.iter().chain(b.projection.iter())).collect(),
                StageBody::Down(b) | StageBody::Up { block: b, .. } => {
                    b.units.iter().chain(b.projection.iter()).collect()
                }
            };
            for u in units {
                let c = u.bn.channels();
                out.push(Tensor::new(vec![c], u.bn.running_mean.clone()).unwrap());
                out.push(Tensor::new(vec![c], u.bn.running_var.clone()).unwrap());
            }
        }
        out
    }

    pub fn load_state(&mut self, tensors: &[Tensor]) -> Result<()> {
        let n = self.store.len();
        let expected = self.state_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, network needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        if let Some(i) = (0..tensors.len()).find(|&i| tensors[i].shape() != expected[i].shape()) {
            return Err(Error::Format(format!(
                "checkpoint tensor {i} has shape {:?}, expected {:?}",
                tensors[i].shape(),
                expected[i].shape()
            )));
        }
        for (e, t) in self.store.entries_mut().iter_mut().zip(tensors) {
            e.value = t.clone();
        }
        let mut rest = tensors[n..].iter();
        for s in &mut self.stages {
            for u in s.units_mut() {
                u.bn.running_mean = rest.next().unwrap().data().to_vec();
                u.bn.running_var = rest.next().unwrap().data().to_vec();
            }
        }
        Ok(())
    }
}

fn forward(stages: &mut [Stage], head: &Head, ctx: &mut Ctx, x: Var) -> Result<Var> {
    let mut h = x;
    let mut skips = Vec::new();
    for stage in stages.iter_mut() {
        h = match &mut stage.body {
            StageBody::Stem(u) => u.forward(ctx, h, true)?,
            StageBody::Blocks(bs) => {
                for b in bs.iter_mut() {
                    h = b.forward(ctx, h)?;
                }
                h
            }
            StageBody::Down(b) => {
                skips.push(h);
                let p = ctx.graph.max_pool2d(h)?;
                b.forward(ctx, p)?
            }
            StageBody::Up { up, block } => {
                let skip = skips.pop().ok_or_else(|| Error::InvalidArgument("missing skip connection".into()))?;
                let u = up.forward(ctx, h)?;
                let cat = ctx.graph.concat(skip, u)?;
                block.forward(ctx, cat)?
            }
        };
    }
    match head {
        Head::Classifier(l) => {
            let p = ctx.graph.global_avg_pool(h)?;
            l.forward(ctx, p)
        }
        Head::Segmenter { conv, bias } => {
            let y = conv.forward(ctx, h)?;
            let b = ctx.param(*bias);
            ctx.graph.bias_add(y, b)
        }
    }
}
