//! Convolution layer variants, batch norm, and the DoubleConv / Bottleneck
//! blocks.

use std::fmt;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, Var, BN_MOMENTUM};
use crate::error::{invalid, Result};
use crate::relmatrix::{
    assemble_u, depthwise_u, fgconv_u, grouped_u, ChannelGroups, ChannelPartition, GateVector, RelationshipMatrix,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gate,
    Gamma,
    Beta,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat, ordered storage of every trainable tensor of a network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalars, optionally excluding gates.
    pub fn count(&self, include_gates: bool) -> usize {
        self.entries.iter().filter(|e| include_gates || e.kind != ParamKind::Gate).map(|e| e.value.len()).sum()
    }
}

/// One forward pass: a fresh graph plus the parameters it reads.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], train }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for a parameter, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(id, self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }
}

/// How a convolution connects its input channels to its output channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConvStrategy {
    Regular,
    /// Fixed grouping; channels with equal labels are connected.
    Group(ChannelGroups),
    /// Fixed identity-style mask (see [`depthwise_u`]).
    Depthwise,
    /// Mask assembled from learnable gates.
    DgConv,
    /// Learnable mask multiplied by a fixed grouping.
    FgConv(ChannelGroups),
}

impl ConvStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Regular => "regular",
            Self::Group(_) => "group",
            Self::Depthwise => "depthwise",
            Self::DgConv => "dgconv",
            Self::FgConv(_) => "fgconv",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Self::DgConv | Self::FgConv(_))
    }
}

impl From<&ChannelPartition> for ConvStrategy {
    fn from(p: &ChannelPartition) -> Self {
        Self::Group(ChannelGroups::from(p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub strategy: ConvStrategy,
}

impl ConvLayerSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, strategy: ConvStrategy) -> Self {
        Self { c_in, c_out, k, stride, padding, strategy }
    }

    /// Fixed part of the mask, if the strategy has one.
    pub fn fixed_mask(&self) -> Result<Option<RelationshipMatrix>> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 {
            return invalid(format!("invalid convolution {self:?}"));
        }
        let labelled = |g: &ChannelGroups| {
            if g.input.len() != self.c_in || g.output.len() != self.c_out {
                return invalid(format!(
                    "grouping covers {} -> {} channels, layer is {} -> {}",
                    g.input.len(),
                    g.output.len(),
                    self.c_in,
                    self.c_out
                ));
            }
            grouped_u(g.clone()).map(Some)
        };
        match &self.strategy {
            ConvStrategy::Regular | ConvStrategy::DgConv => Ok(None),
            ConvStrategy::Depthwise => depthwise_u(self.c_in, self.c_out).map(Some),
            ConvStrategy::Group(g) | ConvStrategy::FgConv(g) => labelled(g),
        }
    }

    pub fn dense_params(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

impl fmt::Display for ConvLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}->{} k{} s{} p{}",
            self.strategy.name(),
            self.c_in,
            self.c_out,
            self.k,
            self.stride,
            self.padding
        )
    }
}

pub const GATE_INIT_RANGE: (f64, f64) = (0.0, 0.1);

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvLayerSpec,
    weight: ParamId,
    gates: Option<ParamId>,
    fixed: Option<RelationshipMatrix>,
}

impl ConvLayer {
    pub fn new<R: Rng>(
        name: impl Into<String>,
        spec: ConvLayerSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        let fixed = spec.fixed_mask()?;
        let fan_in = (spec.c_in * spec.k * spec.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[spec.c_out, spec.c_in, spec.k, spec.k], |_| rng.gen_range(-bound..bound));
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let gates = if spec.strategy.is_learned() {
            let k = crate::relmatrix::shape_params(spec.c_in, spec.c_out)?.k;
            let g = Tensor::from_fn(&[k], |_| rng.gen_range(GATE_INIT_RANGE.0..GATE_INIT_RANGE.1));
            Some(store.add(format!("{name}.gates"), ParamKind::Gate, g))
        } else {
            None
        };
        Ok(Self { name, spec, weight, gates, fixed })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn gates(&self) -> Option<ParamId> {
        self.gates
    }

    pub fn is_learned(&self) -> bool {
        self.gates.is_some()
    }

    /// Whether the layer applies any mask at all.
    pub fn is_masked(&self) -> bool {
        self.gates.is_some() || self.fixed.is_some()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let (s, p) = (self.spec.stride, self.spec.padding);
        if let Some(gid) = self.gates {
            let gt = ctx.param(gid);
            let gb = ctx.graph.sign_ste(gt);
            let u = ctx.graph.gated_mask(gb, self.spec.c_in, self.spec.c_out, self.fixed.as_ref())?;
            let wm = ctx.graph.mask_weight(w, u)?;
            return ctx.graph.conv2d(x, wm, s, p);
        }
        match &self.fixed {
            Some(m) => ctx.graph.masked_conv2d(x, w, m, s, p),
            None => ctx.graph.conv2d(x, w, s, p),
        }
    }

    /// Current binary mask; `None` for a regular convolution.
    pub fn mask(&self, store: &ParamStore) -> Result<Option<RelationshipMatrix>> {
        match self.gates {
            Some(gid) => {
                let g = GateVector::new(store.get(gid).data().to_vec())?;
                let u = assemble_u(&g, self.spec.c_in, self.spec.c_out)?;
                match &self.fixed {
                    Some(base) => fgconv_u(base, &u).map(Some),
                    None => Ok(Some(u)),
                }
            }
            None => Ok(self.fixed.clone()),
        }
    }

    pub fn dense_params(&self) -> usize {
        self.spec.dense_params()
    }

    /// Weights that survive the current mask.
    pub fn effective_params(&self, store: &ParamStore) -> Result<usize> {
        let kk = self.spec.k * self.spec.k;
        Ok(match self.mask(store)? {
            Some(m) => m.count_ones() * kk,
            None => self.dense_params(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, zero_gamma: bool, store: &mut ParamStore) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::Gamma,
            Tensor::full(&[channels], if zero_gamma { 0.0 } else { 1.0 }),
        );
        let beta = store.add(format!("{name}.beta"), ParamKind::Beta, Tensor::zeros(&[channels]));
        Self { gamma, beta, running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if !ctx.train() {
            return ctx.graph.batch_norm_eval(x, g, b, &self.running_mean, &self.running_var);
        }
        let (y, stats) = ctx.graph.batch_norm_train(x, g, b)?;
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let w = Tensor::from_fn(&[c_out, c_in], |_| rng.gen_range(-bound..bound));
        let b = Tensor::from_fn(&[c_out], |_| rng.gen_range(-bound..bound));
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, b);
        Self { weight, bias, c_in, c_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, b)
    }

    pub fn params(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }
}

/// Group convolution by explicit splitting: group `i` convolves input
/// channels of block `i` with `kernels[i]`, and the group outputs are
/// concatenated along the channel axis.
pub fn group_conv_forward(
    graph: &mut Graph,
    input: Var,
    kernels: &[Var],
    partition: &ChannelPartition,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let c = graph.value(input).dims4()?[1];
    partition.check_channels(c, partition.c_out())?;
    if kernels.len() != partition.groups() {
        return invalid(format!("{} kernels for {} groups", kernels.len(), partition.groups()));
    }
    let mut start = 0;
    let mut out: Option<Var> = None;
    for (g, (&w_in, &w_out)) in partition.input_widths().iter().zip(partition.output_widths()).enumerate() {
        let ks = graph.value(kernels[g]).shape().to_vec();
        if ks.len() != 4 || ks[0] != w_out || ks[1] != w_in {
            return invalid(format!("kernel {g} has shape {ks:?}, group is {w_in} -> {w_out}"));
        }
        let xs = graph.slice_channels(input, start, w_in)?;
        let y = graph.conv2d(xs, kernels[g], stride, padding)?;
        out = Some(match out {
            Some(prev) => graph.concat(prev, y)?,
            None => y,
        });
        start += w_in;
    }
    out.ok_or_else(|| crate::error::Error::InvalidArgument("empty partition".into()))
}

/// Conv followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new<R: Rng>(
        name: &str,
        spec: ConvLayerSpec,
        zero_gamma: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let c_out = spec.c_out;
        let conv = ConvLayer::new(name, spec, store, rng)?;
        let bn = BatchNorm2d::new(&format!("{name}.bn"), c_out, zero_gamma, store);
        Ok(Self { conv, bn })
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if relu { ctx.graph.relu(y) } else { y })
    }

    pub fn dense_params(&self) -> usize {
        self.conv.dense_params() + 2 * self.bn.channels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    DoubleConv,
    Bottleneck,
}

/// Strategy assigned to a whole named block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BlockStrategy {
    Regular,
    /// Fixed group convolution with `groups` groups in every layer.
    Group {
        groups: usize,
    },
    /// Learned masks restricted to a fixed grouping.
    FgConv {
        groups: usize,
    },
    SepDgConv,
}

impl BlockStrategy {
    pub fn name(&self) -> String {
        match self {
            Self::Regular => "regular".into(),
            Self::Group { groups } => format!("gconv{groups}"),
            Self::FgConv { groups } => format!("fgconv{groups}"),
            Self::SepDgConv => "sepdgconv".into(),
        }
    }

    /// Parses `regular`, `sepdgconv` (alias `dgconv`), `gconvN`, `fgconvN`.
    pub fn parse(s: &str) -> Result<Self> {
        let groups = |rest: &str| -> Result<usize> {
            match rest.parse::<usize>() {
                Ok(g) if g >= 1 => Ok(g),
                _ => invalid(format!("bad group count in strategy {s:?}")),
            }
        };
        match s {
            "regular" | "baseline" => Ok(Self::Regular),
            "sepdgconv" | "dgconv" => Ok(Self::SepDgConv),
            _ if s.starts_with("gconv") => Ok(Self::Group { groups: groups(&s[5..])? }),
            _ if s.starts_with("fgconv") => Ok(Self::FgConv { groups: groups(&s[6..])? }),
            _ => invalid(format!("unknown strategy {s:?}")),
        }
    }
}

impl fmt::Display for BlockStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Label of channel `i` of `c` when split into `groups` contiguous,
/// near-equal blocks.
pub fn even_labels(c: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || groups > c {
        return invalid(format!("cannot split {c} channels into {groups} groups"));
    }
    Ok((0..c).map(|i| i * groups / c).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Width of the inner layers of a bottleneck; ignored for DoubleConv.
    pub mid: usize,
    pub stride: usize,
    pub residual: bool,
    pub strategies: Vec<ConvStrategy>,
    pub projection: ConvStrategy,
    pub zero_init_last_bn: bool,
}

impl BlockSpec {
    /// Per-layer strategies derived from a block strategy. `in_labels`
    /// gives the group of each incoming channel for grouped strategies and
    /// defaults to an even split.
    pub fn with_strategy(
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        residual: bool,
        strategy: &BlockStrategy,
        in_labels: Option<&[usize]>,
    ) -> Result<Self> {
        let mid = match kind {
            BlockKind::DoubleConv => c_out,
            BlockKind::Bottleneck => (c_out / 4).max(1),
        };
        let widths: Vec<(usize, usize)> = match kind {
            BlockKind::DoubleConv => vec![(c_in, c_out), (c_out, c_out)],
            BlockKind::Bottleneck => vec![(c_in, mid), (mid, mid), (mid, c_out)],
        };
        let grouped = |groups: usize, fg: bool| -> Result<(Vec<ConvStrategy>, ConvStrategy)> {
            let first_in = match in_labels {
                Some(l) => l.to_vec(),
                None => even_labels(c_in, groups)?,
            };
            let wrap = |g: ChannelGroups| if fg { ConvStrategy::FgConv(g) } else { ConvStrategy::Group(g) };
            let mut list = Vec::new();
            for (idx, &(a, b)) in widths.iter().enumerate() {
                let input = if idx == 0 { first_in.clone() } else { even_labels(a, groups)? };
                list.push(wrap(ChannelGroups { input, output: even_labels(b, groups)? }));
            }
            let proj = wrap(ChannelGroups { input: first_in, output: even_labels(c_out, groups)? });
            Ok((list, proj))
        };
        let (strategies, projection) = match strategy {
            BlockStrategy::Regular => (vec![ConvStrategy::Regular; widths.len()], ConvStrategy::Regular),
            BlockStrategy::SepDgConv => match kind {
                BlockKind::DoubleConv => (vec![ConvStrategy::DgConv; 2], ConvStrategy::DgConv),
                BlockKind::Bottleneck => {
                    (vec![ConvStrategy::Depthwise, ConvStrategy::DgConv, ConvStrategy::Depthwise], ConvStrategy::DgConv)
                }
            },
            BlockStrategy::Group { groups } => grouped(*groups, false)?,
            BlockStrategy::FgConv { groups } => grouped(*groups, true)?,
        };
        Ok(Self { kind, c_in, c_out, mid, stride, residual, strategies, projection, zero_init_last_bn: residual })
    }

    pub fn needs_projection(&self) -> bool {
        self.residual && (self.c_in != self.c_out || self.stride > 1)
    }

    /// Layer specs in forward order, projection last.
    pub fn layer_specs(&self) -> Result<Vec<ConvLayerSpec>> {
        let expected = match self.kind {
            BlockKind::DoubleConv => 2,
            BlockKind::Bottleneck => 3,
        };
        if self.strategies.len() != expected {
            return invalid(format!(
                "{:?} block needs {expected} strategies, got {}",
                self.kind,
                self.strategies.len()
            ));
        }
        let s = &self.strategies;
        let mut specs = match self.kind {
            BlockKind::DoubleConv => vec![
                ConvLayerSpec::new(self.c_in, self.c_out, 3, self.stride, 1, s[0].clone()),
                ConvLayerSpec::new(self.c_out, self.c_out, 3, 1, 1, s[1].clone()),
            ],
            BlockKind::Bottleneck => vec![
                ConvLayerSpec::new(self.c_in, self.mid, 1, 1, 0, s[0].clone()),
                ConvLayerSpec::new(self.mid, self.mid, 3, self.stride, 1, s[1].clone()),
                ConvLayerSpec::new(self.mid, self.c_out, 1, 1, 0, s[2].clone()),
            ],
        };
        if self.needs_projection() {
            specs.push(ConvLayerSpec::new(self.c_in, self.c_out, 1, self.stride, 0, self.projection.clone()));
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub residual: bool,
    pub units: Vec<ConvBn>,
    pub projection: Option<ConvBn>,
}

pub fn make_block<R: Rng>(name: &str, spec: &BlockSpec, store: &mut ParamStore, rng: &mut R) -> Result<Block> {
    let specs = spec.layer_specs()?;
    let main = match spec.kind {
        BlockKind::DoubleConv => 2,
        BlockKind::Bottleneck => 3,
    };
    let mut units = Vec::with_capacity(main);
    let mut projection = None;
    for (idx, ls) in specs.into_iter().enumerate() {
        if idx < main {
            let zero = spec.zero_init_last_bn && spec.residual && idx == main - 1;
            units.push(ConvBn::new(&format!("{name}.conv{}", idx + 1), ls, zero, store, rng)?);
        } else {
            projection = Some(ConvBn::new(&format!("{name}.proj"), ls, false, store, rng)?);
        }
    }
    Ok(Block { name: name.to_string(), kind: spec.kind, residual: spec.residual, units, projection })
}

impl Block {
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let last = self.units.len() - 1;
        let mut h = x;
        for (idx, u) in self.units.iter_mut().enumerate() {
            h = u.forward(ctx, h, idx < last || !self.residual)?;
        }
        if !self.residual {
            return Ok(h);
        }
        let shortcut = match &mut self.projection {
            Some(p) => p.forward(ctx, x, false)?,
            None => x,
        };
        let sum = ctx.graph.add(h, shortcut)?;
        Ok(ctx.graph.relu(sum))
    }

    /// Convolutions in forward order, projection last.
    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.units.iter().chain(self.projection.iter()).map(|u| &u.conv)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        self.units.iter_mut().chain(self.projection.iter_mut())
    }

    /// Strategy names of the main path.
    pub fn strategy_names(&self) -> Vec<&'static str> {
        self.units.iter().map(|u| u.conv.spec.strategy.name()).collect()
    }

    /// Dense conv weights plus batch-norm affine parameters.
    pub fn dense_params(&self) -> usize {
        self.units.iter().chain(self.projection.iter()).map(ConvBn::dense_params).sum()
    }
}
