//! Experiment orchestration: single runs, block-wise ablation passes,
//! strategy comparisons and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::architectures::{build, ArchSpec, Family, GroupReport, Network, Task};
use crate::config::{parse_list, Config};
use crate::data::{generate, GenSpec, Samples, SyntheticDataset};
use crate::error::{Error, Result};
use crate::layers::BlockStrategy;
use crate::tensor::{load_all, save_all};
use crate::training::{evaluate, log_csv, mean_std, train, MetricsReport, TrainConfig};

/// Dataset, splits, training configuration and base architecture of a run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub dataset: SyntheticDataset,
    pub train: Samples,
    pub test: Samples,
    pub train_cfg: TrainConfig,
    pub arch: ArchSpec,
}

/// Loads `data.path` when set, otherwise generates from `data.*` keys.
pub fn load_dataset(cfg: &Config) -> Result<SyntheticDataset> {
    match cfg.get("data.path") {
        Some(p) => SyntheticDataset::load(Path::new(p)),
        None => generate(&GenSpec::from_config(cfg)?),
    }
}

impl Experiment {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let family = Family::parse(cfg.get("arch.family").unwrap_or("resnet18")).map_err(to_usage)?;
        let mut cfg = cfg.clone();
        if family.task() == Task::Segmentation && cfg.get("data.task").is_none() {
            cfg.set("data.task", "segmentation")?;
        }
        let dataset = load_dataset(&cfg)?;
        let arch = ArchSpec::from_config(&cfg, dataset.channels(), dataset.classes)?;
        let (train, test) = match family.task() {
            Task::PatchClassification => dataset.patch_split(cfg.parse_or("data.patch", 7)?)?,
            Task::Segmentation => {
                let tile = cfg.parse_or("data.tile", 64)?;
                dataset.tile_split(tile, cfg.parse_or("data.tile_stride", tile)?)?
            }
        };
        Ok(Self { dataset, train, test, train_cfg: TrainConfig::from_config(&cfg)?, arch })
    }

    pub fn new(
        dataset: SyntheticDataset,
        train: Samples,
        test: Samples,
        train_cfg: TrainConfig,
        arch: ArchSpec,
    ) -> Self {
        Self { dataset, train, test, train_cfg, arch }
    }

    /// SHA-256 over the split tensors and labels.
    pub fn split_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.train, &self.test] {
            for v in s.x.data() {
                h.update(v.to_le_bytes());
            }
            for l in &s.y {
                h.update(l.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seeds, dataset and split identity shared by every run.
    pub fn metadata(&self) -> String {
        let seeds: Vec<String> = self.train_cfg.seeds.iter().map(u64::to_string).collect();
        format!(
            "seeds={}\ndata_seed={}\nfusion={}\nmodalities={}\ntrain_samples={}\ntest_samples={}\nsplit_sha256={}\noptimizer={}\nlr={}\nepochs={}\nbatch_size={}\n",
            seeds.join(","),
            self.dataset.seed,
            self.dataset.fusion,
            self.dataset.modalities.iter().map(|m| m.to_text()).collect::<Vec<_>>().join(","),
            self.train.len(),
            self.test.len(),
            self.split_fingerprint(),
            self.train_cfg.optimizer.name(),
            self.train_cfg.schedule.initial,
            self.train_cfg.epochs,
            self.train_cfg.batch_size,
        )
    }
}

fn to_usage(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Usage(m),
        other => other,
    }
}

/// Outcome of one (configuration, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn oa(&self) -> f64 {
        self.metrics.as_ref().map_or(f64::NAN, |m| m.oa)
    }
}

fn write_masks(net: &Network, dir: &Path) -> Result<()> {
    let masks = dir.join("masks");
    fs::create_dir_all(&masks)?;
    for (i, (_, layer)) in net.conv_layers().into_iter().enumerate() {
        if let Some(m) = layer.mask(&net.store)? {
            fs::write(masks.join(format!("{i:02}_{}.txt", layer.name)), m.to_text())?;
        }
    }
    Ok(())
}

/// Trains a fresh network and evaluates it. Divergence and degenerate
/// masks are recorded in the result; other errors propagate.
pub fn run_cell(exp: &Experiment, spec: &ArchSpec, seed: u64, dir: Option<&Path>) -> Result<(CellResult, Network)> {
    let mut net = build(spec, seed)?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let outcome = train(&mut net, &exp.train, Some(&exp.test), &exp.train_cfg, seed).and_then(|log| {
        let m = evaluate(&mut net, &exp.test)?;
        Ok((log, m))
    });
    let result = match outcome {
        Ok((log, metrics)) => {
            if let Some(d) = dir {
                fs::write(d.join("log.csv"), log_csv(&log))?;
                save_all(&d.join("checkpoint.bin"), &net.state_tensors())?;
                write_masks(&net, d)?;
            }
            CellResult { seed, metrics: Some(metrics), error: None }
        }
        Err(e @ (Error::TrainingFailure { .. } | Error::DegenerateMask { .. })) => {
            if let Some(d) = dir {
                fs::write(d.join("error.txt"), format!("{e}\n"))?;
            }
            CellResult { seed, metrics: None, error: Some(e.to_string()) }
        }
        Err(e) => return Err(e),
    };
    Ok((result, net))
}

/// One configuration replicated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub description: String,
    pub arch_hash: String,
    pub block_params: Vec<(String, usize)>,
    pub cells: Vec<CellResult>,
}

impl SummaryRow {
    fn stat(&self, f: impl Fn(&MetricsReport) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.cells.iter().filter_map(|c| c.metrics.as_ref()).map(f).collect();
        mean_std(&v)
    }

    /// Mean and sample std of OA over converged seeds; NaN if none converged.
    pub fn oa(&self) -> (f64, f64) {
        self.stat(|m| m.oa)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.metrics.is_none()).count()
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let blocks: Vec<&str> =
        rows.first().map(|r| r.block_params.iter().map(|(b, _)| b.as_str()).collect()).unwrap_or_default();
    let mut s =
        String::from("name,description,oa_mean,oa_std,aa_mean,aa_std,kappa_mean,kappa_std,failures,seeds,oa_per_seed");
    for b in &blocks {
        let _ = write!(s, ",params_{b}");
    }
    s.push_str(",arch_hash\n");
    for r in rows {
        let (om, os) = r.oa();
        let (am, asd) = r.stat(|m| m.aa);
        let (km, ks) = r.stat(|m| m.kappa);
        let seeds: Vec<String> = r.cells.iter().map(|c| c.seed.to_string()).collect();
        let per: Vec<String> = r.cells.iter().map(|c| c.oa().to_string()).collect();
        let _ = write!(
            s,
            "{},{},{om},{os},{am},{asd},{km},{ks},{},{},{}",
            r.name,
            r.description,
            r.failures(),
            seeds.join(";"),
            per.join(";")
        );
        for (_, n) in &r.block_params {
            let _ = write!(s, ",{n}");
        }
        let _ = writeln!(s, ",{}", r.arch_hash);
    }
    s
}

/// Short human-readable table.
pub fn format_table(title: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!("{title}\n");
    let _ = writeln!(s, "{:<24} {:>9} {:>9} {:>8}  description", "config", "OA mean", "OA std", "failed");
    for r in rows {
        let (m, sd) = r.oa();
        let _ = writeln!(s, "{:<24} {:>9.4} {:>9.4} {:>8}  {}", r.name, m, sd, r.failures(), r.description);
    }
    s
}

/// Runs `spec` once per seed under `<out>/<name>/<seed>/`.
pub fn run_row(
    exp: &Experiment,
    name: &str,
    description: &str,
    spec: &ArchSpec,
    out: Option<&Path>,
) -> Result<SummaryRow> {
    let probe = build(spec, 0)?;
    let mut cells = Vec::new();
    for &seed in &exp.train_cfg.seeds {
        let dir: Option<PathBuf> = out.map(|o| o.join(name).join(seed.to_string()));
        cells.push(run_cell(exp, spec, seed, dir.as_deref())?.0);
    }
    Ok(SummaryRow {
        name: name.to_string(),
        description: description.to_string(),
        arch_hash: probe.arch_hash(),
        block_params: probe.block_param_counts(),
        cells,
    })
}

fn write_run(out: &Path, exp: &Experiment, rows: &[SummaryRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metadata.txt"), exp.metadata())?;
    fs::write(out.join("summary.csv"), summary_csv(rows))?;
    Ok(())
}

/// Replicated training of the configured architecture.
pub fn run_train(exp: &Experiment, out: Option<&Path>) -> Result<SummaryRow> {
    let name = common_strategy_name(&exp.arch);
    let row = run_row(exp, &name, &describe_strategies(&exp.arch), &exp.arch, out)?;
    if let Some(o) = out {
        write_run(o, exp, std::slice::from_ref(&row))?;
    }
    Ok(row)
}

fn common_strategy_name(spec: &ArchSpec) -> String {
    let s = spec.strategies();
    if s.iter().all(|(_, st)| *st == s[0].1) {
        s[0].1.name()
    } else {
        "hybrid".into()
    }
}

fn describe_strategies(spec: &ArchSpec) -> String {
    spec.strategies().iter().map(|(b, s)| format!("{b}={s}")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Backward => "backward",
        }
    }

    /// `forward`, `backward` or `both`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        match s {
            "forward" => Ok(vec![Self::Forward]),
            "backward" => Ok(vec![Self::Backward]),
            "both" => Ok(vec![Self::Forward, Self::Backward]),
            _ => Err(Error::Usage(format!("unknown ablation direction {s:?}"))),
        }
    }
}

/// Order in which SepDGConv blocks are switched back to regular convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationPlan {
    pub family: Family,
    pub direction: Direction,
}

impl AblationPlan {
    pub fn new(family: Family, direction: Direction) -> Self {
        Self { family, direction }
    }

    pub fn order(&self) -> Vec<&'static str> {
        let mut o = self.family.block_names().to_vec();
        if self.direction == Direction::Backward {
            o.reverse();
        }
        o
    }

    /// Blocks running regular convolution in each configuration: the first
    /// `k` blocks of the order for `k = 1..=n`.
    pub fn configurations(&self) -> Vec<Vec<&'static str>> {
        let o = self.order();
        (1..=o.len()).map(|k| o[..k].to_vec()).collect()
    }

    /// The starting point of every pass, with nothing replaced.
    pub fn start(&self, base: &ArchSpec) -> Result<ArchSpec> {
        hybrid(base, &[])
    }

    pub fn specs(&self, base: &ArchSpec) -> Result<Vec<(String, Vec<&'static str>, ArchSpec)>> {
        self.configurations()
            .into_iter()
            .enumerate()
            .map(|(i, blocks)| {
                let spec = hybrid(base, &blocks)?;
                Ok((format!("{}_{}", self.direction.name(), i + 1), blocks, spec))
            })
            .collect()
    }
}

/// SepDGConv everywhere except `regular` blocks.
pub fn hybrid(base: &ArchSpec, regular: &[&str]) -> Result<ArchSpec> {
    let mut spec =
        ArchSpec::new(base.family, base.width_scale, base.in_channels, base.num_classes, BlockStrategy::SepDgConv);
    spec.zero_init_residual = base.zero_init_residual;
    for b in regular {
        spec = spec.with_block(b, BlockStrategy::Regular)?;
    }
    Ok(spec)
}

fn regular_label(blocks: &[&str]) -> String {
    if blocks.is_empty() {
        "regular:none".into()
    } else {
        format!("regular:{}", blocks.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    /// The all-SepDGConv starting point shared by every pass.
    pub reference: SummaryRow,
    pub passes: Vec<(Direction, Vec<SummaryRow>)>,
}

impl AblationResult {
    pub fn rows(&self) -> Vec<SummaryRow> {
        let mut rows = vec![self.reference.clone()];
        rows.extend(self.passes.iter().flat_map(|(_, r)| r.iter().cloned()));
        rows
    }

    /// Configuration with the highest mean OA over all passes; ties keep
    /// the earliest.
    pub fn best(&self) -> &SummaryRow {
        let mut best = &self.reference;
        for r in self.passes.iter().flat_map(|(_, r)| r) {
            let (m, _) = r.oa();
            if m > best.oa().0 || best.oa().0.is_nan() && !m.is_nan() {
                best = r;
            }
        }
        best
    }
}

/// Retrains every configuration of each pass from scratch for every seed.
pub fn run_ablation(exp: &Experiment, directions: &[Direction], out: Option<&Path>) -> Result<AblationResult> {
    let base = &exp.arch;
    let start = hybrid(base, &[])?;
    let reference = run_row(exp, "sepdgconv", &regular_label(&[]), &start, out)?;
    let mut passes = Vec::new();
    for &d in directions {
        let plan = AblationPlan::new(base.family, d);
        let mut rows = Vec::new();
        for (name, blocks, spec) in plan.specs(base)? {
            rows.push(run_row(exp, &name, &regular_label(&blocks), &spec, out)?);
        }
        passes.push((d, rows));
    }
    let result = AblationResult { reference, passes };
    if let Some(o) = out {
        write_run(o, exp, &result.rows())?;
    }
    Ok(result)
}

/// Blocks reverted to regular convolution, parsed from a row description.
pub fn regular_blocks_of(row: &SummaryRow) -> Vec<String> {
    match row.description.strip_prefix("regular:") {
        Some("none") | None => Vec::new(),
        Some(list) => list.split('+').map(str::to_string).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonStrategy {
    Baseline,
    GConv,
    FgConv,
    SepDgConv,
    AblationBest,
    FalseGroup,
}

impl ComparisonStrategy {
    pub const ALL: [Self; 6] =
        [Self::Baseline, Self::GConv, Self::FgConv, Self::SepDgConv, Self::AblationBest, Self::FalseGroup];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown comparison strategy {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::GConv => "gconv",
            Self::FgConv => "fgconv",
            Self::SepDgConv => "sepdgconv",
            Self::AblationBest => "ablation_best",
            Self::FalseGroup => "false_group",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonPlan {
    pub strategies: Vec<ComparisonStrategy>,
    /// Width of each input source, in data channel order.
    pub partition: Vec<usize>,
    /// Same totals as `partition`, boundaries off the sources.
    pub false_partition: Vec<usize>,
    /// Blocks reverted to regular convolution for `ablation_best`.
    pub ablation_best: Option<Vec<String>>,
}

/// Shifts one channel across the first boundary: `[5, 3] -> [4, 4]`.
pub fn default_false_partition(partition: &[usize]) -> Result<Vec<usize>> {
    if partition.len() < 2 {
        return Err(Error::Usage("a false partition needs at least two groups".into()));
    }
    let mut p = partition.to_vec();
    if p[0] > 1 {
        p[0] -= 1;
        p[1] += 1;
    } else if p[1] > 1 {
        p[0] += 1;
        p[1] -= 1;
    } else {
        return Err(Error::Usage(format!("cannot shift a boundary of {partition:?}")));
    }
    Ok(p)
}

impl ComparisonPlan {
    /// Reads `compare.*` keys; the partition defaults to the modality widths.
    pub fn from_config(cfg: &Config, modality_widths: &[usize]) -> Result<Self> {
        let strategies = match cfg.get("compare.strategies") {
            Some(list) => list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(ComparisonStrategy::parse)
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        if strategies.is_empty() {
            return Err(Error::Usage("compare needs at least one strategy in compare.strategies".into()));
        }
        let partition = match cfg.get("compare.partition") {
            Some(p) => parse_list(p)?,
            None => modality_widths.to_vec(),
        };
        if let Some(g) = cfg.parse_opt::<usize>("compare.groups")? {
            if g != partition.len() {
                return Err(Error::Usage(format!(
                    "compare.groups={g} but the partition has {} groups",
                    partition.len()
                )));
            }
        }
        let false_partition = match cfg.get("compare.false_partition") {
            Some(p) => parse_list(p)?,
            None if strategies.contains(&ComparisonStrategy::FalseGroup) => default_false_partition(&partition)?,
            None => Vec::new(),
        };
        let ablation_best = cfg.get("compare.ablation_best").map(|s| match s {
            "none" | "" => Vec::new(),
            list => list.split('+').map(|b| b.trim().to_string()).collect(),
        });
        let plan = Self { strategies, partition, false_partition, ablation_best };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Usage("no comparison strategies".into()));
        }
        if self.partition.is_empty() || self.partition.contains(&0) {
            return Err(Error::Usage(format!("bad partition {:?}", self.partition)));
        }
        if self.strategies.contains(&ComparisonStrategy::FalseGroup) {
            let (a, b) = (&self.partition, &self.false_partition);
            if a.len() != b.len() || a.iter().sum::<usize>() != b.iter().sum::<usize>() || a == b {
                return Err(Error::Usage(format!("false partition {b:?} must differ from {a:?} with the same totals")));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.partition.len()
    }

    pub fn spec(&self, base: &ArchSpec, strategy: ComparisonStrategy) -> Result<ArchSpec> {
        let all = |s: BlockStrategy| {
            let mut spec = ArchSpec::new(base.family, base.width_scale, base.in_channels, base.num_classes, s);
            spec.zero_init_residual = base.zero_init_residual;
            spec
        };
        let g = self.groups();
        Ok(match strategy {
            ComparisonStrategy::Baseline => all(BlockStrategy::Regular),
            ComparisonStrategy::SepDgConv => all(BlockStrategy::SepDgConv),
            ComparisonStrategy::GConv => {
                all(BlockStrategy::Group { groups: g }).with_input_groups(self.partition.clone())
            }
            ComparisonStrategy::FgConv => {
                all(BlockStrategy::FgConv { groups: g }).with_input_groups(self.partition.clone())
            }
            ComparisonStrategy::FalseGroup => {
                all(BlockStrategy::Group { groups: g }).with_input_groups(self.false_partition.clone())
            }
            ComparisonStrategy::AblationBest => {
                let blocks = self.ablation_best.as_ref().ok_or_else(|| {
                    Error::Usage("ablation_best needs compare.ablation_best or an ablation run".into())
                })?;
                let refs: Vec<&str> = blocks.iter().map(String::as_str).collect();
                hybrid(base, &refs).map_err(to_usage)?
            }
        })
    }
}

/// Every strategy trained under the same configuration, seeds and split.
pub fn run_comparison(exp: &Experiment, plan: &ComparisonPlan, out: Option<&Path>) -> Result<Vec<SummaryRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for &s in &plan.strategies {
        let spec = plan.spec(&exp.arch, s)?;
        let desc = match s {
            ComparisonStrategy::GConv | ComparisonStrategy::FgConv => format!("partition={:?}", plan.partition),
            ComparisonStrategy::FalseGroup => format!("partition={:?}", plan.false_partition),
            ComparisonStrategy::AblationBest => {
                regular_label(&plan.ablation_best.iter().flatten().map(String::as_str).collect::<Vec<_>>())
            }
            _ => describe_strategies(&spec),
        };
        rows.push(run_row(exp, s.name(), &desc.replace(',', ";"), &spec, out)?);
    }
    if let Some(o) = out {
        write_run(o, exp, &rows)?;
    }
    Ok(rows)
}

pub fn group_report_csv(report: &GroupReport) -> String {
    let mut s = String::from("block,layer,index,strategy,groups,sparsity\n");
    for r in &report.records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.block, r.layer, r.index, r.strategy, r.groups, r.sparsity);
    }
    s
}

/// Builds the configured network and restores a checkpoint into it.
pub fn load_network(exp: &Experiment, checkpoint: &Path) -> Result<Network> {
    let mut net = build(&exp.arch, 0)?;
    net.load_state(&load_all(checkpoint)?)?;
    Ok(net)
}

pub fn metrics_csv(m: &MetricsReport) -> String {
    let mut s = String::from("oa,aa,kappa");
    for i in 0..m.f1.len() {
        let _ = write!(s, ",f1_{i}");
    }
    let _ = write!(s, "\n{},{},{}", m.oa, m.aa, m.kappa);
    for f in &m.f1 {
        let _ = write!(s, ",{f}");
    }
    s.push('\n');
    s
}
