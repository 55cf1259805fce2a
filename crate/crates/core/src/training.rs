//! Preprocessing, optimizers, the training loop, metrics and replicas.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architectures::Network;
use crate::autodiff::argmax_classes;
use crate::config::{parse_seeds, Config};
use crate::data::Samples;
use crate::error::{invalid, Error, Result};
use crate::layers::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Min-max rescaling of every channel of a `C x H x W` image to `[0, 1]`;
/// constant channels become zero.
pub fn normalize_channels(image: &Tensor) -> Tensor {
    let c = image.shape().first().copied().unwrap_or(0);
    let per = image.len().checked_div(c).unwrap_or(0);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(per.max(1)) {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in plane.iter_mut() {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    out
}

/// `w_c = 1 - n_c / N`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return invalid("class weights need at least one sample");
    }
    Ok(counts.iter().map(|&n| 1.0 - n as f64 / total as f64).collect())
}

/// Per-class counts of non-ignored labels.
pub fn class_counts(labels: &[i64], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        if l >= 0 && (l as usize) < classes {
            counts[l as usize] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        Self::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::sgd()),
            "adam" => Ok(Self::adam()),
            _ => Err(Error::Usage(format!("unknown optimizer {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

/// Initial rate, replaced by `rate` from each listed epoch onward.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, steps: Vec::new() }
    }

    pub fn new(initial: f64, steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return invalid("schedule epochs must be strictly increasing");
        }
        Ok(Self { initial, steps })
    }

    /// Parses `epoch:rate,epoch:rate`.
    pub fn parse(initial: f64, s: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (e, r) = part.split_once(':').ok_or_else(|| Error::Usage(format!("bad schedule step {part:?}")))?;
            let e = e.trim().parse().map_err(|_| Error::Usage(format!("bad schedule epoch {e:?}")))?;
            let r = r.trim().parse().map_err(|_| Error::Usage(format!("bad schedule rate {r:?}")))?;
            steps.push((e, r));
        }
        Self::new(initial, steps).map_err(|e| Error::Usage(e.to_string()))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps.iter().take_while(|(e, _)| *e <= epoch).last().map_or(self.initial, |&(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub weight_decay: f64,
    /// Learning rate for gates; `None` uses the scheduled rate.
    pub gate_lr: Option<f64>,
    pub gate_weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            schedule: LrSchedule::constant(1e-3),
            epochs: 100,
            batch_size: 16,
            seeds: (42..=46).collect(),
            weight_decay: 0.0,
            gate_lr: None,
            gate_weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let initial = cfg.parse_or("train.lr", d.schedule.initial)?;
        let schedule = match cfg.get("train.schedule") {
            Some(s) => LrSchedule::parse(initial, s)?,
            None => LrSchedule::constant(initial),
        };
        let out = Self {
            optimizer: match cfg.get("train.optimizer") {
                Some(s) => OptimizerKind::parse(s)?,
                None => d.optimizer,
            },
            schedule,
            epochs: cfg.parse_or("train.epochs", d.epochs)?,
            batch_size: cfg.parse_or("train.batch_size", d.batch_size)?,
            seeds: match cfg.get("train.seeds") {
                Some(s) => parse_seeds(s)?,
                None => d.seeds,
            },
            weight_decay: cfg.parse_or("train.weight_decay", 0.0)?,
            gate_lr: cfg.parse_opt("train.gate_lr")?,
            gate_weight_decay: cfg.parse_or("train.gate_weight_decay", 0.0)?,
        };
        if out.batch_size == 0 {
            return Err(Error::Usage("train.batch_size must be positive".into()));
        }
        Ok(out)
    }
}

/// Optimizer state for every parameter of one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self { kind, first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// One update. Gates use `gate_lr` and `gate_decay`, everything else
    /// `lr` and `decay`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(usize, &Tensor)],
        lr: f64,
        decay: f64,
        gate_lr: f64,
        gate_decay: f64,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        for &(idx, g) in grads {
            let entry = &mut store.entries_mut()[idx];
            let (rate, wd) = if entry.kind == ParamKind::Gate { (gate_lr, gate_decay) } else { (lr, decay) };
            let p = entry.value.data_mut();
            let m = &mut self.first[idx];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..p.len() {
                        let gi = g.data()[i] + wd * p[i];
                        m[i] = momentum * m[i] + gi;
                        p[i] -= rate * m[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[idx];
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for i in 0..p.len() {
                        let gi = g.data()[i] + wd * p[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        p[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_oa: f64,
    pub test_oa: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,loss,train_OA,test_OA";

impl EpochLog {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.lr, self.loss, self.train_oa, self.test_oa)
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.to_csv());
        s.push('\n');
    }
    s
}

fn check_samples(net: &Network, s: &Samples) -> Result<()> {
    let per = s.labels_per_sample();
    let shape = s.x.shape();
    if shape.len() != 4 || shape[1] != net.spec.in_channels || s.y.len() != s.len() * per {
        return invalid(format!("samples of shape {shape:?} do not fit a {}-channel network", net.spec.in_channels));
    }
    if s.y.iter().any(|&l| l >= net.spec.num_classes as i64) {
        return invalid("label beyond the network's class count");
    }
    Ok(())
}

/// Trains in place; the log has one row per epoch. `test`, when given, is
/// evaluated after every epoch.
pub fn train(
    net: &mut Network,
    data: &Samples,
    test: Option<&Samples>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    check_samples(net, data)?;
    if let Some(t) = test {
        check_samples(net, t)?;
    }
    if cfg.epochs > 0 && data.is_empty() {
        return invalid("empty training set");
    }
    let classes = net.spec.num_classes;
    let weights = class_weights(&class_counts(&data.y, classes))?;
    let mut opt = Optimizer::new(cfg.optimizer, &net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let gate_lr = cfg.gate_lr.map_or(lr, |g| g * lr / cfg.schedule.initial);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        let (mut loss_sum, mut seen, mut correct, mut counted) = (0.0, 0usize, 0usize, 0usize);
        for idx in batches {
            let batch = data.subset(idx)?;
            let (loss, preds, grads) = net.run(&batch.x, true, |ctx, logits| {
                let l = ctx.graph.weighted_cross_entropy(logits, &batch.y, &weights, None)?;
                let loss = ctx.graph.value(l).item();
                if !loss.is_finite() {
                    return Err(Error::TrainingFailure { epoch, reason: format!("loss is {loss}") });
                }
                let preds = argmax_classes(ctx.graph.value(logits));
                let g = ctx.graph.backward(l)?;
                let owned: Vec<(usize, Tensor)> = g.params().map(|(id, t)| (id.0, t.clone())).collect();
                Ok((loss, preds, owned))
            })?;
            let refs: Vec<(usize, &Tensor)> = grads.iter().map(|(i, t)| (*i, t)).collect();
            opt.step(&mut net.store, &refs, lr, cfg.weight_decay, gate_lr, cfg.gate_weight_decay);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            for (p, &y) in preds.iter().zip(&batch.y) {
                if y >= 0 {
                    counted += 1;
                    correct += usize::from(*p as i64 == y);
                }
            }
        }
        let test_oa = match test {
            Some(t) if !t.is_empty() => evaluate(net, t).map(|m| m.oa).unwrap_or(f64::NAN),
            _ => f64::NAN,
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_oa: if counted == 0 { f64::NAN } else { correct as f64 / counted as f64 },
            test_oa,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub f1: Vec<f64>,
}

/// OA, AA (mean recall over classes present in the reference), Cohen's
/// kappa and per-class F1 (0 where precision and recall are both 0).
pub fn metrics_from_confusion(confusion: Vec<Vec<usize>>) -> Result<MetricsReport> {
    let c = confusion.len();
    if confusion.iter().any(|r| r.len() != c) {
        return invalid("confusion matrix must be square");
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return invalid("no labelled samples to evaluate");
    }
    let n = total as f64;
    let diag: usize = (0..c).map(|i| confusion[i][i]).sum();
    let row: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<usize> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let oa = diag as f64 / n;
    let present: Vec<usize> = (0..c).filter(|&i| row[i] > 0).collect();
    let aa = present.iter().map(|&i| confusion[i][i] as f64 / row[i] as f64).sum::<f64>() / present.len() as f64;
    let pe = (0..c).map(|i| row[i] as f64 * col[i] as f64).sum::<f64>() / (n * n);
    let kappa = if pe < 1.0 { (oa - pe) / (1.0 - pe) } else { 1.0 };
    let f1 = (0..c)
        .map(|i| {
            let tp = confusion[i][i] as f64;
            let denom = (row[i] + col[i]) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect();
    Ok(MetricsReport { confusion, oa, aa, kappa, f1 })
}

pub fn confusion_matrix(truth: &[i64], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= 0 {
            m[t as usize][p] += 1;
        }
    }
    m
}

pub const EVAL_BATCH: usize = 64;

/// Eval-mode predictions for every label position.
pub fn predict_all(net: &mut Network, s: &Samples) -> Result<Vec<usize>> {
    check_samples(net, s)?;
    let mut preds = Vec::with_capacity(s.y.len());
    let idx: Vec<usize> = (0..s.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let b = s.subset(chunk)?;
        preds.extend(argmax_classes(&net.predict(&b.x)?));
    }
    Ok(preds)
}

pub fn evaluate(net: &mut Network, s: &Samples) -> Result<MetricsReport> {
    if s.is_empty() {
        return invalid("empty test set");
    }
    let preds = predict_all(net, s)?;
    metrics_from_confusion(confusion_matrix(&s.y, &preds, net.spec.num_classes))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
    pub oa: (f64, f64),
    pub aa: (f64, f64),
    pub kappa: (f64, f64),
    pub f1: Vec<(f64, f64)>,
}

impl ReplicaSummary {
    pub fn from_reports(seeds: Vec<u64>, reports: Vec<MetricsReport>) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != reports.len() {
            return invalid("one report per seed is required");
        }
        let col = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        let classes = reports[0].f1.len();
        let f1 = (0..classes).map(|c| col(&|r| r.f1[c])).collect();
        Ok(Self { oa: col(&|r| r.oa), aa: col(&|r| r.aa), kappa: col(&|r| r.kappa), f1, seeds, reports })
    }
}

/// Runs `run` once per seed and aggregates the metrics.
pub fn replicas(seeds: &[u64], mut run: impl FnMut(u64) -> Result<MetricsReport>) -> Result<ReplicaSummary> {
    if seeds.is_empty() {
        return invalid("replicas need at least one seed");
    }
    let reports = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    ReplicaSummary::from_reports(seeds.to_vec(), reports)
}
