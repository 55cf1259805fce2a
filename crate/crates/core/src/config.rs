//! Plain-text experiment configuration: `key=value` lines, `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every accepted key; `strategy.<Block>` keys are checked separately.
pub const KNOWN_KEYS: &[&str] = &[
    "arch.family",
    "arch.width_scale",
    "arch.strategy",
    "arch.zero_init_residual",
    "train.optimizer",
    "train.lr",
    "train.schedule",
    "train.epochs",
    "train.batch_size",
    "train.seeds",
    "train.weight_decay",
    "train.gate_lr",
    "train.gate_weight_decay",
    "data.path",
    "data.modalities",
    "data.classes",
    "data.size",
    "data.seed",
    "data.fusion",
    "data.task",
    "data.patch",
    "data.cell",
    "data.tile",
    "data.tile_stride",
    "data.train_fraction",
    "compare.strategies",
    "compare.groups",
    "compare.partition",
    "compare.false_partition",
    "compare.ablation_best",
    "ablate.direction",
    "run.dir",
];

pub const STRATEGY_PREFIX: &str = "strategy.";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn check_key(key: &str) -> Result<()> {
    if KNOWN_KEYS.contains(&key) || (key.starts_with(STRATEGY_PREFIX) && key.len() > STRATEGY_PREFIX.len()) {
        Ok(())
    } else {
        Err(Error::Usage(format!("unknown config key {key:?}")))
    }
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Usage(format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|v| v.parse().map_err(|_| Error::Usage(format!("bad value {v:?} for {key}")))).transpose()
    }

    /// `(block, strategy)` pairs from `strategy.<Block>` keys.
    pub fn strategy_overrides(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().filter_map(|(k, v)| k.strip_prefix(STRATEGY_PREFIX).map(|b| (b, v.as_str())))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Parses `a,b,c` into a list, with `lo-hi` ranges for integers.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Usage(format!("bad list item {p:?}"))))
        .collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (
                    a.trim().parse().map_err(|_| Error::Usage(format!("bad seed range {part:?}")))?,
                    b.trim().parse().map_err(|_| Error::Usage(format!("bad seed range {part:?}")))?,
                );
                if a > b {
                    return Err(Error::Usage(format!("empty seed range {part:?}")));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| Error::Usage(format!("bad seed {part:?}")))?),
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no seeds given".into()));
    }
    Ok(out)
}

/// Parses `p/q` or a decimal into a value in `(0, 1]`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.trim().parse().map_err(|_| Error::Usage(format!("bad fraction {s:?}")))?;
            let q: f64 = q.trim().parse().map_err(|_| Error::Usage(format!("bad fraction {s:?}")))?;
            p / q
        }
        None => s.trim().parse().map_err(|_| Error::Usage(format!("bad fraction {s:?}")))?,
    };
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Usage(format!("fraction {s:?} outside (0, 1]")));
    }
    Ok(v)
}
