//! Line-oriented `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! out_dir = out/detect
//! intervals = two_sd, one_sd, one_sided
//! ```
//!
//! Every experiment declares its keys up front. Unknown keys, repeated keys,
//! and reads of undeclared keys are configuration errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExperimentKind {
    Train,
    Heatmap,
    Optimize,
    Detect,
    Arcycle,
    Report,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Train,
        ExperimentKind::Heatmap,
        ExperimentKind::Optimize,
        ExperimentKind::Detect,
        ExperimentKind::Arcycle,
        ExperimentKind::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Heatmap => "heatmap",
            ExperimentKind::Optimize => "optimize",
            ExperimentKind::Detect => "detect",
            ExperimentKind::Arcycle => "arcycle",
            ExperimentKind::Report => "report",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

/// One declared key with its default (empty string means "unset").
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

const COMMON: &[KeySpec] = &[
    k("kind", "", "must match the subcommand when present"),
    k("seed", "0", "master seed for data, initialization, and batching"),
    k("out_dir", "", "artifact directory; defaults to out/<kind>"),
];

/// Shared by experiments that need a trained digit model.
const DIGIT_MODEL: &[KeySpec] = &[
    k("model", "", "pixel-model checkpoint; empty trains one in the run"),
    k("n_train", "4000", "training digits when training in the run"),
    k("train_steps", "1000", "steps when training in the run"),
    k("train_batch_size", "16", ""),
    k("train_learning_rate", "3e-3", ""),
];

const TRAIN: &[KeySpec] = &[
    k("model", "pixel", "pixel | made | classifier"),
    k("data", "digits", "digits | colored | shapes | manifold | idx"),
    k("idx_images", "", "IDX image file when data = idx"),
    k("idx_labels", "", "IDX label file (needed for classifiers on idx data)"),
    k("n_train", "4000", "generated examples"),
    k("downscale", "true", "render digits at 14×14 instead of 28×28"),
    k("steps", "1000", ""),
    k("batch_size", "16", ""),
    k("learning_rate", "3e-3", ""),
    k("checkpoint_every", "0", "intermediate checkpoints; 0 disables"),
    k("hidden", "", "pixel-model feature maps, MADE hidden width, or classifier feature width"),
    k("layers", "5", "pixel-model masked layers"),
    k("components", "5", "logistic mixture components"),
    k("resume", "", "checkpoint to continue from"),
];

const HEATMAP: &[KeySpec] = &[
    k("model", "", "MADE checkpoint; empty trains the toy model in the run"),
    k("n_points", "10000", ""),
    k("steps", "24000", ""),
    k("batch_size", "100", ""),
    k("learning_rate", "1e-3", ""),
    k("checkpoints", "3", "evenly spaced fields over training"),
    k("grid", "100", "cells per axis"),
    k("range", "3.0", "grid covers [-range, range]²"),
    k("threshold", "1e-3", "near-zero gradient norm"),
];

const OPTIMIZE: &[KeySpec] = &[
    k("probes", "digits, noise, black, gray, white", ""),
    k("n_per_probe", "4", ""),
    k("steps", "1000", ""),
    k("step_size", "1e-3", "gradient ascent step on log p"),
    k("log_every", "100", ""),
];

const DETECT: &[KeySpec] = &[
    k("intervals", "two_sd, one_sd, one_sided", ""),
    k("ccg", "true", "add the class-conditional Gaussian detector"),
    k("classifier_steps", "400", ""),
    k("ccg_lambda", "0.05", "covariance shrinkage"),
    k("ccg_percentile", "5", "threshold percentile of held-out scores"),
    k("n_probe", "200", "images per probe set"),
    k("n_fit", "1000", "training digits used to fit the interval detectors"),
];

const ARCYCLE: &[KeySpec] = &[
    k("px", "", "colored-digit pixel-model checkpoint; empty trains one"),
    k("py", "", "grayscale-digit pixel-model checkpoint; empty trains one"),
    k("n_train", "3000", "examples per domain"),
    k("n_test", "300", "held-out examples per domain"),
    k("density_steps", "1000", ""),
    k("density_batch_size", "16", ""),
    k("density_learning_rate", "3e-3", ""),
    k("ablation", "full", "full | nll_only | cyc_only | blur"),
    k("beta", "auto", "cycle weight or auto"),
    k("blur_sigma", "1.0", ""),
    k("steps", "8000", ""),
    k("snapshot_every", "2000", ""),
    k("snapshot_count", "4", ""),
    k("pretrain_steps", "0", "paired supervised steps first"),
    k("batch_size", "8", ""),
    k("learning_rate", "3e-3", ""),
    k("hidden", "32", "generator feature maps"),
];

const REPORT: &[KeySpec] = &[k("input_dir", "", "directory of CSVs written by earlier runs")];

/// Every key `kind` accepts, common keys first.
pub fn schema(kind: ExperimentKind) -> Vec<KeySpec> {
    let own: &[&[KeySpec]] = match kind {
        ExperimentKind::Train => &[TRAIN],
        ExperimentKind::Heatmap => &[HEATMAP],
        ExperimentKind::Optimize => &[DIGIT_MODEL, OPTIMIZE],
        ExperimentKind::Detect => &[DIGIT_MODEL, DETECT],
        ExperimentKind::Arcycle => &[ARCYCLE],
        ExperimentKind::Report => &[REPORT],
    };
    COMMON.iter().chain(own.iter().flat_map(|s| s.iter())).copied().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// All declared keys at their defaults.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let values = schema(kind)
            .into_iter()
            .map(|s| (s.key.to_string(), s.default.to_string()))
            .collect();
        let mut cfg = RunConfig { kind, values };
        cfg.values.insert("kind".into(), kind.name().into());
        cfg
    }

    pub fn parse(text: &str, kind: ExperimentKind) -> Result<Self> {
        let mut cfg = RunConfig::defaults(kind);
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key:?} repeated", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, kind: ExperimentKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, kind)
    }

    /// Overrides one declared key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?} for {}", self.kind)));
        }
        if key == "kind" && value != self.kind.name() {
            return Err(Error::Config(format!("config is for {value:?} but the experiment is {}", self.kind)));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("{} does not declare key {key:?}", self.kind)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
    }

    /// `None` for an empty value.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.get_str(key)?.is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list with surrounding spaces removed.
    pub fn get_list(&self, key: &str) -> Result<Vec<String>> {
        Ok(self
            .get_str(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(self
            .get_opt::<PathBuf>("out_dir")?
            .unwrap_or_else(|| Path::new("out").join(self.kind.name())))
    }

    /// Canonical text form, in declaration order; parses back to `self`.
    pub fn render(&self) -> String {
        schema(self.kind)
            .iter()
            .map(|s| format!("{} = {}\n", s.key, self.values[s.key]))
            .collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
