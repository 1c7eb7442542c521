//! Flat `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment. Unknown and repeated keys
//! are errors. [`ExperimentConfig::to_text`] renders every key with its
//! current value, so `ExperimentConfig::default().to_text()` is the full
//! list of defaults.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{DeskConfig, BLOCK_GRID, KR_GRID};
use crate::merging::{MergeMethod, MergeSpec};
use crate::model::AdaptTarget;
use crate::saliency::Criterion;
use crate::trainer::{OptimizerKind, TrainConfig};

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn wrap(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("{key}: {other}")),
    }
}

/// Applies one training key (without prefix). Returns `false` for keys
/// that are not training keys.
fn set_train(
    cfg: &mut TrainConfig,
    key: &str,
    full_key: &str,
    v: &str,
    allow_seed: bool,
) -> Result<bool> {
    match key {
        "kr" => cfg.kr = num(full_key, v)?,
        "epochs" => cfg.epochs = num(full_key, v)?,
        "refresh_interval" => cfg.mask_refresh_interval = num(full_key, v)?,
        "max_refreshes" => {
            let n: usize = num(full_key, v)?;
            cfg.max_mask_refreshes = (n > 0).then_some(n);
        }
        "criterion" => cfg.criterion = Criterion::parse(v).map_err(|e| wrap(full_key, e))?,
        "block_size" => {
            let b: usize = num(full_key, v)?;
            cfg.block_size = (b > 0).then_some(b);
        }
        "lr" => cfg.learning_rate = num(full_key, v)?,
        "optimizer" => cfg.optimizer = OptimizerKind::parse(v).map_err(|e| wrap(full_key, e))?,
        "layer_drop" => cfg.layer_drop = boolean(full_key, v)?,
        "batch_size" => cfg.batch_size = num(full_key, v)?,
        "early_stopping" => cfg.early_stopping = boolean(full_key, v)?,
        "gd_regrow" => cfg.gd_regrow_fraction = num(full_key, v)?,
        "seed" if allow_seed => cfg.seed = num(full_key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(cfg: &TrainConfig, with_seed: bool) -> Vec<(&'static str, String)> {
    let mut out = vec![
        ("kr", cfg.kr.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("refresh_interval", cfg.mask_refresh_interval.to_string()),
        (
            "max_refreshes",
            cfg.max_mask_refreshes.unwrap_or(0).to_string(),
        ),
        ("criterion", cfg.criterion.name().to_string()),
        ("block_size", cfg.block_size.unwrap_or(0).to_string()),
        ("lr", cfg.learning_rate.to_string()),
        ("optimizer", cfg.optimizer.name().to_string()),
        ("layer_drop", cfg.layer_drop.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("early_stopping", cfg.early_stopping.to_string()),
        ("gd_regrow", cfg.gd_regrow_fraction.to_string()),
    ];
    if with_seed {
        out.push(("seed", cfg.seed.to_string()));
    }
    out
}

/// Splits config text into `(line number, key, value)` triples, rejecting
/// malformed and repeated keys.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("line {}: key {k} set twice", i + 1)));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

/// Canonical text of a training configuration, seed included.
pub fn train_config_text(cfg: &TrainConfig) -> String {
    train_entries(cfg, true)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Inverse of [`train_config_text`]; absent keys keep their defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (line, k, v) in entries(text)? {
        if !set_train(&mut cfg, &k, &k, &v, true)? {
            return Err(Error::Config(format!("line {line}: unknown key {k}")));
        }
    }
    Ok(cfg)
}

/// Everything a CLI command needs besides its flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub desk: DeskConfig,
    pub merge: MergeSpec,
    pub out_dir: PathBuf,
    pub kr_grid: Vec<f64>,
    pub block_grid: Vec<usize>,
    pub recycle_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            merge: MergeSpec::new(MergeMethod::SparseOverlap),
            out_dir: PathBuf::from("out"),
            kr_grid: KR_GRID.to_vec(),
            block_grid: BLOCK_GRID.to_vec(),
            recycle_epochs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut merge_lambda = None;
        for (line, k, v) in entries(text)? {
            if k == "merge.lambda" {
                merge_lambda = Some(num::<f64>(&k, &v)?);
                continue;
            }
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("line {line}: unknown key {k}")));
            }
        }
        if let Some(l) = merge_lambda {
            cfg.merge.lambda = l;
        }
        cfg.desk.sync_model();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.desk;
        d.model.validate().map_err(|e| wrap("model", e))?;
        d.train.validate().map_err(|e| wrap("train", e))?;
        d.multitask.validate().map_err(|e| wrap("multitask", e))?;
        self.merge.validate().map_err(|e| wrap("merge", e))?;
        if d.lora_rank == 0 {
            return Err(Error::Config("lora.rank must be positive".into()));
        }
        if d.scaling_trials == 0 {
            return Err(Error::Config("experiment.trials must be positive".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let d = &mut self.desk;
        if let Some(rest) = key.strip_prefix("train.") {
            return set_train(&mut d.train, rest, key, v, false);
        }
        if let Some(rest) = key.strip_prefix("multitask.") {
            return set_train(&mut d.multitask, rest, key, v, false);
        }
        match key {
            "seed" => d.seed = num(key, v)?,
            "workers" => d.workers = num(key, v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "suite.held_in" => d.suite.n_held_in = num(key, v)?,
            "suite.held_out" => d.suite.n_held_out = num(key, v)?,
            "suite.classes" => d.suite.num_classes = num(key, v)?,
            "suite.content_vocab" => d.suite.content_vocab = num(key, v)?,
            "suite.seq_len" => d.suite.seq_len = num(key, v)?,
            "suite.train_size" => d.suite.train_size = num(key, v)?,
            "suite.val_size" => d.suite.val_size = num(key, v)?,
            "suite.test_size" => d.suite.test_size = num(key, v)?,
            "suite.teacher_hidden" => d.suite.teacher_hidden = num(key, v)?,
            "suite.input_skew" => d.suite.input_skew = num(key, v)?,
            "suite.seed" => d.suite.seed = num(key, v)?,
            "model.layers" => d.model.num_layers = num(key, v)?,
            "model.hidden" => d.model.hidden_dim = num(key, v)?,
            "model.heads" => d.model.num_heads = num(key, v)?,
            "model.mlp_ratio" => d.model.mlp_ratio = num(key, v)?,
            "model.adapt" => {
                d.model.adapt_targets = AdaptTarget::parse_list(v).map_err(|e| wrap(key, e))?
            }
            "lora.rank" => d.lora_rank = num(key, v)?,
            "lora.alpha" => d.lora_alpha = num(key, v)?,
            "merge.method" => {
                let lambda_default = self.merge.lambda == self.merge.method.default_lambda();
                let method = MergeMethod::parse(v).map_err(|e| wrap(key, e))?;
                self.merge.method = method;
                if lambda_default {
                    self.merge.lambda = method.default_lambda();
                }
            }
            "merge.ties_trim" => self.merge.ties_trim_fraction = num(key, v)?,
            "merge.breadcrumbs_top" => self.merge.breadcrumbs_top = num(key, v)?,
            "merge.breadcrumbs_bottom" => self.merge.breadcrumbs_bottom = num(key, v)?,
            "experiment.kr_compare" => d.kr_compare = list(key, v)?,
            "experiment.n_grid" => d.n_grid = list(key, v)?,
            "experiment.trials" => d.scaling_trials = num(key, v)?,
            "experiment.gate_accuracy" => d.gate_accuracy = num(key, v)?,
            "sweep.kr_grid" => self.kr_grid = list(key, v)?,
            "sweep.block_grid" => self.block_grid = list(key, v)?,
            "sweep.recycle_epochs" => self.recycle_epochs = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.desk;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), d.seed.to_string()),
            ("workers".into(), d.workers.to_string()),
            ("output.dir".into(), self.out_dir.display().to_string()),
            ("suite.held_in".into(), d.suite.n_held_in.to_string()),
            ("suite.held_out".into(), d.suite.n_held_out.to_string()),
            ("suite.classes".into(), d.suite.num_classes.to_string()),
            (
                "suite.content_vocab".into(),
                d.suite.content_vocab.to_string(),
            ),
            ("suite.seq_len".into(), d.suite.seq_len.to_string()),
            ("suite.train_size".into(), d.suite.train_size.to_string()),
            ("suite.val_size".into(), d.suite.val_size.to_string()),
            ("suite.test_size".into(), d.suite.test_size.to_string()),
            (
                "suite.teacher_hidden".into(),
                d.suite.teacher_hidden.to_string(),
            ),
            ("suite.input_skew".into(), d.suite.input_skew.to_string()),
            ("suite.seed".into(), d.suite.seed.to_string()),
            ("model.layers".into(), d.model.num_layers.to_string()),
            ("model.hidden".into(), d.model.hidden_dim.to_string()),
            ("model.heads".into(), d.model.num_heads.to_string()),
            ("model.mlp_ratio".into(), d.model.mlp_ratio.to_string()),
            (
                "model.adapt".into(),
                AdaptTarget::list_name(&d.model.adapt_targets),
            ),
        ];
        for (prefix, t) in [("train", &d.train), ("multitask", &d.multitask)] {
            for (k, v) in train_entries(t, false) {
                out.push((format!("{prefix}.{k}"), v));
            }
        }
        out.extend([
            ("lora.rank".into(), d.lora_rank.to_string()),
            ("lora.alpha".into(), d.lora_alpha.to_string()),
            ("merge.method".into(), self.merge.method.name().to_string()),
            ("merge.lambda".into(), self.merge.lambda.to_string()),
            (
                "merge.ties_trim".into(),
                self.merge.ties_trim_fraction.to_string(),
            ),
            (
                "merge.breadcrumbs_top".into(),
                self.merge.breadcrumbs_top.to_string(),
            ),
            (
                "merge.breadcrumbs_bottom".into(),
                self.merge.breadcrumbs_bottom.to_string(),
            ),
            ("experiment.kr_compare".into(), join(&d.kr_compare)),
            ("experiment.n_grid".into(), join(&d.n_grid)),
            ("experiment.trials".into(), d.scaling_trials.to_string()),
            (
                "experiment.gate_accuracy".into(),
                d.gate_accuracy.to_string(),
            ),
            ("sweep.kr_grid".into(), join(&self.kr_grid)),
            ("sweep.block_grid".into(), join(&self.block_grid)),
            (
                "sweep.recycle_epochs".into(),
                self.recycle_epochs.to_string(),
            ),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
