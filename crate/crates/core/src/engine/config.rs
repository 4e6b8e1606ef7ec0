//! Run configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. `profile` selects the model preset; the backbone keys then
//! override it for both branches (`context_input_size` for the context
//! branch only). Relative paths are taken from the file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::annotation::AggregationPolicy;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Mode};
use crate::objectives::{ContLoss, LossConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer { learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub loss: LossConfig,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    /// Directory receiving `log.csv`, `last.ckpt` and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub aggregation: AggregationPolicy,
    pub model: ModelConfig,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::BodyImage,
            loss: LossConfig::default(),
            optimizer: Optimizer::default(),
            batch_size: 52,
            epochs: 30,
            seed: 0,
            corpus: None,
            checkpoint_dir: None,
            aggregation: AggregationPolicy::Union,
            model: ModelConfig::default(),
            workers: 1,
        }
    }
}

pub const KEYS: [&str; 24] = [
    "mode",
    "lambda_disc",
    "lambda_cont",
    "cont_loss",
    "c",
    "theta",
    "smooth_l1_threshold",
    "learning_rate",
    "momentum",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "corpus",
    "checkpoint_dir",
    "aggregation",
    "profile",
    "input_size",
    "context_input_size",
    "n_conv_layers",
    "kernel_length",
    "channels",
    "downsample",
    "workers",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse(key, w.trim())?, parse(key, h.trim())?)),
        None => {
            let s = parse(key, v)?;
            Ok((s, s))
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        let o = &self.optimizer;
        for (k, v) in [("learning_rate", o.learning_rate), ("momentum", o.momentum), ("weight_decay", o.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite non-negative number, got {v}")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Builds a config from `key -> value` pairs over the defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, base_dir: Option<&Path>) -> Result<Self> {
        if let Some(k) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let mut cfg = RunConfig::default();
        let get = |k: &str| pairs.get(k).map(|s| s.trim());
        if let Some(p) = get("profile") {
            cfg.model = ModelConfig::profile(p)?;
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base_dir {
                Some(d) if p.is_relative() => d.join(p),
                _ => p,
            }
        };
        for (k, v) in pairs {
            let v = v.trim();
            match k.as_str() {
                "mode" => cfg.mode = parse(k, v)?,
                "lambda_disc" => cfg.loss.lambda_disc = parse(k, v)?,
                "lambda_cont" => cfg.loss.lambda_cont = parse(k, v)?,
                "cont_loss" => cfg.loss.cont_loss = ContLoss::from_str(v)?,
                "c" => cfg.loss.c = parse(k, v)?,
                "theta" => cfg.loss.theta = parse(k, v)?,
                "smooth_l1_threshold" => cfg.loss.smooth_l1_threshold = parse(k, v)?,
                "learning_rate" => cfg.optimizer.learning_rate = parse(k, v)?,
                "momentum" => cfg.optimizer.momentum = parse(k, v)?,
                "weight_decay" => cfg.optimizer.weight_decay = parse(k, v)?,
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "epochs" => cfg.epochs = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "corpus" => cfg.corpus = Some(path(v)),
                "checkpoint_dir" => cfg.checkpoint_dir = Some(path(v)),
                "aggregation" => cfg.aggregation = AggregationPolicy::from_str(v)?,
                "workers" => cfg.workers = parse(k, v)?,
                "profile" | "context_input_size" => {}
                "input_size" => {
                    let s = parse_size(k, v)?;
                    cfg.model.body.input_size = s;
                    cfg.model.context.input_size = s;
                }
                "n_conv_layers" => {
                    let n = parse(k, v)?;
                    cfg.model.body.n_conv_layers = n;
                    cfg.model.context.n_conv_layers = n;
                }
                "kernel_length" => {
                    let n = parse(k, v)?;
                    cfg.model.body.kernel_length = n;
                    cfg.model.context.kernel_length = n;
                }
                "channels" => {
                    let l = parse_list(k, v)?;
                    cfg.model.body.channel_schedule = l.clone();
                    cfg.model.context.channel_schedule = l;
                }
                "downsample" => {
                    let l: BTreeSet<usize> = parse_list(k, v)?.into_iter().collect();
                    cfg.model.body.downsample_layers = l.clone();
                    cfg.model.context.downsample_layers = l;
                }
                _ => unreachable!(),
            }
        }
        if let Some(v) = get("context_input_size") {
            cfg.model.context.input_size = parse_size("context_input_size", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if pairs.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Self::from_pairs(&pairs, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path.parent()).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Key-value form; reparses to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("mode = {}", self.mode),
            format!("lambda_disc = {}", self.loss.lambda_disc),
            format!("lambda_cont = {}", self.loss.lambda_cont),
            format!("cont_loss = {}", self.loss.cont_loss),
            format!("c = {}", self.loss.c),
            format!("theta = {}", self.loss.theta),
            format!("smooth_l1_threshold = {}", self.loss.smooth_l1_threshold),
            format!("learning_rate = {}", self.optimizer.learning_rate),
            format!("momentum = {}", self.optimizer.momentum),
            format!("weight_decay = {}", self.optimizer.weight_decay),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("seed = {}", self.seed),
            format!("aggregation = {}", self.aggregation),
            format!("workers = {}", self.workers),
            format!("input_size = {}x{}", m.body.input_size.0, m.body.input_size.1),
            format!("context_input_size = {}x{}", m.context.input_size.0, m.context.input_size.1),
            format!("n_conv_layers = {}", m.body.n_conv_layers),
            format!("kernel_length = {}", m.body.kernel_length),
            format!("channels = {}", join(&mut m.body.channel_schedule.iter().copied())),
            format!("downsample = {}", join(&mut m.body.downsample_layers.iter().copied())),
        ];
        if let Some(p) = &self.corpus {
            lines.push(format!("corpus = {}", p.display()));
        }
        if let Some(p) = &self.checkpoint_dir {
            lines.push(format!("checkpoint_dir = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }
}
