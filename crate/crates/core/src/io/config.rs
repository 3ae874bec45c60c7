//! Line-oriented `key=value` run configuration. `#` starts a comment;
//! every key is optional and unknown keys are rejected.

use crate::error::{Error, Result};
use crate::eval::DEFAULT_TOL;
use crate::pipeline::ModelConfig;
use crate::training::TrainConfig;
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tol: f64,
    /// Dataset root with `images/` and `gt/`.
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(64),
            train: TrainConfig::default(),
            tol: DEFAULT_TOL,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }
}

const RUN_KEYS: &[&str] = &[
    "eta",
    "lambda",
    "lr",
    "momentum",
    "weight_decay",
    "power",
    "iters_stage1",
    "iters_stage2",
    "batch",
    "crop",
    "seed",
    "ignore_band",
    "flip",
    "tol",
    "data",
    "out",
];

impl RunConfig {
    /// Every key with its default value.
    pub fn default_text() -> String {
        Self::default().to_text()
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = self.model.to_text();
        for (k, v) in [
            ("eta", t.eta.to_string()),
            ("lambda", t.lambda.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("power", t.power.to_string()),
            ("iters_stage1", t.iters_stage1.to_string()),
            ("iters_stage2", t.iters_stage2.to_string()),
            ("batch", t.batch.to_string()),
            ("crop", t.crop.to_string()),
            ("seed", t.seed.to_string()),
            ("ignore_band", t.ignore_band.to_string()),
            ("flip", t.flip.to_string()),
            ("tol", self.tol.to_string()),
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
        ] {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Parses configuration text. Without an explicit `crop`, the crop
    /// follows the model height.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut crop_set = false;
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                e => e,
            })?;
            crop_set |= k == "crop";
        }
        if !crop_set {
            cfg.train.crop = cfg.model.image_size.0;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        if !(cfg.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", cfg.tol)));
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if ModelConfig::has_key(key) {
            return self.model.set(key, value);
        }
        if !RUN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let t = &mut self.train;
        match key {
            "eta" => t.eta = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "power" => t.power = num(key, value)?,
            "iters_stage1" => t.iters_stage1 = num(key, value)?,
            "iters_stage2" => t.iters_stage2 = num(key, value)?,
            "batch" => t.batch = num(key, value)?,
            "crop" => t.crop = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "ignore_band" => t.ignore_band = num(key, value)?,
            "flip" => t.flip = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "data" => self.data = PathBuf::from(value),
            _ => self.out = PathBuf::from(value),
        }
        Ok(())
    }
}
