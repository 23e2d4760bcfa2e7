//! Flat `key = value` run configuration.
//!
//! ```text
//! # toy run
//! arch = toy
//! dataset = blobs
//! switches = [1.2]x; [1.0]x; [0.5,0.5]x; [4x0.25]x
//! wide = [1.2]x
//! epochs = 8
//! ```
//!
//! Every problem in a file is reported at once.

use std::path::{Path, PathBuf};

use crate::arch::Architecture;
use crate::dataset::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::norm::{CalibrationMode, CalibrationOptions};
use crate::switch::SwitchSpec;
use crate::trainer::{TrainMode, TrainerConfig};

pub const KEYS: &[&str] = &[
    "arch",
    "arch.blocks",
    "classes",
    "dataset",
    "dataset.samples",
    "dataset.size",
    "dataset.channels",
    "dataset.noise",
    "dataset.seed",
    "dataset.path",
    "dataset.resolution",
    "split.train",
    "switches",
    "wide",
    "mode",
    "beta",
    "epochs",
    "batch_size",
    "lr",
    "schedule",
    "momentum",
    "weight_decay",
    "nesterov",
    "seed",
    "us_samples",
    "checkpoint",
    "metrics",
    "wall_clock",
    "check_finite",
    "calib.mode",
    "calib.samples",
    "calib.batch",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Preset name or `custom`.
    pub arch: String,
    /// Block list for `arch = custom`, e.g. `conv:16:3:1,sep:32:2,res:3`.
    pub arch_blocks: Option<String>,
    pub dataset: DatasetSpec,
    pub train_split: f64,
    pub trainer: TrainerConfig,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub calibration: CalibrationOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "toy".into(),
            arch_blocks: None,
            dataset: DatasetSpec::Blobs {
                classes: 10,
                size: 8,
                channels: 3,
                samples: 1024,
                noise: 0.6,
                seed: 7,
            },
            train_split: 0.75,
            trainer: TrainerConfig::default(),
            checkpoint: None,
            metrics: None,
            calibration: CalibrationOptions::default(),
        }
    }
}

fn parse_lines(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => bad.push(format!("line {}: expected key = value, got {line:?}", i + 1)),
        }
    }
    (pairs, bad)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let (pairs, bad) = parse_lines(text);
        Self::from_pairs(&pairs, bad)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides on top of an existing file's pairs.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let (mut pairs, mut bad) = parse_lines(text);
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => bad.push(format!("override {o:?} is not key=value")),
            }
        }
        Self::from_pairs(&pairs, bad)
    }

    fn from_pairs(pairs: &[(String, String)], mut bad: Vec<String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                bad.push(format!("unknown key {k:?}"));
            }
        }

        macro_rules! num {
            ($key:expr, $target:expr) => {
                if let Some(v) = get($key) {
                    match v.parse() {
                        Ok(x) => $target = x,
                        Err(_) => bad.push(format!("{}: cannot parse {v:?}", $key)),
                    }
                }
            };
        }

        if let Some(v) = get("arch") {
            cfg.arch = v.to_string();
        }
        cfg.arch_blocks = get("arch.blocks").map(str::to_string);
        if !["toy", "convnet", "mobilenet", "resnet", "custom"].contains(&cfg.arch.as_str()) {
            bad.push(format!("arch: unknown {:?} (toy, convnet, mobilenet, resnet, custom)", cfg.arch));
        }
        if cfg.arch == "custom" && cfg.arch_blocks.is_none() {
            bad.push("arch = custom needs arch.blocks".into());
        }

        let mut classes = 10usize;
        let mut samples = 1024usize;
        let mut size = 8usize;
        let mut channels = 3usize;
        let mut noise = 0.6f32;
        let mut dseed = 7u64;
        let mut resolution = 32usize;
        num!("classes", classes);
        num!("dataset.samples", samples);
        num!("dataset.size", size);
        num!("dataset.channels", channels);
        num!("dataset.noise", noise);
        num!("dataset.seed", dseed);
        num!("dataset.resolution", resolution);
        cfg.dataset = match get("dataset").unwrap_or("blobs") {
            "blobs" => DatasetSpec::Blobs {
                classes,
                size,
                channels,
                samples,
                noise,
                seed: dseed,
            },
            "builtin" => DatasetSpec::Builtin { samples, seed: dseed },
            "folder" => match get("dataset.path") {
                Some(p) => DatasetSpec::ImageFolder {
                    path: p.into(),
                    resolution,
                },
                None => {
                    bad.push("dataset = folder needs dataset.path".into());
                    cfg.dataset.clone()
                }
            },
            other => {
                bad.push(format!("dataset: unknown {other:?} (blobs, builtin, folder)"));
                cfg.dataset.clone()
            }
        };
        num!("split.train", cfg.train_split);
        if !(cfg.train_split > 0.0 && cfg.train_split <= 1.0) {
            bad.push(format!("split.train must be in (0, 1], got {}", cfg.train_split));
        }

        let t = &mut cfg.trainer;
        if let Some(v) = get("switches") {
            let mut list = Vec::new();
            for part in v.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                match part.parse::<SwitchSpec>() {
                    Ok(s) => list.push(s),
                    Err(e) => bad.push(format!("switches: {e}")),
                }
            }
            t.switches = list;
        }
        if let Some(v) = get("wide") {
            match v.parse::<SwitchSpec>() {
                Ok(s) => t.wide = s,
                Err(e) => bad.push(format!("wide: {e}")),
            }
        }
        if let Some(v) = get("mode") {
            match v.parse::<TrainMode>() {
                Ok(m) => t.mode = m,
                Err(e) => bad.push(format!("mode: {e}")),
            }
        }
        if let Some(v) = get("schedule") {
            match v.parse() {
                Ok(s) => t.schedule = s,
                Err(e) => bad.push(format!("schedule: {e}")),
            }
        }
        num!("beta", t.beta);
        num!("epochs", t.epochs);
        num!("batch_size", t.batch_size);
        num!("lr", t.optimizer.lr);
        num!("momentum", t.optimizer.momentum);
        num!("weight_decay", t.optimizer.weight_decay);
        num!("nesterov", t.optimizer.nesterov);
        num!("seed", t.seed);
        num!("us_samples", t.us_samples);
        num!("wall_clock", t.wall_clock);
        num!("check_finite", t.check_finite);
        if let Err(Error::Config(v)) = t.validate() {
            bad.extend(v);
        }

        cfg.checkpoint = get("checkpoint").map(PathBuf::from);
        cfg.metrics = get("metrics").map(PathBuf::from);
        if let Some(v) = get("calib.mode") {
            match v.split_once(':') {
                None if v == "exact" => cfg.calibration.mode = CalibrationMode::ExactMean,
                Some(("ema", m)) => match m.parse::<f32>() {
                    Ok(m) if m > 0.0 && m <= 1.0 => cfg.calibration.mode = CalibrationMode::MovingAverage { momentum: m },
                    _ => bad.push(format!("calib.mode: bad momentum in {v:?}")),
                },
                _ => bad.push(format!("calib.mode: unknown {v:?} (exact, ema:<momentum>)")),
            }
        }
        num!("calib.samples", cfg.calibration.max_samples);
        num!("calib.batch", cfg.calibration.batch_size);
        if cfg.calibration.batch_size == 0 {
            bad.push("calib.batch must be >= 1".into());
        }
        cfg.trainer.eval_calibration_samples = cfg.calibration.max_samples.min(512);

        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad))
        }
    }

    /// The architecture sized for a loaded dataset.
    pub fn architecture(&self, data: &Dataset) -> Result<Architecture> {
        let [c, h, w] = data.sample_shape();
        if h != w {
            return Err(Error::Dataset(format!("images must be square, got {h}x{w}")));
        }
        match (self.arch.as_str(), &self.arch_blocks) {
            ("custom", Some(blocks)) => Architecture::custom(blocks, c, h, data.classes),
            (name, _) => Architecture::preset(name, c, h, data.classes),
        }
    }
}
