//! Flat `key=value` run configuration.
//!
//! Files hold one `key=value` pair per line; blank lines and lines starting
//! with `#` are ignored. Later assignments win, so command-line overrides are
//! applied by appending them. [`RunConfig::to_text`] prints every key with its
//! resolved value in the same format, so a printed header can be fed back as
//! a config file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::EncoderVariant;
use crate::pretext::{PretextConfig, Sampling, TaskVariant};
use crate::training::{Phase, TrainConfig};

pub const KEYS: &[&str] = &[
    "seed",
    "variant",
    "encoder",
    "ratio",
    "resample_positions",
    "sampling",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "lr_schedule",
    "hidden_width",
    "stop_at_accuracy",
];

/// Parses `key=value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: TaskVariant,
    pub encoder: EncoderVariant,
    pub pretext: PretextConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn sampling_name(s: Sampling) -> &'static str {
    match s {
        Sampling::AllTransforms => "all",
        Sampling::OneTransformPerImage => "one",
    }
}

impl RunConfig {
    /// Defaults for `phase`, then each pair in order.
    pub fn resolve(phase: Phase, pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig {
            seed: 0,
            variant: TaskVariant::PatchRotNet,
            encoder: EncoderVariant::ResNet8,
            pretext: PretextConfig::default(),
            train: TrainConfig::for_phase(phase),
        };
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "seed" => cfg.seed = parse(k, v)?,
                "variant" => cfg.variant = v.parse()?,
                "encoder" => cfg.encoder = v.parse()?,
                "ratio" => cfg.pretext.ratio = parse(k, v)?,
                "resample_positions" => cfg.pretext.resample_position_each_epoch = parse(k, v)?,
                "sampling" => {
                    cfg.pretext.sampling = match v {
                        "all" => Sampling::AllTransforms,
                        "one" => Sampling::OneTransformPerImage,
                        _ => return Err(Error::Config(format!("bad sampling {v:?}, use all or one"))),
                    }
                }
                "epochs" => cfg.train.epochs = parse(k, v)?,
                "batch_size" => cfg.train.batch_size = parse(k, v)?,
                "lr" => cfg.train.lr = parse(k, v)?,
                "momentum" => cfg.train.momentum = parse(k, v)?,
                "weight_decay" => cfg.train.weight_decay = parse(k, v)?,
                "lr_schedule" => cfg.train.lr_schedule = v.parse()?,
                "hidden_width" => cfg.train.hidden_width = parse(k, v)?,
                "stop_at_accuracy" => {
                    cfg.train.stop_at_accuracy = match v {
                        "none" => None,
                        _ => Some(parse(k, v)?),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        cfg.pretext.rng_seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.pretext.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn phase(&self) -> Phase {
        self.train.phase
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let stop = t.stop_at_accuracy.map_or("none".to_string(), |v| v.to_string());
        [
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("encoder", self.encoder.to_string()),
            ("ratio", self.pretext.ratio.to_string()),
            ("resample_positions", self.pretext.resample_position_each_epoch.to_string()),
            ("sampling", sampling_name(self.pretext.sampling).to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lr_schedule", t.lr_schedule.to_string()),
            ("hidden_width", t.hidden_width.to_string()),
            ("stop_at_accuracy", stop),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }
}
