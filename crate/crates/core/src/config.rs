//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! ```text
//! # comment
//! grid.height = 32
//! hfp.K = 4
//! ```
//!
//! Unknown keys and unparsable values are rejected with the offending key.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::DetDims;
use crate::error::{Error, Result};
use crate::hfp::{HfpDims, DEFAULT_POINTS};
use crate::membank::DEFAULT_TAU;
use crate::streams::{Modality, StreamConfig};
use crate::ucf::UcfDims;

/// When the fusion stage runs at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseWhen {
    /// Only on frames with at least one missing modality.
    Missing,
    /// On every frame, live features included.
    Always,
}

impl FromStr for FuseWhen {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "missing" => Ok(FuseWhen::Missing),
            "always" => Ok(FuseWhen::Always),
            _ => Err(format!("expected `missing` or `always`, got `{s}`")),
        }
    }
}

impl Display for FuseWhen {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FuseWhen::Missing => "missing",
            FuseWhen::Always => "always",
        })
    }
}

/// Optimiser settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Samples per optimiser step.
    pub batch: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub optim: OptimConfig,
    /// Early-stopping validation F1.
    pub target_f1: f64,
    /// Pretraining aborts below this validation F1.
    pub min_f1: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rates: Vec<f64>,
    /// Rate of the single-run `eval` command, applied to both modalities.
    pub rate: f64,
    pub policy: String,
    /// Number of validation frames exported as heatmaps per policy and rate.
    pub heatmap_frames: usize,
    /// Record wall-clock seconds in reports, which makes them non-reproducible.
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub streams: StreamConfig,
    pub tau: usize,
    pub points: usize,
    pub uncertainty: bool,
    pub fuse_when: FuseWhen,
    pub det: DetectorConfig,
    pub train: OptimConfig,
    pub eval: EvalConfig,
    pub kalman_q: f64,
    pub kalman_r: f64,
}

/// Epochs per stage in the original training protocol.
pub const PAPER_EPOCHS: usize = 12;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            streams: StreamConfig::default(),
            tau: DEFAULT_TAU,
            points: DEFAULT_POINTS,
            uncertainty: true,
            fuse_when: FuseWhen::Missing,
            det: DetectorConfig {
                hidden: 32,
                optim: OptimConfig {
                    lr: 2e-3,
                    epochs: 6,
                    weight_decay: 0.0,
                    batch: 4,
                    clip: 1.0,
                },
                target_f1: 0.9,
                min_f1: 0.6,
                threshold: 0.5,
            },
            train: OptimConfig {
                lr: 2e-4,
                epochs: 8,
                weight_decay: 0.01,
                batch: 4,
                clip: 1.0,
            },
            eval: EvalConfig {
                rates: vec![0.0, 0.1, 0.3, 0.5],
                rate: 0.5,
                policy: "hfp+ucf".to_string(),
                heatmap_frames: 4,
                timing: false,
            },
            kalman_q: 1e-3,
            kalman_r: 4e-4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse::<f64>(key, v.trim()))
        .collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "grid.height",
    "grid.width",
    "img.channels",
    "pts.channels",
    "streams.frames",
    "streams.train",
    "streams.val",
    "streams.objects_min",
    "streams.objects_max",
    "streams.min_speed",
    "streams.max_speed",
    "streams.motion_noise",
    "streams.blob_std",
    "streams.noise_std",
    "streams.img_range",
    "streams.far_attenuation",
    "membank.tau",
    "hfp.K",
    "ucf.uncertainty",
    "ucf.fuse_when",
    "det.hidden",
    "det.lr",
    "det.epochs",
    "det.weight_decay",
    "det.batch",
    "det.clip",
    "det.target_f1",
    "det.min_f1",
    "det.threshold",
    "train.lr",
    "train.epochs",
    "train.weight_decay",
    "train.batch",
    "train.clip",
    "eval.rates",
    "eval.rate",
    "eval.policy",
    "eval.heatmap_frames",
    "eval.timing",
    "kalman.q",
    "kalman.r",
];

impl RunConfig {
    /// Sets one key. Unknown keys and bad values are [`Error::Config`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.streams;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "grid.height" => s.height = parse(key, v)?,
            "grid.width" => s.width = parse(key, v)?,
            "img.channels" => s.img_channels = parse(key, v)?,
            "pts.channels" => s.pts_channels = parse(key, v)?,
            "streams.frames" => s.frames = parse(key, v)?,
            "streams.train" => s.train_streams = parse(key, v)?,
            "streams.val" => s.val_streams = parse(key, v)?,
            "streams.objects_min" => s.objects_min = parse(key, v)?,
            "streams.objects_max" => s.objects_max = parse(key, v)?,
            "streams.min_speed" => s.min_speed = parse(key, v)?,
            "streams.max_speed" => s.max_speed = parse(key, v)?,
            "streams.motion_noise" => s.motion_noise = parse(key, v)?,
            "streams.blob_std" => s.blob_std = parse(key, v)?,
            "streams.noise_std" => s.noise_std = parse(key, v)?,
            "streams.img_range" => s.img_range = parse(key, v)?,
            "streams.far_attenuation" => s.far_attenuation = parse(key, v)?,
            "membank.tau" => self.tau = parse(key, v)?,
            "hfp.K" => self.points = parse(key, v)?,
            "ucf.uncertainty" => self.uncertainty = parse(key, v)?,
            "ucf.fuse_when" => self.fuse_when = parse(key, v)?,
            "det.hidden" => self.det.hidden = parse(key, v)?,
            "det.lr" => self.det.optim.lr = parse(key, v)?,
            "det.epochs" => self.det.optim.epochs = parse(key, v)?,
            "det.weight_decay" => self.det.optim.weight_decay = parse(key, v)?,
            "det.batch" => self.det.optim.batch = parse(key, v)?,
            "det.clip" => self.det.optim.clip = parse(key, v)?,
            "det.target_f1" => self.det.target_f1 = parse(key, v)?,
            "det.min_f1" => self.det.min_f1 = parse(key, v)?,
            "det.threshold" => self.det.threshold = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.clip" => self.train.clip = parse(key, v)?,
            "eval.rates" => self.eval.rates = parse_list(key, v)?,
            "eval.rate" => self.eval.rate = parse(key, v)?,
            "eval.policy" => self.eval.policy = v.to_string(),
            "eval.heatmap_frames" => self.eval.heatmap_frames = parse(key, v)?,
            "eval.timing" => self.eval.timing = parse(key, v)?,
            "kalman.q" => self.kalman_q = parse(key, v)?,
            "kalman.r" => self.kalman_r = parse(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    reason: "unknown key".to_string(),
                })
            }
        }
        Ok(())
    }

    /// Current value of a key in the text format.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.streams;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "grid.height" => s.height.to_string(),
            "grid.width" => s.width.to_string(),
            "img.channels" => s.img_channels.to_string(),
            "pts.channels" => s.pts_channels.to_string(),
            "streams.frames" => s.frames.to_string(),
            "streams.train" => s.train_streams.to_string(),
            "streams.val" => s.val_streams.to_string(),
            "streams.objects_min" => s.objects_min.to_string(),
            "streams.objects_max" => s.objects_max.to_string(),
            "streams.min_speed" => s.min_speed.to_string(),
            "streams.max_speed" => s.max_speed.to_string(),
            "streams.motion_noise" => s.motion_noise.to_string(),
            "streams.blob_std" => s.blob_std.to_string(),
            "streams.noise_std" => s.noise_std.to_string(),
            "streams.img_range" => s.img_range.to_string(),
            "streams.far_attenuation" => s.far_attenuation.to_string(),
            "membank.tau" => self.tau.to_string(),
            "hfp.K" => self.points.to_string(),
            "ucf.uncertainty" => self.uncertainty.to_string(),
            "ucf.fuse_when" => self.fuse_when.to_string(),
            "det.hidden" => self.det.hidden.to_string(),
            "det.lr" => self.det.optim.lr.to_string(),
            "det.epochs" => self.det.optim.epochs.to_string(),
            "det.weight_decay" => self.det.optim.weight_decay.to_string(),
            "det.batch" => self.det.optim.batch.to_string(),
            "det.clip" => self.det.optim.clip.to_string(),
            "det.target_f1" => self.det.target_f1.to_string(),
            "det.min_f1" => self.det.min_f1.to_string(),
            "det.threshold" => self.det.threshold.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.clip" => self.train.clip.to_string(),
            "eval.rates" => fmt_list(&self.eval.rates),
            "eval.rate" => self.eval.rate.to_string(),
            "eval.policy" => self.eval.policy.clone(),
            "eval.heatmap_frames" => self.eval.heatmap_frames.to_string(),
            "eval.timing" => self.eval.timing.to_string(),
            "kalman.q" => self.kalman_q.to_string(),
            "kalman.r" => self.kalman_r.to_string(),
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    reason: "unknown key".to_string(),
                })
            }
        })
    }

    /// Applies a config file on top of `self`. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                reason: format!("line {} is not `key = value`", lineno + 1),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.to_string(),
            reason: "override must be `key=value`".to_string(),
        })?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// The full configuration in the text format.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Error::Config {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        self.streams.validate().map_err(|(k, r)| bad(k, &r))?;
        if self.tau < 1 {
            return Err(bad("membank.tau", "must be at least 1"));
        }
        if self.points < 1 {
            return Err(bad("hfp.K", "must be at least 1"));
        }
        if self.det.hidden < 1 {
            return Err(bad("det.hidden", "must be at least 1"));
        }
        for (prefix, o) in [("det", &self.det.optim), ("train", &self.train)] {
            if !(o.lr > 0.0 && o.lr.is_finite()) {
                return Err(bad(&format!("{prefix}.lr"), "must be positive"));
            }
            if o.epochs < 1 {
                return Err(bad(&format!("{prefix}.epochs"), "must be at least 1"));
            }
            if o.batch < 1 {
                return Err(bad(&format!("{prefix}.batch"), "must be at least 1"));
            }
            if !(o.weight_decay >= 0.0) {
                return Err(bad(&format!("{prefix}.weight_decay"), "must be non-negative"));
            }
            if !(o.clip > 0.0) {
                return Err(bad(&format!("{prefix}.clip"), "must be positive"));
            }
        }
        if !(self.det.threshold > 0.0 && self.det.threshold < 1.0) {
            return Err(bad("det.threshold", "must lie in (0, 1)"));
        }
        if self.eval.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(bad("eval.rates", "rates must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.rate) {
            return Err(bad("eval.rate", "must lie in [0, 1]"));
        }
        if !(self.kalman_q >= 0.0 && self.kalman_r > 0.0) {
            return Err(bad("kalman.r", "need q >= 0 and r > 0"));
        }
        Ok(())
    }

    pub fn hfp_dims(&self, m: Modality) -> HfpDims {
        HfpDims {
            channels: self.streams.channels(m),
            height: self.streams.height,
            width: self.streams.width,
            tau: self.tau,
            points: self.points,
        }
    }

    pub fn ucf_dims(&self) -> UcfDims {
        UcfDims {
            img_channels: self.streams.img_channels,
            pts_channels: self.streams.pts_channels,
            height: self.streams.height,
            width: self.streams.width,
            points: self.points,
        }
    }

    pub fn det_dims(&self) -> DetDims {
        DetDims {
            img_channels: self.streams.img_channels,
            pts_channels: self.streams.pts_channels,
            hidden: self.det.hidden,
            height: self.streams.height,
            width: self.streams.width,
        }
    }
}
