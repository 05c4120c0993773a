//! Training configuration as flat `key = value` pairs.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::clustering::{BankConfig, MeanShiftConfig};
use crate::data_io::LoadMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pipeline::PipelineConfig;

/// One documented configuration key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

pub const TRAIN_KEYS: &[KeySpec] = &[
    key("clusters", "4", "number of memorized centroids K"),
    key("patch_size", "64", "side P of each square patch"),
    key("batch", "4", "patch pairs per step, all from one cube"),
    key("overlap_min", "0.25", "smallest overlap fraction between the two crops"),
    key("overlap_max", "0.75", "largest overlap fraction between the two crops"),
    key("reuse", "32", "patch-pair draws served by each loaded cube; a multiple of batch"),
    key("steps", "2000", "total optimizer steps"),
    key("learning_rate", "0.001", "Adam step size"),
    key("beta1", "0.9", "Adam first-moment decay"),
    key("beta2", "0.999", "Adam second-moment decay"),
    key("adam_eps", "1e-8", "Adam denominator guard"),
    key("w_unif", "1", "weight of the uniform pseudo-label term"),
    key("w_orth", "0.1", "weight of the centroid orthogonality term"),
    key("w_bal", "1", "weight of the marginal balance term"),
    key("w_cons", "1", "weight of the overlap consistency term"),
    key("ms_iterations", "5", "unrolled mean-shift rounds"),
    key("ms_bandwidth", "0.5", "mean-shift Gaussian bandwidth"),
    key("ms_train", "true", "apply mean-shift inside the training objective"),
    key("ema_decay", "0.99", "centroid EMA decay"),
    key("temperature", "0.1", "soft-assignment temperature"),
    key("dead_threshold", "auto", "mass share below which a cluster is dead; auto = 0.5/K"),
    key("reactivation_scale", "0.05", "Gaussian kick applied to dead centroids"),
    key("train_centroids", "true", "also move centroids by gradient before the EMA"),
    key("channels", "32", "encoder width and embedding dimension"),
    key("kernel", "9", "spectral kernel length"),
    key("strides", "auto", "spectral strides as a,b,c; auto picks a plan for the band count"),
    key("mode", "sync", "cube loading: sync or async"),
    key("seed", "0", "master seed"),
    key("checkpoint_every", "0", "write a checkpoint every N steps; 0 = final only"),
    key("log_every", "1", "write a metric row every N steps"),
    key("wall_time", "true", "record wall-clock milliseconds in the metric log"),
];

/// Keys that may change between a checkpoint and its resumption.
const RUNTIME_KEYS: &[&str] = &["steps", "mode", "checkpoint_every", "log_every", "wall_time"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub clusters: usize,
    pub patch_size: usize,
    pub batch: usize,
    pub overlap: (f64, f64),
    pub reuse: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub mean_shift: MeanShiftConfig,
    pub ms_train: bool,
    pub ema_decay: f64,
    pub temperature: f64,
    pub dead_threshold: Option<f64>,
    pub reactivation_scale: f64,
    pub train_centroids: bool,
    pub channels: usize,
    pub kernel: usize,
    pub strides: Option<[usize; 3]>,
    pub mode: LoadMode,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut c = TrainConfig {
            clusters: 0,
            patch_size: 0,
            batch: 0,
            overlap: (0.0, 0.0),
            reuse: 0,
            steps: 0,
            learning_rate: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            adam_eps: 0.0,
            weights: LossWeights::zero(),
            mean_shift: MeanShiftConfig::default(),
            ms_train: false,
            ema_decay: 0.0,
            temperature: 0.0,
            dead_threshold: None,
            reactivation_scale: 0.0,
            train_centroids: false,
            channels: 0,
            kernel: 0,
            strides: None,
            mode: LoadMode::Sync,
            seed: 0,
            checkpoint_every: 0,
            log_every: 0,
            wall_time: false,
        };
        for k in TRAIN_KEYS {
            c.set(k.key, k.default).expect("built-in defaults parse");
        }
        c
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn is_key(key: &str) -> bool {
        TRAIN_KEYS.iter().any(|k| k.key == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "clusters" => self.clusters = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "overlap_min" => self.overlap.0 = parse(key, v)?,
            "overlap_max" => self.overlap.1 = parse(key, v)?,
            "reuse" => self.reuse = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "w_unif" => self.weights.unif = parse(key, v)?,
            "w_orth" => self.weights.orth = parse(key, v)?,
            "w_bal" => self.weights.bal = parse(key, v)?,
            "w_cons" => self.weights.cons = parse(key, v)?,
            "ms_iterations" => self.mean_shift.iterations = parse(key, v)?,
            "ms_bandwidth" => self.mean_shift.bandwidth = parse(key, v)?,
            "ms_train" => self.ms_train = parse_bool(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "dead_threshold" => {
                self.dead_threshold = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "reactivation_scale" => self.reactivation_scale = parse(key, v)?,
            "train_centroids" => self.train_centroids = parse_bool(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "strides" => {
                self.strides = if v == "auto" {
                    None
                } else {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| parse(key, p))
                        .collect::<Result<_>>()?;
                    let arr: [usize; 3] = parts
                        .try_into()
                        .map_err(|_| Error::Config(format!("strides needs three values, got {v:?}")))?;
                    Some(arr)
                }
            }
            "mode" => self.mode = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "wall_time" => self.wall_time = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "clusters" => self.clusters.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "batch" => self.batch.to_string(),
            "overlap_min" => self.overlap.0.to_string(),
            "overlap_max" => self.overlap.1.to_string(),
            "reuse" => self.reuse.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "w_unif" => self.weights.unif.to_string(),
            "w_orth" => self.weights.orth.to_string(),
            "w_bal" => self.weights.bal.to_string(),
            "w_cons" => self.weights.cons.to_string(),
            "ms_iterations" => self.mean_shift.iterations.to_string(),
            "ms_bandwidth" => self.mean_shift.bandwidth.to_string(),
            "ms_train" => self.ms_train.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "temperature" => self.temperature.to_string(),
            "dead_threshold" => self.dead_threshold.map_or("auto".into(), |v| v.to_string()),
            "reactivation_scale" => self.reactivation_scale.to_string(),
            "train_centroids" => self.train_centroids.to_string(),
            "channels" => self.channels.to_string(),
            "kernel" => self.kernel.to_string(),
            "strides" => self.strides.map_or("auto".into(), |s| format!("{},{},{}", s[0], s[1], s[2])),
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "wall_time" => self.wall_time.to_string(),
            _ => return None,
        })
    }

    /// Canonical `key = value` text, one line per key in schema order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in TRAIN_KEYS {
            let _ = writeln!(s, "{} = {}", k.key, self.get(k.key).unwrap());
        }
        s
    }

    /// Parses canonical text; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }

    /// SHA-256 over every key that shapes the trajectory.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in TRAIN_KEYS.iter().filter(|k| !RUNTIME_KEYS.contains(&k.key)) {
            h.update(k.key.as_bytes());
            h.update(b"=");
            h.update(self.get(k.key).unwrap().as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn dead_threshold(&self) -> f64 {
        self.dead_threshold.unwrap_or(0.5 / self.clusters as f64)
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            ema_decay: self.ema_decay,
            dead_threshold: self.dead_threshold(),
            temperature: self.temperature,
            reactivation_scale: self.reactivation_scale,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mean_shift: self.mean_shift,
            refine: self.ms_train,
            weights: self.weights,
        }
    }

    pub fn encoder_config(&self, bands: usize) -> Result<EncoderConfig> {
        match self.strides {
            Some(strides) => {
                let c = EncoderConfig {
                    bands,
                    channels: self.channels,
                    kernel: self.kernel,
                    strides,
                };
                c.validate()?;
                Ok(c)
            }
            None => EncoderConfig::auto(bands, self.channels, self.kernel),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clusters", self.clusters),
            ("patch_size", self.patch_size),
            ("batch", self.batch),
            ("reuse", self.reuse),
            ("channels", self.channels),
            ("kernel", self.kernel),
            ("log_every", self.log_every as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.clusters < 2 {
            return Err(Error::Config("clusters must be at least 2".into()));
        }
        if self.reuse % self.batch != 0 {
            return Err(Error::Config(format!(
                "reuse ({}) must be a multiple of batch ({}) so a step never spans two cubes",
                self.reuse, self.batch
            )));
        }
        let (lo, hi) = self.overlap;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("overlap range [{lo}, {hi}] must satisfy 0 < min <= max <= 1")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(s) = self.strides {
            if s.contains(&0) {
                return Err(Error::Config("strides must be positive".into()));
            }
        }
        self.weights.validate()?;
        self.mean_shift.validate()?;
        self.bank_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_text_roundtrip() {
        let c = TrainConfig::default();
        assert_eq!(c.patch_size, 64);
        assert_eq!(c.batch, 4);
        assert_eq!(c.reuse, 32);
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.dead_threshold(), 0.125);
        c.validate().unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let mut d = c.clone();
        d.strides = Some([2, 2, 1]);
        d.dead_threshold = Some(0.01);
        d.mode = LoadMode::Async;
        assert_eq!(TrainConfig::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut c = TrainConfig::default();
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("batch", "four").is_err());
        assert!(c.set("strides", "1,2").is_err());
        c.set("reuse", "6").unwrap();
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.set("clusters", "1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_runtime_keys() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.steps = 7;
        b.mode = LoadMode::Async;
        b.log_every = 5;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
