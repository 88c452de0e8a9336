//! Experiment configuration as plain `key = value` text.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::federation::{Mode, TrainSettings};
use crate::hc::{HcSettings, DEFAULT_GAUSS_SIGMA, DEFAULT_GAUSS_SIZE, DEFAULT_NMS_DELTA};
use crate::losses::DEFAULT_LAMBDA;
use crate::model::{self, Calibration};
use crate::nn::{Group, ModelProfile};
use crate::optim::DEFAULT_LR;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Tri-state switch: follow the mode, or force on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Switch {
    Auto,
    On,
    Off,
}

impl Switch {
    pub fn resolve(self, default: bool) -> bool {
        match self {
            Switch::Auto => default,
            Switch::On => true,
            Switch::Off => false,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Switch::Auto => "auto",
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub sites: usize,
    pub rounds: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
    pub allow_negative_lambda: bool,
    pub nms_delta: usize,
    pub gauss_size: usize,
    pub gauss_sigma: f64,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub image_size: usize,
    pub samples_per_site: usize,
    pub benchmark_seed: u64,
    pub master_seed: u64,
    pub threshold: f64,
    pub dtype: Dtype,
    pub pcs: Switch,
    pub hc: Switch,
    pub share_heads: Switch,
    pub personal_pcs: bool,
    pub checkpoint_every: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub manifest: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::LcFed,
            sites: 4,
            rounds: 30,
            epochs: 1,
            lr: DEFAULT_LR,
            batch: 6,
            lambda: DEFAULT_LAMBDA,
            allow_negative_lambda: false,
            nms_delta: DEFAULT_NMS_DELTA,
            gauss_size: DEFAULT_GAUSS_SIZE,
            gauss_sigma: DEFAULT_GAUSS_SIGMA,
            widths: vec![8, 16, 32, 64, 128],
            classes: 1,
            image_size: 64,
            samples_per_site: 150,
            benchmark_seed: 0,
            master_seed: 0,
            threshold: 0.5,
            dtype: Dtype::F32,
            pcs: Switch::Auto,
            hc: Switch::Auto,
            share_heads: Switch::Auto,
            personal_pcs: false,
            checkpoint_every: 10,
            workers: 1,
            output_dir: PathBuf::from("runs/default"),
            manifest: None,
        }
    }
}

/// Keys that do not influence results and stay out of the digest.
const OPERATIONAL_KEYS: [&str; 3] = ["workers", "output_dir", "checkpoint_every"];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_switch(key: &str, v: &str) -> Result<Switch> {
    match v {
        "auto" => Ok(Switch::Auto),
        "on" | "true" => Ok(Switch::On),
        "off" | "false" => Ok(Switch::Off),
        _ => Err(Error::Config(format!("{key}: expected auto, on or off, got '{v}'"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = Mode::parse(v)?,
            "sites" => self.sites = parse_num(key, v)?,
            "rounds" => self.rounds = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "allow_negative_lambda" => self.allow_negative_lambda = parse_bool(key, v)?,
            "nms_delta" => self.nms_delta = parse_num(key, v)?,
            "gauss_size" => self.gauss_size = parse_num(key, v)?,
            "gauss_sigma" => self.gauss_sigma = parse_num(key, v)?,
            "widths" => {
                self.widths = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "classes" => self.classes = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "samples_per_site" => self.samples_per_site = parse_num(key, v)?,
            "benchmark_seed" => self.benchmark_seed = parse_num(key, v)?,
            "master_seed" => self.master_seed = parse_num(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(Error::Config(format!("dtype: expected f32 or f64, got '{v}'"))),
                }
            }
            "pcs" => self.pcs = parse_switch(key, v)?,
            "hc" => self.hc = parse_switch(key, v)?,
            "share_heads" => self.share_heads = parse_switch(key, v)?,
            "personal_pcs" => self.personal_pcs = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "workers" => self.workers = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "manifest" => self.manifest = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults overlaid with the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let widths = self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("mode", self.mode.to_string()),
            ("sites", self.sites.to_string()),
            ("rounds", self.rounds.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("lambda", self.lambda.to_string()),
            ("allow_negative_lambda", self.allow_negative_lambda.to_string()),
            ("nms_delta", self.nms_delta.to_string()),
            ("gauss_size", self.gauss_size.to_string()),
            ("gauss_sigma", self.gauss_sigma.to_string()),
            ("widths", widths),
            ("classes", self.classes.to_string()),
            ("image_size", self.image_size.to_string()),
            ("samples_per_site", self.samples_per_site.to_string()),
            ("benchmark_seed", self.benchmark_seed.to_string()),
            ("master_seed", self.master_seed.to_string()),
            ("threshold", self.threshold.to_string()),
            ("dtype", self.dtype.as_str().to_string()),
            ("pcs", self.pcs.as_str().to_string()),
            ("hc", self.hc.as_str().to_string()),
            ("share_heads", self.share_heads.as_str().to_string()),
            ("personal_pcs", self.personal_pcs.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("workers", self.workers.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            (
                "manifest",
                self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]
    }

    /// Canonical text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hash of every result-relevant setting.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !OPERATIONAL_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        crate::nn::hex(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.sites < 1 {
            return bad("sites must be at least 1".into());
        }
        if self.nms_delta == 0 || self.nms_delta.is_multiple_of(2) {
            return bad(format!("nms_delta must be odd, got {}", self.nms_delta));
        }
        if self.gauss_size == 0 || self.gauss_size.is_multiple_of(2) {
            return bad(format!("gauss_size must be odd, got {}", self.gauss_size));
        }
        if self.gauss_sigma.is_nan() || self.gauss_sigma <= 0.0 {
            return bad("gauss_sigma must be positive".into());
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if self.lambda < 0.0 && !self.allow_negative_lambda {
            return bad("negative lambda needs allow_negative_lambda = true".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number".into());
        }
        if self.batch == 0 || self.epochs == 0 || self.workers == 0 {
            return bad("batch, epochs and workers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]".into());
        }
        if self.manifest.is_none() && self.samples_per_site == 0 {
            return bad("samples_per_site must be positive".into());
        }
        let profile = self.profile();
        profile.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.manifest.is_none() {
            profile
                .check_input(self.image_size, self.image_size)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            pcs: self.pcs.resolve(self.mode.pcs()),
            hc: self.hc.resolve(self.mode.hc()),
            hc_settings: HcSettings {
                nms_delta: self.nms_delta,
                gauss_size: self.gauss_size,
                gauss_sigma: self.gauss_sigma,
            },
        }
    }

    pub fn profile(&self) -> ModelProfile {
        model::profile_for(&self.widths, self.classes, self.sites, &self.calibration())
    }

    /// Groups the server averages.
    pub fn shared_groups(&self) -> Vec<Group> {
        if !self.mode.aggregates() {
            return Vec::new();
        }
        let mut g = vec![Group::BaseBody];
        if self.calibration().pcs && !self.personal_pcs {
            g.push(Group::PcsGenerator);
        }
        if self.share_heads.resolve(self.mode.shares_heads()) {
            g.push(Group::Head);
        }
        g
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            calibration: self.calibration(),
            shared: self.shared_groups(),
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            lambda: self.lambda,
            master_seed: self.master_seed,
            workers: self.workers,
            threshold: self.threshold,
        }
    }

    pub fn benchmark(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            sites: self.sites,
            samples_per_site: self.samples_per_site,
            size: (self.image_size, self.image_size),
            classes: self.classes,
            seed: self.benchmark_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set_pair("mode=fedrep-head").unwrap();
        c.set_pair("widths=4,8").unwrap();
        c.set_pair("manifest=/data/m.txt").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(
            ExperimentConfig::parse(&ExperimentConfig::default().to_text()).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.lambda, c.nms_delta, c.lr, c.batch), (0.1, 11, 1e-4, 6));
        assert_eq!((c.sites, c.rounds, c.image_size), (4, 30, 64));
        c.validate().unwrap();
    }

    #[test]
    fn comments_and_errors() {
        let c = ExperimentConfig::parse("# x\nrounds = 3 # short\n\n").unwrap();
        assert_eq!(c.rounds, 3);
        assert!(ExperimentConfig::parse("rounds 3").is_err());
        assert!(ExperimentConfig::parse("colour = red").is_err());
        assert!(ExperimentConfig::parse("mode = fedprox").is_err());
    }

    #[test]
    fn validation() {
        let with = |k: &str, v: &str| {
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            c
        };
        assert!(with("nms_delta", "10").validate().is_err());
        let mut c = with("lambda", "-0.1");
        assert!(c.validate().is_err());
        c.allow_negative_lambda = true;
        c.validate().unwrap();
        assert!(with("rounds", "0").validate().is_err());
        assert!(with("image_size", "40").validate().is_err());
    }

    #[test]
    fn digest_ignores_operational_keys() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.workers = 4;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.master_seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn mode_grid() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.shared_groups(), vec![Group::BaseBody, Group::PcsGenerator]);
        c.mode = Mode::FedAvg;
        assert_eq!(c.shared_groups(), vec![Group::BaseBody, Group::Head]);
        c.mode = Mode::Local;
        assert!(c.shared_groups().is_empty());
        c.mode = Mode::LcFed;
        c.personal_pcs = true;
        assert_eq!(c.shared_groups(), vec![Group::BaseBody]);
        c.pcs = Switch::Off;
        c.hc = Switch::Off;
        c.share_heads = Switch::On;
        let s = c.train_settings();
        assert!(!s.calibration.pcs && !s.calibration.hc);
        assert_eq!(s.shared, vec![Group::BaseBody, Group::Head]);
    }
}
