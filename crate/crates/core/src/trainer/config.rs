use std::fs;
use std::path::{Path, PathBuf};

use crate::contrastive::PclConfig;
use crate::error::{Error, Result};
use crate::objective::ObjectiveConfig;
use crate::separator::{parse_bool, SeparatorConfig};

/// Everything a training run needs, loadable from a `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub halving_start_epoch: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub segment_s: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Accepted for completeness; enabling it is rejected.
    pub speed_perturb: bool,
    pub objective: ObjectiveConfig,
    pub model: SeparatorConfig,
    pub checkpoint_dir: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = SeparatorConfig::default();
        let pcl = PclConfig {
            q: model.embed_dim,
            ..PclConfig::default()
        };
        Self {
            epochs: 60,
            lr0: 1.5e-4,
            halving_start_epoch: 20,
            patience: 3,
            clip_norm: 5.0,
            segment_s: 4.0,
            batch_size: 1,
            seed: 0,
            speed_perturb: false,
            objective: ObjectiveConfig {
                pcl,
                ..ObjectiveConfig::default()
            },
            model,
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_manifest: None,
            valid_manifest: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl TrainConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let pcl = &mut self.objective.pcl;
        match key {
            "epochs" => self.epochs = num(key, v)?,
            "lr0" | "lr" => self.lr0 = num(key, v)?,
            "halving_start_epoch" => self.halving_start_epoch = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "segment_s" => self.segment_s = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "speed_perturb" => self.speed_perturb = parse_bool(key, v)?,
            "clamp_db" => self.objective.clamp_db = num(key, v)?,
            "pcl_m" => pcl.m = num(key, v)?,
            "pcl_p" => pcl.p = num(key, v)?,
            "pcl_q" | "embed_dim" => {
                pcl.q = num(key, v)?;
                self.model.embed_dim = pcl.q;
            }
            "pcl_tau" => pcl.tau = num(key, v)?,
            "pcl_direction" => pcl.direction = v.parse()?,
            "lambda" => pcl.lambda = num(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "train_manifest" => self.train_manifest = Some(PathBuf::from(v)),
            "valid_manifest" => self.valid_manifest = Some(PathBuf::from(v)),
            _ => {
                if !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.pcl.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.segment_s > 0.0) {
            return Err(Error::Config(format!("segment_s must be positive, got {}", self.segment_s)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("only batch_size=1 is supported, got {}", self.batch_size)));
        }
        if self.speed_perturb {
            return Err(Error::Config("speed perturbation is not implemented".into()));
        }
        if self.objective.pcl.q != self.model.embed_dim {
            return Err(Error::Config(format!(
                "pcl_q {} differs from the projection width {}",
                self.objective.pcl.q, self.model.embed_dim
            )));
        }
        Ok(())
    }

    /// Settings recorded in checkpoint headers (manifest paths excluded).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let p = &self.objective.pcl;
        let mut kv: Vec<(String, String)> = [
            ("epochs", self.epochs.to_string()),
            ("lr0", self.lr0.to_string()),
            ("halving_start_epoch", self.halving_start_epoch.to_string()),
            ("patience", self.patience.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("segment_s", self.segment_s.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("clamp_db", self.objective.clamp_db.to_string()),
            ("pcl_m", p.m.to_string()),
            ("pcl_p", p.p.to_string()),
            ("pcl_tau", p.tau.to_string()),
            ("pcl_direction", p.direction.to_string()),
            ("lambda", p.lambda.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        kv.extend(self.model.to_kv());
        kv
    }
}
