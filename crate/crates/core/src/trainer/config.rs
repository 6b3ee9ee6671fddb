//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arcface::MarginConfig;
use crate::error::{Error, Result};
use crate::model::{default_dropout_rates, DEFAULT_BRANCHES, MAX_EMBED_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    CosineWithWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// A resolved learning-rate schedule over `total_steps` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn constant(lr: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            peak_lr: lr,
            min_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    /// Nominal epochs.
    pub epochs: usize,
    /// Each nominal epoch runs `floor(N / batch_size / divisor)` steps.
    pub steps_per_epoch_divisor: usize,
    pub batch_size: usize,
    pub lr_schedule: ScheduleKind,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Warmup length as a fraction of the stage's total steps.
    pub warmup_fraction: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    pub arcface_subcenters: usize,
    pub easy_margin: bool,
    pub num_branches: usize,
    pub embed_dim: usize,
    pub dropout_min: f64,
    pub dropout_max: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub dropout_seed: u64,
}

impl TrainConfig {
    /// Head-only training on frozen features: 200 nominal epochs at
    /// divisor 10, cosine schedule with warmup, s=30, m=0.3, k=3.
    pub fn stage1() -> Self {
        TrainConfig {
            stage: 1,
            epochs: 200,
            steps_per_epoch_divisor: 10,
            batch_size: 64,
            lr_schedule: ScheduleKind::CosineWithWarmup,
            peak_lr: 1e-3,
            min_lr: 0.0,
            warmup_fraction: 0.05,
            optimizer: OptimizerKind::Adam,
            adam: AdamHyper::default(),
            arcface_scale: 30.0,
            arcface_margin: 0.3,
            arcface_subcenters: 3,
            easy_margin: false,
            num_branches: DEFAULT_BRANCHES,
            embed_dim: MAX_EMBED_DIM,
            dropout_min: 0.1,
            dropout_max: 0.5,
            init_seed: 0,
            data_seed: 0,
            dropout_seed: 0,
        }
    }

    /// Whole-model fine-tuning: 10 nominal epochs at divisor 10, constant
    /// LR 1e-6, margin raised to 0.5.
    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            epochs: 10,
            lr_schedule: ScheduleKind::Constant,
            peak_lr: 1e-6,
            min_lr: 1e-6,
            warmup_fraction: 0.0,
            arcface_margin: 0.5,
            ..TrainConfig::stage1()
        }
    }

    pub fn for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(TrainConfig::stage1()),
            2 => Ok(TrainConfig::stage2()),
            s => Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self.data_seed = seed;
        self.dropout_seed = seed;
        self
    }

    pub fn margin(&self) -> MarginConfig {
        MarginConfig {
            scale: self.arcface_scale,
            margin: self.arcface_margin,
            subcenters: self.arcface_subcenters,
            easy_margin: self.easy_margin,
        }
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        let b = self.num_branches;
        if b <= 1 {
            return vec![self.dropout_min; b];
        }
        if self.dropout_min == 0.1 && self.dropout_max == 0.5 {
            return default_dropout_rates(b);
        }
        (0..b)
            .map(|i| {
                self.dropout_min + (self.dropout_max - self.dropout_min) * i as f64 / (b - 1) as f64
            })
            .collect()
    }

    pub fn schedule(&self, total_steps: u64) -> ScheduleSpec {
        match self.lr_schedule {
            ScheduleKind::Constant => ScheduleSpec::constant(self.peak_lr),
            ScheduleKind::CosineWithWarmup => ScheduleSpec {
                kind: ScheduleKind::CosineWithWarmup,
                peak_lr: self.peak_lr,
                min_lr: self.min_lr,
                warmup_steps: (self.warmup_fraction * total_steps as f64).round() as u64,
                total_steps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch_divisor == 0 {
            return bad("epochs, batch_size and steps_per_epoch_divisor must be >= 1".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.min_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if self.embed_dim == 0 || self.embed_dim > MAX_EMBED_DIM {
            return bad(format!(
                "embed_dim must lie in [1, {MAX_EMBED_DIM}], got {}",
                self.embed_dim
            ));
        }
        if self.num_branches == 0 {
            return bad("num_branches must be >= 1".into());
        }
        self.margin().validate()?;
        for p in self.dropout_rates() {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse value {value:?} for key `{key}`")))
        }
        match key {
            "stage" => self.stage = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch_divisor" => self.steps_per_epoch_divisor = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "constant" => ScheduleKind::Constant,
                    "cosine_with_warmup" => ScheduleKind::CosineWithWarmup,
                    _ => return Err(Error::Config(format!("unknown lr_schedule {value:?}"))),
                }
            }
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer {value:?}"))),
                }
            }
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "arcface_scale" => self.arcface_scale = parse(key, value)?,
            "arcface_margin" => self.arcface_margin = parse(key, value)?,
            "arcface_subcenters" => self.arcface_subcenters = parse(key, value)?,
            "easy_margin" => self.easy_margin = parse(key, value)?,
            "num_branches" => self.num_branches = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "dropout_min" => self.dropout_min = parse(key, value)?,
            "dropout_max" => self.dropout_max = parse(key, value)?,
            "seed" => {
                let s: u64 = parse(key, value)?;
                *self = self.clone().with_seed(s);
            }
            "init_seed" => self.init_seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "dropout_seed" => self.dropout_seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config document: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let sched = match self.lr_schedule {
            ScheduleKind::Constant => "constant",
            ScheduleKind::CosineWithWarmup => "cosine_with_warmup",
        };
        let opt = match self.optimizer {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage", self.stage.to_string());
        kv("epochs", self.epochs.to_string());
        kv(
            "steps_per_epoch_divisor",
            self.steps_per_epoch_divisor.to_string(),
        );
        kv("batch_size", self.batch_size.to_string());
        kv("lr_schedule", sched.into());
        kv("peak_lr", format!("{:e}", self.peak_lr));
        kv("min_lr", format!("{:e}", self.min_lr));
        kv("warmup_fraction", self.warmup_fraction.to_string());
        kv("optimizer", opt.into());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("eps", format!("{:e}", self.adam.eps));
        kv("arcface_scale", self.arcface_scale.to_string());
        kv("arcface_margin", self.arcface_margin.to_string());
        kv("arcface_subcenters", self.arcface_subcenters.to_string());
        kv("easy_margin", self.easy_margin.to_string());
        kv("num_branches", self.num_branches.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("dropout_min", self.dropout_min.to_string());
        kv("dropout_max", self.dropout_max.to_string());
        kv("init_seed", self.init_seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("dropout_seed", self.dropout_seed.to_string());
        s
    }
}
