//! Optimisation settings and the learning-rate / loss-weight schedules.

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::Preset;
use crate::pose::LossWeights;
use crate::tensor::SgdConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_2d: f64,
    /// `λ2D` from `lambda_switch_epoch` on (0-based).
    pub lambda_2d_late: f64,
    pub lambda_switch_epoch: usize,
    pub lambda_3d: f64,
    pub seed: u64,
    /// Epochs between test evaluations and checkpoints.
    pub eval_period: usize,
    /// Iterations per smoothed training-loss record.
    pub log_period: usize,
    /// Random crops plus PCA colour noise; off means centre crops only.
    pub augment: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 28,
            batch: 128,
            lr0: 0.01,
            lr_halving_period: 4,
            momentum: 0.9,
            weight_decay: 0.001,
            lambda_2d: 0.1,
            lambda_2d_late: 0.01,
            lambda_switch_epoch: 16,
            lambda_3d: 0.5,
            seed: 0,
            eval_period: 4,
            log_period: 50,
            augment: true,
        }
    }

    /// Ten short epochs; the `λ2D` drop keeps its relative position.
    pub fn desk() -> Self {
        TrainConfig { epochs: 10, batch: 32, lambda_switch_epoch: 6, eval_period: 2, ..Self::paper() }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("lr_halving_period", self.lr_halving_period),
            ("eval_period", self.eval_period),
            ("log_period", self.log_period),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must hold at least 2 samples for batchnorm".into()));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_2d", self.lambda_2d),
            ("lambda_2d_late", self.lambda_2d_late),
            ("lambda_3d", self.lambda_3d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum {} must be below 1", self.momentum)));
        }
        if self.lambda_switch_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "lambda_switch_epoch {} is not before the last epoch ({} epochs)",
                self.lambda_switch_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues, preset: Preset) -> Result<Self> {
        let mut c = Self::preset(preset);
        for (key, slot) in [
            ("epochs", &mut c.epochs),
            ("batch", &mut c.batch),
            ("lr_halving_period", &mut c.lr_halving_period),
            ("lambda_switch_epoch", &mut c.lambda_switch_epoch),
            ("eval_period", &mut c.eval_period),
            ("log_period", &mut c.log_period),
        ] {
            if let Some(v) = kv.take(key)? {
                *slot = v;
            }
        }
        for (key, slot) in [
            ("lr0", &mut c.lr0),
            ("momentum", &mut c.momentum),
            ("weight_decay", &mut c.weight_decay),
            ("lambda_2d", &mut c.lambda_2d),
            ("lambda_2d_late", &mut c.lambda_2d_late),
            ("lambda_3d", &mut c.lambda_3d),
        ] {
            if let Some(v) = kv.take(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.take("seed")? {
            c.seed = v;
        }
        if let Some(v) = kv.take("augment")? {
            c.augment = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig { lr: lr_at(epoch, self), momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// `lr0 · 0.5^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, c: &TrainConfig) -> f64 {
    c.lr0 * 0.5f64.powi((epoch / c.lr_halving_period) as i32)
}

pub fn lambdas_at(epoch: usize, c: &TrainConfig) -> LossWeights {
    let l2 = if epoch < c.lambda_switch_epoch { c.lambda_2d } else { c.lambda_2d_late };
    LossWeights { lambda_2d: l2, lambda_3d: c.lambda_3d }
}
