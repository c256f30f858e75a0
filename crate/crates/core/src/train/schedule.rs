//! Learning-rate schedules, per-group learning rates and gradual unfreezing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Stlr,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Stlr => "stlr",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(ScheduleKind::Constant),
            "stlr" => Ok(ScheduleKind::Stlr),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Slanted triangular schedule: linear warm-up over the first `cut_frac` of
/// the steps, then linear decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StlrConfig {
    pub total_steps: usize,
    pub cut_frac: f64,
    pub ratio: f64,
    pub lr_max: f64,
    pub lr_floor: f64,
}

impl StlrConfig {
    pub fn new(total_steps: usize) -> Self {
        Self {
            total_steps,
            cut_frac: 0.1,
            ratio: 32.0,
            lr_max: 1e-2,
            lr_floor: 1e-8,
        }
    }

    pub fn cut(&self) -> usize {
        (self.total_steps as f64 * self.cut_frac).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("STLR needs at least one step".into()));
        }
        if !(self.cut_frac > 0.0 && self.cut_frac < 1.0) {
            return Err(Error::Config(format!("cut_frac {} not in (0, 1)", self.cut_frac)));
        }
        if !(self.ratio > 1.0) {
            return Err(Error::Config(format!("ratio {} must exceed 1", self.ratio)));
        }
        if !(self.lr_floor < self.lr_max) {
            return Err(Error::Config("lr_floor must be below lr_max".into()));
        }
        Ok(())
    }
}

pub fn stlr(t: usize, cfg: &StlrConfig) -> Result<f64> {
    cfg.validate()?;
    let total = cfg.total_steps;
    if t > total {
        return Err(Error::Config(format!("step {t} beyond schedule length {total}")));
    }
    let cut = cfg.cut();
    let p = if t < cut {
        t as f64 / cut as f64
    } else {
        1.0 - (t - cut) as f64 / (total - cut) as f64
    };
    // lr_max·(1 + p(r−1))/r rearranged so that p = 1 yields lr_max exactly
    // and rounding keeps the curve monotone on both sides of the cut
    let drop = (1.0 - p) * (1.0 - 1.0 / cfg.ratio);
    Ok(cfg.lr_floor.max(cfg.lr_max - cfg.lr_max * drop))
}

/// `base / factor^ℓ` for groups `ℓ = 0..groups`, group 0 being the classifier.
pub fn discriminative_lrs(base: f64, factor: f64, groups: usize) -> Vec<f64> {
    let mut lr = base;
    (0..groups)
        .map(|_| {
            let cur = lr;
            lr /= factor;
            cur
        })
        .collect()
}

/// Classifier-first layer groups, given as parameter-name prefixes, unfrozen
/// one more per `epochs_per_stage` epochs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfreezePlan {
    pub groups: Vec<String>,
    pub epochs_per_stage: usize,
}

impl UnfreezePlan {
    pub fn new(groups: Vec<String>, epochs_per_stage: usize) -> Result<Self> {
        if groups.is_empty() || epochs_per_stage == 0 {
            return Err(Error::Config("unfreeze plan needs groups and epochs_per_stage >= 1".into()));
        }
        Ok(Self {
            groups,
            epochs_per_stage,
        })
    }

    pub fn stages(&self) -> usize {
        self.groups.len()
    }

    /// Number of unfrozen groups during zero-based `epoch`.
    pub fn unfrozen_at(&self, epoch: usize) -> usize {
        (1 + epoch / self.epochs_per_stage).min(self.groups.len())
    }

    /// Trainable mask over `store` with the first `unfrozen` groups active.
    pub fn mask(&self, store: &ParamStore, unfrozen: usize) -> Vec<bool> {
        store
            .iter()
            .map(|(_, name, _)| group_of(&self.groups, name) < unfrozen)
            .collect()
    }
}

/// Index of the first group whose prefix matches `name`; names matching no
/// group fall into the last one.
pub fn group_of(groups: &[String], name: &str) -> usize {
    groups
        .iter()
        .position(|g| name.starts_with(g.as_str()))
        .unwrap_or(groups.len().saturating_sub(1))
}
