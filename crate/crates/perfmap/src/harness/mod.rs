//! Experiment harness: the training loop, evaluation protocol, ablation
//! and shift-robustness studies, figure panels, and run configuration.

pub mod configfile;
pub mod eval;
pub mod optimizer;
pub mod panels;
pub mod train;

use std::path::Path;

use crate::data::{case_io, CaseRecord, DatasetManifest, Split};
use crate::error::{Error, Result};

pub use configfile::RunConfig;
pub use eval::{
    ablation_tsv, evaluate, predict_case, run_ablations, shift_sweep, AblationRow, CaseEval,
    EvalReport,
};
pub use optimizer::Adam;
pub use panels::emit_panels;
pub use train::{train, validation_maec, EpochStats, TrainOutcome};

/// Optimization schedule and loop constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Patches per optimizer step.
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Epoch count after which the learning rate halves (repeatedly).
    pub lr_halving_period: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr0: 5e-4,
            lr_halving_period: 4,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive and finite (got {})",
                self.lr0
            )));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::Config(
                "lr_halving_period must be positive".to_string(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Learning rate of the zero-based `epoch`:
    /// `lr0 · 2^(−floor(epoch / period))`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5_f64.powi((epoch / self.lr_halving_period) as i32)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("lr0".to_string(), self.lr0.to_string()),
            (
                "lr_halving_period".to_string(),
                self.lr_halving_period.to_string(),
            ),
            ("epochs".to_string(), self.epochs.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        match key {
            "batch_size" => self.batch_size = value.trim().parse().map_err(|_| bad())?,
            "lr0" => self.lr0 = value.trim().parse().map_err(|_| bad())?,
            "lr_halving_period" => {
                self.lr_halving_period = value.trim().parse().map_err(|_| bad())?
            }
            "epochs" => self.epochs = value.trim().parse().map_err(|_| bad())?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            other => {
                return Err(Error::Config(format!(
                    "unknown training config key {other:?}"
                )))
            }
        }
        Ok(())
    }
}

/// An in-memory dataset with split assignments, the unit every harness
/// operation works on.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<CaseRecord>,
}

impl Dataset {
    pub fn from_cases(cases: Vec<CaseRecord>) -> Self {
        Self { cases }
    }

    /// Reads every case listed in `manifest` from `dir/<case_id>/`. The
    /// manifest's split assignment overrides whatever the case meta
    /// recorded, so re-splitting never requires rewriting case data.
    pub fn load(dir: &Path, manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for (case_id, split) in &manifest.cases {
            let mut case = case_io::read_case(&dir.join(case_id))?;
            case.split = *split;
            cases.push(case);
        }
        Ok(Self { cases })
    }

    pub fn split(&self, split: Split) -> Vec<&CaseRecord> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }
}
