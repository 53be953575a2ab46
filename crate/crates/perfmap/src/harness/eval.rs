//! Evaluation protocol: per-case predictions and error metrics, the
//! temporal-shift robustness sweep, and the five-variant ablation study.

use std::time::Instant;

use crate::data::{CaseRecord, Split};
use crate::error::{Error, Result};
use crate::harness::train::{train, TrainOutcome};
use crate::harness::{Dataset, TrainConfig};
use crate::model::net::forward;
use crate::model::{ModelConfig, ModelParams, PredictionResult, Variant};
use crate::objective::{self, LossConfig};
use crate::preprocess::{self, PreprocessConfig};

/// One case's evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEval {
    pub case_id: String,
    pub split: Split,
    pub maec: f64,
    pub voxels: usize,
    /// Wall-clock seconds of the forward pass. Reported separately from
    /// the metric table so reports stay bit-identical across runs.
    pub inference_seconds: f64,
}

/// Evaluation over a set of cases.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<CaseEval>,
    /// Unweighted mean of the per-case errors.
    pub mean_maec: f64,
    /// Voxel-pooled error (per-case errors weighted by voxel count).
    pub pooled_maec: f64,
}

impl EvalReport {
    /// Deterministic tab-separated table: one row per case plus summary
    /// rows. Timings are deliberately excluded.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case_id\tsplit\tvoxels\tmaec\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.case_id, c.split, c.voxels, c.maec
            ));
        }
        out.push_str(&format!("mean\t-\t-\t{}\n", self.mean_maec));
        out.push_str(&format!("pooled\t-\t-\t{}\n", self.pooled_maec));
        out
    }

    /// The wall-clock companion table to [`Self::to_tsv`].
    pub fn timings_tsv(&self) -> String {
        let mut out = String::from("case_id\tinference_seconds\n");
        for c in &self.cases {
            out.push_str(&format!("{}\t{:.6}\n", c.case_id, c.inference_seconds));
        }
        out
    }
}

/// Runs the model on one preprocessed case, timing the forward pass.
pub fn predict_case(
    case: &CaseRecord,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<(PredictionResult, f64)> {
    let start = Instant::now();
    let pred = forward(case, params, cfg)?;
    Ok((pred, start.elapsed().as_secs_f64()))
}

/// Evaluates the model on every given case against its stored target.
pub fn evaluate(
    cases: &[&CaseRecord],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Invalid("no cases to evaluate".to_string()));
    }
    let mut rows = Vec::with_capacity(cases.len());
    let mut weighted_sum = 0.0;
    let mut total_voxels = 0usize;
    for case in cases {
        let (pred, seconds) = predict_case(case, params, cfg)?;
        let target = preprocess::physical_target(case, cfg.target)?;
        let maec = objective::maec(target.view(), pred.p_hat.data().view(), loss_cfg)?;
        let voxels = target.len();
        weighted_sum += maec * voxels as f64;
        total_voxels += voxels;
        rows.push(CaseEval {
            case_id: case.case_id.clone(),
            split: case.split,
            maec,
            voxels,
            inference_seconds: seconds,
        });
    }
    let mean_maec = rows.iter().map(|r| r.maec).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        cases: rows,
        mean_maec,
        pooled_maec: weighted_sum / total_voxels as f64,
    })
}

/// Mean error under temporal shifts of the input sequence: each case is
/// shifted by `k` frames, predicted, and scored against its *unshifted*
/// target. Returns one `(k, mean_maec)` row per requested shift.
pub fn shift_sweep(
    cases: &[&CaseRecord],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    shifts: &[i64],
) -> Result<Vec<(i64, f64)>> {
    if cases.is_empty() {
        return Err(Error::Invalid("no cases to evaluate".to_string()));
    }
    let mut rows = Vec::with_capacity(shifts.len());
    for &k in shifts {
        let mut total = 0.0;
        for case in cases {
            let mut shifted = (*case).clone();
            shifted.sequence = preprocess::shift_temporal(&case.sequence, k)?;
            let pred = forward(&shifted, params, cfg)?;
            let target = preprocess::physical_target(case, cfg.target)?;
            total += objective::maec(target.view(), pred.p_hat.data().view(), loss_cfg)?;
        }
        rows.push((k, total / cases.len() as f64));
    }
    Ok(rows)
}

/// One ablation study row: a model variant with its validation error at
/// the selected checkpoint and its test error.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub val_maec: f64,
    pub test_maec: f64,
}

/// Renders ablation rows as a deterministic tab-separated table.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tdescription\tbest_epoch\tval_maec\ttest_maec\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.variant.label(),
            r.best_epoch,
            r.val_maec,
            r.test_maec
        ));
    }
    out
}

/// Trains every model variant on the same dataset with the same seed and
/// scores each on the test split, so differences between rows isolate
/// the ablated component.
pub fn run_ablations(
    dataset: &Dataset,
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pre_cfg: &PreprocessConfig,
) -> Result<Vec<AblationRow>> {
    let train_cases = dataset.split(Split::Train);
    let val_cases = dataset.split(Split::Val);
    let test_cases = dataset.split(Split::Test);
    if test_cases.is_empty() {
        return Err(Error::Invalid("test split is empty".to_string()));
    }
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = base_cfg.clone().with_variant(variant);
        let outcome: TrainOutcome = train(&train_cases, &val_cases, &cfg, train_cfg, pre_cfg)?;
        let val_maec = best_val_maec(&outcome);
        let report = evaluate(&test_cases, &outcome.params, &cfg, &cfg.loss_config())?;
        rows.push(AblationRow {
            variant,
            best_epoch: outcome.best_epoch,
            val_maec,
            test_maec: report.mean_maec,
        });
    }
    Ok(rows)
}

fn best_val_maec(outcome: &TrainOutcome) -> f64 {
    if outcome.best_epoch == 0 {
        outcome.initial_val_maec
    } else {
        outcome.epochs[outcome.best_epoch - 1].val_maec
    }
}
