//! The training loop: row-band patches, temporal-shift augmentation,
//! Adam with a halving learning-rate schedule, and best-validation
//! checkpoint selection.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CaseRecord, PerfusionSequence};
use crate::error::{Error, Result};
use crate::harness::optimizer::Adam;
use crate::harness::TrainConfig;
use crate::model::net::{
    backward_patch, band_signal, extract_bcs_patch, forward, forward_patch, target_scale,
    time_channel,
};
use crate::model::{ModelConfig, ModelParams};
use crate::objective::{self, LossConfig};
use crate::preprocess::{self, PreprocessConfig};
use crate::util::mix_seed;

/// Seed-stream tags so the per-epoch random draws (augmentation shifts,
/// patch order, dropout) never share a stream.
const STREAM_SHIFT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_DROPOUT: u64 = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based: stats describe the model *after* this many epochs.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_maec: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation error.
    pub params: ModelParams<f32>,
    /// 0 means the untrained initialization was never improved on.
    pub best_epoch: usize,
    /// Validation error of the untrained initialization.
    pub initial_val_maec: f64,
    pub epochs: Vec<EpochStats>,
}

/// Per-case constants that do not change across epochs.
struct CaseConstants {
    times: Array1<f32>,
    t_mean: f64,
    t_std: f64,
    target: Array3<f32>,
    slices: usize,
    rows: usize,
    cols: usize,
}

fn case_constants(case: &CaseRecord, cfg: &ModelConfig) -> Result<CaseConstants> {
    let (t_mean, t_std) = target_scale(case, cfg)?;
    let (_frames, slices, rows, cols) = case.sequence.data().dim();
    if rows % cfg.patch_rows != 0 {
        return Err(Error::Invalid(format!(
            "patch rows {} do not divide volume rows {rows}",
            cfg.patch_rows
        )));
    }
    Ok(CaseConstants {
        times: time_channel(case.sequence.frame_times()),
        t_mean,
        t_std,
        target: preprocess::physical_target(case, cfg.target)?,
        slices,
        rows,
        cols,
    })
}

/// Mean voxelwise clipped error over a set of cases, computed with the
/// inference path (no dropout).
pub fn validation_maec(
    cases: &[&CaseRecord],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Invalid("validation split is empty".to_string()));
    }
    let mut total = 0.0;
    for case in cases {
        let pred = forward(case, params, cfg)?;
        let target = preprocess::physical_target(case, cfg.target)?;
        total += objective::maec(target.view(), pred.p_hat.data().view(), loss_cfg)?;
    }
    Ok(total / cases.len() as f64)
}

/// Trains a freshly initialized model on `train_cases`, tracking the
/// validation error after every epoch, and returns the parameters of
/// the best-validation epoch. Cases must already be preprocessed.
pub fn train(
    train_cases: &[&CaseRecord],
    val_cases: &[&CaseRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pre_cfg: &PreprocessConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Invalid("training split is empty".to_string()));
    }
    if val_cases.is_empty() {
        return Err(Error::Invalid("validation split is empty".to_string()));
    }

    let seed = train_cfg.seed;
    let loss_cfg = model_cfg.loss_config();
    let constants: Vec<CaseConstants> = train_cases
        .iter()
        .map(|c| case_constants(c, model_cfg))
        .collect::<Result<_>>()?;

    // Every (case, slice, band) patch; the per-epoch order is a seeded
    // shuffle of this list.
    let mut patch_template: Vec<(usize, usize, usize)> = Vec::new();
    for (ci, c) in constants.iter().enumerate() {
        for z in 0..c.slices {
            for band in 0..(c.rows / model_cfg.patch_rows) {
                patch_template.push((ci, z, band * model_cfg.patch_rows));
            }
        }
    }

    let mut params = ModelParams::<f32>::init(model_cfg, seed)?;
    let mut opt = Adam::new(&params);

    let initial_val_maec = validation_maec(val_cases, &params, model_cfg, &loss_cfg)?;
    let mut best_maec = initial_val_maec;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut epochs = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let lr = train_cfg.learning_rate(epoch);

        // One temporal shift per case per epoch; the whole case (and its
        // bolus patch) sees the same shifted sequence.
        let mut epoch_cases: Vec<(Option<PerfusionSequence>, Option<Array4<f32>>)> =
            Vec::with_capacity(train_cases.len());
        for (ci, case) in train_cases.iter().enumerate() {
            let shifted = if model_cfg.use_augmentation {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    seed,
                    STREAM_SHIFT,
                    epoch as u64,
                    ci as u64,
                ]));
                let k = preprocess::sample_augmentation(&mut rng, pre_cfg);
                Some(preprocess::shift_temporal(&case.sequence, k)?)
            } else {
                None
            };
            let bcs = if model_cfg.use_bcs {
                let seq = shifted.as_ref().unwrap_or(&case.sequence);
                Some(extract_bcs_patch::<f32>(seq.data(), model_cfg)?)
            } else {
                None
            };
            epoch_cases.push((shifted, bcs));
        }

        let mut order = patch_template.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut patch_counter = 0u64;
        for (step, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut batch_grads = ModelParams::<f32>::zeros(model_cfg)?;
            let inv = 1.0 / batch.len() as f32;
            for &(ci, z, row0) in batch {
                let c = &constants[ci];
                let (shifted, bcs) = &epoch_cases[ci];
                let seq = shifted.as_ref().unwrap_or(&train_cases[ci].sequence);
                let signal = band_signal::<f32>(seq.data(), z, row0, model_cfg.patch_rows);

                let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    seed,
                    STREAM_DROPOUT,
                    epoch as u64,
                    patch_counter,
                ]));
                patch_counter += 1;

                let (out, tape) = forward_patch(
                    &params,
                    model_cfg,
                    &signal,
                    &c.times,
                    bcs.as_ref(),
                    model_cfg.patch_rows,
                    c.cols,
                    Some(&mut dropout_rng),
                )?;

                // Physical-scale prediction and uncertainty.
                let n = out.nrows();
                let mut p_hat = Array1::<f32>::zeros(n);
                let mut b_hat = Array1::<f32>::zeros(n);
                for i in 0..n {
                    p_hat[i] = (c.t_mean + c.t_std * out[[i, 0]] as f64) as f32;
                    b_hat[i] =
                        ((c.t_std * (out[[i, 1]] as f64).exp()) as f32).max(f32::MIN_POSITIVE);
                }
                let target_band = c
                    .target
                    .slice(ndarray::s![z, row0..row0 + model_cfg.patch_rows, ..])
                    .iter()
                    .copied()
                    .collect::<Array1<f32>>();

                let (loss, d_p_hat, d_b_hat) = objective::loss_and_grad(
                    target_band.view(),
                    p_hat.view(),
                    b_hat.view(),
                    &loss_cfg,
                )?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training diverged at epoch {} step {step}",
                        epoch + 1
                    )));
                }
                loss_sum += loss;

                // Back through the destandardization onto the two heads.
                let mut d_out = Array2::<f32>::zeros((n, 2));
                for i in 0..n {
                    d_out[[i, 0]] = d_p_hat[i] * c.t_std as f32;
                    d_out[[i, 1]] = d_b_hat[i] * b_hat[i];
                }
                let grads = backward_patch(&params, model_cfg, &tape, &d_out)?;
                batch_grads.add_scaled(&grads, inv);
            }
            opt.step(&mut params, &batch_grads, lr)?;
        }
        params
            .check_finite()
            .map_err(|_| Error::NonFinite(format!("training diverged at epoch {}", epoch + 1)))?;

        let val_maec = validation_maec(val_cases, &params, model_cfg, &loss_cfg)?;
        let train_loss = loss_sum / patch_template.len() as f64;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_maec,
        });
        if val_maec < best_maec {
            best_maec = val_maec;
            best_params = params.clone();
            best_epoch = epoch + 1;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        initial_val_maec,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MapKind;
    use crate::phantom::{generate_case, DatasetSpec};

    fn tiny_model_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk(MapKind::Tmax);
        cfg.bcs_center = (1, 8, 8);
        cfg.bcs_patch = (4, 4);
        cfg.bcs_hidden_channels = 2;
        cfg.bcs_embed_dim = 3;
        cfg.encoder_channels = (4, 6, 8);
        cfg.encoder_kernel_sizes = (3, 3, 3);
        cfg.spatial_channels = 6;
        cfg.dense_dim = 4;
        cfg.patch_rows = 8;
        cfg.conv_dropout = 0.2;
        cfg
    }

    fn tiny_dataset(count: usize) -> (Vec<CaseRecord>, PreprocessConfig) {
        let mut spec = DatasetSpec::default();
        spec.count = count;
        spec.base.shape = (12, 2, 16, 16);
        spec.base.vessel_patch_center = (1, 8, 8);
        spec.base.seed = 41;
        spec.t0_jitter = (0.0, 3.0);
        let mut pre = PreprocessConfig::default();
        pre.target_frames = 16;
        pre.target_spatial_shape = (2, 16, 16);
        pre.shift_range = (-2, 3);
        let cases = (0..count)
            .map(|i| {
                let (case, _) = generate_case(&spec, i).unwrap();
                preprocess::preprocess_case(&case, &pre).unwrap()
            })
            .collect();
        (cases, pre)
    }

    #[test]
    fn loss_decreases_and_trace_is_deterministic() {
        let (cases, pre) = tiny_dataset(4);
        let train_refs: Vec<&CaseRecord> = cases[..3].iter().collect();
        let val_refs: Vec<&CaseRecord> = cases[3..].iter().collect();
        let cfg = tiny_model_cfg();
        let mut tcfg = TrainConfig::default();
        tcfg.epochs = 3;
        tcfg.seed = 5;

        let a = train(&train_refs, &val_refs, &cfg, &tcfg, &pre).unwrap();
        let b = train(&train_refs, &val_refs, &cfg, &tcfg, &pre).unwrap();

        assert_eq!(a.epochs, b.epochs, "training trace must be reproducible");
        assert_eq!(a.best_epoch, b.best_epoch);
        assert!(a.initial_val_maec.is_finite());
        assert_eq!(a.epochs.len(), 3);
        assert!(
            a.epochs[2].train_loss < a.epochs[0].train_loss,
            "loss should decrease: {:?}",
            a.epochs
        );

        // Checkpoint selection points at the recorded minimum.
        let best = a
            .epochs
            .iter()
            .map(|e| e.val_maec)
            .fold(a.initial_val_maec, f64::min);
        if a.best_epoch == 0 {
            assert_eq!(best, a.initial_val_maec);
        } else {
            assert_eq!(best, a.epochs[a.best_epoch - 1].val_maec);
        }
    }

    #[test]
    fn different_seeds_give_different_runs() {
        let (cases, pre) = tiny_dataset(3);
        let train_refs: Vec<&CaseRecord> = cases[..2].iter().collect();
        let val_refs: Vec<&CaseRecord> = cases[2..].iter().collect();
        let cfg = tiny_model_cfg();
        let mut tcfg = TrainConfig::default();
        tcfg.epochs = 1;
        tcfg.seed = 1;
        let a = train(&train_refs, &val_refs, &cfg, &tcfg, &pre).unwrap();
        tcfg.seed = 2;
        let b = train(&train_refs, &val_refs, &cfg, &tcfg, &pre).unwrap();
        assert_ne!(a.epochs[0].train_loss, b.epochs[0].train_loss);
    }

    #[test]
    fn rejects_empty_splits_and_raw_cases() {
        let (cases, pre) = tiny_dataset(3);
        let refs: Vec<&CaseRecord> = cases.iter().collect();
        let cfg = tiny_model_cfg();
        let tcfg = TrainConfig::default();
        assert!(train(&[], &refs, &cfg, &tcfg, &pre)
            .unwrap_err()
            .to_string()
            .contains("training split is empty"));
        assert!(train(&refs, &[], &cfg, &tcfg, &pre)
            .unwrap_err()
            .to_string()
            .contains("validation split is empty"));

        let mut spec = DatasetSpec::default();
        spec.base.shape = (12, 2, 16, 16);
        spec.base.vessel_patch_center = (1, 8, 8);
        let (raw, _) = generate_case(&spec, 0).unwrap();
        let err = train(&[&raw], &refs, &cfg, &tcfg, &pre).unwrap_err();
        assert!(
            err.to_string().contains("unpreprocessed"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn divergent_learning_rate_aborts() {
        let (cases, pre) = tiny_dataset(3);
        let train_refs: Vec<&CaseRecord> = cases[..2].iter().collect();
        let val_refs: Vec<&CaseRecord> = cases[2..].iter().collect();
        let cfg = tiny_model_cfg();
        let mut tcfg = TrainConfig::default();
        tcfg.epochs = 2;
        tcfg.lr0 = 1e6;
        match train(&train_refs, &val_refs, &cfg, &tcfg, &pre) {
            Err(e) => assert!(e.to_string().contains("diverged"), "unexpected error: {e}"),
            Ok(out) => panic!(
                "expected divergence, finished with val maec {:?}",
                out.epochs.last().map(|e| e.val_maec)
            ),
        }
    }
}
