//! Trains a small uncertainty-aware regression model on a generated
//! dataset for a few epochs and prints the learning-rate schedule,
//! training loss, and validation error per epoch.
//!
//! Run with `cargo run --release --example train_tiny` (about a minute).

use std::collections::BTreeMap;

use perfmap::data::{self, CaseRecord, MapKind, Split};
use perfmap::harness::{self, TrainConfig};
use perfmap::model::ModelConfig;
use perfmap::phantom::{generate_case, DatasetSpec};
use perfmap::preprocess::{self, PreprocessConfig};

fn main() -> perfmap::Result<()> {
    // A dataset small enough to train on in about a minute.
    let mut spec = DatasetSpec {
        count: 6,
        t0_jitter: (0.0, 6.0),
        lesions_per_case: (1, 2),
        lesion_delay: (1.5, 6.0),
        lesion_radius: (3.0, 6.0),
        ..DatasetSpec::default()
    };
    spec.base.seed = 21;
    spec.base.shape = (32, 2, 32, 32);
    spec.base.vessel_patch_center = (1, 16, 16);

    let pre = PreprocessConfig {
        target_spatial_shape: (2, 32, 32),
        target_frames: 32,
        smoothing_sigma: 1.0,
        shift_range: (-3, 6),
        ..PreprocessConfig::default()
    };

    let mut cases = Vec::new();
    for index in 0..spec.count {
        let (case, _truth) = generate_case(&spec, index)?;
        cases.push(preprocess::preprocess_case(&case, &pre)?);
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let manifest = data::assign_splits(&ids, (0.6, 0.2, 0.2), 22)?;
    let assigned: BTreeMap<&str, Split> = manifest
        .cases
        .iter()
        .map(|(id, split)| (id.as_str(), *split))
        .collect();
    for case in &mut cases {
        case.split = assigned[case.case_id.as_str()];
    }
    let train: Vec<&CaseRecord> = cases.iter().filter(|c| c.split == Split::Train).collect();
    let val: Vec<&CaseRecord> = cases.iter().filter(|c| c.split == Split::Val).collect();
    println!("{} train cases, {} val cases", train.len(), val.len());

    let model = ModelConfig {
        bcs_center: (1, 16, 16),
        bcs_patch: (8, 8),
        bcs_hidden_channels: 4,
        bcs_embed_dim: 8,
        encoder_channels: (8, 16, 32),
        spatial_channels: 16,
        dense_dim: 8,
        conv_dropout: 0.25,
        patch_rows: 4,
        ..ModelConfig::desk(MapKind::Tmax)
    };
    let schedule = TrainConfig {
        epochs: 8,
        seed: 23,
        ..TrainConfig::default()
    };

    let outcome = harness::train(&train, &val, &model, &schedule, &pre)?;

    println!();
    println!("epoch      lr  train loss  val MAEC [s]");
    println!("    0       -           -  {:.4}", outcome.initial_val_maec);
    for e in &outcome.epochs {
        println!(
            "{:>5}  {:.1e}  {:>10.4}  {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_maec
        );
    }
    println!();
    println!(
        "best epoch {} (validation MAEC {:.4}); the returned parameters \
         are that epoch's snapshot, not the final one",
        outcome.best_epoch,
        if outcome.best_epoch == 0 {
            outcome.initial_val_maec
        } else {
            outcome.epochs[outcome.best_epoch - 1].val_maec
        }
    );
    Ok(())
}
