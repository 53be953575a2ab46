//! Compares a model trained with random temporal-shift augmentation
//! against one trained without it, scoring both under systematic bolus
//! shifts of the test inputs. The augmented model's error stays nearly
//! flat across shifts; the unaugmented one degrades away from zero.
//!
//! Run with `cargo run --release --example shift_robustness`
//! (takes a few minutes: it trains two models).

use std::collections::BTreeMap;

use perfmap::data::{self, CaseRecord, MapKind, Split};
use perfmap::harness::{self, TrainConfig};
use perfmap::model::{ModelConfig, Variant};
use perfmap::phantom::{generate_case, DatasetSpec};
use perfmap::preprocess::{self, PreprocessConfig};

fn main() -> perfmap::Result<()> {
    let mut spec = DatasetSpec {
        count: 9,
        t0_jitter: (0.0, 6.0),
        lesions_per_case: (1, 2),
        lesion_delay: (1.5, 6.0),
        lesion_radius: (3.0, 6.0),
        ..DatasetSpec::default()
    };
    spec.base.seed = 41;
    spec.base.shape = (32, 2, 32, 32);
    spec.base.vessel_patch_center = (1, 16, 16);

    let pre = PreprocessConfig {
        target_spatial_shape: (2, 32, 32),
        target_frames: 32,
        shift_range: (-5, 10),
        ..PreprocessConfig::default()
    };

    let mut cases = Vec::new();
    for index in 0..spec.count {
        let (case, _truth) = generate_case(&spec, index)?;
        cases.push(preprocess::preprocess_case(&case, &pre)?);
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let manifest = data::assign_splits(&ids, (0.6, 0.2, 0.2), 42)?;
    let assigned: BTreeMap<&str, Split> = manifest
        .cases
        .iter()
        .map(|(id, split)| (id.as_str(), *split))
        .collect();
    for case in &mut cases {
        case.split = assigned[case.case_id.as_str()];
    }
    let by_split = |s: Split| -> Vec<&CaseRecord> {
        cases.iter().filter(|c| c.split == s).collect()
    };

    let base = ModelConfig {
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
        seed: 43,
        ..TrainConfig::default()
    };

    let shifts: Vec<i64> = (-3..=6).collect();
    let mut sweeps = Vec::new();
    for (label, cfg) in [
        ("with augmentation", base.clone()),
        ("without augmentation", base.clone().with_variant(Variant::B)),
    ] {
        println!("training {label} ...");
        let outcome = harness::train(
            &by_split(Split::Train),
            &by_split(Split::Val),
            &cfg,
            &schedule,
            &pre,
        )?;
        let sweep = harness::shift_sweep(
            &by_split(Split::Test),
            &outcome.params,
            &cfg,
            &cfg.loss_config(),
            &shifts,
        )?;
        sweeps.push((label, sweep));
    }

    println!();
    println!("shift  augmented MAEC  unaugmented MAEC");
    for (i, &k) in shifts.iter().enumerate() {
        println!(
            "{k:>5}  {:>14.4}  {:>16.4}",
            sweeps[0].1[i].1,
            sweeps[1].1[i].1
        );
    }
    for (label, sweep) in &sweeps {
        let lo = sweep.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
        let hi = sweep
            .iter()
            .map(|(_, m)| *m)
            .fold(f64::NEG_INFINITY, f64::max);
        println!("{label}: MAEC range {:.4}", hi - lo);
    }
    Ok(())
}
