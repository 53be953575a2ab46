//! Trains briefly, saves the best-validation checkpoint to disk, loads it
//! back, and scores the held-out test split — the same save/load/evaluate
//! round trip the command-line tool performs.
//!
//! Run with `cargo run --release --example evaluate_checkpoint`.

use std::collections::BTreeMap;

use perfmap::data::{self, CaseRecord, MapKind, Split};
use perfmap::harness::{self, TrainConfig};
use perfmap::model::{checkpoint, ModelConfig};
use perfmap::phantom::{generate_case, DatasetSpec};
use perfmap::preprocess::{self, PreprocessConfig};

fn main() -> perfmap::Result<()> {
    let mut spec = DatasetSpec {
        count: 6,
        t0_jitter: (0.0, 4.0),
        lesions_per_case: (1, 1),
        lesion_radius: (2.0, 4.0),
        ..DatasetSpec::default()
    };
    spec.base.seed = 31;
    spec.base.shape = (24, 2, 24, 24);
    spec.base.vessel_patch_center = (1, 12, 12);

    let pre = PreprocessConfig {
        target_spatial_shape: (2, 24, 24),
        target_frames: 24,
        shift_range: (-2, 4),
        ..PreprocessConfig::default()
    };

    let mut cases = Vec::new();
    for index in 0..spec.count {
        let (case, _truth) = generate_case(&spec, index)?;
        cases.push(preprocess::preprocess_case(&case, &pre)?);
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let manifest = data::assign_splits(&ids, (0.6, 0.2, 0.2), 32)?;
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

    let model = ModelConfig {
        bcs_center: (1, 12, 12),
        bcs_patch: (8, 8),
        bcs_hidden_channels: 2,
        bcs_embed_dim: 4,
        encoder_channels: (6, 8, 12),
        spatial_channels: 8,
        dense_dim: 6,
        patch_rows: 4,
        ..ModelConfig::desk(MapKind::Tmax)
    };
    let schedule = TrainConfig {
        epochs: 3,
        seed: 33,
        ..TrainConfig::default()
    };
    let outcome = harness::train(
        &by_split(Split::Train),
        &by_split(Split::Val),
        &model,
        &schedule,
        &pre,
    )?;

    // Round-trip the winning parameters through a checkpoint directory.
    let dir = std::env::temp_dir().join("perfmap_example_checkpoint");
    checkpoint::save(&dir, &outcome.params, &model)?;
    let (params, model) = checkpoint::load::<f32>(&dir)?;
    println!("checkpoint written to {}", dir.display());

    let report = harness::evaluate(&by_split(Split::Test), &params, &model, &model.loss_config())?;
    println!();
    print!("{}", report.to_tsv());
    println!();
    println!(
        "mean MAEC averages the per-case scores; pooled MAEC weights every \
         voxel equally. Both clip target and prediction to the clinically \
         relevant window before the absolute difference."
    );
    Ok(())
}
