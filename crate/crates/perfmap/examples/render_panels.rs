//! Trains briefly and renders a side-by-side figure for one slice of a
//! held-out case: target map, predicted map, and predicted variance.
//! Bright variance where the prediction is wrong is the behaviour the
//! uncertainty head is trained for.
//!
//! Run with `cargo run --release --example render_panels`.

use std::collections::BTreeMap;

use perfmap::data::{self, CaseRecord, MapKind, Split};
use perfmap::harness::{self, TrainConfig};
use perfmap::model::{net, ModelConfig};
use perfmap::phantom::{generate_case, DatasetSpec};
use perfmap::preprocess::{self, PreprocessConfig};

fn main() -> perfmap::Result<()> {
    let mut spec = DatasetSpec {
        count: 6,
        t0_jitter: (0.0, 4.0),
        lesions_per_case: (1, 2),
        lesion_radius: (3.0, 6.0),
        ..DatasetSpec::default()
    };
    spec.base.seed = 61;
    spec.base.shape = (24, 2, 32, 32);
    spec.base.vessel_patch_center = (1, 16, 16);

    let pre = PreprocessConfig {
        target_spatial_shape: (2, 32, 32),
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
    let manifest = data::assign_splits(&ids, (0.6, 0.2, 0.2), 62)?;
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
        bcs_center: (1, 16, 16),
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
        epochs: 4,
        seed: 63,
        ..TrainConfig::default()
    };
    let outcome = harness::train(
        &by_split(Split::Train),
        &by_split(Split::Val),
        &model,
        &schedule,
        &pre,
    )?;

    let test = by_split(Split::Test);
    let case = test[0];
    let pred = net::forward::<f32>(case, &outcome.params, &model)?;
    let path = std::env::temp_dir().join("perfmap_example_panels.png");
    harness::emit_panels(case, &pred, &model, 0, &path)?;
    println!(
        "rendered target | prediction | variance for {} slice 0 -> {}",
        case.case_id,
        path.display()
    );
    Ok(())
}
