//! Trains every model variant on one small dataset and prints the
//! resulting comparison table: the full model (A) against ablations that
//! drop augmentation (B), the spatial-correlation stage (C), the global
//! vessel-signal branch (D), or the loss weighting (E).
//!
//! Run with `cargo run --release --example ablation_table`
//! (takes a few minutes: it trains five models).

use std::collections::BTreeMap;

use perfmap::data::{self, MapKind, Split};
use perfmap::harness::{self, Dataset, TrainConfig};
use perfmap::model::ModelConfig;
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
    spec.base.seed = 51;
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
    let manifest = data::assign_splits(&ids, (0.6, 0.2, 0.2), 52)?;
    let assigned: BTreeMap<&str, Split> = manifest
        .cases
        .iter()
        .map(|(id, split)| (id.as_str(), *split))
        .collect();
    for case in &mut cases {
        case.split = assigned[case.case_id.as_str()];
    }
    let dataset = Dataset::from_cases(cases);

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
        epochs: 6,
        seed: 53,
        ..TrainConfig::default()
    };

    println!(
        "{} train / {} val / {} test cases; training five variants ...",
        dataset.split(Split::Train).len(),
        dataset.split(Split::Val).len(),
        dataset.split(Split::Test).len()
    );
    let rows = harness::run_ablations(&dataset, &base, &schedule, &pre)?;
    println!();
    print!("{}", harness::ablation_tsv(&rows));
    println!();
    println!(
        "Lower is better. E trains without loss weighting but is still \
         scored by the same clipped metric as the others."
    );
    Ok(())
}
