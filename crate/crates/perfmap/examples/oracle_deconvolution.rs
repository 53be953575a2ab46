//! Recovers per-voxel delay from a noiseless phantom with the
//! block-circulant SVD deconvolution oracle and reports how close the
//! estimated Tmax map lands to the ground-truth bolus delay.
//!
//! Run with `cargo run --release --example oracle_deconvolution`.

use perfmap::data::MapKind;
use perfmap::phantom::{generate_case, DatasetSpec, TargetSource};

fn main() -> perfmap::Result<()> {
    let mut spec = DatasetSpec {
        count: 1,
        target_source: TargetSource::Oracle,
        t0_jitter: (0.0, 6.0),
        ..DatasetSpec::default()
    };
    spec.base.seed = 11;
    spec.base.shape = (40, 2, 48, 48);
    spec.base.vessel_patch_center = (1, 24, 24);
    spec.base.noise_sigma = 0.0; // noiseless: the oracle should nail it

    let (case, truth) = generate_case(&spec, 0)?;
    let tr = spec.base.tr;
    let est = case.targets[&MapKind::Tmax].data();
    let in_brain = truth.in_brain();

    let mut n = 0usize;
    let mut within_one_frame = 0usize;
    let mut abs_sum = 0.0f64;
    for ((&e, &d), &b) in est
        .iter()
        .zip(truth.delay_field.iter())
        .zip(in_brain.iter())
    {
        if !b {
            continue;
        }
        let err = (f64::from(e) - f64::from(d)).abs();
        n += 1;
        abs_sum += err;
        if err <= tr {
            within_one_frame += 1;
        }
    }

    println!("frame time           : {tr} s");
    println!("in-brain voxels      : {n}");
    println!("mean |Tmax - delay|  : {:.4} s", abs_sum / n as f64);
    println!(
        "within one frame time: {} ({:.2}%)",
        within_one_frame,
        100.0 * within_one_frame as f64 / n as f64
    );
    println!();
    println!(
        "The deconvolution inverts the arterial input from the vessel patch \
         out of every voxel curve; the residue peak position is the delay \
         estimate (Tmax) and its height the flow estimate (RBF)."
    );
    Ok(())
}
