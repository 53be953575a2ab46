//! Shows the pieces of the training objective on hand-checkable numbers:
//! the heteroscedastic Laplace negative log-likelihood, the clinical-band
//! pair weighting, and the clipped evaluation metric.
//!
//! Run with `cargo run --example uncertainty_loss`.

use ndarray::array;
use perfmap::objective::{self, LossConfig};

fn main() -> perfmap::Result<()> {
    let cfg = LossConfig::default();

    // The per-voxel loss: log b̂ + |p − p̂| / b̂. A large error under a
    // small predicted scale is expensive; admitting uncertainty (larger
    // b̂) trades a flat log penalty for error tolerance.
    println!("target p, prediction p̂, scale b̂  ->  Laplace NLL");
    for (p, p_hat, b_hat) in [(5.0, 3.0, 2.0), (5.0, 3.0, 0.5), (5.0, 4.9, 0.5)] {
        let nll = objective::laplace_nll(p, p_hat, b_hat)?;
        println!("  p={p:4}  p̂={p_hat:4}  b̂={b_hat:4}  ->  {nll:8.4}");
    }
    println!();

    // Pair weighting: full weight while either the target or the
    // prediction band touches the clinically relevant window, reduced
    // weight once both are entirely outside it.
    println!("target p, prediction p̂  ->  weight");
    for (p, p_hat) in [(5.0, 60.0), (45.0, 38.0), (45.0, 60.0), (-3.0, -1.0)] {
        let w = objective::loss_weight(p, p_hat, &cfg);
        println!("  p={p:5}  p̂={p_hat:5}  ->  {w}");
    }
    println!();

    // The evaluation metric clips both maps into the reporting window
    // before the absolute difference, so errors far outside it cannot
    // dominate the mean.
    let target = array![[[3.0f32, 25.0, 14.0, 31.0]]];
    let pred = array![[[5.0f32, 22.0, 19.5, 40.0]]];
    let maec = objective::maec(target.view(), pred.view(), &cfg)?;
    let mae = (&target - &pred).mapv(f32::abs).mean().unwrap();
    println!("plain MAE  : {mae:.4}");
    println!("clipped MAEC: {maec:.4}");
    println!();
    println!(
        "Defaults: clinical band [{}, {}] s with outside weight {}, \
         reporting clip to [{}, {}] s.",
        cfg.importance_band.0,
        cfg.importance_band.1,
        cfg.outside_weight,
        cfg.maec_clip.0,
        cfg.maec_clip.1
    );
    Ok(())
}
