//! The training objective and evaluation metric.
//!
//! The loss is a heteroscedastic Laplace negative log-likelihood,
//!
//! ```text
//! l′(p, p̂, b̂) = log b̂ + |p − p̂| / b̂
//! ```
//!
//! weighted per voxel by how much of the clinically relevant value band
//! the pair (p, p̂) touches, and averaged over voxels. The evaluation
//! metric is the mean absolute error with both maps clipped to a fixed
//! display window (MAEC). All values entering these functions are in
//! physical units (seconds for Tmax/TTP); predictions are destandardized
//! first, with the uncertainty scale b̂ multiplied by the same target std.

use ndarray::{Array, ArrayView, Dimension};
use num_traits::Float;

use crate::error::{Error, Result};

/// Which loss the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Importance-weighted Laplace negative log-likelihood (the default).
    WeightedLaplaceNll,
    /// Plain mean squared error, used by the TTP/RBF variant. The
    /// uncertainty output is ignored under this loss.
    Squared,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::WeightedLaplaceNll => "weighted_laplace_nll",
            LossKind::Squared => "squared",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "weighted_laplace_nll" => Ok(LossKind::WeightedLaplaceNll),
            "squared" => Ok(LossKind::Squared),
            other => Err(Error::Config(format!(
                "unknown loss kind {other:?} (expected weighted_laplace_nll or squared)"
            ))),
        }
    }
}

/// Constants of the objective.
///
/// Disabling loss weighting (ablation variant E) is expressed by setting
/// both weights to 1.0 — see [`LossConfig::unweighted`] — so the loss
/// formula itself never branches on a flag.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Closed value band that counts as clinically important, in
    /// physical units. Values touching it get `inside_weight`.
    pub importance_band: (f64, f64),
    pub inside_weight: f64,
    pub outside_weight: f64,
    /// Clipping window applied to both maps before the MAEC metric.
    pub maec_clip: (f64, f64),
    pub loss_kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            importance_band: (0.0, 40.0),
            inside_weight: 1.0,
            outside_weight: 0.1,
            maec_clip: (0.0, 20.0),
            loss_kind: LossKind::WeightedLaplaceNll,
        }
    }
}

impl LossConfig {
    /// The default objective with importance weighting disabled
    /// (every voxel weighs 1.0).
    pub fn unweighted() -> Self {
        Self {
            inside_weight: 1.0,
            outside_weight: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.importance_band) || !ordered(self.maec_clip) {
            return Err(Error::Invalid(
                "importance band and clip window must be well-ordered finite intervals".into(),
            ));
        }
        if !(self.inside_weight > 0.0 && self.outside_weight > 0.0) {
            return Err(Error::Invalid("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Importance of a single map value: `inside_weight` if it lies in the
/// closed band, `outside_weight` otherwise.
pub fn importance<F: Float>(z: F, cfg: &LossConfig) -> F {
    let lo = F::from(cfg.importance_band.0).unwrap();
    let hi = F::from(cfg.importance_band.1).unwrap();
    if z >= lo && z <= hi {
        F::from(cfg.inside_weight).unwrap()
    } else {
        F::from(cfg.outside_weight).unwrap()
    }
}

/// Weight of a (target, prediction) pair: the maximum importance over the
/// closed interval they span.
///
/// Because importance is a two-level step function, the maximum collapses
/// to a closed form: the pair gets `inside_weight` exactly when
/// `[min(p,p̂), max(p,p̂)]` intersects the band.
pub fn loss_weight<F: Float>(p: F, p_hat: F, cfg: &LossConfig) -> F {
    let lo = p.min(p_hat);
    let hi = p.max(p_hat);
    let band_lo = F::from(cfg.importance_band.0).unwrap();
    let band_hi = F::from(cfg.importance_band.1).unwrap();
    if hi >= band_lo && lo <= band_hi {
        F::from(cfg.inside_weight).unwrap()
    } else {
        F::from(cfg.outside_weight).unwrap()
    }
}

/// Laplace negative log-likelihood of target `p` under scale `b_hat`
/// centered at `p_hat`, dropping the constant `log 2`.
pub fn laplace_nll<F: Float>(p: F, p_hat: F, b_hat: F) -> Result<F> {
    if !(b_hat > F::zero()) {
        return Err(Error::Invalid(format!(
            "Laplace scale must be positive, got {}",
            b_hat.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(b_hat.ln() + (p - p_hat).abs() / b_hat)
}

/// Mean over voxels of the weighted per-voxel loss, in physical units.
///
/// Under [`LossKind::Squared`] this is the plain mean of `(p − p̂)²` and
/// `b_hat_map` is ignored.
pub fn weighted_loss<F: Float, D: Dimension>(
    p_map: ArrayView<'_, F, D>,
    p_hat_map: ArrayView<'_, F, D>,
    b_hat_map: ArrayView<'_, F, D>,
    cfg: &LossConfig,
) -> Result<f64> {
    check_aligned(&[p_map.shape(), p_hat_map.shape(), b_hat_map.shape()])?;
    if p_map.is_empty() {
        return Err(Error::Invalid("loss over an empty map".into()));
    }
    let mut sum = 0.0f64;
    match cfg.loss_kind {
        LossKind::WeightedLaplaceNll => {
            for ((&p, &p_hat), &b_hat) in p_map.iter().zip(p_hat_map.iter()).zip(b_hat_map.iter())
            {
                let nll = laplace_nll(p, p_hat, b_hat)?;
                sum += (loss_weight(p, p_hat, cfg) * nll).to_f64().unwrap();
            }
        }
        LossKind::Squared => {
            for (&p, &p_hat) in p_map.iter().zip(p_hat_map.iter()) {
                let d = (p - p_hat).to_f64().unwrap();
                sum += d * d;
            }
        }
    }
    Ok(sum / p_map.len() as f64)
}

/// Value and per-voxel gradient of [`weighted_loss`] with respect to the
/// prediction and the scale, both in physical units.
///
/// The returned arrays already include the `1/N` of the mean. The weight
/// `W` is piecewise constant, so its jumps contribute nothing to the
/// gradient; the subgradient of `|p − p̂|` at the kink is taken as 0.
/// Under [`LossKind::Squared`] the scale gradient is identically zero.
#[allow(clippy::type_complexity)]
pub fn loss_and_grad<F: Float, D: Dimension>(
    p_map: ArrayView<'_, F, D>,
    p_hat_map: ArrayView<'_, F, D>,
    b_hat_map: ArrayView<'_, F, D>,
    cfg: &LossConfig,
) -> Result<(f64, Array<F, D>, Array<F, D>)> {
    check_aligned(&[p_map.shape(), p_hat_map.shape(), b_hat_map.shape()])?;
    if p_map.is_empty() {
        return Err(Error::Invalid("loss over an empty map".into()));
    }
    let inv_n = F::from(1.0 / p_map.len() as f64).unwrap();
    let mut d_p_hat = Array::<F, D>::zeros(p_hat_map.raw_dim());
    let mut d_b_hat = Array::<F, D>::zeros(b_hat_map.raw_dim());
    let mut sum = 0.0f64;
    match cfg.loss_kind {
        LossKind::WeightedLaplaceNll => {
            for (((&p, &p_hat), &b_hat), (dp, db)) in p_map
                .iter()
                .zip(p_hat_map.iter())
                .zip(b_hat_map.iter())
                .zip(d_p_hat.iter_mut().zip(d_b_hat.iter_mut()))
            {
                let w = loss_weight(p, p_hat, cfg);
                let nll = laplace_nll(p, p_hat, b_hat)?;
                sum += (w * nll).to_f64().unwrap();
                let resid = p - p_hat;
                let sign = if resid > F::zero() {
                    F::one()
                } else if resid < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                *dp = w * inv_n * (-sign) / b_hat;
                *db = w * inv_n * (F::one() - resid.abs() / b_hat) / b_hat;
            }
        }
        LossKind::Squared => {
            let two = F::from(2.0).unwrap();
            for ((&p, &p_hat), dp) in p_map.iter().zip(p_hat_map.iter()).zip(d_p_hat.iter_mut()) {
                let d = p - p_hat;
                sum += (d * d).to_f64().unwrap();
                *dp = -two * inv_n * d;
            }
        }
    }
    Ok((sum / p_map.len() as f64, d_p_hat, d_b_hat))
}

/// Mean absolute error after clipping both maps to the configured window.
pub fn maec<F: Float, D: Dimension>(
    p_map: ArrayView<'_, F, D>,
    p_hat_map: ArrayView<'_, F, D>,
    cfg: &LossConfig,
) -> Result<f64> {
    check_aligned(&[p_map.shape(), p_hat_map.shape()])?;
    if p_map.is_empty() {
        return Err(Error::Invalid("MAEC over an empty map".into()));
    }
    let (lo, hi) = cfg.maec_clip;
    let clip = |v: f64| v.clamp(lo, hi);
    let mut sum = 0.0f64;
    for (&p, &p_hat) in p_map.iter().zip(p_hat_map.iter()) {
        sum += (clip(p.to_f64().unwrap()) - clip(p_hat.to_f64().unwrap())).abs();
    }
    Ok(sum / p_map.len() as f64)
}

/// Predicted variance per voxel: `σ̂² = 2·b̂²`.
pub fn variance_map<F: Float, D: Dimension>(
    b_hat_map: ArrayView<'_, F, D>,
) -> Result<Array<F, D>> {
    if let Some(bad) = b_hat_map.iter().find(|b| !(**b > F::zero())) {
        return Err(Error::Invalid(format!(
            "variance needs positive scales, got {}",
            bad.to_f64().unwrap_or(f64::NAN)
        )));
    }
    let two = F::from(2.0).unwrap();
    Ok(b_hat_map.map(|&b| two * b * b))
}

fn check_aligned(shapes: &[&[usize]]) -> Result<()> {
    if shapes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::ShapeMismatch(format!(
            "maps must share a shape, got {shapes:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};

    const TOL: f64 = 1e-9;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn importance_band_is_closed() {
        let c = cfg();
        assert_eq!(importance(20.0, &c), 1.0);
        assert_eq!(importance(0.0, &c), 1.0);
        assert_eq!(importance(40.0, &c), 1.0);
        assert_eq!(importance(-0.5, &c), 0.1);
        assert_eq!(importance(40.001, &c), 0.1);
    }

    #[test]
    fn loss_weight_examples() {
        let c = cfg();
        assert_eq!(loss_weight(10.0, 15.0, &c), 1.0);
        assert_eq!(loss_weight(45.0, 60.0, &c), 0.1);
        assert_eq!(loss_weight(41.0, -2.0, &c), 1.0);
        assert_eq!(loss_weight(5.0, 5.0, &c), 1.0);
        assert_eq!(loss_weight(-7.0, -1.0, &c), 0.1);
    }

    #[test]
    fn loss_weight_matches_grid_oracle_and_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let a: f64 = rng.random_range(-50.0..100.0);
            let b: f64 = rng.random_range(-50.0..100.0);
            let (lo, hi) = (a.min(b), a.max(b));
            let oracle = (0..=1000)
                .map(|i| importance(lo + (hi - lo) * i as f64 / 1000.0, &c))
                .fold(f64::MIN, f64::max);
            assert_eq!(loss_weight(a, b, &c), oracle, "pair ({a}, {b})");
            assert_eq!(loss_weight(a, b, &c), loss_weight(b, a, &c));
        }
    }

    #[test]
    fn laplace_nll_exact_values() {
        assert!((laplace_nll(0.0, 0.0, 1.0).unwrap() - 0.0).abs() < TOL);
        let expect = std::f64::consts::LN_2 + 1.0;
        assert!((laplace_nll(5.0, 3.0, 2.0).unwrap() - expect).abs() < TOL);
        assert!((laplace_nll(1.0, 1.0, std::f64::consts::E).unwrap() - 1.0).abs() < TOL);
        assert!(laplace_nll(1.0, 1.0, 0.0).is_err());
        assert!(laplace_nll(1.0, 1.0, -2.0).is_err());
    }

    #[test]
    fn laplace_nll_minimized_at_absolute_residual() {
        let (p, p_hat) = (7.0f64, 3.5);
        let best = (1..4000)
            .map(|i| i as f64 * 0.005)
            .min_by(|a, b| {
                let la = laplace_nll(p, p_hat, *a).unwrap();
                let lb = laplace_nll(p, p_hat, *b).unwrap();
                la.partial_cmp(&lb).unwrap()
            })
            .unwrap();
        assert!((best - (p - p_hat).abs()).abs() < 0.01, "argmin {best}");
    }

    #[test]
    fn weighted_loss_single_voxel_examples() {
        let c = cfg();
        let one = |v: f64| arr1(&[v]);
        let loss = weighted_loss(
            one(45.0).view(),
            one(60.0).view(),
            one(1.0).view(),
            &c,
        )
        .unwrap();
        assert!((loss - 1.5).abs() < TOL, "got {loss}");
        let zero = weighted_loss(one(10.0).view(), one(10.0).view(), one(1.0).view(), &c).unwrap();
        assert!(zero.abs() < TOL);
    }

    #[test]
    fn unweighted_config_averages_plain_nll() {
        let p = arr1(&[45.0, 10.0, -3.0]);
        let p_hat = arr1(&[60.0, 12.0, -1.0]);
        let b = arr1(&[1.0, 2.0, 0.5]);
        let got = weighted_loss(p.view(), p_hat.view(), b.view(), &LossConfig::unweighted())
            .unwrap();
        let want = (0..3)
            .map(|i| laplace_nll(p[i], p_hat[i], b[i]).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((got - want).abs() < TOL);
    }

    #[test]
    fn squared_mode_ignores_scale_and_weight() {
        let mut c = cfg();
        c.loss_kind = LossKind::Squared;
        let p = arr1(&[45.0, 1.0]);
        let p_hat = arr1(&[60.0, 2.0]);
        let b = arr1(&[1.0, 1.0]);
        let got = weighted_loss(p.view(), p_hat.view(), b.view(), &c).unwrap();
        assert!((got - (225.0 + 1.0) / 2.0).abs() < TOL);
    }

    #[test]
    fn maec_examples() {
        let c = cfg();
        let n = 6usize;
        let same = Array1::from_elem(n, 4.0);
        assert_eq!(maec(same.view(), same.view(), &c).unwrap(), 0.0);
        let p = Array1::from_elem(n, 25.0);
        let p_hat = Array1::from_elem(n, 30.0);
        assert_eq!(maec(p.view(), p_hat.view(), &c).unwrap(), 0.0);
        let p = Array1::from_elem(n, -5.0);
        let p_hat = Array1::from_elem(n, 10.0);
        assert_eq!(maec(p.view(), p_hat.view(), &c).unwrap(), 10.0);
    }

    #[test]
    fn maec_equals_mae_inside_window() {
        let c = cfg();
        let p = arr1(&[1.0, 5.0, 19.0, 0.0]);
        let p_hat = arr1(&[2.0, 3.0, 20.0, 0.5]);
        let mae = (1.0 + 2.0 + 1.0 + 0.5) / 4.0;
        assert!((maec(p.view(), p_hat.view(), &c).unwrap() - mae).abs() < TOL);
    }

    #[test]
    fn variance_examples() {
        let b = arr1(&[1.0, 0.5, 3.0]);
        let v = variance_map(b.view()).unwrap();
        assert_eq!(v, arr1(&[2.0, 0.5, 18.0]));
        assert!(variance_map(arr1(&[1.0, 0.0]).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_away_from_kinks() {
        let c = cfg();
        let p = arr1(&[12.0f64, 45.0, -3.0, 8.0]);
        let p_hat = arr1(&[10.0f64, 60.0, -1.5, 9.25]);
        let b = arr1(&[0.8f64, 1.3, 0.4, 2.0]);
        let (loss, d_p_hat, d_b_hat) = loss_and_grad(p.view(), p_hat.view(), b.view(), &c).unwrap();
        let base = weighted_loss(p.view(), p_hat.view(), b.view(), &c).unwrap();
        assert!((loss - base).abs() < TOL);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p_hat.clone();
            plus[i] += h;
            let mut minus = p_hat.clone();
            minus[i] -= h;
            let fd = (weighted_loss(p.view(), plus.view(), b.view(), &c).unwrap()
                - weighted_loss(p.view(), minus.view(), b.view(), &c).unwrap())
                / (2.0 * h);
            assert!((fd - d_p_hat[i]).abs() < 1e-6, "d_p_hat[{i}]: fd {fd} vs {}", d_p_hat[i]);

            let mut plus = b.clone();
            plus[i] += h;
            let mut minus = b.clone();
            minus[i] -= h;
            let fd = (weighted_loss(p.view(), p_hat.view(), plus.view(), &c).unwrap()
                - weighted_loss(p.view(), p_hat.view(), minus.view(), &c).unwrap())
                / (2.0 * h);
            assert!((fd - d_b_hat[i]).abs() < 1e-6, "d_b_hat[{i}]: fd {fd} vs {}", d_b_hat[i]);
        }
    }

    #[test]
    fn squared_gradient_matches_finite_differences() {
        let mut c = cfg();
        c.loss_kind = LossKind::Squared;
        let p = arr1(&[1.0f64, -4.0, 30.0]);
        let p_hat = arr1(&[0.5f64, -2.0, 33.0]);
        let b = arr1(&[1.0f64, 1.0, 1.0]);
        let (_, d_p_hat, d_b_hat) = loss_and_grad(p.view(), p_hat.view(), b.view(), &c).unwrap();
        assert!(d_b_hat.iter().all(|&g| g == 0.0));
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p_hat.clone();
            plus[i] += h;
            let mut minus = p_hat.clone();
            minus[i] -= h;
            let fd = (weighted_loss(p.view(), plus.view(), b.view(), &c).unwrap()
                - weighted_loss(p.view(), minus.view(), b.view(), &c).unwrap())
                / (2.0 * h);
            assert!((fd - d_p_hat[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = cfg();
        let a = Array1::from_elem(3, 1.0);
        let b = Array1::from_elem(4, 1.0);
        assert!(maec(a.view(), b.view(), &c).is_err());
        assert!(weighted_loss(a.view(), b.view(), a.view(), &c).is_err());
    }
}
