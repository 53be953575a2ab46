//! Oscillation-index SVD deconvolution — the classical way to turn a
//! tissue concentration curve and an AIF into perfusion maps, used here
//! as the target-generating oracle.
//!
//! The convolution `c = tr · (a ⊛ k)` is written as a circulant system
//! over curves zero-padded to twice their length (so the deconvolution is
//! insensitive to bolus delay and wrap-around), decomposed once per AIF
//! by SVD, and inverted per voxel with a truncation level chosen by the
//! oscillation index of the reconstructed residue: keep the largest
//! number of singular components whose residue still oscillates below
//! the configured limit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array3, ArrayView1};

use crate::data::{CaseRecord, MapKind, PerfusionMap};
use crate::error::{Error, Result};

/// Relative cutoff under which singular values are treated as zero.
const SINGULAR_FLOOR: f64 = 1e-12;
/// Signal is clamped to this fraction of the baseline before the log.
const SIGNAL_FLOOR_FRAC: f64 = 1e-6;
/// A frame counts as pre-bolus while the AIF is below this fraction of
/// its peak.
const PRE_BOLUS_FRAC: f64 = 1e-3;

/// The SVD of one AIF's convolution matrix, reusable across all voxels
/// of a case.
pub struct OsvdSolver {
    u: DMatrix<f64>,
    v_t: DMatrix<f64>,
    singular: DVector<f64>,
    rank: usize,
    padded_len: usize,
    oscillation_limit: f64,
}

impl OsvdSolver {
    /// Builds the zero-padded circulant matrix of `aif_curve` (scaled by
    /// `tr`) and decomposes it.
    pub fn new(aif_curve: ArrayView1<'_, f64>, tr: f64, oscillation_limit: f64) -> Result<Self> {
        if !(tr > 0.0) {
            return Err(Error::Invalid(format!("tr must be positive, got {tr}")));
        }
        if !(oscillation_limit > 0.0) {
            return Err(Error::Invalid(format!(
                "oscillation limit must be positive, got {oscillation_limit}"
            )));
        }
        let frames = aif_curve.len();
        if frames < 2 {
            return Err(Error::Invalid(format!(
                "deconvolution needs at least 2 frames, got {frames}"
            )));
        }
        if aif_curve.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(
                "AIF: every sample is zero, the system is singular".into(),
            ));
        }
        if !aif_curve.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("AIF curve".into()));
        }

        let padded_len = 2 * frames;
        let mut padded = vec![0.0f64; padded_len];
        padded[..frames].copy_from_slice(aif_curve.as_slice().expect("contiguous"));
        let matrix = DMatrix::from_fn(padded_len, padded_len, |i, j| {
            tr * padded[(i + padded_len - j) % padded_len]
        });
        let svd = matrix.svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested Vᵀ");
        let singular = svd.singular_values;
        let floor = singular[0] * SINGULAR_FLOOR;
        let rank = singular.iter().take_while(|&&s| s > floor).count().max(1);
        Ok(Self {
            u,
            v_t,
            singular,
            rank,
            padded_len,
            oscillation_limit,
        })
    }

    /// Number of frames (half the padded length).
    pub fn frames(&self) -> usize {
        self.padded_len / 2
    }

    /// Deconvolves one tissue curve into the scaled residue
    /// `k(t) = CBF · R(t)` on the padded time axis.
    ///
    /// The truncation level is per voxel: among reconstructions from the
    /// leading `m` singular components, the largest `m` whose oscillation
    /// index stays within the limit wins; if none qualifies, the level
    /// with the smallest index is used.
    pub fn solve(&self, tissue_curve: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if tissue_curve.len() != self.frames() {
            return Err(Error::ShapeMismatch(format!(
                "tissue curve has {} frames, AIF has {}",
                tissue_curve.len(),
                self.frames()
            )));
        }
        let l = self.padded_len;
        let mut c = DVector::zeros(l);
        for (i, &v) in tissue_curve.iter().enumerate() {
            c[i] = v;
        }

        let mut residue = vec![0.0f64; l];
        // Largest truncation level within the oscillation limit, or —
        // if no level qualifies — the level with the smallest index.
        let mut within: Option<Vec<f64>> = None;
        let mut fallback = (f64::INFINITY, vec![0.0f64; l]);
        for m in 0..self.rank {
            // residue += (uₘᵀ c / σₘ) · vₘ
            let coeff = self.u.column(m).dot(&c) / self.singular[m];
            for (r, &v) in residue.iter_mut().zip(self.v_t.row(m).iter()) {
                *r += coeff * v;
            }
            let oi = oscillation_index(&residue);
            if oi <= self.oscillation_limit {
                match &mut within {
                    Some(buf) => buf.copy_from_slice(&residue),
                    None => within = Some(residue.clone()),
                }
            } else if within.is_none() && oi < fallback.0 {
                fallback.0 = oi;
                fallback.1.copy_from_slice(&residue);
            }
        }
        Ok(Array1::from_vec(within.unwrap_or(fallback.1)))
    }
}

/// Normalized total second difference of a curve: the standard
/// oscillation measure, `(1/L) · (1/max|f|) · Σ |f[t−1] − 2f[t] + f[t+1]|`.
fn oscillation_index(f: &[f64]) -> f64 {
    let peak = f.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for t in 1..f.len() - 1 {
        total += (f[t - 1] - 2.0 * f[t] + f[t + 1]).abs();
    }
    total / (f.len() as f64 * peak)
}

/// One-shot deconvolution of a single voxel's tissue curve.
pub fn osvd_deconvolve(
    tissue_curve: ArrayView1<'_, f64>,
    aif_curve: ArrayView1<'_, f64>,
    tr: f64,
    oscillation_limit: f64,
) -> Result<Array1<f64>> {
    if tissue_curve.len() != aif_curve.len() {
        return Err(Error::ShapeMismatch(format!(
            "tissue curve has {} frames, AIF has {}",
            tissue_curve.len(),
            aif_curve.len()
        )));
    }
    OsvdSolver::new(aif_curve, tr, oscillation_limit)?.solve(tissue_curve)
}

/// Derives Tmax, TTP, and RBF maps for a whole case by deconvolving every
/// voxel against `aif_curve`.
///
/// The signal is converted to concentration with `C = −ln(S / s0)` per
/// voxel, where `s0` is that voxel's mean signal over the pre-bolus
/// frames (those where the AIF is still flat) and `S` is clamped to a
/// small positive floor. Tmax is `tr ·` the argmax of the residue
/// estimate, TTP is `tr ·` the argmax of the concentration curve, and
/// RBF is the residue maximum.
pub fn oracle_target_maps(
    case: &CaseRecord,
    aif_curve: ArrayView1<'_, f64>,
    tr: f64,
    oscillation_limit: f64,
) -> Result<BTreeMap<MapKind, PerfusionMap>> {
    let frames = case.sequence.frames();
    if aif_curve.len() != frames {
        return Err(Error::ShapeMismatch(format!(
            "AIF has {} samples but the case has {frames} frames",
            aif_curve.len()
        )));
    }
    let solver = OsvdSolver::new(aif_curve, tr, oscillation_limit)?;

    let aif_peak = aif_curve.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let pre_bolus = aif_curve
        .iter()
        .take_while(|&&v| v.abs() <= PRE_BOLUS_FRAC * aif_peak)
        .count()
        .max(1);

    let data = case.sequence.data();
    let (slices, rows, cols) = case.sequence.spatial_shape();
    let mut tmax = Array3::<f32>::zeros((slices, rows, cols));
    let mut ttp = Array3::<f32>::zeros((slices, rows, cols));
    let mut rbf = Array3::<f32>::zeros((slices, rows, cols));
    let mut concentration = Array1::<f64>::zeros(frames);
    for z in 0..slices {
        for y in 0..rows {
            for x in 0..cols {
                let mut s0 = 0.0f64;
                for t in 0..pre_bolus {
                    s0 += data[[t, z, y, x]] as f64;
                }
                s0 /= pre_bolus as f64;
                if s0 <= 0.0 {
                    // A voxel with no usable baseline carries no signal.
                    continue;
                }
                let floor = SIGNAL_FLOOR_FRAC * s0;
                let mut peak_frame = 0usize;
                for t in 0..frames {
                    let s = (data[[t, z, y, x]] as f64).max(floor);
                    concentration[t] = -(s / s0).ln();
                    if concentration[t] > concentration[peak_frame] {
                        peak_frame = t;
                    }
                }
                let residue = solver.solve(concentration.view())?;
                let mut best_lag = 0usize;
                let mut best_val = f64::MIN;
                for (lag, &v) in residue.iter().enumerate() {
                    if v > best_val {
                        best_val = v;
                        best_lag = lag;
                    }
                }
                tmax[[z, y, x]] = (best_lag as f64 * tr) as f32;
                ttp[[z, y, x]] = (peak_frame as f64 * tr) as f32;
                rbf[[z, y, x]] = best_val as f32;
            }
        }
    }

    let mut maps = BTreeMap::new();
    maps.insert(MapKind::Tmax, PerfusionMap::new(tmax, MapKind::Tmax)?);
    maps.insert(MapKind::Ttp, PerfusionMap::new(ttp, MapKind::Ttp)?);
    maps.insert(MapKind::Rbf, PerfusionMap::new(rbf, MapKind::Rbf)?);
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{
        aif_frame_curve, gamma_variate_aif, synthesize_case, AifParams, Kinetics, PhantomSpec,
        Region,
    };
    use ndarray::Array1;

    fn frame_aif(frames: usize, tr: f64) -> Array1<f64> {
        let p = AifParams {
            t0: 3.0,
            alpha: 3.0,
            beta: 1.5,
            amplitude: 0.11,
        };
        Array1::from_iter((0..frames).map(|k| gamma_variate_aif(k as f64 * tr, &p)))
    }

    #[test]
    fn self_deconvolution_peaks_at_lag_zero() {
        let aif = frame_aif(24, 1.5);
        let residue = osvd_deconvolve(aif.view(), aif.view(), 1.5, 0.095).unwrap();
        let argmax = residue
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 0, "residue {residue:?}");
        assert!(residue[0] > 0.0);
    }

    #[test]
    fn all_zero_aif_is_degenerate() {
        let aif = Array1::<f64>::zeros(16);
        let tissue = Array1::<f64>::from_elem(16, 1.0);
        let err = osvd_deconvolve(tissue.view(), aif.view(), 1.5, 0.095).unwrap_err();
        assert!(err.to_string().contains("degenerate AIF"), "got: {err}");
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let aif = frame_aif(16, 1.5);
        let tissue = Array1::<f64>::zeros(15);
        assert!(osvd_deconvolve(tissue.view(), aif.view(), 1.5, 0.095).is_err());
    }

    #[test]
    fn known_delay_is_recovered_within_one_frame() {
        let tr = 1.5;
        let frames = 30;
        let aif = frame_aif(frames, tr);
        // Build the tissue curve by direct discrete convolution with a
        // delayed exponential residue — independent of the solver.
        for delay_frames in [0usize, 2, 4] {
            let mtt = 4.0;
            let mut tissue = Array1::<f64>::zeros(frames);
            for t in 0..frames {
                let mut acc = 0.0;
                for j in 0..=t {
                    let lag = t - j;
                    if lag >= delay_frames {
                        acc += aif[j] * (-(((lag - delay_frames) as f64) * tr) / mtt).exp();
                    }
                }
                tissue[t] = 0.4 * acc * tr;
            }
            let residue = osvd_deconvolve(tissue.view(), aif.view(), tr, 0.095).unwrap();
            let argmax = residue
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(
                (argmax as i64 - delay_frames as i64).abs() <= 1,
                "delay {delay_frames}: argmax {argmax}"
            );
        }
    }

    #[test]
    fn oracle_maps_recover_phantom_structure() {
        let spec = PhantomSpec {
            shape: (30, 1, 24, 24),
            noise_sigma: 0.0,
            vessel_patch_center: (0, 12, 12),
            background: Kinetics {
                delay_seconds: 1.5,
                mtt_seconds: 4.0,
                cbf_scale: 0.4,
            },
            lesion_regions: vec![Region {
                center: (0, 7, 7),
                radius: 2.5,
                kinetics: Kinetics {
                    delay_seconds: 6.0,
                    mtt_seconds: 6.0,
                    cbf_scale: 0.2,
                },
            }],
            ..Default::default()
        };
        let (record, truth) = synthesize_case(&spec).unwrap();
        let aif = aif_frame_curve(&spec.aif_params, record.sequence.frame_times());
        let maps = oracle_target_maps(&record, aif.view(), spec.tr, 0.095).unwrap();

        let tmax = maps[&MapKind::Tmax].data();
        // Lesion voxel: delay 6 s, within one frame time.
        assert!(
            (tmax[[0, 7, 7]] - 6.0).abs() <= 1.5,
            "lesion tmax {}",
            tmax[[0, 7, 7]]
        );
        // Background voxel: delay 1.5 s.
        assert!(
            (tmax[[0, 12, 18]] - 1.5).abs() <= 1.5,
            "background tmax {}",
            tmax[[0, 12, 18]]
        );

        // TTP equals tr · argmax of the concentration by definition; the
        // noiseless concentration peaks where the ground truth says.
        let ttp = maps[&MapKind::Ttp].data();
        assert_eq!(ttp[[0, 12, 18]], truth.ttp.data()[[0, 12, 18]]);

        // Flow ordering: the high-flow background beats the low-flow
        // lesion in estimated RBF.
        let rbf = maps[&MapKind::Rbf].data();
        assert!(
            rbf[[0, 12, 18]] > rbf[[0, 7, 7]],
            "rbf {} vs {}",
            rbf[[0, 12, 18]],
            rbf[[0, 7, 7]]
        );
    }
}
