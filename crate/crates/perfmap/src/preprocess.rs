//! Case preprocessing: spatial zero-padding, temporal reflection padding,
//! per-case standardization, temporal Gaussian smoothing, and the
//! temporal-shift augmentation.
//!
//! Temporal padding and shifting reflect EXCLUSIVE of the boundary sample
//! (`…, x[T−2], x[T−1] | x[T−2], x[T−3], …`), implemented by folding
//! indices with period `2T − 2`, so the edge frame is never duplicated.
//! The Gaussian smoother instead reflects INCLUSIVE of the boundary
//! sample (period `2T`): that is the convention under which a normalized
//! symmetric kernel redistributes weight without creating or destroying
//! mass, which keeps every voxel's temporal mean intact.

use std::collections::BTreeMap;

use ndarray::{Array, Array1, Array3, Array4, Axis, Dimension};
use num_traits::Float;
use rand::Rng;

use crate::data::{CaseRecord, MapKind, PerfusionMap, PerfusionSequence};
use crate::error::{Error, Result};

/// Geometry targets and augmentation bounds for the preprocessing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Spatial shape every case is zero-padded to, as (slices, rows, cols).
    pub target_spatial_shape: (usize, usize, usize),
    /// Frame count every case is reflection-padded to.
    pub target_frames: usize,
    /// Temporal Gaussian width in frames; 0 disables smoothing.
    pub smoothing_sigma: f64,
    /// Inclusive bounds for the augmentation shift draw, in frames.
    pub shift_range: (i64, i64),
    pub standardize_sequence: bool,
    pub standardize_targets: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spatial_shape: (24, 256, 256),
            target_frames: 80,
            smoothing_sigma: 1.0,
            shift_range: (-5, 30),
            standardize_sequence: true,
            standardize_targets: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing_sigma < 0.0 || !self.smoothing_sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "smoothing sigma must be finite and ≥ 0, got {}",
                self.smoothing_sigma
            )));
        }
        if self.shift_range.0 > self.shift_range.1 {
            return Err(Error::Invalid(format!(
                "shift range {:?} has lower > upper",
                self.shift_range
            )));
        }
        if self.target_frames == 0 {
            return Err(Error::Invalid("target_frames must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Serializes to ordered `key=value` pairs (see [`Self::apply_kv`]).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let (sz, sy, sx) = self.target_spatial_shape;
        vec![
            (
                "target_spatial_shape".to_string(),
                format!("{sz},{sy},{sx}"),
            ),
            ("target_frames".to_string(), self.target_frames.to_string()),
            (
                "smoothing_sigma".to_string(),
                self.smoothing_sigma.to_string(),
            ),
            (
                "shift_range".to_string(),
                format!("{},{}", self.shift_range.0, self.shift_range.1),
            ),
            (
                "standardize_sequence".to_string(),
                self.standardize_sequence.to_string(),
            ),
            (
                "standardize_targets".to_string(),
                self.standardize_targets.to_string(),
            ),
        ]
    }

    /// Applies one serialized `key=value` pair; unknown keys error so
    /// typos in config files surface immediately.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str) -> Error {
            Error::Config(format!("invalid value {value:?} for {key}"))
        }
        match key {
            "target_spatial_shape" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad(key, value));
                }
                let mut dims = [0usize; 3];
                for (d, p) in dims.iter_mut().zip(&parts) {
                    *d = p.parse().map_err(|_| bad(key, value))?;
                }
                self.target_spatial_shape = (dims[0], dims[1], dims[2]);
            }
            "target_frames" => {
                self.target_frames = value.trim().parse().map_err(|_| bad(key, value))?
            }
            "smoothing_sigma" => {
                self.smoothing_sigma = value.trim().parse().map_err(|_| bad(key, value))?
            }
            "shift_range" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad(key, value));
                }
                self.shift_range = (
                    parts[0].parse().map_err(|_| bad(key, value))?,
                    parts[1].parse().map_err(|_| bad(key, value))?,
                );
            }
            "standardize_sequence" => {
                self.standardize_sequence = value.trim().parse().map_err(|_| bad(key, value))?
            }
            "standardize_targets" => {
                self.standardize_targets = value.trim().parse().map_err(|_| bad(key, value))?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preprocessing config key {other:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Folds an arbitrary frame index into `[0, n)` by reflection that
/// excludes the boundary sample, i.e. with period `2n − 2`.
///
/// `…, x[2], x[1] | x[0], x[1], …, x[n−1] | x[n−2], x[n−3], …`
pub fn reflect_index(i: i64, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    let folded = if m < n as i64 { m } else { period - m };
    folded as usize
}

/// Folds an arbitrary frame index into `[0, n)` by reflection that
/// includes the boundary sample, i.e. with period `2n`.
///
/// `…, x[1], x[0] | x[0], x[1], …, x[n−1] | x[n−1], x[n−2], …`
pub fn reflect_index_inclusive(i: i64, n: usize) -> usize {
    debug_assert!(n > 0);
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    let folded = if m < n as i64 { m } else { period - 1 - m };
    folded as usize
}

/// Zero-pads the spatial axes symmetrically (odd extra voxel trailing) and
/// extends the temporal axis at the end by reflection; target maps are
/// zero-padded spatially the same way.
///
/// Appended frame times continue with the last inter-frame interval so
/// they stay strictly increasing.
pub fn pad_case(case: &CaseRecord, cfg: &PreprocessConfig) -> Result<CaseRecord> {
    cfg.validate()?;
    let (sz, sy, sx) = case.sequence.spatial_shape();
    let (tz, ty, tx) = cfg.target_spatial_shape;
    let frames = case.sequence.frames();
    if sz > tz || sy > ty || sx > tx || frames > cfg.target_frames {
        return Err(Error::Invalid(format!(
            "case {} with shape {:?} is larger than the padding target {:?}",
            case.case_id,
            (frames, sz, sy, sx),
            (cfg.target_frames, tz, ty, tx)
        )));
    }
    if frames < cfg.target_frames && frames < 2 {
        return Err(Error::Invalid(
            "temporal padding needs at least 2 recorded frames".into(),
        ));
    }
    let (oz, oy, ox) = ((tz - sz) / 2, (ty - sy) / 2, (tx - sx) / 2);

    let data = case.sequence.data();
    let mut padded = Array4::<f32>::zeros((cfg.target_frames, tz, ty, tx));
    for t in 0..cfg.target_frames {
        let src = reflect_index(t as i64, frames);
        padded
            .slice_mut(ndarray::s![t, oz..oz + sz, oy..oy + sy, ox..ox + sx])
            .assign(&data.index_axis(Axis(0), src));
    }

    let times = case.sequence.frame_times();
    let mut padded_times = Array1::<f32>::zeros(cfg.target_frames);
    padded_times.slice_mut(ndarray::s![..frames]).assign(times);
    if cfg.target_frames > frames {
        let dt = times[frames - 1] - times[frames - 2];
        for t in frames..cfg.target_frames {
            padded_times[t] = times[frames - 1] + (t - (frames - 1)) as f32 * dt;
        }
    }

    let mut targets = BTreeMap::new();
    for (kind, map) in &case.targets {
        let mut out = Array3::<f32>::zeros((tz, ty, tx));
        out.slice_mut(ndarray::s![oz..oz + sz, oy..oy + sy, ox..ox + sx])
            .assign(map.data());
        targets.insert(*kind, PerfusionMap::new(out, *kind)?);
    }

    Ok(CaseRecord {
        case_id: case.case_id.clone(),
        sequence: PerfusionSequence::new(padded, padded_times)?,
        targets,
        seq_stats: case.seq_stats,
        target_stats: case.target_stats.clone(),
        split: case.split,
    })
}

/// Mean and population standard deviation over every element, in f64.
fn volume_stats(values: impl Iterator<Item = f32>, n: usize) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for v in values {
        let v = v as f64;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Transforms the sequence and each target map to zero mean and unit
/// variance over all voxels of the case, recording the per-case statistics
/// on the record so the transform inverts exactly.
pub fn standardize(case: &CaseRecord, cfg: &PreprocessConfig) -> Result<CaseRecord> {
    cfg.validate()?;
    let mut out = case.clone();
    if cfg.standardize_sequence {
        if case.seq_stats.is_some() {
            return Err(Error::Invalid(format!(
                "case {} sequence is already standardized",
                case.case_id
            )));
        }
        let data = case.sequence.data();
        let (mean, std) = volume_stats(data.iter().copied(), data.len());
        if std <= 0.0 {
            return Err(Error::Degenerate(format!(
                "case {}: sequence volume is constant, cannot standardize",
                case.case_id
            )));
        }
        let transformed = data.map(|&v| ((v as f64 - mean) / std) as f32);
        out.sequence = PerfusionSequence::new(transformed, case.sequence.frame_times().clone())?;
        out.seq_stats = Some((mean, std));
    }
    if cfg.standardize_targets {
        for (kind, map) in &case.targets {
            if case.target_stats.contains_key(kind) {
                return Err(Error::Invalid(format!(
                    "case {} {kind} target is already standardized",
                    case.case_id
                )));
            }
            let (mean, std) = volume_stats(map.data().iter().copied(), map.data().len());
            if std <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "case {}: {kind} target is constant, cannot standardize",
                    case.case_id
                )));
            }
            let transformed = map.data().map(|&v| ((v as f64 - mean) / std) as f32);
            out.targets
                .insert(*kind, PerfusionMap::new(transformed, *kind)?);
            out.target_stats.insert(*kind, (mean, std));
        }
    }
    out.validate()?;
    Ok(out)
}

/// Inverts [`standardize`] using the statistics stored on the record.
pub fn destandardize(case: &CaseRecord) -> Result<CaseRecord> {
    let mut out = case.clone();
    if let Some((mean, std)) = case.seq_stats {
        let data = case.sequence.data().map(|&v| (v as f64 * std + mean) as f32);
        out.sequence = PerfusionSequence::new(data, case.sequence.frame_times().clone())?;
        out.seq_stats = None;
    }
    for (kind, (mean, std)) in &case.target_stats {
        let map = case
            .targets
            .get(kind)
            .ok_or_else(|| Error::Invalid(format!("stats for absent {kind} target")))?;
        let data = map.data().map(|&v| (v as f64 * *std + *mean) as f32);
        out.targets.insert(*kind, PerfusionMap::new(data, *kind)?);
    }
    out.target_stats.clear();
    Ok(out)
}

/// Applies `x ↦ mean + std · x` elementwise: maps standardized values
/// back to physical units.
pub fn destandardize_values<F: Float, D: Dimension>(
    values: &Array<F, D>,
    stats: (f64, f64),
) -> Array<F, D> {
    let mean = F::from(stats.0).unwrap();
    let std = F::from(stats.1).unwrap();
    values.map(|&v| mean + std * v)
}

/// The target map of `kind` in physical units, destandardizing through the
/// stored statistics when the record carries them.
pub fn physical_target(case: &CaseRecord, kind: MapKind) -> Result<Array3<f32>> {
    let map = case
        .targets
        .get(&kind)
        .ok_or_else(|| Error::Invalid(format!("case {} has no {kind} target", case.case_id)))?;
    Ok(match case.target_stats.get(&kind) {
        Some(&(mean, std)) => map.data().map(|&v| (v as f64 * std + mean) as f32),
        None => map.data().clone(),
    })
}

/// Convolves every voxel's time series with a normalized Gaussian of width
/// `sigma` frames (radius `ceil(3σ)`), reflecting inclusively at both ends
/// so the per-voxel mean is preserved. `sigma = 0` is the identity.
pub fn smooth_temporal(seq: &PerfusionSequence, sigma: f64) -> Result<PerfusionSequence> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Invalid(format!(
            "smoothing sigma must be finite and ≥ 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        weights.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.into_iter().map(|w| (w / total) as f32).collect();

    let data = seq.data();
    let frames = seq.frames();
    let mut out = Array4::<f32>::zeros(data.raw_dim());
    for t in 0..frames {
        let mut dst = out.index_axis_mut(Axis(0), t);
        for (j, &w) in weights.iter().enumerate() {
            let d = j as i64 - radius;
            let src = reflect_index_inclusive(t as i64 + d, frames);
            dst.scaled_add(w, &data.index_axis(Axis(0), src));
        }
    }
    PerfusionSequence::new(out, seq.frame_times().clone())
}

/// Shifts the signal `k` frames later on the fixed frame clock.
///
/// `k > 0` prepends `k` reflection-generated frames and drops the same
/// number at the end; `k < 0` drops `|k|` leading frames and appends
/// reflection-generated ones. Frame times are untouched — the signal
/// moves relative to the clock. Equivalently, `out[t] = x[fold(t − k)]`.
pub fn shift_temporal(seq: &PerfusionSequence, k: i64) -> Result<PerfusionSequence> {
    let frames = seq.frames();
    if k.unsigned_abs() as usize >= frames {
        return Err(Error::Invalid(format!(
            "shift of {k} frames exceeds the {frames}-frame sequence"
        )));
    }
    if k == 0 {
        return Ok(seq.clone());
    }
    let data = seq.data();
    let mut out = Array4::<f32>::zeros(data.raw_dim());
    for t in 0..frames {
        let src = reflect_index(t as i64 - k, frames);
        out.index_axis_mut(Axis(0), t)
            .assign(&data.index_axis(Axis(0), src));
    }
    PerfusionSequence::new(out, seq.frame_times().clone())
}

/// Draws an augmentation shift uniformly from the inclusive configured
/// range.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R, cfg: &PreprocessConfig) -> i64 {
    rng.random_range(cfg.shift_range.0..=cfg.shift_range.1)
}

/// Runs the full stage on one case: pad, standardize, then smooth the
/// (standardized) sequence.
pub fn preprocess_case(case: &CaseRecord, cfg: &PreprocessConfig) -> Result<CaseRecord> {
    let padded = pad_case(case, cfg)?;
    let standardized = standardize(&padded, cfg)?;
    let mut out = standardized.clone();
    out.sequence = smooth_temporal(&standardized.sequence, cfg.smoothing_sigma)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use ndarray::{Array1, Array3, Array4};
    use rand::SeedableRng;

    fn seq_from_series(series: &[f32]) -> PerfusionSequence {
        let t = series.len();
        let data = Array4::from_shape_fn((t, 1, 1, 1), |(i, _, _, _)| series[i]);
        let times = Array1::from_iter((0..t).map(|i| i as f32 * 1.5));
        PerfusionSequence::new(data, times).unwrap()
    }

    fn series_of(seq: &PerfusionSequence) -> Vec<f32> {
        seq.data().iter().copied().collect()
    }

    fn small_case(frames: usize, shape: (usize, usize, usize)) -> CaseRecord {
        let data = Array4::from_shape_fn((frames, shape.0, shape.1, shape.2), |(t, z, y, x)| {
            (t * 7 + z * 5 + y * 3 + x) as f32 * 0.1 + 1.0
        });
        let times = Array1::from_iter((0..frames).map(|i| i as f32 * 1.5));
        let sequence = PerfusionSequence::new(data, times).unwrap();
        let map = PerfusionMap::new(
            Array3::from_shape_fn(shape, |(z, y, x)| (z + y + x) as f32 + 0.5),
            MapKind::Tmax,
        )
        .unwrap();
        let mut targets = BTreeMap::new();
        targets.insert(MapKind::Tmax, map);
        CaseRecord::new("c", sequence, targets, Split::Train).unwrap()
    }

    #[test]
    fn reflect_index_examples() {
        // Period 6 for n = 4: 0 1 2 3 2 1 0 1 2 3 ...
        let got: Vec<usize> = (0..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(-6, 4), 0);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn inclusive_reflection_duplicates_the_edge() {
        // Period 8 for n = 4: 0 1 2 3 3 2 1 0 0 1 ...
        let got: Vec<usize> = (0..9).map(|i| reflect_index_inclusive(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(reflect_index_inclusive(-1, 4), 0);
        assert_eq!(reflect_index_inclusive(-2, 4), 1);
        assert_eq!(reflect_index_inclusive(-1, 1), 0);
        assert_eq!(reflect_index_inclusive(2, 1), 0);
    }

    #[test]
    fn temporal_padding_reflects_exclusively() {
        let case = small_case(4, (1, 1, 1));
        let cfg = PreprocessConfig {
            target_spatial_shape: (1, 1, 1),
            target_frames: 6,
            ..Default::default()
        };
        let padded = pad_case(&case, &cfg).unwrap();
        let series = series_of(&padded.sequence);
        let orig = series_of(&case.sequence);
        // [a, b, c, d] -> [a, b, c, d, c, b]
        assert_eq!(
            series,
            vec![orig[0], orig[1], orig[2], orig[3], orig[2], orig[1]]
        );
        let times = padded.sequence.frame_times();
        assert_eq!(times[4], 6.0);
        assert_eq!(times[5], 7.5);
    }

    #[test]
    fn spatial_padding_is_symmetric_with_trailing_extra() {
        let case = small_case(2, (1, 6, 5));
        let cfg = PreprocessConfig {
            target_spatial_shape: (1, 8, 8),
            target_frames: 2,
            ..Default::default()
        };
        let padded = pad_case(&case, &cfg).unwrap();
        // 6 -> 8 puts the content at offset 1; 5 -> 8 at offset (8-5)/2 = 1.
        let data = padded.sequence.data();
        let orig = case.sequence.data();
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(data[[0, 0, y + 1, x + 1]], orig[[0, 0, y, x]]);
            }
        }
        assert_eq!(data[[0, 0, 0, 0]], 0.0);
        assert_eq!(data[[0, 0, 7, 7]], 0.0);
        let map = &padded.targets[&MapKind::Tmax];
        assert_eq!(map.data()[[0, 3, 2]], case.targets[&MapKind::Tmax].data()[[0, 2, 1]]);
    }

    #[test]
    fn padding_at_target_shape_is_identity() {
        let case = small_case(4, (2, 4, 4));
        let cfg = PreprocessConfig {
            target_spatial_shape: (2, 4, 4),
            target_frames: 4,
            ..Default::default()
        };
        assert_eq!(pad_case(&case, &cfg).unwrap(), case);
    }

    #[test]
    fn oversized_case_is_rejected() {
        let case = small_case(4, (2, 4, 4));
        let cfg = PreprocessConfig {
            target_spatial_shape: (2, 4, 3),
            target_frames: 4,
            ..Default::default()
        };
        let err = pad_case(&case, &cfg).unwrap_err();
        assert!(err.to_string().contains("larger than the padding target"));
    }

    #[test]
    fn standardize_centers_and_inverts() {
        let case = small_case(4, (2, 6, 6));
        let cfg = PreprocessConfig {
            target_spatial_shape: (2, 6, 6),
            target_frames: 4,
            ..Default::default()
        };
        let std_case = standardize(&case, &cfg).unwrap();
        let data = std_case.sequence.data();
        let (mean, std) = volume_stats(data.iter().copied(), data.len());
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-4, "std {std}");
        assert!(std_case.seq_stats.is_some());
        assert!(std_case.target_stats.contains_key(&MapKind::Tmax));

        let back = destandardize(&std_case).unwrap();
        for (a, b) in case
            .sequence
            .data()
            .iter()
            .zip(back.sequence.data().iter())
        {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in case.targets[&MapKind::Tmax]
            .data()
            .iter()
            .zip(back.targets[&MapKind::Tmax].data().iter())
        {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
        assert!(standardize(&std_case, &cfg).is_err(), "double standardize");
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let data = Array4::from_elem((3, 1, 2, 2), 7.0f32);
        let times = Array1::from_vec(vec![0.0, 1.5, 3.0]);
        let sequence = PerfusionSequence::new(data, times).unwrap();
        let case = CaseRecord::new("flat", sequence, BTreeMap::new(), Split::Train).unwrap();
        let cfg = PreprocessConfig {
            target_spatial_shape: (1, 2, 2),
            target_frames: 3,
            ..Default::default()
        };
        let err = standardize(&case, &cfg).unwrap_err();
        assert!(err.to_string().contains("degenerate case"), "got: {err}");
    }

    #[test]
    fn smoothing_sigma_zero_is_identity() {
        let seq = seq_from_series(&[1.0, 4.0, 2.0, 8.0]);
        assert_eq!(smooth_temporal(&seq, 0.0).unwrap(), seq);
    }

    #[test]
    fn smoothing_preserves_constants_and_means() {
        let constant = seq_from_series(&[3.5; 9]);
        let smoothed = smooth_temporal(&constant, 1.0).unwrap();
        for v in smoothed.data().iter() {
            assert!((v - 3.5).abs() < 1e-5);
        }

        let seq = seq_from_series(&[1.0, 5.0, 2.0, 9.0, 4.0, 7.0, 3.0, 8.0]);
        let smoothed = smooth_temporal(&seq, 1.0).unwrap();
        let mean = |s: &PerfusionSequence| {
            s.data().iter().map(|&v| v as f64).sum::<f64>() / s.data().len() as f64
        };
        let (m0, m1) = (mean(&seq), mean(&smoothed));
        assert!(
            (m0 - m1).abs() <= 1e-4 * m0.abs(),
            "mean drifted {m0} -> {m1}"
        );
    }

    #[test]
    fn smoothing_impulse_matches_direct_kernel_evaluation() {
        let mut series = [0.0f32; 15];
        series[7] = 1.0;
        let sigma = 1.0f64;
        let smoothed = smooth_temporal(&seq_from_series(&series), sigma).unwrap();
        let weights: Vec<f64> = (-3..=3)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let out = series_of(&smoothed);
        // Far from both ends, the response IS the normalized kernel.
        for (j, w) in weights.iter().enumerate() {
            let t = 7 + j - 3;
            assert!(
                (out[t] as f64 - w / total).abs() < 1e-6,
                "offset {}: {} vs {}",
                j as i64 - 3,
                out[t],
                w / total
            );
        }
    }

    #[test]
    fn shift_examples_from_reflection_rule() {
        let seq = seq_from_series(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(shift_temporal(&seq, 0).unwrap(), seq);
        let minus = shift_temporal(&seq, -1).unwrap();
        assert_eq!(series_of(&minus), vec![2.0, 3.0, 4.0, 3.0]);
        let plus = shift_temporal(&seq, 1).unwrap();
        assert_eq!(series_of(&plus), vec![2.0, 1.0, 2.0, 3.0]);
        assert_eq!(plus.frame_times(), seq.frame_times());
        assert!(shift_temporal(&seq, 4).is_err());
        assert!(shift_temporal(&seq, -4).is_err());
    }

    #[test]
    fn shift_round_trip_agrees_away_from_ends() {
        let series: Vec<f32> = (0..12).map(|i| ((i * i) % 13) as f32).collect();
        let seq = seq_from_series(&series);
        for k in 1..4i64 {
            let back = shift_temporal(&shift_temporal(&seq, k).unwrap(), -k).unwrap();
            let got = series_of(&back);
            let n = series.len();
            for t in k as usize..n - k as usize {
                assert_eq!(got[t], series[t], "k {k} frame {t}");
            }
        }
    }

    #[test]
    fn augmentation_draws_cover_the_inclusive_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = PreprocessConfig {
            shift_range: (0, 0),
            ..Default::default()
        };
        for _ in 0..50 {
            assert_eq!(sample_augmentation(&mut rng, &cfg), 0);
        }
        let cfg = PreprocessConfig {
            shift_range: (-2, 3),
            ..Default::default()
        };
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let k = sample_augmentation(&mut rng, &cfg);
            assert!((-2..=3).contains(&k));
            seen.insert(k);
        }
        assert_eq!(seen.len(), 6, "all values of the range drawn");
    }

    #[test]
    fn full_stage_pads_standardizes_and_smooths() {
        let case = small_case(4, (1, 4, 3));
        let cfg = PreprocessConfig {
            target_spatial_shape: (1, 4, 4),
            target_frames: 6,
            ..Default::default()
        };
        let out = preprocess_case(&case, &cfg).unwrap();
        assert_eq!(out.sequence.frames(), 6);
        assert_eq!(out.sequence.spatial_shape(), (1, 4, 4));
        assert!(out.seq_stats.is_some());
        assert!(out.target_stats.contains_key(&MapKind::Tmax));
    }
}
