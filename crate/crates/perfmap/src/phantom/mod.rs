//! Synthetic DSC perfusion cases with known ground truth.
//!
//! Tissue voxels follow the standard tracer-kinetic model: a
//! gamma-variate arterial input function (AIF) convolved with a
//! mono-exponential residue `R(t) = exp(−t/mtt)`, scaled by flow and
//! shifted by a per-region bolus delay,
//!
//! ```text
//! C(t) = cbf · (AIF ⊛ R)(t − delay),    S(t) = s0 · exp(−te_k · C(t)) + ε
//! ```
//!
//! with ε Gaussian. The phantom is a brain cylinder with spherical
//! lesions of deviant kinetics, a bright vessel disk carrying the
//! undelayed (amplified) AIF at the configured patch location, and air
//! outside. Because the residue peaks at lag zero, the ground-truth Tmax
//! of a voxel is exactly its delay; TTP is the frame-grid argmax of the
//! noiseless concentration; RBF is the flow scale itself.
//!
//! [`osvd`] adds the classical deconvolution oracle that derives the same
//! three maps from signal alone, the way clinical target maps are made.

pub mod osvd;

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{CaseRecord, MapKind, PerfusionMap, PerfusionSequence, Split};
use crate::error::{Error, Result};
use crate::util::mix_seed;

/// In-plane radius of the synthetic vessel disk, in voxels.
const VESSEL_RADIUS: f64 = 2.5;
/// Fine-grid oversampling factor for the kinetic convolution.
const FINE_PER_FRAME: usize = 20;

/// Gamma-variate AIF parameters: onset `t0`, shape `alpha`, time scale
/// `beta` (seconds), and peak-controlling `amplitude`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AifParams {
    pub t0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub amplitude: f64,
}

impl AifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.amplitude > 0.0 && self.t0 >= 0.0) {
            return Err(Error::Invalid(format!(
                "AIF needs alpha, beta, amplitude > 0 and t0 ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Kinetic parameters of one tissue compartment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinetics {
    pub delay_seconds: f64,
    pub mtt_seconds: f64,
    pub cbf_scale: f64,
}

impl Kinetics {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.mtt_seconds > 0.0 && self.cbf_scale > 0.0 && self.delay_seconds >= 0.0) {
            return Err(Error::Invalid(format!(
                "{what} needs mtt > 0, cbf > 0, delay ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }

    fn key(&self) -> (u64, u64, u64) {
        (
            self.delay_seconds.to_bits(),
            self.mtt_seconds.to_bits(),
            self.cbf_scale.to_bits(),
        )
    }
}

/// A spherical lesion with its own kinetics. Later regions override
/// earlier ones where they overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    /// Voxel center as (slice, row, col).
    pub center: (usize, usize, usize),
    /// Radius in voxels.
    pub radius: f64,
    pub kinetics: Kinetics,
}

/// Everything that defines one synthetic case.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Volume shape as (frames, slices, rows, cols).
    pub shape: (usize, usize, usize, usize),
    /// Seconds between frames.
    pub tr: f64,
    pub aif_params: AifParams,
    pub lesion_regions: Vec<Region>,
    /// Kinetics of brain tissue outside any lesion.
    pub background: Kinetics,
    /// Brain cylinder radius as a fraction of half the smaller in-plane
    /// extent.
    pub brain_radius_frac: f64,
    /// Where the bright vessel disk sits, as (slice, row, col); this is
    /// also where the bolus-characterization patch is extracted.
    pub vessel_patch_center: (usize, usize, usize),
    /// Concentration multiple of the AIF carried by the vessel.
    pub vessel_gain: f64,
    /// Standard deviation of the additive Gaussian signal noise.
    pub noise_sigma: f64,
    /// Signal-model constant in `S = s0 · exp(−te_k · C)`.
    pub te_k: f64,
    /// Baseline signal.
    pub s0: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: (40, 4, 64, 64),
            tr: 1.5,
            aif_params: AifParams {
                t0: 6.0,
                alpha: 3.0,
                beta: 1.5,
                amplitude: 0.11,
            },
            lesion_regions: Vec::new(),
            background: Kinetics {
                delay_seconds: 1.5,
                mtt_seconds: 4.0,
                cbf_scale: 0.4,
            },
            brain_radius_frac: 0.9,
            vessel_patch_center: (2, 32, 32),
            vessel_gain: 3.0,
            noise_sigma: 1.0,
            te_k: 1.0,
            s0: 100.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (frames, slices, rows, cols) = self.shape;
        if frames < 2 || slices == 0 || rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!(
                "phantom shape {:?} needs ≥ 2 frames and nonzero spatial extents",
                self.shape
            )));
        }
        if !(self.tr > 0.0) {
            return Err(Error::Invalid(format!("tr must be positive, got {}", self.tr)));
        }
        self.aif_params.validate()?;
        self.background.validate("background kinetics")?;
        if !(self.brain_radius_frac > 0.0 && self.brain_radius_frac <= 1.0) {
            return Err(Error::Invalid(format!(
                "brain_radius_frac must lie in (0, 1], got {}",
                self.brain_radius_frac
            )));
        }
        for (i, lesion) in self.lesion_regions.iter().enumerate() {
            lesion.kinetics.validate(&format!("lesion {i}"))?;
            let (cz, cy, cx) = lesion.center;
            let r = lesion.radius;
            if !(r > 0.0) || cz >= slices {
                return Err(Error::Invalid(format!(
                    "lesion {i} center {:?} radius {r} is outside the volume",
                    lesion.center
                )));
            }
            // The in-plane disk must lie fully inside; thin volumes may
            // clip the sphere across slices.
            let inside = cy as f64 - r >= 0.0
                && cy as f64 + r < rows as f64
                && cx as f64 - r >= 0.0
                && cx as f64 + r < cols as f64;
            if !inside {
                return Err(Error::Invalid(format!(
                    "lesion {i} at {:?} with radius {r} leaves the {rows}×{cols} plane",
                    lesion.center
                )));
            }
        }
        let (vz, vy, vx) = self.vessel_patch_center;
        if vz >= slices || vy >= rows || vx >= cols {
            return Err(Error::Invalid(format!(
                "vessel patch center {:?} is outside the volume",
                self.vessel_patch_center
            )));
        }
        if !(self.vessel_gain > 0.0) || self.noise_sigma < 0.0 || !(self.s0 > 0.0) || !(self.te_k > 0.0)
        {
            return Err(Error::Invalid(
                "vessel_gain, s0, te_k must be positive and noise_sigma ≥ 0".into(),
            ));
        }
        Ok(())
    }

    /// Frame acquisition times `k · tr`.
    pub fn frame_times(&self) -> Array1<f32> {
        Array1::from_iter((0..self.shape.0).map(|k| (k as f64 * self.tr) as f32))
    }
}

/// The maps a phantom knows exactly, before any noise or estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub tmax: PerfusionMap,
    pub ttp: PerfusionMap,
    pub rbf: PerfusionMap,
    /// Per-voxel bolus delay in seconds (0 outside the brain).
    pub delay_field: Array3<f32>,
}

impl GroundTruth {
    /// Voxels carrying any flow — brain tissue, lesions, and the vessel.
    pub fn in_brain(&self) -> Array3<bool> {
        self.rbf.data().map(|&v| v > 0.0)
    }

    pub fn as_targets(&self) -> BTreeMap<MapKind, PerfusionMap> {
        let mut targets = BTreeMap::new();
        targets.insert(MapKind::Tmax, self.tmax.clone());
        targets.insert(MapKind::Ttp, self.ttp.clone());
        targets.insert(MapKind::Rbf, self.rbf.clone());
        targets
    }
}

/// The gamma-variate AIF: `A · (t − t0)^α · exp(−(t − t0)/β)` for
/// `t > t0`, zero otherwise. Its maximum sits at `t0 + α·β`.
pub fn gamma_variate_aif(t: f64, params: &AifParams) -> f64 {
    let dt = t - params.t0;
    if dt <= 0.0 {
        return 0.0;
    }
    params.amplitude * dt.powf(params.alpha) * (-dt / params.beta).exp()
}

/// The AIF sampled on a frame-time grid.
pub fn aif_frame_curve(params: &AifParams, frame_times: &Array1<f32>) -> Array1<f64> {
    frame_times.map(|&t| gamma_variate_aif(t as f64, params))
}

/// What a voxel is made of; `Compartment(i)` indexes the deduplicated
/// kinetics table.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Tissue {
    Air,
    Vessel,
    Compartment(usize),
}

/// One precomputed concentration curve on the frame grid.
struct CompartmentCurve {
    concentration: Vec<f64>,
    peak_frame: usize,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Synthesizes one case: raw signal with noise, plus exact ground truth.
///
/// The returned record carries no target maps; attach either the ground
/// truth ([`GroundTruth::as_targets`]) or the deconvolution oracle's
/// estimates ([`osvd::oracle_target_maps`]) depending on the experiment.
/// Deterministic: the same spec always yields bit-identical output.
pub fn synthesize_case(spec: &PhantomSpec) -> Result<(CaseRecord, GroundTruth)> {
    spec.validate()?;
    let (frames, slices, rows, cols) = spec.shape;
    let frame_times = spec.frame_times();

    // Label voxels. Later lesions override earlier ones; the vessel wins.
    let brain_radius = spec.brain_radius_frac * (rows.min(cols) as f64) / 2.0;
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let mut kinetics_index: BTreeMap<(u64, u64, u64), usize> = BTreeMap::new();
    let mut kinetics: Vec<Kinetics> = Vec::new();
    let mut intern = |k: Kinetics| -> usize {
        *kinetics_index.entry(k.key()).or_insert_with(|| {
            kinetics.push(k);
            kinetics.len() - 1
        })
    };
    let background_idx = intern(spec.background);
    let lesion_idx: Vec<usize> = spec
        .lesion_regions
        .iter()
        .map(|r| intern(r.kinetics))
        .collect();

    let (vz, vy, vx) = spec.vessel_patch_center;
    let mut labels = Array3::from_elem((slices, rows, cols), Tissue::Air);
    for z in 0..slices {
        for y in 0..rows {
            for x in 0..cols {
                let in_brain =
                    (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= brain_radius.powi(2);
                if !in_brain {
                    continue;
                }
                let mut label = Tissue::Compartment(background_idx);
                for (region, &idx) in spec.lesion_regions.iter().zip(&lesion_idx) {
                    let (lz, ly, lx) = region.center;
                    let d2 = (z as f64 - lz as f64).powi(2)
                        + (y as f64 - ly as f64).powi(2)
                        + (x as f64 - lx as f64).powi(2);
                    if d2 <= region.radius.powi(2) {
                        label = Tissue::Compartment(idx);
                    }
                }
                if z == vz && (y as f64 - vy as f64).powi(2) + (x as f64 - vx as f64).powi(2)
                    <= VESSEL_RADIUS.powi(2)
                {
                    label = Tissue::Vessel;
                }
                labels[[z, y, x]] = label;
            }
        }
    }

    // Concentration curves: one fine-grid convolution per distinct mtt,
    // then per-compartment sampling at (frame time − delay).
    let dt = spec.tr / FINE_PER_FRAME as f64;
    let n_fine = (frames - 1) * FINE_PER_FRAME + 1;
    let aif_fine: Vec<f64> = (0..n_fine)
        .map(|i| gamma_variate_aif(i as f64 * dt, &spec.aif_params))
        .collect();
    let mut conv_by_mtt: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for k in &kinetics {
        conv_by_mtt.entry(k.mtt_seconds.to_bits()).or_insert_with(|| {
            let mut conv = vec![0.0f64; n_fine];
            let decay: Vec<f64> = (0..n_fine).map(|i| (-(i as f64) * dt / k.mtt_seconds).exp()).collect();
            for (i, c) in conv.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += aif_fine[j] * decay[i - j];
                }
                *c = acc * dt;
            }
            conv
        });
    }
    let sample = |conv: &[f64], t: f64| -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let pos = t / dt;
        let i0 = pos.floor() as usize;
        if i0 + 1 >= conv.len() {
            return conv[conv.len() - 1];
        }
        let frac = pos - i0 as f64;
        conv[i0] * (1.0 - frac) + conv[i0 + 1] * frac
    };
    let compartment_curves: Vec<CompartmentCurve> = kinetics
        .iter()
        .map(|k| {
            let conv = &conv_by_mtt[&k.mtt_seconds.to_bits()];
            let concentration: Vec<f64> = frame_times
                .iter()
                .map(|&t| k.cbf_scale * sample(conv, t as f64 - k.delay_seconds))
                .collect();
            let peak_frame = argmax(&concentration);
            CompartmentCurve {
                concentration,
                peak_frame,
            }
        })
        .collect();
    let vessel_curve: Vec<f64> = frame_times
        .iter()
        .map(|&t| spec.vessel_gain * gamma_variate_aif(t as f64, &spec.aif_params))
        .collect();
    let vessel_peak = argmax(&vessel_curve);

    // Assemble signal; the noise stream is drawn in fixed (t, z, y, x)
    // order so the output is reproducible bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5194a1]));
    let mut signal = Array4::<f32>::zeros((frames, slices, rows, cols));
    for t in 0..frames {
        for z in 0..slices {
            for y in 0..rows {
                for x in 0..cols {
                    let concentration = match labels[[z, y, x]] {
                        Tissue::Air => 0.0,
                        Tissue::Vessel => vessel_curve[t],
                        Tissue::Compartment(i) => compartment_curves[i].concentration[t],
                    };
                    let clean = spec.s0 * (-spec.te_k * concentration).exp();
                    let noise: f64 = if spec.noise_sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        n * spec.noise_sigma
                    } else {
                        0.0
                    };
                    signal[[t, z, y, x]] = (clean + noise) as f32;
                }
            }
        }
    }

    let mut tmax = Array3::<f32>::zeros((slices, rows, cols));
    let mut ttp = Array3::<f32>::zeros((slices, rows, cols));
    let mut rbf = Array3::<f32>::zeros((slices, rows, cols));
    for z in 0..slices {
        for y in 0..rows {
            for x in 0..cols {
                match labels[[z, y, x]] {
                    Tissue::Air => {}
                    Tissue::Vessel => {
                        ttp[[z, y, x]] = (vessel_peak as f64 * spec.tr) as f32;
                        rbf[[z, y, x]] = spec.vessel_gain as f32;
                    }
                    Tissue::Compartment(i) => {
                        let k = &kinetics[i];
                        tmax[[z, y, x]] = k.delay_seconds as f32;
                        ttp[[z, y, x]] =
                            (compartment_curves[i].peak_frame as f64 * spec.tr) as f32;
                        rbf[[z, y, x]] = k.cbf_scale as f32;
                    }
                }
            }
        }
    }

    let sequence = PerfusionSequence::new(signal, frame_times)?;
    let case_id = format!("phantom_{:08x}", spec.seed);
    let record = CaseRecord::new(case_id, sequence, BTreeMap::new(), Split::Train)?;
    let truth = GroundTruth {
        tmax: PerfusionMap::new(tmax.clone(), MapKind::Tmax)?,
        ttp: PerfusionMap::new(ttp, MapKind::Ttp)?,
        rbf: PerfusionMap::new(rbf, MapKind::Rbf)?,
        delay_field: tmax,
    };
    Ok((record, truth))
}

/// Where a generated dataset's training targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    /// Maps estimated from the noisy signal by the deconvolution oracle —
    /// the realistic choice, since that is how clinical targets are made.
    Oracle,
    /// The phantom's exact ground truth.
    Truth,
}

impl TargetSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetSource::Oracle => "oracle",
            TargetSource::Truth => "truth",
        }
    }
}

impl std::fmt::Display for TargetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TargetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oracle" => Ok(TargetSource::Oracle),
            "truth" => Ok(TargetSource::Truth),
            other => Err(Error::Config(format!(
                "unknown target source {other:?} (expected oracle or truth)"
            ))),
        }
    }
}

/// Recipe for a reproducible multi-case dataset: a base phantom plus
/// per-case randomization of bolus arrival and lesions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub base: PhantomSpec,
    /// Uniform per-case addition to the AIF onset `t0`, in seconds.
    /// A wide range makes absolute bolus timing uninformative, which is
    /// what gives the vessel-patch encoder something to disambiguate.
    pub t0_jitter: (f64, f64),
    /// Inclusive range for the number of lesions per case.
    pub lesions_per_case: (usize, usize),
    pub lesion_delay: (f64, f64),
    pub lesion_mtt: (f64, f64),
    pub lesion_cbf: (f64, f64),
    pub lesion_radius: (f64, f64),
    pub target_source: TargetSource,
    pub oscillation_limit: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 20,
            base: PhantomSpec::default(),
            t0_jitter: (0.0, 12.0),
            lesions_per_case: (1, 3),
            lesion_delay: (1.5, 9.0),
            lesion_mtt: (3.0, 8.0),
            lesion_cbf: (0.15, 0.8),
            lesion_radius: (4.0, 10.0),
            target_source: TargetSource::Oracle,
            oscillation_limit: 0.095,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.count == 0 {
            return Err(Error::Invalid("dataset count must be ≥ 1".into()));
        }
        for (name, (lo, hi)) in [
            ("t0_jitter", self.t0_jitter),
            ("lesion_delay", self.lesion_delay),
            ("lesion_mtt", self.lesion_mtt),
            ("lesion_cbf", self.lesion_cbf),
            ("lesion_radius", self.lesion_radius),
        ] {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Invalid(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.lesions_per_case.0 > self.lesions_per_case.1 {
            return Err(Error::Invalid("lesions_per_case range is inverted".into()));
        }
        if !(self.oscillation_limit > 0.0) {
            return Err(Error::Invalid("oscillation_limit must be positive".into()));
        }
        Ok(())
    }

    /// Serializes to ordered `key=value` pairs. The base phantom's
    /// explicit `lesion_regions` list is not included: generated datasets
    /// sample lesions from the ranges below instead.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        let b = &self.base;
        vec![
            kv("count", self.count.to_string()),
            kv("seed", b.seed.to_string()),
            kv(
                "shape",
                format!("{},{},{},{}", b.shape.0, b.shape.1, b.shape.2, b.shape.3),
            ),
            kv("tr", b.tr.to_string()),
            kv("aif_t0", b.aif_params.t0.to_string()),
            kv("aif_alpha", b.aif_params.alpha.to_string()),
            kv("aif_beta", b.aif_params.beta.to_string()),
            kv("aif_amplitude", b.aif_params.amplitude.to_string()),
            kv("background_delay", b.background.delay_seconds.to_string()),
            kv("background_mtt", b.background.mtt_seconds.to_string()),
            kv("background_cbf", b.background.cbf_scale.to_string()),
            kv("brain_radius_frac", b.brain_radius_frac.to_string()),
            kv(
                "vessel_patch_center",
                format!(
                    "{},{},{}",
                    b.vessel_patch_center.0, b.vessel_patch_center.1, b.vessel_patch_center.2
                ),
            ),
            kv("vessel_gain", b.vessel_gain.to_string()),
            kv("noise_sigma", b.noise_sigma.to_string()),
            kv("te_k", b.te_k.to_string()),
            kv("s0", b.s0.to_string()),
            kv("t0_jitter", pair(self.t0_jitter)),
            kv(
                "lesions_per_case",
                format!("{},{}", self.lesions_per_case.0, self.lesions_per_case.1),
            ),
            kv("lesion_delay", pair(self.lesion_delay)),
            kv("lesion_mtt", pair(self.lesion_mtt)),
            kv("lesion_cbf", pair(self.lesion_cbf)),
            kv("lesion_radius", pair(self.lesion_radius)),
            kv("target_source", self.target_source.to_string()),
            kv("oscillation_limit", self.oscillation_limit.to_string()),
        ]
    }

    /// Applies one serialized `key=value` pair; unknown keys error so
    /// typos in config files surface immediately.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str) -> Error {
            Error::Config(format!("invalid value {value:?} for {key}"))
        }
        let parse_f64 = |v: &str| -> Result<f64> { v.trim().parse().map_err(|_| bad(key, value)) };
        let parse_f64_pair = |v: &str| -> Result<(f64, f64)> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(bad(key, value));
            }
            Ok((
                parts[0].parse().map_err(|_| bad(key, value))?,
                parts[1].parse().map_err(|_| bad(key, value))?,
            ))
        };
        let parse_usizes = |v: &str, n: usize| -> Result<Vec<usize>> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != n {
                return Err(bad(key, value));
            }
            parts
                .iter()
                .map(|p| p.parse().map_err(|_| bad(key, value)))
                .collect()
        };
        match key {
            "count" => self.count = value.trim().parse().map_err(|_| bad(key, value))?,
            "seed" => self.base.seed = value.trim().parse().map_err(|_| bad(key, value))?,
            "shape" => {
                let p = parse_usizes(value, 4)?;
                self.base.shape = (p[0], p[1], p[2], p[3]);
            }
            "tr" => self.base.tr = parse_f64(value)?,
            "aif_t0" => self.base.aif_params.t0 = parse_f64(value)?,
            "aif_alpha" => self.base.aif_params.alpha = parse_f64(value)?,
            "aif_beta" => self.base.aif_params.beta = parse_f64(value)?,
            "aif_amplitude" => self.base.aif_params.amplitude = parse_f64(value)?,
            "background_delay" => self.base.background.delay_seconds = parse_f64(value)?,
            "background_mtt" => self.base.background.mtt_seconds = parse_f64(value)?,
            "background_cbf" => self.base.background.cbf_scale = parse_f64(value)?,
            "brain_radius_frac" => self.base.brain_radius_frac = parse_f64(value)?,
            "vessel_patch_center" => {
                let p = parse_usizes(value, 3)?;
                self.base.vessel_patch_center = (p[0], p[1], p[2]);
            }
            "vessel_gain" => self.base.vessel_gain = parse_f64(value)?,
            "noise_sigma" => self.base.noise_sigma = parse_f64(value)?,
            "te_k" => self.base.te_k = parse_f64(value)?,
            "s0" => self.base.s0 = parse_f64(value)?,
            "t0_jitter" => self.t0_jitter = parse_f64_pair(value)?,
            "lesions_per_case" => {
                let p = parse_usizes(value, 2)?;
                self.lesions_per_case = (p[0], p[1]);
            }
            "lesion_delay" => self.lesion_delay = parse_f64_pair(value)?,
            "lesion_mtt" => self.lesion_mtt = parse_f64_pair(value)?,
            "lesion_cbf" => self.lesion_cbf = parse_f64_pair(value)?,
            "lesion_radius" => self.lesion_radius = parse_f64_pair(value)?,
            "target_source" => self.target_source = value.parse()?,
            "oscillation_limit" => self.oscillation_limit = parse_f64(value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown phantom config key {other:?}"
                )));
            }
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Generates case `index` of the dataset: samples the per-case bolus
/// onset and lesions, synthesizes the volume, and attaches target maps
/// from the configured source. Deterministic in (spec, index).
pub fn generate_case(spec: &DatasetSpec, index: usize) -> Result<(CaseRecord, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.base.seed, 0xca5e, index as u64]));
    let mut case_spec = spec.base.clone();
    case_spec.seed = mix_seed(&[spec.base.seed, 0x9015e, index as u64]);
    case_spec.aif_params.t0 += uniform_in(&mut rng, spec.t0_jitter);

    let (_, slices, rows, cols) = case_spec.shape;
    let brain_radius = case_spec.brain_radius_frac * (rows.min(cols) as f64) / 2.0;
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let n_lesions = rng.random_range(spec.lesions_per_case.0..=spec.lesions_per_case.1);
    for _ in 0..n_lesions {
        // Uniform over a disk well inside the brain so the lesion's
        // in-plane extent stays inside the volume.
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = brain_radius * 0.6 * rng.random_range(0.0f64..1.0).sqrt();
        let y = (cy + rho * angle.sin()).round() as usize;
        let x = (cx + rho * angle.cos()).round() as usize;
        let z = rng.random_range(0..slices);
        // The sampled radius may not fit between the center and the
        // volume edge on small planes; shrink it to the margin.
        let margin = y.min(rows - 1 - y).min(x).min(cols - 1 - x) as f64;
        case_spec.lesion_regions.push(Region {
            center: (z, y, x),
            radius: uniform_in(&mut rng, spec.lesion_radius).min(margin),
            kinetics: Kinetics {
                delay_seconds: uniform_in(&mut rng, spec.lesion_delay),
                mtt_seconds: uniform_in(&mut rng, spec.lesion_mtt),
                cbf_scale: uniform_in(&mut rng, spec.lesion_cbf),
            },
        });
    }

    let (mut record, truth) = synthesize_case(&case_spec)?;
    record.case_id = format!("case_{index:03}");
    record.targets = match spec.target_source {
        TargetSource::Truth => truth.as_targets(),
        TargetSource::Oracle => {
            let aif = aif_frame_curve(&case_spec.aif_params, record.sequence.frame_times());
            osvd::oracle_target_maps(&record, aif.view(), case_spec.tr, spec.oscillation_limit)?
        }
    };
    record.validate()?;
    Ok((record, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aif_is_zero_up_to_onset_and_peaks_at_t0_plus_alpha_beta() {
        let p = AifParams {
            t0: 6.0,
            alpha: 3.0,
            beta: 1.5,
            amplitude: 0.11,
        };
        assert_eq!(gamma_variate_aif(6.0, &p), 0.0);
        assert_eq!(gamma_variate_aif(2.0, &p), 0.0);
        assert_eq!(gamma_variate_aif(-1.0, &p), 0.0);
        let grid: Vec<f64> = (0..40000).map(|i| i as f64 * 0.001).collect();
        let best = grid
            .iter()
            .copied()
            .max_by(|a, b| {
                gamma_variate_aif(*a, &p)
                    .partial_cmp(&gamma_variate_aif(*b, &p))
                    .unwrap()
            })
            .unwrap();
        let analytic = p.t0 + p.alpha * p.beta;
        assert!((best - analytic).abs() < 0.002, "peak {best} vs {analytic}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = PhantomSpec {
            shape: (12, 2, 16, 16),
            vessel_patch_center: (1, 8, 8),
            ..Default::default()
        };
        let (a, truth_a) = synthesize_case(&spec).unwrap();
        let (b, truth_b) = synthesize_case(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(truth_a, truth_b);
        for (x, y) in a
            .sequence
            .data()
            .iter()
            .zip(b.sequence.data().iter())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn noiseless_ttp_matches_brute_force_convolution() {
        let spec = PhantomSpec {
            shape: (30, 1, 16, 16),
            noise_sigma: 0.0,
            vessel_patch_center: (0, 3, 3),
            background: Kinetics {
                delay_seconds: 0.0,
                mtt_seconds: 4.0,
                cbf_scale: 0.4,
            },
            ..Default::default()
        };
        let (_, truth) = synthesize_case(&spec).unwrap();
        // Independent dense-grid evaluation of C = cbf·(AIF ⊛ R).
        let dt = 0.001;
        let n = (30.0f64 * 1.5 / dt) as usize;
        let mut best_t = 0.0f64;
        let mut best_c = f64::MIN;
        for i in 0..30 {
            let t = i as f64 * 1.5;
            let mut c = 0.0;
            let steps = (t / dt) as usize;
            for j in 0..steps {
                let tau = j as f64 * dt;
                c += gamma_variate_aif(tau, &spec.aif_params) * (-(t - tau) / 4.0).exp() * dt;
            }
            let _ = n;
            if c > best_c {
                best_c = c;
                best_t = t;
            }
        }
        // A brain voxel away from the vessel and any lesion.
        let got = truth.ttp.data()[[0, 8, 4]];
        assert!(
            (got as f64 - best_t).abs() < 1e-6,
            "ttp {got} vs dense-grid {best_t}"
        );
    }

    #[test]
    fn delayed_voxels_are_shifted_copies() {
        let delay = 3.0; // exactly two frames at tr = 1.5
        let spec = PhantomSpec {
            shape: (30, 1, 32, 32),
            noise_sigma: 0.0,
            vessel_patch_center: (0, 16, 16),
            lesion_regions: vec![Region {
                center: (0, 10, 10),
                radius: 3.0,
                kinetics: Kinetics {
                    delay_seconds: 1.5 + delay,
                    mtt_seconds: 4.0,
                    cbf_scale: 0.4,
                },
            }],
            ..Default::default()
        };
        let (record, truth) = synthesize_case(&spec).unwrap();
        let data = record.sequence.data();
        // Lesion kinetics equal the background's except for +2 frames of
        // delay, so the signal curves are shifted copies.
        let lesion = (0usize, 10usize, 10usize);
        let background = (0usize, 16usize, 26usize);
        for t in 2..30 {
            let shifted = data[[t, lesion.0, lesion.1, lesion.2]];
            let orig = data[[t - 2, background.0, background.1, background.2]];
            assert!(
                (shifted - orig).abs() < 2e-4,
                "frame {t}: {shifted} vs {orig}"
            );
        }
        let d_ttp = truth.ttp.data()[[0, 10, 10]] - truth.ttp.data()[[0, 16, 26]];
        assert!((d_ttp - delay as f32).abs() < 1e-6, "ttp shift {d_ttp}");
        assert_eq!(truth.tmax.data()[[0, 10, 10]], 4.5);
        assert_eq!(truth.tmax.data()[[0, 16, 26]], 1.5);
    }

    #[test]
    fn ground_truth_marks_brain_and_air() {
        let spec = PhantomSpec {
            shape: (12, 2, 24, 24),
            vessel_patch_center: (1, 12, 12),
            ..Default::default()
        };
        let (_, truth) = synthesize_case(&spec).unwrap();
        let mask = truth.in_brain();
        assert!(mask[[0, 12, 12]]);
        assert!(!mask[[0, 0, 0]], "corner is air");
        assert!(truth.ttp.data()[[0, 12, 12]] >= spec.aif_params.t0 as f32);
        assert_eq!(truth.tmax.data()[[0, 0, 0]], 0.0);
        // The vessel slice carries the vessel gain as its flow value.
        assert_eq!(truth.rbf.data()[[1, 12, 12]], spec.vessel_gain as f32);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = PhantomSpec::default();
        spec.lesion_regions.push(Region {
            center: (0, 2, 2),
            radius: 5.0,
            kinetics: Kinetics {
                delay_seconds: 1.0,
                mtt_seconds: 4.0,
                cbf_scale: 0.3,
            },
        });
        assert!(synthesize_case(&spec).is_err(), "lesion leaves the plane");

        let spec = PhantomSpec {
            tr: 0.0,
            ..Default::default()
        };
        assert!(synthesize_case(&spec).is_err());

        let spec = PhantomSpec {
            vessel_patch_center: (9, 0, 0),
            ..Default::default()
        };
        assert!(synthesize_case(&spec).is_err());
    }

    #[test]
    fn generated_cases_vary_but_reproduce() {
        let spec = DatasetSpec {
            count: 2,
            base: PhantomSpec {
                shape: (16, 2, 32, 32),
                vessel_patch_center: (1, 16, 16),
                ..Default::default()
            },
            target_source: TargetSource::Truth,
            ..Default::default()
        };
        let (a0, _) = generate_case(&spec, 0).unwrap();
        let (a0_again, _) = generate_case(&spec, 0).unwrap();
        assert_eq!(a0, a0_again);
        let (a1, _) = generate_case(&spec, 1).unwrap();
        assert_ne!(a0.sequence, a1.sequence, "cases differ across indices");
        assert_eq!(a0.case_id, "case_000");
        assert_eq!(a1.case_id, "case_001");
        assert_eq!(a0.targets.len(), 3);
    }
}
