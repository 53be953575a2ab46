//! The assembled regression network.
//!
//! Data flow per case: a fixed vessel patch is encoded into one
//! 16-vector per frame (bolus characterization); every voxel's
//! standardized series is stacked with the frame-time channel and those
//! shared vectors into an 18-channel sequence; three 1D convolutions
//! with interleaved max pooling reduce it to a 256-vector per voxel; a
//! 2D convolution plus dense layer mixes neighboring voxels within a
//! row band; a final dense head emits the standardized prediction and
//! the log uncertainty scale.
//!
//! Two execution paths share the layer primitives: the inference ops
//! ([`bcs_encode`], [`encode_voxel_sequences`], [`spatial_correlate`],
//! [`regress`], [`forward`]) keep no intermediates, while
//! [`forward_patch`] records a [`PatchTape`] that [`backward_patch`]
//! consumes to produce exact analytic gradients. With dropout disabled
//! the two paths perform identical arithmetic.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CaseRecord, PerfusionMap};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{
    dropout_mask, gap_time, gap_time_backward, maxpool_time, maxpool_time_backward, real,
    selu_grad_from_act, selu_inplace, Conv1d, Conv2d, Conv3d, Dense, Real,
};
use crate::util::mix_seed;

/// All learnable arrays. Ablation variants leave disabled blocks as
/// `None`, so checkpoints and optimizers only ever see active layers.
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub bcs1: Option<Conv3d<F>>,
    pub bcs2: Option<Conv3d<F>>,
    pub enc1: Conv1d<F>,
    pub enc2: Conv1d<F>,
    pub enc3: Conv1d<F>,
    pub spatial: Option<Conv2d<F>>,
    pub spatial_dense: Option<Dense<F>>,
    pub head: Dense<F>,
}

impl<F: Real> ModelParams<F> {
    /// Xavier-uniform initialization. Each layer draws from its own
    /// seed stream, so toggling one block never changes another's
    /// starting weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layer_rng = |idx: u64| ChaCha8Rng::seed_from_u64(mix_seed(&[seed, idx]));
        let (k1, k2, k3) = cfg.encoder_kernel_sizes;
        let (c1, c2, c3) = cfg.encoder_channels;
        let bcs = cfg.use_bcs.then(|| {
            (
                Conv3d::xavier(3, 1, cfg.bcs_hidden_channels, &mut layer_rng(0)),
                Conv3d::xavier(3, cfg.bcs_hidden_channels, cfg.bcs_embed_dim, &mut layer_rng(1)),
            )
        });
        let spatial = cfg.use_spatial_correlation.then(|| {
            (
                Conv2d::xavier(
                    cfg.spatial_kernel,
                    cfg.encode_dim(),
                    cfg.spatial_channels,
                    &mut layer_rng(5),
                ),
                Dense::xavier(cfg.spatial_channels, cfg.dense_dim, &mut layer_rng(6)),
            )
        });
        let (bcs1, bcs2) = match bcs {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let (spatial, spatial_dense) = match spatial {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        Ok(Self {
            bcs1,
            bcs2,
            enc1: Conv1d::xavier(k1, cfg.encoder_in_channels(), c1, &mut layer_rng(2)),
            enc2: Conv1d::xavier(k2, c1, c2, &mut layer_rng(3)),
            enc3: Conv1d::xavier(k3, c2, c3, &mut layer_rng(4)),
            spatial,
            spatial_dense,
            head: Dense::xavier(cfg.head_in_dim(), 2, &mut layer_rng(7)),
        })
    }

    /// Zero-valued parameters with the shapes `cfg` implies — the
    /// starting point for gradient accumulators and optimizer moments.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        for (_, mut a) in p.entries_mut() {
            a.fill(F::zero());
        }
        Ok(p)
    }

    /// Active arrays with their stable names, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, ndarray::ArrayViewD<'_, F>)> {
        let mut out: Vec<(&'static str, ndarray::ArrayViewD<'_, F>)> = Vec::new();
        if let Some(l) = &self.bcs1 {
            out.push(("bcs1.weight", l.weight.view().into_dyn()));
            out.push(("bcs1.bias", l.bias.view().into_dyn()));
        }
        if let Some(l) = &self.bcs2 {
            out.push(("bcs2.weight", l.weight.view().into_dyn()));
            out.push(("bcs2.bias", l.bias.view().into_dyn()));
        }
        out.push(("enc1.weight", self.enc1.weight.view().into_dyn()));
        out.push(("enc1.bias", self.enc1.bias.view().into_dyn()));
        out.push(("enc2.weight", self.enc2.weight.view().into_dyn()));
        out.push(("enc2.bias", self.enc2.bias.view().into_dyn()));
        out.push(("enc3.weight", self.enc3.weight.view().into_dyn()));
        out.push(("enc3.bias", self.enc3.bias.view().into_dyn()));
        if let Some(l) = &self.spatial {
            out.push(("spatial.weight", l.weight.view().into_dyn()));
            out.push(("spatial.bias", l.bias.view().into_dyn()));
        }
        if let Some(l) = &self.spatial_dense {
            out.push(("spatial_dense.weight", l.weight.view().into_dyn()));
            out.push(("spatial_dense.bias", l.bias.view().into_dyn()));
        }
        out.push(("head.weight", self.head.weight.view().into_dyn()));
        out.push(("head.bias", self.head.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Self::entries`], same order.
    pub fn entries_mut(&mut self) -> Vec<(&'static str, ndarray::ArrayViewMutD<'_, F>)> {
        let mut out: Vec<(&'static str, ndarray::ArrayViewMutD<'_, F>)> = Vec::new();
        if let Some(l) = &mut self.bcs1 {
            out.push(("bcs1.weight", l.weight.view_mut().into_dyn()));
            out.push(("bcs1.bias", l.bias.view_mut().into_dyn()));
        }
        if let Some(l) = &mut self.bcs2 {
            out.push(("bcs2.weight", l.weight.view_mut().into_dyn()));
            out.push(("bcs2.bias", l.bias.view_mut().into_dyn()));
        }
        out.push(("enc1.weight", self.enc1.weight.view_mut().into_dyn()));
        out.push(("enc1.bias", self.enc1.bias.view_mut().into_dyn()));
        out.push(("enc2.weight", self.enc2.weight.view_mut().into_dyn()));
        out.push(("enc2.bias", self.enc2.bias.view_mut().into_dyn()));
        out.push(("enc3.weight", self.enc3.weight.view_mut().into_dyn()));
        out.push(("enc3.bias", self.enc3.bias.view_mut().into_dyn()));
        if let Some(l) = &mut self.spatial {
            out.push(("spatial.weight", l.weight.view_mut().into_dyn()));
            out.push(("spatial.bias", l.bias.view_mut().into_dyn()));
        }
        if let Some(l) = &mut self.spatial_dense {
            out.push(("spatial_dense.weight", l.weight.view_mut().into_dyn()));
            out.push(("spatial_dense.bias", l.bias.view_mut().into_dyn()));
        }
        out.push(("head.weight", self.head.weight.view_mut().into_dyn()));
        out.push(("head.bias", self.head.bias.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += scale · other`. Both sides must expose the same layers.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        let theirs = other.entries();
        for ((name, mut mine), (other_name, them)) in self.entries_mut().into_iter().zip(theirs) {
            debug_assert_eq!(name, other_name);
            mine.zip_mut_with(&them, |a, &b| *a = *a + scale * b);
        }
    }

    pub fn scale(&mut self, scale: F) {
        for (_, mut a) in self.entries_mut() {
            a.mapv_inplace(|v| v * scale);
        }
    }

    /// Errors if any array holds a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, a) in self.entries() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("model parameter {name}")));
            }
        }
        Ok(())
    }

    /// Verifies that layer presence and every array shape match `cfg`.
    pub fn validate_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(cfg)?;
        let want = reference.entries();
        let have = self.entries();
        if want.len() != have.len() {
            return Err(Error::Config(format!(
                "checkpoint/config mismatch: {} parameter arrays present, config implies {}",
                have.len(),
                want.len()
            )));
        }
        for ((wn, wa), (hn, ha)) in want.iter().zip(have.iter()) {
            if wn != hn || wa.shape() != ha.shape() {
                return Err(Error::Config(format!(
                    "checkpoint/config mismatch for {hn}: shape {:?}, config expects {wn} {:?}",
                    ha.shape(),
                    wa.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Prediction for one case, destandardized to physical units.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    /// Predicted map in physical units.
    pub p_hat: PerfusionMap,
    /// Per-voxel uncertainty scale, strictly positive, physical units.
    pub b_hat: Array3<f32>,
    /// Predictive variance, `2·b_hat²` elementwise.
    pub sigma2: Array3<f32>,
}

/// Standardized frame-time channel: `(t − mean) / std` over the case's
/// frame grid, so the network sees absolute acquisition timing at unit
/// scale.
pub fn time_channel<F: Real>(frame_times: &Array1<f32>) -> Array1<F> {
    let n = frame_times.len();
    let mean = frame_times.iter().map(|&t| t as f64).sum::<f64>() / n as f64;
    let var = frame_times
        .iter()
        .map(|&t| (t as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std <= 0.0 {
        return Array1::zeros(n);
    }
    Array1::from_iter(
        frame_times
            .iter()
            .map(|&t| real::<F>((t as f64 - mean) / std)),
    )
}

/// Cuts the fixed bolus-characterization window out of a sequence,
/// adding the trailing channel axis the 3D convolutions expect.
pub fn extract_bcs_patch<F: Real>(
    seq: &Array4<f32>,
    cfg: &ModelConfig,
) -> Result<Array4<F>> {
    let (frames, slices, rows, cols) = seq.dim();
    let (cz, cy, cx) = cfg.bcs_center;
    let (ph, pw) = cfg.bcs_patch;
    let r0 = cy as isize - (ph / 2) as isize;
    let c0 = cx as isize - (pw / 2) as isize;
    if cz >= slices || r0 < 0 || c0 < 0 || r0 as usize + ph > rows || c0 as usize + pw > cols {
        return Err(Error::Invalid(format!(
            "bolus patch out of bounds: center ({cz},{cy},{cx}) size {ph}x{pw} \
             in volume {slices}x{rows}x{cols}"
        )));
    }
    let (r0, c0) = (r0 as usize, c0 as usize);
    let mut out = Array4::zeros((frames, ph, pw, 1));
    for t in 0..frames {
        for r in 0..ph {
            for c in 0..pw {
                out[[t, r, c, 0]] = real::<F>(seq[[t, cz, r0 + r, c0 + c]] as f64);
            }
        }
    }
    Ok(out)
}

/// Spatial mean over the patch plane: `(T, ph, pw, C) → (T, C)`.
fn bcs_gap<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (t_len, ph, pw, c) = x.dim();
    let inv = real::<F>(1.0 / (ph * pw) as f64);
    let mut out = Array2::zeros((t_len, c));
    for t in 0..t_len {
        for r in 0..ph {
            for w in 0..pw {
                for ch in 0..c {
                    out[[t, ch]] = out[[t, ch]] + x[[t, r, w, ch]];
                }
            }
        }
    }
    out.mapv_inplace(|v| v * inv);
    out
}

/// Encodes the fixed vessel-region patch sequence into one vector per
/// frame: two 3D convolutions with shape-preserving padding and selu,
/// then a spatial average per frame. Inference mode (no dropout).
pub fn bcs_encode<F: Real>(
    patch_seq: &Array3<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array2<F>> {
    let (bcs1, bcs2) = match (&params.bcs1, &params.bcs2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Config(
                "bolus characterization is disabled in this model".to_string(),
            ))
        }
    };
    let (t_len, ph, pw) = patch_seq.dim();
    if (ph, pw) != cfg.bcs_patch {
        return Err(Error::ShapeMismatch(format!(
            "bolus patch is {ph}x{pw}, config expects {}x{}",
            cfg.bcs_patch.0, cfg.bcs_patch.1
        )));
    }
    let x = patch_seq
        .to_owned()
        .into_shape_with_order((t_len, ph, pw, 1))
        .expect("adding a unit channel axis");
    let mut h = bcs1.forward(&x);
    selu_inplace(&mut h);
    let mut h = bcs2.forward(&h);
    selu_inplace(&mut h);
    Ok(bcs_gap(&h))
}

/// Stacks signal, frame-time, and shared bolus channels into the
/// encoder's `(T, N, C)` input.
fn assemble_encoder_input<F: Real>(
    signal: &Array2<F>, // (T, N)
    times: &Array1<F>,  // (T)
    bcs: Option<&Array2<F>>,
    cfg: &ModelConfig,
) -> Result<Array3<F>> {
    let (t_len, n) = signal.dim();
    if times.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "{} frame times for {t_len} frames of signal",
            times.len()
        )));
    }
    let channels = cfg.encoder_in_channels();
    let mut x = Array3::zeros((t_len, n, channels));
    x.slice_mut(ndarray::s![.., .., 0]).assign(signal);
    x.slice_mut(ndarray::s![.., .., 1]).assign(
        &times
            .view()
            .insert_axis(Axis(1))
            .broadcast((t_len, n))
            .expect("broadcast times over voxels"),
    );
    if cfg.use_bcs {
        let bcs = bcs.ok_or_else(|| {
            Error::Invalid("model expects a bolus encoding but none was supplied".to_string())
        })?;
        if bcs.dim().0 != t_len || bcs.dim().1 != cfg.bcs_embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "bolus encoding is {}x{}, expected {t_len}x{}",
                bcs.dim().0,
                bcs.dim().1,
                cfg.bcs_embed_dim
            )));
        }
        for e in 0..cfg.bcs_embed_dim {
            x.slice_mut(ndarray::s![.., .., 2 + e]).assign(
                &bcs.slice(ndarray::s![.., e])
                    .insert_axis(Axis(1))
                    .broadcast((t_len, n))
                    .expect("broadcast bolus channel over voxels"),
            );
        }
    }
    Ok(x)
}

/// The three-convolution temporal encoder, inference mode: conv+selu,
/// pool, conv+selu, pool, conv+selu, then a global average over time.
fn encoder_chain_infer<F: Real>(
    enc_in: Array3<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Array2<F> {
    let mut h = params.enc1.forward(&enc_in);
    drop(enc_in);
    selu_inplace(&mut h);
    let (mut h, _) = maxpool_time(&h, cfg.pool_factor);
    let mut h2 = params.enc2.forward(&h);
    selu_inplace(&mut h2);
    let (h2, _) = maxpool_time(&h2, cfg.pool_factor);
    h = h2;
    let mut h3 = params.enc3.forward(&h);
    selu_inplace(&mut h3);
    gap_time(&h3)
}

/// Encodes `N` voxel series (rows of `voxels`, one series per row) into
/// one vector of `cfg.encode_dim()` values each. The bolus encoding is
/// shared by all voxels of a case; pass `None` when the model runs
/// without it.
pub fn encode_voxel_sequences<F: Real>(
    voxels: &Array2<F>, // (N, T)
    frame_times: &Array1<F>,
    bcs: Option<&Array2<F>>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array2<F>> {
    let signal = voxels.t().to_owned();
    let enc_in = assemble_encoder_input(&signal, frame_times, bcs, cfg)?;
    Ok(encoder_chain_infer(enc_in, params, cfg))
}

/// Mixes neighboring voxels of one single-slice row band: a 3×3
/// convolution over `(rows, cols)` plus a per-position dense layer,
/// both selu. Identity when the block is disabled (the head then reads
/// the encodings directly).
pub fn spatial_correlate<F: Real>(
    encodings: &Array3<F>, // (rows, cols, encode_dim)
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array3<F>> {
    let (rows, cols, channels) = encodings.dim();
    if channels != cfg.encode_dim() {
        return Err(Error::ShapeMismatch(format!(
            "encodings carry {channels} channels, expected {}",
            cfg.encode_dim()
        )));
    }
    if !cfg.use_spatial_correlation {
        return Ok(encodings.clone());
    }
    let (conv, dense) = match (&params.spatial, &params.spatial_dense) {
        (Some(c), Some(d)) => (c, d),
        _ => {
            return Err(Error::Config(
                "spatial correlation enabled but its layers are absent".to_string(),
            ))
        }
    };
    let mut h = conv.forward(encodings);
    selu_inplace(&mut h);
    let flat = h
        .into_shape_with_order((rows * cols, cfg.spatial_channels))
        .expect("owned standard layout");
    let mut d = dense.forward(&flat);
    selu_inplace(&mut d);
    Ok(d
        .into_shape_with_order((rows, cols, cfg.dense_dim))
        .expect("consistent shape"))
}

/// The two-output regression head (identity activation): column 0 is
/// the standardized prediction, column 1 the log uncertainty scale ρ
/// with `b̂ = exp(ρ)`.
pub fn regress<F: Real>(
    features: &Array2<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array2<F>> {
    if features.dim().1 != cfg.head_in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "head features carry {} channels, expected {}",
            features.dim().1,
            cfg.head_in_dim()
        )));
    }
    Ok(params.head.forward(features))
}

/// Full-case inference: bolus encoding once per case, every slice
/// processed in row bands, outputs destandardized to physical units.
pub fn forward<F: Real>(
    case: &CaseRecord,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<PredictionResult> {
    params.validate_shapes(cfg)?;
    let (t_mean, t_std) = target_scale(case, cfg)?;
    let seq = case.sequence.data();
    let (_frames, slices, rows, cols) = seq.dim();
    if rows % cfg.patch_rows != 0 {
        return Err(Error::Invalid(format!(
            "patch rows {} do not divide volume rows {rows}",
            cfg.patch_rows
        )));
    }
    let times = time_channel::<F>(case.sequence.frame_times());
    let bcs_out = if cfg.use_bcs {
        let patch = extract_bcs_patch::<F>(seq, cfg)?;
        let (t_len, ph, pw, _) = patch.dim();
        let patch3 = patch
            .into_shape_with_order((t_len, ph, pw))
            .expect("dropping the unit channel axis");
        Some(bcs_encode(&patch3, params, cfg)?)
    } else {
        None
    };

    let mut p_hat = Array3::<f32>::zeros((slices, rows, cols));
    let mut b_hat = Array3::<f32>::zeros((slices, rows, cols));
    for z in 0..slices {
        for band in 0..rows / cfg.patch_rows {
            let r0 = band * cfg.patch_rows;
            let signal = band_signal::<F>(seq, z, r0, cfg.patch_rows);
            let enc_in = assemble_encoder_input(&signal, &times, bcs_out.as_ref(), cfg)?;
            let encoded = encoder_chain_infer(enc_in, params, cfg);
            let grid = encoded
                .into_shape_with_order((cfg.patch_rows, cols, cfg.encode_dim()))
                .expect("row-major voxel order");
            let features = spatial_correlate(&grid, params, cfg)?;
            let flat = features
                .into_shape_with_order((cfg.patch_rows * cols, cfg.head_in_dim()))
                .expect("owned standard layout");
            let out = regress(&flat, params, cfg)?;
            for r in 0..cfg.patch_rows {
                for c in 0..cols {
                    let n = r * cols + c;
                    let p_std = out[[n, 0]].to_f64().expect("finite network output");
                    let rho = out[[n, 1]].to_f64().expect("finite network output");
                    p_hat[[z, r0 + r, c]] = (t_mean + t_std * p_std) as f32;
                    b_hat[[z, r0 + r, c]] =
                        ((t_std * rho.exp()) as f32).max(f32::MIN_POSITIVE);
                }
            }
        }
    }
    let sigma2 = b_hat.mapv(|b| 2.0 * b * b);
    Ok(PredictionResult {
        p_hat: PerfusionMap::new(p_hat, cfg.target)?,
        b_hat,
        sigma2,
    })
}

/// Standardized series of one row band as a `(T, N)` matrix, voxels in
/// row-major (row, col) order.
pub fn band_signal<F: Real>(
    seq: &Array4<f32>,
    slice: usize,
    row0: usize,
    band_rows: usize,
) -> Array2<F> {
    let (frames, _slices, _rows, cols) = seq.dim();
    let mut out = Array2::zeros((frames, band_rows * cols));
    for t in 0..frames {
        for r in 0..band_rows {
            for c in 0..cols {
                out[[t, r * cols + c]] = real::<F>(seq[[t, slice, row0 + r, c]] as f64);
            }
        }
    }
    out
}

/// Target-map standardization statistics required for destandardized
/// output; absent stats mean the case never went through preprocessing.
pub(crate) fn target_scale(case: &CaseRecord, cfg: &ModelConfig) -> Result<(f64, f64)> {
    if case.seq_stats.is_none() {
        return Err(Error::Invalid(format!(
            "unpreprocessed input: case {} has no sequence statistics",
            case.case_id
        )));
    }
    match case.target_stats.get(&cfg.target) {
        Some(&(mean, std)) => Ok((mean, std)),
        None => Err(Error::Invalid(format!(
            "unpreprocessed input: case {} has no {} statistics",
            case.case_id, cfg.target
        ))),
    }
}

/// Every intermediate of one training patch, recorded by
/// [`forward_patch`] for the exact backward pass. `mask`/`fed` slots
/// stay `None` when dropout is off.
pub struct PatchTape<F: Real> {
    band_rows: usize,
    cols: usize,
    bcs_in: Option<Array4<F>>,
    b1_act: Option<Array4<F>>,
    b1_mask: Option<Array4<F>>,
    b1_fed: Option<Array4<F>>,
    b2_act: Option<Array4<F>>,
    b2_mask: Option<Array4<F>>,
    enc_in: Array3<F>,
    e1_act: Array3<F>,
    e1_arg: Array3<u8>,
    e1_pool: Array3<F>,
    e1_mask: Option<Array3<F>>,
    e1_fed: Option<Array3<F>>,
    e2_act: Array3<F>,
    e2_arg: Array3<u8>,
    e2_pool: Array3<F>,
    e2_mask: Option<Array3<F>>,
    e2_fed: Option<Array3<F>>,
    e3_act: Array3<F>,
    e3_mask: Option<Array3<F>>,
    gap: Array2<F>,
    sp_act: Option<Array3<F>>,
    sp_mask: Option<Array3<F>>,
    sp_fed: Option<Array3<F>>,
    sd_act: Option<Array2<F>>,
    sd_mask: Option<Array2<F>>,
    head_in: Array2<F>,
}

fn apply_dropout<F: Real, D: Dimension>(
    act: &ndarray::Array<F, D>,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (Option<ndarray::Array<F, D>>, Option<ndarray::Array<F, D>>) {
    match rng.as_deref_mut() {
        Some(r) if rate > 0.0 => {
            let mask = dropout_mask::<F, D>(act.raw_dim(), rate, r);
            let fed = act * &mask;
            (Some(mask), Some(fed))
        }
        _ => (None, None),
    }
}

/// One training patch: the full forward pass with every intermediate
/// recorded. `dropout_rng = None` disables dropout and makes the output
/// bit-identical to the inference ops. Output rows follow the voxel
/// order of `signal`'s columns; column 0 is p̂ (standardized), column 1
/// is ρ.
#[allow(clippy::too_many_arguments)]
pub fn forward_patch<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    signal: &Array2<F>, // (T, N), N = band_rows · cols
    times: &Array1<F>,
    bcs_patch: Option<&Array4<F>>, // (T, ph, pw, 1)
    band_rows: usize,
    cols: usize,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<F>, PatchTape<F>)> {
    let (_t_len, n) = signal.dim();
    if n != band_rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "patch signal carries {n} voxels, geometry implies {band_rows}x{cols}"
        )));
    }
    let rate = cfg.conv_dropout;

    // Bolus branch.
    let (mut bcs_in, mut b1_act, mut b1_mask, mut b1_fed) = (None, None, None, None);
    let (mut b2_act, mut b2_mask) = (None, None);
    let bcs_out = if cfg.use_bcs {
        let (bcs1, bcs2) = match (&params.bcs1, &params.bcs2) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(
                    "bolus characterization enabled but its layers are absent".to_string(),
                ))
            }
        };
        let x = bcs_patch
            .ok_or_else(|| {
                Error::Invalid("model expects a bolus patch but none was supplied".to_string())
            })?
            .to_owned();
        let mut a1 = bcs1.forward(&x);
        selu_inplace(&mut a1);
        let (m1, f1) = apply_dropout(&a1, rate, &mut dropout_rng);
        let mut a2 = bcs2.forward(f1.as_ref().unwrap_or(&a1));
        selu_inplace(&mut a2);
        let (m2, f2) = apply_dropout(&a2, rate, &mut dropout_rng);
        let out = bcs_gap(f2.as_ref().unwrap_or(&a2));
        bcs_in = Some(x);
        b1_act = Some(a1);
        b1_mask = m1;
        b1_fed = f1;
        b2_act = Some(a2);
        b2_mask = m2;
        let _ = f2;
        Some(out)
    } else {
        None
    };

    // Temporal encoder.
    let enc_in = assemble_encoder_input(signal, times, bcs_out.as_ref(), cfg)?;
    let mut e1_act = params.enc1.forward(&enc_in);
    selu_inplace(&mut e1_act);
    let (e1_pool, e1_arg) = maxpool_time(&e1_act, cfg.pool_factor);
    let (e1_mask, e1_fed) = apply_dropout(&e1_pool, rate, &mut dropout_rng);
    let mut e2_act = params.enc2.forward(e1_fed.as_ref().unwrap_or(&e1_pool));
    selu_inplace(&mut e2_act);
    let (e2_pool, e2_arg) = maxpool_time(&e2_act, cfg.pool_factor);
    let (e2_mask, e2_fed) = apply_dropout(&e2_pool, rate, &mut dropout_rng);
    let mut e3_act = params.enc3.forward(e2_fed.as_ref().unwrap_or(&e2_pool));
    selu_inplace(&mut e3_act);
    let (e3_mask, e3_fed) = apply_dropout(&e3_act, rate, &mut dropout_rng);
    let gap = gap_time(e3_fed.as_ref().unwrap_or(&e3_act));
    drop(e3_fed);

    // Spatial branch.
    let (mut sp_act, mut sp_mask, mut sp_fed) = (None, None, None);
    let (mut sd_act, mut sd_mask) = (None, None);
    let head_in: Array2<F> = if cfg.use_spatial_correlation {
        let (conv, dense) = match (&params.spatial, &params.spatial_dense) {
            (Some(c), Some(d)) => (c, d),
            _ => {
                return Err(Error::Config(
                    "spatial correlation enabled but its layers are absent".to_string(),
                ))
            }
        };
        let grid = gap
            .clone()
            .into_shape_with_order((band_rows, cols, cfg.encode_dim()))
            .expect("row-major voxel order");
        let mut a = conv.forward(&grid);
        selu_inplace(&mut a);
        let (m, f) = apply_dropout(&a, rate, &mut dropout_rng);
        let flat = f
            .as_ref()
            .unwrap_or(&a)
            .clone()
            .into_shape_with_order((n, cfg.spatial_channels))
            .expect("owned standard layout");
        let mut d = dense.forward(&flat);
        selu_inplace(&mut d);
        let (dm, df) = apply_dropout(&d, cfg.fc_dropout, &mut dropout_rng);
        let fed = df.clone().unwrap_or_else(|| d.clone());
        sp_act = Some(a);
        sp_mask = m;
        sp_fed = f;
        sd_act = Some(d);
        sd_mask = dm;
        fed
    } else {
        gap.clone()
    };
    let out = params.head.forward(&head_in);

    let tape = PatchTape {
        band_rows,
        cols,
        bcs_in,
        b1_act,
        b1_mask,
        b1_fed,
        b2_act,
        b2_mask,
        enc_in,
        e1_act,
        e1_arg,
        e1_pool,
        e1_mask,
        e1_fed,
        e2_act,
        e2_arg,
        e2_pool,
        e2_mask,
        e2_fed,
        e3_act,
        e3_mask,
        gap,
        sp_act,
        sp_mask,
        sp_fed,
        sd_act,
        sd_mask,
        head_in,
    };
    Ok((out, tape))
}

fn selu_backward_inplace<F: Real, D: Dimension>(
    grad: &mut ndarray::Array<F, D>,
    act: &ndarray::Array<F, D>,
) {
    grad.zip_mut_with(act, |g, &a| *g = *g * selu_grad_from_act(a));
}

fn mask_backward_inplace<F: Real, D: Dimension>(
    grad: &mut ndarray::Array<F, D>,
    mask: &Option<ndarray::Array<F, D>>,
) {
    if let Some(m) = mask {
        grad.zip_mut_with(m, |g, &v| *g = *g * v);
    }
}

/// Exact gradients of one patch. `d_out` is the loss gradient w.r.t.
/// the head outputs, shape `(N, 2)`. Returns gradients in a
/// [`ModelParams`] of the same layout as `params`.
pub fn backward_patch<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    tape: &PatchTape<F>,
    d_out: &Array2<F>,
) -> Result<ModelParams<F>> {
    let mut grads = ModelParams::zeros(cfg)?;
    let (g_head, d_head_in) = params.head.backward(&tape.head_in, d_out);
    grads.head = g_head;

    // Spatial branch.
    let d_gap: Array2<F> = if cfg.use_spatial_correlation {
        let (conv, dense) = (
            params.spatial.as_ref().expect("validated above"),
            params.spatial_dense.as_ref().expect("validated above"),
        );
        let sd_act = tape.sd_act.as_ref().expect("spatial tape present");
        let sp_act = tape.sp_act.as_ref().expect("spatial tape present");
        let mut d_sd = d_head_in;
        mask_backward_inplace(&mut d_sd, &tape.sd_mask);
        selu_backward_inplace(&mut d_sd, sd_act);
        let sp_flat = tape
            .sp_fed
            .as_ref()
            .unwrap_or(sp_act)
            .clone()
            .into_shape_with_order((tape.band_rows * tape.cols, cfg.spatial_channels))
            .expect("owned standard layout");
        let (g_dense, d_sp_flat) = dense.backward(&sp_flat, &d_sd);
        grads.spatial_dense = Some(g_dense);
        let mut d_sp = d_sp_flat
            .into_shape_with_order((tape.band_rows, tape.cols, cfg.spatial_channels))
            .expect("consistent shape");
        mask_backward_inplace(&mut d_sp, &tape.sp_mask);
        selu_backward_inplace(&mut d_sp, sp_act);
        let grid = tape
            .gap
            .clone()
            .into_shape_with_order((tape.band_rows, tape.cols, cfg.encode_dim()))
            .expect("row-major voxel order");
        let (g_conv, d_grid) = conv.backward(&grid, &d_sp);
        grads.spatial = Some(g_conv);
        d_grid
            .into_shape_with_order((tape.band_rows * tape.cols, cfg.encode_dim()))
            .expect("consistent shape")
    } else {
        d_head_in
    };

    // Temporal encoder, reversed.
    let t3 = tape.e3_act.dim().0;
    let mut d_e3 = gap_time_backward(&d_gap, t3);
    mask_backward_inplace(&mut d_e3, &tape.e3_mask);
    selu_backward_inplace(&mut d_e3, &tape.e3_act);
    let (g3, mut d_e2_fed) =
        params
            .enc3
            .backward(tape.e2_fed.as_ref().unwrap_or(&tape.e2_pool), &d_e3);
    grads.enc3 = g3;
    mask_backward_inplace(&mut d_e2_fed, &tape.e2_mask);
    let mut d_e2 = maxpool_time_backward(
        &tape.e2_arg,
        &d_e2_fed,
        tape.e2_act.dim().0,
        cfg.pool_factor,
    );
    selu_backward_inplace(&mut d_e2, &tape.e2_act);
    let (g2, mut d_e1_fed) =
        params
            .enc2
            .backward(tape.e1_fed.as_ref().unwrap_or(&tape.e1_pool), &d_e2);
    grads.enc2 = g2;
    mask_backward_inplace(&mut d_e1_fed, &tape.e1_mask);
    let mut d_e1 = maxpool_time_backward(
        &tape.e1_arg,
        &d_e1_fed,
        tape.e1_act.dim().0,
        cfg.pool_factor,
    );
    selu_backward_inplace(&mut d_e1, &tape.e1_act);
    let (g1, d_enc_in) = params.enc1.backward(&tape.enc_in, &d_e1);
    grads.enc1 = g1;

    // Bolus branch: its channels are broadcast to every voxel, so the
    // incoming gradient is the sum over voxels.
    if cfg.use_bcs {
        let (bcs1, bcs2) = (
            params.bcs1.as_ref().expect("validated above"),
            params.bcs2.as_ref().expect("validated above"),
        );
        let bcs_in = tape.bcs_in.as_ref().expect("bolus tape present");
        let b1_act = tape.b1_act.as_ref().expect("bolus tape present");
        let b2_act = tape.b2_act.as_ref().expect("bolus tape present");
        let (t_len, ph, pw, _c) = b2_act.dim();
        let embed = cfg.bcs_embed_dim;
        let mut d_bcs_out = Array2::<F>::zeros((t_len, embed));
        for t in 0..t_len {
            for v in 0..d_enc_in.dim().1 {
                for e in 0..embed {
                    d_bcs_out[[t, e]] = d_bcs_out[[t, e]] + d_enc_in[[t, v, 2 + e]];
                }
            }
        }
        // Backward through the per-frame spatial average.
        let inv = real::<F>(1.0 / (ph * pw) as f64);
        let mut d_b2 = Array4::<F>::zeros(b2_act.raw_dim());
        for t in 0..t_len {
            for r in 0..ph {
                for w in 0..pw {
                    for e in 0..embed {
                        d_b2[[t, r, w, e]] = d_bcs_out[[t, e]] * inv;
                    }
                }
            }
        }
        mask_backward_inplace(&mut d_b2, &tape.b2_mask);
        selu_backward_inplace(&mut d_b2, b2_act);
        let (gb2, mut d_b1_fed) =
            bcs2.backward(tape.b1_fed.as_ref().unwrap_or(b1_act), &d_b2);
        grads.bcs2 = Some(gb2);
        mask_backward_inplace(&mut d_b1_fed, &tape.b1_mask);
        selu_backward_inplace(&mut d_b1_fed, b1_act);
        let (gb1, _d_bcs_in) = bcs1.backward(bcs_in, &d_b1_fed);
        grads.bcs1 = Some(gb1);
    }
    Ok(grads)
}
