//! Architecture and ablation configuration.
//!
//! One `ModelConfig` describes everything needed to rebuild a network:
//! which target map it predicts, which components are enabled, and every
//! layer dimension. Configs serialize to `key=value` lines so the same
//! representation serves checkpoint manifests and `--config` files.
//!
//! Fixed choices not exposed as fields: selu activations, Xavier-uniform
//! initialization, and no batch normalization.

use crate::data::MapKind;
use crate::error::{Error, Result};
use crate::objective::{LossConfig, LossKind};

/// Ablation variants: A is the full model, each other letter removes one
/// component (B augmentation, C spatial correlation, D bolus
/// characterization, E loss weighting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
        }
    }

    /// What the variant removes, for report labeling.
    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "full model",
            Variant::B => "no augmentation",
            Variant::C => "no spatial correlation",
            Variant::D => "no bolus characterization",
            Variant::E => "no loss weighting",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            "E" | "e" => Ok(Variant::E),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected one of A, B, C, D, E)"
            ))),
        }
    }
}

/// Every architecture hyperparameter plus the ablation toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Which perfusion map this model predicts.
    pub target: MapKind,
    /// Feed the fixed vessel-patch encoding to every voxel sequence.
    pub use_bcs: bool,
    /// Run the 2D spatial-correlation block after the encoder.
    pub use_spatial_correlation: bool,
    /// Apply the importance-interval weights in the training loss.
    pub use_loss_weighting: bool,
    /// Augment training cases with random temporal shifts.
    pub use_augmentation: bool,
    pub loss_kind: LossKind,
    /// Center (slice, row, col) of the fixed bolus-characterization patch.
    pub bcs_center: (usize, usize, usize),
    /// Patch extent (rows, cols) around the center.
    pub bcs_patch: (usize, usize),
    /// Channel width of the first bolus-characterization convolution.
    pub bcs_hidden_channels: usize,
    /// Per-frame embedding size produced by the second convolution.
    pub bcs_embed_dim: usize,
    pub encoder_channels: (usize, usize, usize),
    pub encoder_kernel_sizes: (usize, usize, usize),
    pub pool_factor: usize,
    pub spatial_kernel: usize,
    pub spatial_channels: usize,
    pub dense_dim: usize,
    pub conv_dropout: f64,
    pub fc_dropout: f64,
    /// Rows per stitched forward/training patch (each patch spans one
    /// slice and all columns).
    pub patch_rows: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: geometry sized for the reference phantom
    /// volumes (4 slices of 64 × 64), with the patch centered on the
    /// synthetic vessel.
    pub fn desk(target: MapKind) -> Self {
        Self {
            target,
            use_bcs: true,
            use_spatial_correlation: true,
            use_loss_weighting: true,
            use_augmentation: true,
            loss_kind: LossKind::WeightedLaplaceNll,
            bcs_center: (2, 32, 32),
            bcs_patch: (16, 16),
            bcs_hidden_channels: 8,
            bcs_embed_dim: 16,
            encoder_channels: (64, 128, 256),
            encoder_kernel_sizes: (5, 5, 3),
            pool_factor: 2,
            spatial_kernel: 3,
            spatial_channels: 128,
            dense_dim: 64,
            conv_dropout: 0.5,
            fc_dropout: 0.0,
            patch_rows: 8,
        }
    }

    /// Clinical-scale geometry: 24 slices of 256 × 256 processed in
    /// 1 × 32 × 256 row bands, patch centered mid-volume.
    pub fn clinical(target: MapKind) -> Self {
        Self {
            bcs_center: (12, 128, 128),
            patch_rows: 32,
            ..Self::desk(target)
        }
    }

    /// Applies an ablation variant's toggles.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::A => {}
            Variant::B => self.use_augmentation = false,
            Variant::C => self.use_spatial_correlation = false,
            Variant::D => self.use_bcs = false,
            Variant::E => self.use_loss_weighting = false,
        }
        self
    }

    /// Simplified configuration used for the secondary map types: squared
    /// loss with the bolus and spatial blocks off. Each toggle can still
    /// be overridden afterwards.
    pub fn simplified(mut self) -> Self {
        self.loss_kind = LossKind::Squared;
        self.use_bcs = false;
        self.use_spatial_correlation = false;
        self
    }

    /// Encoder output width; by construction the last channel count.
    pub fn encode_dim(&self) -> usize {
        self.encoder_channels.2
    }

    /// Number of input channels to the first encoder convolution:
    /// signal + frame time, plus the bolus embedding when enabled.
    pub fn encoder_in_channels(&self) -> usize {
        2 + if self.use_bcs { self.bcs_embed_dim } else { 0 }
    }

    /// Input width of the regression head: the spatial block's dense
    /// output, or the raw encoding when that block is disabled.
    pub fn head_in_dim(&self) -> usize {
        if self.use_spatial_correlation {
            self.dense_dim
        } else {
            self.encode_dim()
        }
    }

    /// Loss settings implied by the toggles: disabling loss weighting
    /// turns both interval weights into 1.0 and touches nothing else.
    pub fn loss_config(&self) -> LossConfig {
        let mut cfg = if self.use_loss_weighting {
            LossConfig::default()
        } else {
            LossConfig::unweighted()
        };
        cfg.loss_kind = self.loss_kind;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("bcs_patch rows", self.bcs_patch.0),
            ("bcs_patch cols", self.bcs_patch.1),
            ("bcs_hidden_channels", self.bcs_hidden_channels),
            ("bcs_embed_dim", self.bcs_embed_dim),
            ("encoder_channels.0", self.encoder_channels.0),
            ("encoder_channels.1", self.encoder_channels.1),
            ("encoder_channels.2", self.encoder_channels.2),
            ("spatial_channels", self.spatial_channels),
            ("dense_dim", self.dense_dim),
            ("patch_rows", self.patch_rows),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, k) in [
            ("encoder_kernel_sizes.0", self.encoder_kernel_sizes.0),
            ("encoder_kernel_sizes.1", self.encoder_kernel_sizes.1),
            ("encoder_kernel_sizes.2", self.encoder_kernel_sizes.2),
            ("spatial_kernel", self.spatial_kernel),
        ] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd (got {k})")));
            }
        }
        if self.pool_factor < 2 {
            return Err(Error::Config(format!(
                "pool_factor must be at least 2 (got {})",
                self.pool_factor
            )));
        }
        for (name, d) in [
            ("conv_dropout", self.conv_dropout),
            ("fc_dropout", self.fc_dropout),
        ] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("{name} must be in [0, 1) (got {d})")));
            }
        }
        Ok(())
    }

    /// Serializes to ordered `key=value` pairs (see [`Self::apply_kv`]).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("target", self.target.to_string()),
            kv("use_bcs", self.use_bcs.to_string()),
            kv(
                "use_spatial_correlation",
                self.use_spatial_correlation.to_string(),
            ),
            kv("use_loss_weighting", self.use_loss_weighting.to_string()),
            kv("use_augmentation", self.use_augmentation.to_string()),
            kv("loss_kind", self.loss_kind.to_string()),
            kv(
                "bcs_center",
                format!(
                    "{},{},{}",
                    self.bcs_center.0, self.bcs_center.1, self.bcs_center.2
                ),
            ),
            kv(
                "bcs_patch",
                format!("{},{}", self.bcs_patch.0, self.bcs_patch.1),
            ),
            kv("bcs_hidden_channels", self.bcs_hidden_channels.to_string()),
            kv("bcs_embed_dim", self.bcs_embed_dim.to_string()),
            kv(
                "encoder_channels",
                format!(
                    "{},{},{}",
                    self.encoder_channels.0, self.encoder_channels.1, self.encoder_channels.2
                ),
            ),
            kv(
                "encoder_kernel_sizes",
                format!(
                    "{},{},{}",
                    self.encoder_kernel_sizes.0,
                    self.encoder_kernel_sizes.1,
                    self.encoder_kernel_sizes.2
                ),
            ),
            kv("pool_factor", self.pool_factor.to_string()),
            kv("spatial_kernel", self.spatial_kernel.to_string()),
            kv("spatial_channels", self.spatial_channels.to_string()),
            kv("dense_dim", self.dense_dim.to_string()),
            kv("conv_dropout", self.conv_dropout.to_string()),
            kv("fc_dropout", self.fc_dropout.to_string()),
            kv("patch_rows", self.patch_rows.to_string()),
        ]
    }

    /// Applies one serialized `key=value` pair; unknown keys error so
    /// typos in config files surface immediately.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str) -> Error {
            Error::Config(format!("invalid value {value:?} for {key}"))
        }
        let parse_usize =
            |v: &str| -> Result<usize> { v.trim().parse().map_err(|_| bad(key, value)) };
        let parse_bool =
            |v: &str| -> Result<bool> { v.trim().parse().map_err(|_| bad(key, value)) };
        let parse_f64 = |v: &str| -> Result<f64> { v.trim().parse().map_err(|_| bad(key, value)) };
        let parse_triple = |v: &str| -> Result<(usize, usize, usize)> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad(key, value));
            }
            Ok((
                parts[0].parse().map_err(|_| bad(key, value))?,
                parts[1].parse().map_err(|_| bad(key, value))?,
                parts[2].parse().map_err(|_| bad(key, value))?,
            ))
        };
        match key {
            "target" => self.target = value.parse()?,
            "use_bcs" => self.use_bcs = parse_bool(value)?,
            "use_spatial_correlation" => self.use_spatial_correlation = parse_bool(value)?,
            "use_loss_weighting" => self.use_loss_weighting = parse_bool(value)?,
            "use_augmentation" => self.use_augmentation = parse_bool(value)?,
            "loss_kind" => self.loss_kind = value.parse()?,
            "bcs_center" => self.bcs_center = parse_triple(value)?,
            "bcs_patch" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad(key, value));
                }
                self.bcs_patch = (parse_usize(parts[0])?, parse_usize(parts[1])?);
            }
            "bcs_hidden_channels" => self.bcs_hidden_channels = parse_usize(value)?,
            "bcs_embed_dim" => self.bcs_embed_dim = parse_usize(value)?,
            "encoder_channels" => self.encoder_channels = parse_triple(value)?,
            "encoder_kernel_sizes" => self.encoder_kernel_sizes = parse_triple(value)?,
            "pool_factor" => self.pool_factor = parse_usize(value)?,
            "spatial_kernel" => self.spatial_kernel = parse_usize(value)?,
            "spatial_channels" => self.spatial_channels = parse_usize(value)?,
            "dense_dim" => self.dense_dim = parse_usize(value)?,
            "conv_dropout" => self.conv_dropout = parse_f64(value)?,
            "fc_dropout" => self.fc_dropout = parse_f64(value)?,
            "patch_rows" => self.patch_rows = parse_usize(value)?,
            other => {
                return Err(Error::Config(format!("unknown model config key {other:?}")));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(MapKind::Tmax)
    }
}
