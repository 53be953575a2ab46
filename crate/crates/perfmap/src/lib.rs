//! Voxelwise regression of DSC-MRI perfusion maps (Tmax, TTP, RBF) from
//! raw 4D perfusion sequences.
//!
//! The crate covers the full experimental loop on synthetic data:
//!
//! * [`phantom`] — a tracer-kinetic simulator that produces perfusion
//!   cases with known ground truth, plus an oscillation-index SVD
//!   deconvolution oracle that derives target maps the classical way;
//! * [`preprocess`] — padding, standardization, temporal smoothing, and
//!   temporal-shift augmentation;
//! * [`model`] — the convolutional regression network: a bolus
//!   characterization encoder for a fixed vessel patch, a per-voxel
//!   sequence encoder, within-slice spatial correlation, and a
//!   two-output head predicting each voxel's value and uncertainty;
//! * [`objective`] — the weighted heteroscedastic Laplace loss, squared
//!   loss, and the clipped mean-absolute-error metric (MAEC);
//! * [`harness`] — training, evaluation, ablations, shift sweeps, and
//!   figure-panel rendering behind a CLI;
//! * [`data`] — domain types and the bit-exact on-disk case format.
//!
//! Real values are `f32` on disk and for training; the numeric kernels
//! are generic so gradient checks can run the same code in `f64`.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod phantom;
pub mod preprocess;
pub mod util;

pub use error::{Error, Result};
