//! Figure panels: target, prediction, and predictive variance of one
//! slice rendered side by side as a grayscale PNG.

use std::path::Path;

use image::{GrayImage, ImageFormat};
use ndarray::ArrayView2;

use crate::data::{CaseRecord, MapKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredictionResult};
use crate::preprocess;

/// Width of the white gap between adjacent panels, in pixels.
const SEPARATOR: usize = 2;

/// Display window for a perfusion map: the clinically interesting range
/// for the timing maps, the full data range for flow.
fn map_window(kind: MapKind, data: &ndarray::Array3<f32>) -> (f32, f32) {
    match kind {
        MapKind::Tmax | MapKind::Ttp => (0.0, 20.0),
        MapKind::Rbf => {
            let hi = data.iter().copied().fold(0.0f32, f32::max);
            (0.0, if hi > 0.0 { hi } else { 1.0 })
        }
    }
}

fn shade(v: f32, (lo, hi): (f32, f32)) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders `target | prediction | variance` for one slice into a PNG.
///
/// Target and prediction share a display window so they are visually
/// comparable; the variance panel is windowed to its own volume maximum.
pub fn emit_panels(
    case: &CaseRecord,
    pred: &PredictionResult,
    cfg: &ModelConfig,
    slice: usize,
    path: &Path,
) -> Result<()> {
    let target = preprocess::physical_target(case, cfg.target)?;
    if target.dim() != pred.p_hat.data().dim() {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} vs prediction {:?}",
            target.dim(),
            pred.p_hat.data().dim()
        )));
    }
    let (slices, rows, cols) = target.dim();
    if slice >= slices {
        return Err(Error::Invalid(format!(
            "slice {slice} out of range for a {slices}-slice volume"
        )));
    }

    let map_win = map_window(cfg.target, &target);
    let var_hi = pred.sigma2.iter().copied().fold(0.0f32, f32::max);
    let var_win = (0.0, if var_hi > 0.0 { var_hi } else { 1.0 });

    let panels: [(ArrayView2<f32>, (f32, f32)); 3] = [
        (target.index_axis(ndarray::Axis(0), slice), map_win),
        (
            pred.p_hat.data().index_axis(ndarray::Axis(0), slice),
            map_win,
        ),
        (pred.sigma2.index_axis(ndarray::Axis(0), slice), var_win),
    ];

    let width = 3 * cols + 2 * SEPARATOR;
    let mut img = GrayImage::from_pixel(width as u32, rows as u32, image::Luma([255u8]));
    for (p, (panel, win)) in panels.iter().enumerate() {
        let x0 = p * (cols + SEPARATOR);
        for r in 0..rows {
            for c in 0..cols {
                img.put_pixel(
                    (x0 + c) as u32,
                    r as u32,
                    image::Luma([shade(panel[[r, c]], *win)]),
                );
            }
        }
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path)(source),
            other => Error::Invalid(format!("png encoding failed: {other}")),
        })
}
