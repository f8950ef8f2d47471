use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Size and placement summary of a binary mask, all fields in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TumorGeometry {
    /// Fraction of pixels inside the mask.
    pub w: f64,
    pub centroid_x: f64,
    pub centroid_y: f64,
    /// `[x_min, y_min, x_max, y_max]`.
    pub bbox: [f64; 4],
}

pub const GEOMETRY_FEATURES: usize = 7;

impl TumorGeometry {
    pub fn features(&self) -> [f64; GEOMETRY_FEATURES] {
        let [a, b, c, d] = self.bbox;
        [self.w, self.centroid_x, self.centroid_y, a, b, c, d]
    }

    pub fn is_empty(&self) -> bool {
        *self == TumorGeometry::default()
    }
}

/// Geometry of a binary mask whose last two axes are `H, W`; any leading
/// axes must be of size one.
pub fn tumor_geometry(mask: &Tensor) -> Result<TumorGeometry> {
    let shape = mask.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::dim("tumor_geometry", "leading axes", format!("expected [..1, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if let Some(bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("mask value {bad} is not 0 or 1")));
    }
    let (mut count, mut sx, mut sy) = (0usize, 0.0, 0.0);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] == 1.0 {
                count += 1;
                sx += x as f64;
                sy += y as f64;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if count == 0 {
        return Ok(TumorGeometry::default());
    }
    let nx = (w.max(2) - 1) as f64;
    let ny = (h.max(2) - 1) as f64;
    let n = count as f64;
    Ok(TumorGeometry {
        w: n / (h * w) as f64,
        centroid_x: sx / n / nx,
        centroid_y: sy / n / ny,
        bbox: [x0 as f64 / nx, y0 as f64 / ny, x1 as f64 / nx, y1 as f64 / ny],
    })
}
