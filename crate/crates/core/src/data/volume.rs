use super::record::SliceRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NORMALIZE_EPS: f64 = 1e-8;

/// `(x − min)/(max − min + ε)` over the whole volume.
pub fn normalize_volume(volume: &Tensor) -> Tensor {
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if volume.numel() == 0 {
        return volume.clone();
    }
    let span = hi - lo + NORMALIZE_EPS;
    volume.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

fn center_crop(slice: &[f64], h: usize, w: usize, crop: usize) -> Tensor {
    let (top, left) = ((h - crop) / 2, (w - crop) / 2);
    Tensor::from_fn(vec![1, crop, crop], |i| {
        let (y, x) = (i / crop, i % crop);
        slice[(top + y) * w + left + x]
    })
}

/// Axial `[D,H,W]` volume to normalized, center-cropped slices, keeping only
/// slices where either mask has a nonzero voxel.
pub fn slice_volume(
    volume: &Tensor,
    tumor_mask: &Tensor,
    healthy_mask: &Tensor,
    crop: usize,
    subject_id: &str,
) -> Result<Vec<SliceRecord>> {
    let shape = volume.shape();
    if shape.len() != 3 {
        return Err(Error::dim("slice_volume", "rank", format!("expected [D,H,W], got {shape:?}")));
    }
    if tumor_mask.shape() != shape || healthy_mask.shape() != shape {
        return Err(Error::dim(
            "slice_volume",
            "all",
            format!("masks {:?} / {:?} vs volume {shape:?}", tumor_mask.shape(), healthy_mask.shape()),
        ));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if crop == 0 || crop > h.min(w) {
        return Err(Error::Config(format!("crop {crop} does not fit a {h}x{w} slice")));
    }
    for m in [tumor_mask, healthy_mask] {
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("{subject_id}: masks must be binary")));
        }
    }
    let norm = normalize_volume(volume);
    let plane = h * w;
    let mut out = Vec::new();
    for z in 0..d {
        let range = z * plane..(z + 1) * plane;
        let tm = &tumor_mask.data()[range.clone()];
        let hm = &healthy_mask.data()[range.clone()];
        if tm.iter().chain(hm).all(|&v| v == 0.0) {
            continue;
        }
        let record = SliceRecord {
            image: center_crop(&norm.data()[range], h, w, crop),
            tumor_mask: center_crop(tm, h, w, crop),
            healthy_mask: center_crop(hm, h, w, crop),
            subject_id: subject_id.to_string(),
            slice_index: z,
        };
        out.push(record);
    }
    Ok(out)
}
