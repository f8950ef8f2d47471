use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One 2-D slice with its masks and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    /// `[1,H,W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1,H,W]` binary.
    pub tumor_mask: Tensor,
    /// `[1,H,W]` binary; the region used as the inpainting target.
    pub healthy_mask: Tensor,
    pub subject_id: String,
    pub slice_index: usize,
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

impl SliceRecord {
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Validation(format!("image must be [1,H,W], got {shape:?}")));
        }
        if self.tumor_mask.shape() != shape || self.healthy_mask.shape() != shape {
            return Err(Error::Validation(format!(
                "{}: mask shapes {:?} / {:?} differ from image {shape:?}",
                self.subject_id,
                self.tumor_mask.shape(),
                self.healthy_mask.shape()
            )));
        }
        if !is_binary(&self.tumor_mask) || !is_binary(&self.healthy_mask) {
            return Err(Error::Validation(format!("{}: masks must be binary", self.subject_id)));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("{}: image outside [0, 1]", self.subject_id)));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}-s{:03}", self.subject_id, self.slice_index)
    }

    /// Hex SHA-256 over the id and the little-endian bytes of every tensor.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.id().as_bytes());
        for t in [&self.image, &self.tumor_mask, &self.healthy_mask] {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The scan with the healthy-mask region zeroed: `image ⊙ (1 − mask)`.
pub fn mask_apply(record: &SliceRecord) -> Result<Tensor> {
    record
        .image
        .zip_map(&record.healthy_mask, |v, m| if m == 0.0 { v } else { v * (1.0 - m) })
}
