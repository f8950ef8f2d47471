use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::SliceRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the synthetic brain-slice generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of inner ellipses drawn inside the head.
    pub ellipses: (usize, usize),
    /// Intensity range of the brain tissue.
    pub tissue_band: (f64, f64),
    /// Intensity range of the inner structures.
    pub structure_band: (f64, f64),
    /// Amplitude of the sinusoidal folding texture.
    pub texture_amplitude: f64,
    /// Healthy-mask disk radius as a fraction of `min(H, W)`.
    pub mask_radius: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            height: 64,
            width: 64,
            ellipses: (2, 4),
            tissue_band: (0.45, 0.6),
            structure_band: (0.25, 0.85),
            texture_amplitude: 0.06,
            mask_radius: (0.08, 0.14),
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "phantom must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        let ok_band = |(lo, hi): (f64, f64)| (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi;
        if !ok_band(self.tissue_band) || !ok_band(self.structure_band) {
            return Err(Error::Config("intensity bands must lie within [0, 1]".into()));
        }
        if self.ellipses.0 > self.ellipses.1 {
            return Err(Error::Config("ellipse count range is empty".into()));
        }
        let (rlo, rhi) = self.mask_radius;
        if !(rlo > 0.0 && rlo <= rhi && rhi <= 0.25) {
            return Err(Error::Config("mask radius fractions must satisfy 0 < min <= max <= 0.25".into()));
        }
        if rlo * (self.height.min(self.width) as f64) < 1.0 {
            return Err(Error::Config("mask radius is below one pixel".into()));
        }
        if !(self.texture_amplitude >= 0.0) {
            return Err(Error::Config("texture amplitude must be non-negative".into()));
        }
        Ok(())
    }

    /// Bounds on the healthy-mask area fraction implied by the radius range:
    /// a lattice disk of radius `r` covers between `π(r − √2/2)²` and
    /// `π(r + √2/2)²` pixels.
    pub fn mask_fraction_bounds(&self) -> (f64, f64) {
        let m = self.height.min(self.width) as f64;
        let hw = (self.height * self.width) as f64;
        let lo = (self.mask_radius.0 * m - SQRT_2 / 2.0).max(0.0);
        let hi = self.mask_radius.1 * m + SQRT_2 / 2.0;
        (PI * lo * lo / hw, PI * hi * hi / hw)
    }
}

/// Smooth 0-to-1 transition as `d` goes from `edge` to `-edge`.
fn soft_inside(d: f64, edge: f64) -> f64 {
    let u = ((edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        ((u * u + v * v).sqrt() - 1.0) * self.ax.min(self.ay)
    }
}

/// Deterministic synthetic slice: nested soft ellipses with a folding
/// texture, a healthy-mask disk inside the head and an empty tumor mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<SliceRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);

    let head = Ellipse {
        cx: (wf - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * wf,
        cy: (hf - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * hf,
        ax: rng.random_range(0.36..0.42) * wf,
        ay: rng.random_range(0.38..0.44) * hf,
        angle: rng.random_range(-0.2..0.2),
    };
    let tissue = rng.random_range(spec.tissue_band.0..=spec.tissue_band.1);
    let count = rng.random_range(spec.ellipses.0..=spec.ellipses.1);
    let structures: Vec<(Ellipse, f64)> = (0..count)
        .map(|_| {
            let r = rng.random_range(0.0..0.5f64).sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let e = Ellipse {
                cx: head.cx + r * phi.cos() * head.ax * 0.6,
                cy: head.cy + r * phi.sin() * head.ay * 0.6,
                ax: rng.random_range(0.08..0.2) * wf,
                ay: rng.random_range(0.08..0.2) * hf,
                angle: rng.random_range(0.0..PI),
            };
            (e, rng.random_range(spec.structure_band.0..=spec.structure_band.1))
        })
        .collect();
    let freq = (rng.random_range(0.15..0.3), rng.random_range(0.15..0.3));
    let phase = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));

    let mut image = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let inside = soft_inside(head.distance(xf, yf), 1.5);
            let mut v = tissue;
            for (e, c) in &structures {
                let s = soft_inside(e.distance(xf, yf), 2.0);
                v = v * (1.0 - s) + c * s;
            }
            let texture = (freq.0 * xf + phase.0).sin() * (freq.1 * yf + phase.1).sin();
            v += spec.texture_amplitude * texture;
            image[y * w + x] = (v * inside).clamp(0.0, 1.0);
        }
    }

    // Disk fully inside the head, centred on a pixel.
    let m = h.min(w) as f64;
    let radius = rng.random_range(spec.mask_radius.0..=spec.mask_radius.1) * m;
    let shrink = Ellipse {
        ax: (head.ax - radius - 2.0).max(1.0),
        ay: (head.ay - radius - 2.0).max(1.0),
        ..head
    };
    let mut center = None;
    for _ in 0..100_000 {
        let (x, y) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let in_image = x - radius >= 0.0 && x + radius <= wf - 1.0 && y - radius >= 0.0 && y + radius <= hf - 1.0;
        if in_image && shrink.distance(x, y) <= 0.0 {
            center = Some((x, y));
            break;
        }
    }
    let (cx, cy) = center.ok_or_else(|| Error::Config("mask radius too large to fit inside the head".into()))?;
    let healthy = Tensor::from_fn(vec![1, h, w], |i| {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius {
            1.0
        } else {
            0.0
        }
    });

    let record = SliceRecord {
        image: Tensor::new(vec![1, h, w], image)?,
        tumor_mask: Tensor::zeros(vec![1, h, w]),
        healthy_mask: healthy,
        subject_id: format!("phantom-{:06}", spec.seed),
        slice_index: 0,
    };
    record.validate()?;
    Ok(record)
}
