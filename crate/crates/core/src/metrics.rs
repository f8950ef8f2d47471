//! Image fidelity metrics and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `(H, W)` of a tensor whose leading axes are all 1.
fn plane(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::dim(op, "leading", format!("expected a single [H,W] plane, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn same_plane(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let pa = plane(op, a)?;
    let pb = plane(op, b)?;
    if pa != pb {
        return Err(Error::dim(op, "H,W", format!("{pa:?} vs {pb:?}")));
    }
    Ok(pa)
}

fn masked_pairs<'a>(
    op: &'static str,
    a: &'a Tensor,
    b: &'a Tensor,
    mask: Option<&'a Tensor>,
) -> Result<Vec<(f64, f64)>> {
    same_plane(op, a, b)?;
    let pairs: Vec<(f64, f64)> = match mask {
        None => a.data().iter().copied().zip(b.data().iter().copied()).collect(),
        Some(m) => {
            same_plane(op, a, m)?;
            a.data()
                .iter()
                .zip(b.data())
                .zip(m.data())
                .filter(|(_, &m)| m != 0.0)
                .map(|((&x, &y), _)| (x, y))
                .collect()
        }
    };
    if pairs.is_empty() {
        return Err(Error::contract(op, "no pixels to compare"));
    }
    Ok(pairs)
}

fn mean_of(pairs: &[(f64, f64)], f: impl Fn(f64, f64) -> f64) -> f64 {
    pairs.iter().map(|&(x, y)| f(x, y)).sum::<f64>() / pairs.len() as f64
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean_of(&masked_pairs("mse", a, b, None)?, |x, y| (x - y).powi(2)))
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean_of(&masked_pairs("mae", a, b, None)?, |x, y| (x - y).abs()))
}

/// MSE over pixels where `mask` is nonzero.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    Ok(mean_of(&masked_pairs("masked_mse", a, b, Some(mask))?, |x, y| (x - y).powi(2)))
}

/// `10·log10(peak²/mse)`; `+∞` when the MSE is exactly zero.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::contract("psnr", format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn masked_psnr(a: &Tensor, b: &Tensor, mask: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::contract("psnr", format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(masked_mse(a, b, mask)?, peak))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filter of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity over every fully contained 11×11 Gaussian
/// window (σ = 1.5), with dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = same_plane("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &taps);
    let myy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &taps);
    let mxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &taps);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Metrics of one predicted image against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

impl EvalRow {
    pub fn compute(image_id: impl Into<String>, pred: &Tensor, reference: &Tensor) -> Result<Self> {
        let m = mse(pred, reference)?;
        Ok(EvalRow {
            image_id: image_id.into(),
            psnr: psnr_from_mse(m, 1.0),
            ssim: ssim(pred, reference)?,
            mse: m,
            mae: mae(pred, reference)?,
        })
    }
}

/// Published aggregate scores shown next to local results, never compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub const REFERENCE_LABEL: &str = "reference (not reproduced)";

pub fn published_reference() -> Vec<ReferenceRow> {
    [
        ("AutoEncoder", 12.6916, 0.6520, 0.0934),
        ("Pix2Pix GAN", 17.6706, 0.7634, 0.0288),
        ("DDPM", 17.3027, 0.7416, 0.0223),
        ("KAN diffusion (CCKKK)", 20.0588, 0.8037, 0.0121),
    ]
    .into_iter()
    .map(|(m, p, s, e)| ReferenceRow {
        method: m.to_string(),
        psnr: p,
        ssim: s,
        mse: e,
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    pub reference: Vec<ReferenceRow>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, rows: Vec<EvalRow>) -> Self {
        EvalReport {
            method: method.into(),
            rows,
            reference: Vec::new(),
        }
    }

    /// Arithmetic means of the per-image values. An infinite PSNR row makes
    /// the PSNR mean infinite.
    pub fn aggregate(&self) -> Result<Aggregate> {
        if self.rows.is_empty() {
            return Err(Error::contract("aggregate", "report has no rows"));
        }
        let n = self.rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Ok(Aggregate {
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            mse: mean(|r| r.mse),
            mae: mean(|r| r.mae),
        })
    }

    /// Plain-text table: one line per method with PSNR, SSIM and MSE.
    pub fn summary_table(&self) -> Result<String> {
        let agg = self.aggregate()?;
        let mut out = String::new();
        let _ = writeln!(out, "{:<48} {:>10} {:>8} {:>8}", "Method", "PSNR", "SSIM", "MSE");
        let _ = writeln!(
            out,
            "{:<48} {:>10} {:>8.4} {:>8.4}",
            self.method,
            format_psnr(agg.psnr),
            agg.ssim,
            agg.mse
        );
        for r in &self.reference {
            let label = format!("{} [{REFERENCE_LABEL}]", r.method);
            let _ = writeln!(out, "{label:<48} {:>10.4} {:>8.4} {:>8.4}", r.psnr, r.ssim, r.mse);
        }
        Ok(out)
    }
}

/// `inf` for the identical-image sentinel, otherwise four decimals.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}
