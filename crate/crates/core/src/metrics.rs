//! Evaluation metrics: chamfer distance, PSNR, and SSIM, plus the CSV report.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::envlight::Rgb;
use crate::error::{Error, Result};

/// Symmetric mean nearest-neighbor distance between two point sets, scaled to
/// millimeters by the manifest's world-unit scale.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>], mm_per_unit: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("chamfer needs non-empty point sets"));
    }
    let one_way = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
        let total: f64 = from
            .par_iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        total / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)) * mm_per_unit)
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// 10 log10(peak^2 / MSE), capped at 100 dB for near-identical images.
pub fn psnr(image: &[Rgb], reference: &[Rgb], peak: f64) -> Result<f64> {
    if image.len() != reference.len() || image.is_empty() {
        return Err(Error::validation("psnr needs equal non-empty images"));
    }
    let mse: f64 = image
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / (3 * image.len()) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Standard SSIM: 11x11 Gaussian window, C1=(0.01 peak)^2, C2=(0.03 peak)^2,
/// averaged over channels and all fully-interior windows.
pub fn ssim(image: &[Rgb], reference: &[Rgb], width: usize, height: usize, peak: f64) -> Result<f64> {
    if image.len() != width * height || reference.len() != image.len() {
        return Err(Error::validation("ssim image dimensions mismatch"));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let kernel = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0;
    for ch in 0..3 {
        let plane_a: Vec<f64> = image.iter().map(|p| p[ch]).collect();
        let plane_b: Vec<f64> = reference.iter().map(|p| p[ch]).collect();
        // separable Gaussian filtering of x, y, x^2, y^2, xy
        let filter = |src: &[f64]| -> Vec<f64> {
            let mut tmp = vec![0.0; src.len()];
            for y in 0..height {
                for x in half..width - half {
                    let mut s = 0.0;
                    for (j, kv) in kernel.iter().enumerate() {
                        s += kv * src[y * width + x + j - half];
                    }
                    tmp[y * width + x] = s;
                }
            }
            let mut out = vec![0.0; src.len()];
            for y in half..height - half {
                for x in 0..width {
                    let mut s = 0.0;
                    for (j, kv) in kernel.iter().enumerate() {
                        s += kv * tmp[(y + j - half) * width + x];
                    }
                    out[y * width + x] = s;
                }
            }
            out
        };
        let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
        let prod: Vec<f64> = plane_a.iter().zip(&plane_b).map(|(a, b)| a * b).collect();
        let mu_a = filter(&plane_a);
        let mu_b = filter(&plane_b);
        let m2_a = filter(&sq(&plane_a));
        let m2_b = filter(&sq(&plane_b));
        let m_ab = filter(&prod);
        let mut total = 0.0;
        let mut count = 0usize;
        for y in half..height - half {
            for x in half..width - half {
                let i = y * width + x;
                let va = m2_a[i] - mu_a[i] * mu_a[i];
                let vb = m2_b[i] - mu_b[i] * mu_b[i];
                let cov = m_ab[i] - mu_a[i] * mu_b[i];
                let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
                    / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
        acc += total / count as f64;
    }
    Ok(acc / 3.0)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricRow {
    pub name: String,
    pub chamfer_mm: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("name,chamfer_mm,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.4},{:.6}\n",
                r.name, r.chamfer_mm, r.psnr_db, r.ssim
            ));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
