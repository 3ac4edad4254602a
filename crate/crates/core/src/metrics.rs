//! Full-reference quality metrics for hyperspectral cubes: PSNR, SSIM, SAM
//! and UQI. Inputs are expected in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::HsiCube;

/// Reported PSNR for identical inputs, and the ceiling for everything else.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const UQI_WINDOW: usize = 8;

fn same_dims(a: &HsiCube, b: &HsiCube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)` over the whole cube, capped at [`PSNR_CAP`].
pub fn psnr(a: &HsiCube, b: &HsiCube, peak: f64) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// First and second moments of a weighted window.
#[derive(Debug, Clone, Copy)]
struct Moments {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

/// Weighted moments of the `kh x kw` window at `(top, left)`; weights sum to one.
fn window_moments(a: &[f64], b: &[f64], width: usize, top: usize, left: usize, weights: &[f64], kw: usize) -> Moments {
    let kh = weights.len() / kw;
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..kh {
        for j in 0..kw {
            let w = weights[i * kw + j];
            let idx = (top + i) * width + left + j;
            let (x, y) = (a[idx], b[idx]);
            ma += w * x;
            mb += w * y;
            saa += w * x * x;
            sbb += w * y * y;
            sab += w * x * y;
        }
    }
    Moments {
        mean_a: ma,
        mean_b: mb,
        var_a: saa - ma * ma,
        var_b: sbb - mb * mb,
        cov: sab - ma * mb,
    }
}

/// Normalised 2-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|x| g.iter().map(move |y| x * y)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn ssim_index(m: &Moments) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * m.mean_a * m.mean_b + c1) * (2.0 * m.cov + c2))
        / ((m.mean_a * m.mean_a + m.mean_b * m.mean_b + c1) * (m.var_a + m.var_b + c2))
}

/// Mean SSIM over bands. Each band uses an 11x11 Gaussian window (sigma 1.5)
/// over every fully contained position; bands smaller than the window use a
/// single window of uniform weights covering the whole band.
pub fn ssim(a: &HsiCube, b: &HsiCube) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, d) = a.dims();
    let windowed = h >= SSIM_WINDOW && w >= SSIM_WINDOW;
    let (weights, kh, kw) = if windowed {
        (gaussian_window(SSIM_WINDOW, SSIM_SIGMA), SSIM_WINDOW, SSIM_WINDOW)
    } else {
        (vec![1.0 / (h * w) as f64; h * w], h, w)
    };
    let mut total = 0.0;
    for k in 0..d {
        let (ba, bb) = (a.band(k), b.band(k));
        let mut band_total = 0.0;
        for top in 0..=h - kh {
            for left in 0..=w - kw {
                band_total += ssim_index(&window_moments(&ba, &bb, w, top, left, &weights, kw));
            }
        }
        total += band_total / ((h - kh + 1) * (w - kw + 1)) as f64;
    }
    Ok(total / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamResult {
    /// Mean angle in radians over pixels where both spectra are non-zero.
    pub angle: f64,
    /// Pixels skipped because one of the spectra has zero norm.
    pub skipped: usize,
}

/// Angle between two spectra. Uses `2 atan2(|a^ - b^|, |a^ + b^|)`, which
/// equals `arccos(<a, b> / |a||b|)` but stays accurate near zero.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

pub fn sam_detailed(a: &HsiCube, b: &HsiCube) -> Result<SamResult> {
    same_dims(a, b)?;
    let (h, w, _) = a.dims();
    let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            match spectral_angle(a.spectrum(r, c), b.spectrum(r, c)) {
                Some(t) => {
                    total += t;
                    counted += 1;
                }
                None => skipped += 1,
            }
        }
    }
    let angle = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok(SamResult { angle, skipped })
}

/// Mean spectral angle in radians.
pub fn sam(a: &HsiCube, b: &HsiCube) -> Result<f64> {
    Ok(sam_detailed(a, b)?.angle)
}

/// Universal quality index of one window; `None` for a degenerate window
/// that is not identical in both inputs.
fn uqi_index(m: &Moments, identical: bool) -> Option<f64> {
    let den = (m.var_a + m.var_b) * (m.mean_a * m.mean_a + m.mean_b * m.mean_b);
    if den == 0.0 {
        return identical.then_some(1.0);
    }
    Some(4.0 * m.cov * m.mean_a * m.mean_b / den)
}

/// Mean UQI over bands and 8x8 sliding windows (uniform weights). Bands
/// smaller than the window use one global window. Degenerate windows count
/// as 1 when both inputs agree there and are skipped otherwise; if every
/// window is skipped the result is 0.
pub fn uqi(a: &HsiCube, b: &HsiCube) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, d) = a.dims();
    let (kh, kw) = if h >= UQI_WINDOW && w >= UQI_WINDOW {
        (UQI_WINDOW, UQI_WINDOW)
    } else {
        (h, w)
    };
    let weights = vec![1.0 / (kh * kw) as f64; kh * kw];
    let (mut total, mut counted) = (0.0, 0usize);
    for k in 0..d {
        let (ba, bb) = (a.band(k), b.band(k));
        for top in 0..=h - kh {
            for left in 0..=w - kw {
                let m = window_moments(&ba, &bb, w, top, left, &weights, kw);
                let identical = (0..kh).all(|i| {
                    let s = (top + i) * w + left;
                    ba[s..s + kw] == bb[s..s + kw]
                });
                if let Some(q) = uqi_index(&m, identical) {
                    total += q;
                    counted += 1;
                }
            }
        }
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// The four metrics for one prediction/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub uqi: f64,
}

impl Quality {
    pub fn measure(pred: &HsiCube, truth: &HsiCube) -> Result<Self> {
        Ok(Quality {
            psnr: psnr(pred, truth, 1.0)?,
            ssim: ssim(pred, truth)?,
            sam: sam(pred, truth)?,
            uqi: uqi(pred, truth)?,
        })
    }

    /// Element-wise mean of several measurements.
    pub fn mean(items: &[Quality]) -> Option<Quality> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&Quality) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Quality {
            psnr: sum(|q| q.psnr),
            ssim: sum(|q| q.ssim),
            sam: sum(|q| q.sam),
            uqi: sum(|q| q.uqi),
        })
    }

    /// `psnr,ssim,sam,uqi` with shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        format!("{:?},{:?},{:?},{:?}", self.psnr, self.ssim, self.sam, self.uqi)
    }
}
