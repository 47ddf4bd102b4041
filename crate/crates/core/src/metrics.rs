//! PSNR and SSIM over images in [0, 1] and over volumes slice by slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VolumeGrid;
use crate::image::Image;

/// Reported instead of +∞ for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 1.0;

fn check_same<T, U>(a: &Image<T>, b: &Image<U>) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse<T: Copy + Into<f64>>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(L² / MSE)` with L = 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Copy + Into<f64>>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering with the Gaussian window.
fn filter_valid(src: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * height];
    for r in 0..height {
        let line = &src[r * width..(r + 1) * width];
        for c in 0..ow {
            rows[r * ow + c] = line[c..c + SSIM_WINDOW].iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| rows[(r + k) * ow + c] * w[k]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 window positions (Gaussian σ = 1.5,
/// k1 = 0.01, k2 = 0.03, L = 1).
pub fn ssim<T: Copy + Into<f64>>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let x: Vec<f64> = a.data.iter().map(|&v| v.into()).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v.into()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let win = gaussian_window();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|s| filter_valid(s, w, h, &win));

    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ma, mb) = (mx[i], my[i]);
        let va = sxx[i] - ma * ma;
        let vb = syy[i] - mb * mb;
        let cov = sxy[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR hit the identical-image cap.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    /// Mean over items whose PSNR is not capped; `None` if all are.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub count: usize,
    pub capped_count: usize,
}

impl MetricReport {
    pub fn from_items(items: Vec<ItemMetrics>) -> Self {
        let count = items.len();
        let uncapped: Vec<f64> = items.iter().filter(|i| !i.capped).map(|i| i.psnr).collect();
        let mean_psnr = (!uncapped.is_empty()).then(|| uncapped.iter().sum::<f64>() / uncapped.len() as f64);
        let mean_ssim = if count == 0 {
            0.0
        } else {
            items.iter().map(|i| i.ssim).sum::<f64>() / count as f64
        };
        MetricReport {
            capped_count: count - uncapped.len(),
            items,
            mean_psnr,
            mean_ssim,
            count,
        }
    }

    /// One JSON object per item followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for i in &self.items {
            out.push_str(&serde_json::to_string(i).expect("plain record"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "mean_psnr": self.mean_psnr,
                "mean_ssim": self.mean_ssim,
                "count": self.count,
                "capped_count": self.capped_count,
                "averaging": "per-slice",
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Metric rows by configuration columns, e.g.
///
/// ```text
///              6x6   126x126
/// PSNR       27.10     27.40
/// SSIM       0.921     0.930
/// ```
pub fn format_table(columns: &[(&str, &MetricReport)]) -> String {
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8) + 2;
    let mut out = format!("{:<10}", "");
    for (name, _) in columns {
        out.push_str(&format!("{name:>width$}"));
    }
    out.push_str("\nPSNR (dB) ");
    for (_, r) in columns {
        let v = r.mean_psnr.map_or_else(|| format!("{PSNR_CAP:.2}"), |p| format!("{p:.2}"));
        out.push_str(&format!("{v:>width$}"));
    }
    out.push_str("\nSSIM      ");
    for (_, r) in columns {
        out.push_str(&format!("{:>width$.3}", r.mean_ssim));
    }
    out.push('\n');
    out
}

pub fn evaluate_images(pred: &[Image], truth: &[Image]) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predicted images vs {} reference images",
            pred.len(),
            truth.len()
        )));
    }
    let items = pred
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(index, (p, t))| {
            let psnr = psnr(p, t)?;
            Ok(ItemMetrics {
                index,
                psnr,
                ssim: ssim(p, t)?,
                capped: psnr >= PSNR_CAP,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_items(items))
}

/// Per-plane metrics along the slicing axis.
pub fn evaluate_volume(pred: &VolumeGrid, truth: &VolumeGrid) -> Result<MetricReport> {
    if pred.dims != truth.dims {
        return Err(Error::dim(format!(
            "volume dims differ: {:?} vs {:?}",
            pred.dims, truth.dims
        )));
    }
    let planes = |v: &VolumeGrid| (0..v.plane_count()).map(|k| v.plane(k)).collect::<Result<Vec<_>>>();
    evaluate_images(&planes(pred)?, &planes(truth)?)
}
