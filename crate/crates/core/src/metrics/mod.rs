//! Slice-wise image quality metrics, their aggregation and the Wilcoxon
//! signed-rank test.

mod report;
mod wilcoxon;

pub use report::{MeanStd, MethodSummary, MetricsReport, PairwiseP};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod, WilcoxonResult};

use rayon::prelude::*;

use crate::data::{Unit, Volume, HU_RANGE};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default dynamic range for PSNR and SSIM, in HU.
pub const DATA_RANGE_HU: f64 = HU_RANGE;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("metric inputs have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

pub fn rmse_hu<T: Real>(pred: &[T], reference: &[T]) -> Result<f64> {
    same_len(pred, reference)?;
    let sse: f64 = pred.iter().zip(reference).map(|(p, r)| (p.f64() - r.f64()).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `20 log10(range / rmse)`; `+inf` when the error is zero.
pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (data_range / rmse).log10()
    }
}

pub fn psnr<T: Real>(pred: &[T], reference: &[T], data_range: f64) -> Result<f64> {
    Ok(psnr_from_rmse(rmse_hu(pred, reference)?, data_range))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of a `width`-wide image.
fn filter_valid(img: &[f64], width: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let height = img.len() / width;
    let (ow, oh) = (width + 1 - SSIM_WINDOW, height + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * img[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over every fully contained 11x11 Gaussian window.
pub fn ssim<T: Real>(pred: &[T], reference: &[T], width: usize, data_range: f64) -> Result<f64> {
    same_len(pred, reference)?;
    if width == 0 || !pred.len().is_multiple_of(width) {
        return Err(Error::Shape(format!("{} values do not tile rows of width {width}", pred.len())));
    }
    let height = pred.len() / width;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Shape(format!("slice {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let x: Vec<f64> = pred.iter().map(|v| v.f64()).collect();
    let y: Vec<f64> = reference.iter().map(|v| v.f64()).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let win = gaussian_window();
    let mx = filter_valid(&x, width, &win);
    let my = filter_valid(&y, width, &win);
    let mxx = filter_valid(&prod(&x, &x), width, &win);
    let myy = filter_valid(&prod(&y, &y), width, &win);
    let mxy = filter_valid(&prod(&x, &y), width, &win);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMetrics {
    pub volume_id: String,
    pub slice: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub rmse: f64,
}

/// SSIM, PSNR and RMSE of every axial slice, in HU with the default range.
pub fn per_slice_metrics<T: Real>(volume_id: &str, pred: &Volume<T>, reference: &Volume<T>) -> Result<Vec<SliceMetrics>> {
    if pred.grid != reference.grid {
        return Err(Error::Shape(format!(
            "prediction grid {} differs from reference grid {}",
            pred.grid.canonical_text(),
            reference.grid.canonical_text()
        )));
    }
    if pred.unit != Unit::Hu || reference.unit != Unit::Hu {
        return Err(Error::Invalid("metrics are computed on HU volumes".into()));
    }
    let width = pred.grid.nx;
    (0..pred.grid.nz)
        .into_par_iter()
        .map(|k| {
            let (p, r) = (pred.axial_slice(k), reference.axial_slice(k));
            let rmse = rmse_hu(p, r)?;
            Ok(SliceMetrics {
                volume_id: volume_id.to_string(),
                slice: k,
                ssim: ssim(p, r, width, DATA_RANGE_HU)?,
                psnr: psnr_from_rmse(rmse, DATA_RANGE_HU),
                rmse,
            })
        })
        .collect()
}
