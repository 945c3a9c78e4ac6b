//! PSNR and SSIM on [0, 1] images, without ground-truth mean correction.

use crate::error::{Error, Result};
use crate::modality::{filters::gaussian_kernel, ntsc_luminance};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dimension {
            op,
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same(pred, gt, "mse")?;
    Ok(pred.zip_map(gt, |a, b| (a - b) * (a - b))?.mean())
}

/// `10 log10(peak² / MSE)`; `+∞` for identical images.
pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Valid-mode separable correlation of a single-channel H×W map with `k`
/// along both axes.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Per-window SSIM from local statistics.
pub fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM of the luminance images over all valid 11×11 Gaussian windows.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same(pred, gt, "ssim")?;
    let (h, w, _) = pred.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let x = ntsc_luminance(pred)?;
    let y = ntsc_luminance(gt)?;
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let (x, y) = (x.data(), y.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, oh, ow) = filter_valid(x, h, w, &k);
    let (my, ..) = filter_valid(y, h, w, &k);
    let (ex2, ..) = filter_valid(&xx, h, w, &k);
    let (ey2, ..) = filter_valid(&yy, h, w, &k);
    let (exy, ..) = filter_valid(&xy, h, w, &k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let vx = ex2[i] - mx[i] * mx[i];
        let vy = ey2[i] - my[i] * my[i];
        let cxy = exy[i] - mx[i] * my[i];
        total += ssim_from_moments(mx[i], my[i], vx, vy, cxy);
    }
    Ok(total / (oh * ow) as f64)
}

/// JSON rendering of a PSNR value: a number, or `"inf"` for identical images.
pub fn psnr_json(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        serde_json::Value::String(if v > 0.0 { "inf" } else { "-inf" }.into())
    } else {
        serde_json::json!(v)
    }
}
