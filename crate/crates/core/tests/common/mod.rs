//! Independent oracles shared by integration test binaries.
#![allow(dead_code)]

use m2retinex::modality::ntsc_luminance;
use m2retinex::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([h, w, 3], |_| rng.gen_range(0.0..1.0))
}

pub fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        sum += (x - y).powi(2);
    }
    let mse = sum / a.numel() as f64;
    -10.0 * mse.log10()
}

/// Direct per-window loop with a 2D Gaussian window.
pub fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w, _) = a.dims3().unwrap();
    let la = ntsc_luminance(a).unwrap();
    let lb = ntsc_luminance(b).unwrap();
    let mut win = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / z;
                    mx += wt * la.at(y + i, x + j, 0);
                    my += wt * lb.at(y + i, x + j, 0);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / z;
                    let (dx, dy) = (la.at(y + i, x + j, 0) - mx, lb.at(y + i, x + j, 0) - my);
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            let c1 = 0.01f64.powi(2);
            let c2 = 0.03f64.powi(2);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}
