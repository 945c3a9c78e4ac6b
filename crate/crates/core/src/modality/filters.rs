//! Hand-built, graph-free image filters. All spatial filters use reflect
//! padding (mirror about the edge pixel, edge not repeated).

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{kernels, matmul, name_rng, Tensor};

/// NTSC luminance weights for R, G, B.
pub const NTSC_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const CONTRAST_WINDOW: usize = 5;
pub const PYRAMID_LEVELS: usize = 3;
pub const PYRAMID_SIGMA: f64 = 1.0;
pub const PYRAMID_RADIUS: usize = 2;
pub const DEPTH_SIGMA: f64 = 3.0;
pub const SEMANTIC_PATCH: usize = 4;
pub const SEMANTIC_DIM: usize = 16;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Mirror index `i` into `0..n` (… 2 1 | 0 1 2 … n-1 | n-2 …).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn single_channel(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims3()? {
        (h, w, 1) => Ok((h, w)),
        _ => Err(Error::Shape(format!("expected a single-channel image, got {:?}", t.shape()))),
    }
}

/// `0.299 R + 0.587 G + 0.114 B`, H×W×3 → H×W×1.
pub fn ntsc_luminance(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("luminance needs RGB, got {c} channels")));
    }
    let [wr, wg, wb] = NTSC_WEIGHTS;
    let out = img.data().chunks(3).map(|p| wr * p[0] + wg * p[1] + wb * p[2]).collect();
    Tensor::new([h, w, 1], out)
}

/// 3×3 cross-correlation of a single-channel image.
fn correlate3(lum: &Tensor, k: &[[f64; 3]; 3]) -> Result<Tensor> {
    let (h, w) = single_channel(lum)?;
    let d = lum.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let sy = reflect(y as isize + dy as isize - 1, h);
                for (dx, &kv) in row.iter().enumerate() {
                    let sx = reflect(x as isize + dx as isize - 1, w);
                    acc += kv * d[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new([h, w, 1], out)
}

/// Horizontal and vertical Sobel responses stacked as H×W×2.
pub fn sobel_edges(lum: &Tensor) -> Result<Tensor> {
    let gx = correlate3(lum, &SOBEL_X)?;
    let gy = correlate3(lum, &SOBEL_Y)?;
    Tensor::concat_channels(&[&gx, &gy])
}

/// Population standard deviation over a `window × window` neighbourhood.
pub fn local_contrast(lum: &Tensor, window: usize) -> Result<Tensor> {
    let (h, w) = single_channel(lum)?;
    if window.is_multiple_of(2) {
        return Err(Error::Config(format!("contrast window must be odd, got {window}")));
    }
    let r = (window / 2) as isize;
    let d = lum.data();
    let n = (window * window) as f64;
    let mut out = vec![0.0; h * w];
    let mut vals = Vec::with_capacity(window * window);
    for y in 0..h {
        for x in 0..w {
            vals.clear();
            for dy in -r..=r {
                let sy = reflect(y as isize + dy, h);
                for dx in -r..=r {
                    vals.push(d[sy * w + reflect(x as isize + dx, w)]);
                }
            }
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out[y * w + x] = var.sqrt();
        }
    }
    Tensor::new([h, w, 1], out)
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur, channel by channel.
pub fn gaussian_blur(x: &Tensor, sigma: f64, radius: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let src = x.data();
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = reflect(xx as isize + i as isize - r, w);
                    acc += kv * src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + i as isize - r, h);
                    acc += kv * tmp[(sy * w + xx) * c + ch];
                }
                out[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    Tensor::new([h, w, c], out)
}

fn upsample_nearest(x: &Tensor, times: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for _ in 0..times {
        out = kernels::upsample2(&out)?;
    }
    Ok(out)
}

/// Blurred, 2×-decimated chain of `levels` maps, each brought back to full
/// resolution by nearest-neighbour upsampling.
pub fn luminance_pyramid(lum: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (h, w) = single_channel(lum)?;
    let div = 1usize << levels.saturating_sub(1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!("pyramid of {levels} levels needs extents divisible by {div}, got {h}×{w}")));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = gaussian_blur(lum, PYRAMID_SIGMA, PYRAMID_RADIUS)?;
    for level in 0..levels {
        if level > 0 {
            cur = gaussian_blur(&kernels::avg_pool2(&cur)?, PYRAMID_SIGMA, PYRAMID_RADIUS)?;
        }
        out.push(upsample_nearest(&cur, level)?);
    }
    Ok(out)
}

/// Seven-channel luminance stack, in fixed order:
/// `[L, Gx, Gy, contrast, pyr0, pyr1, pyr2]`.
pub fn luminance_stack(img: &Tensor) -> Result<Tensor> {
    let lum = ntsc_luminance(img)?;
    let edges = sobel_edges(&lum)?;
    let contrast = local_contrast(&lum, CONTRAST_WINDOW)?;
    let pyr = luminance_pyramid(&lum, PYRAMID_LEVELS)?;
    Tensor::concat_channels(&[&lum, &edges, &contrast, &pyr[0], &pyr[1], &pyr[2]])
}

/// Procedural pseudo-depth: heavily blurred inverse luminance, min-max
/// rescaled to [0, 1]. A flat field maps to 0.5 everywhere.
pub fn depth_stub(img: &Tensor) -> Result<Tensor> {
    let lum = ntsc_luminance(img)?;
    let inv = lum.map(|v| 1.0 - v);
    let radius = (3.0 * DEPTH_SIGMA).ceil() as usize;
    let blurred = gaussian_blur(&inv, DEPTH_SIGMA, radius)?;
    let (lo, hi) = blurred
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span <= 1e-12 {
        return Ok(Tensor::full(blurred.shape().to_vec(), 0.5));
    }
    Ok(blurred.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// Fixed random projection of non-overlapping 4×4 RGB patches to 16
/// channels.
#[derive(Clone, Debug)]
pub struct SemanticStub {
    seed: u64,
    projection: Tensor,
}

impl SemanticStub {
    pub fn new(seed: u64) -> Self {
        let fan_in = SEMANTIC_PATCH * SEMANTIC_PATCH * 3;
        let mut rng = name_rng(seed, "semantic_stub");
        let scale = 1.0 / (fan_in as f64).sqrt();
        let projection = Tensor::from_fn([fan_in, SEMANTIC_DIM], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        SemanticStub { seed, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// (H, W, 3) → (H/4, W/4, 16).
    pub fn features(&self, img: &Tensor) -> Result<Tensor> {
        let (h, w, c) = img.dims3()?;
        let p = SEMANTIC_PATCH;
        if c != 3 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("semantic stub needs RGB with extents divisible by {p}, got {:?}", img.shape())));
        }
        let (gh, gw) = (h / p, w / p);
        let mut patches = Vec::with_capacity(gh * gw * p * p * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    let row = (gy * p + dy) * w + gx * p;
                    patches.extend_from_slice(&img.data()[row * 3..(row + p) * 3]);
                }
            }
        }
        let patches = Tensor::new([gh * gw, p * p * 3], patches)?;
        matmul(&patches, &self.projection)?.reshape([gh, gw, SEMANTIC_DIM])
    }

    /// Patch features broadcast back to full resolution.
    pub fn features_full_res(&self, img: &Tensor) -> Result<Tensor> {
        upsample_nearest(&self.features(img)?, 2)
    }
}

/// Convenience wrapper with a given seed.
pub fn semantic_stub(img: &Tensor, seed: u64) -> Result<Tensor> {
    SemanticStub::new(seed).features(img)
}
