//! Slice-level forward and backward kernels shared by the tape and by the
//! graph-free image filters.

use super::Tensor;
use crate::error::{Error, Result};

/// `a[n×k] · b[k×m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n×k] · b[m×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[n×k]ᵀ · b[n×m]`, giving k×m.
pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// In-place softmax over the middle axis of an `outer × len × inner` layout.
pub fn softmax_strided(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for row in data.chunks_mut(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
}

pub fn softmax_backward(y: &[f64], gy: &[f64], gx: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| y[idx(j)] * gy[idx(j)]).sum();
            for j in 0..len {
                gx[idx(j)] += y[idx(j)] * (gy[idx(j)] - dot);
            }
        }
    }
}

/// Standardizes each length-`c` row; returns (x̂, 1/sqrt(var + eps)).
pub fn normalize_rows(x: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / c.max(1));
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|v| (v - mean) * r));
    }
    (xhat, rstd)
}

pub fn layer_norm_backward_input(xhat: &[f64], rstd: &[f64], gain: &[f64], gy: &[f64], gx: &mut [f64], c: usize) {
    let cf = c as f64;
    for (r, &rs) in rstd.iter().enumerate() {
        let xh = &xhat[r * c..(r + 1) * c];
        let dy = &gy[r * c..(r + 1) * c];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..c {
            let d = dy[j] * gain[j];
            sum_d += d;
            sum_dx += d * xh[j];
        }
        let (mean_d, mean_dx) = (sum_d / cf, sum_dx / cf);
        for j in 0..c {
            let d = dy[j] * gain[j];
            gx[r * c + j] += rs * (d - mean_d - xh[j] * mean_dx);
        }
    }
}

/// Geometry of a zero-padded 2-D convolution over an H×W×C image.
#[derive(Clone, Debug)]
pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize, depthwise: bool) -> Result<Self> {
        let (h, wd, cin) = x.dims3()?;
        let (kh, kw, cout) = match (depthwise, w.shape()) {
            (false, &[kh, kw, wc, cout]) if wc == cin => (kh, kw, cout),
            (true, &[kh, kw, wc]) if wc == cin => (kh, kw, cin),
            _ => {
                return Err(Error::Dimension {
                    op: if depthwise { "depthwise_conv2d" } else { "conv2d" },
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Config(format!(
                "kernel {kh}×{kw} does not fit padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(Conv2dGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xp = &x[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &xv) in xp.iter().enumerate() {
                        let wrow = &w[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input(gy: &[f64], w: &[f64], gx: &mut [f64], g: &Conv2dGeom) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &gy[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    let gp = &mut gx[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    for (ci, gv) in gp.iter_mut().enumerate() {
                        let wrow = &w[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        *gv += wrow.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_weight(gy: &[f64], x: &[f64], gw: &mut [f64], g: &Conv2dGeom) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &gy[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xp = &x[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &xv) in xp.iter().enumerate() {
                        let grow = &mut gw[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        for (gv, &dv) in grow.iter_mut().zip(d) {
                            *gv += xv * dv;
                        }
                    }
                }
            }
        }
    }
}

pub fn depthwise_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let c = g.cin;
    let mut out = vec![0.0; g.oh * g.ow * c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xp = &x[(iy * g.w + ix) * c..(iy * g.w + ix + 1) * c];
                    let wp = &w[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                    for j in 0..c {
                        o[j] += xp[j] * wp[j];
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward_input(gy: &[f64], w: &[f64], gx: &mut [f64], g: &Conv2dGeom) {
    let c = g.cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &gy[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let wp = &w[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                    let gp = &mut gx[(iy * g.w + ix) * c..(iy * g.w + ix + 1) * c];
                    for j in 0..c {
                        gp[j] += d[j] * wp[j];
                    }
                }
            }
        }
    }
}

pub fn depthwise_backward_weight(gy: &[f64], x: &[f64], gw: &mut [f64], g: &Conv2dGeom) {
    let c = g.cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &gy[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xp = &x[(iy * g.w + ix) * c..(iy * g.w + ix + 1) * c];
                    let gp = &mut gw[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                    for j in 0..c {
                        gp[j] += d[j] * xp[j];
                    }
                }
            }
        }
    }
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let src = x.data();
    let mut out = Vec::with_capacity(4 * h * w * c);
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let p = ((oy / 2) * w + ox / 2) * c;
            out.extend_from_slice(&src[p..p + c]);
        }
    }
    Tensor::new([2 * h, 2 * w, c], out)
}

pub fn upsample2_backward(gy: &[f64], gx: &mut [f64], h: usize, w: usize, c: usize) {
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let p = ((oy / 2) * w + ox / 2) * c;
            let q = (oy * 2 * w + ox) * c;
            for j in 0..c {
                gx[p + j] += gy[q + j];
            }
        }
    }
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("avg_pool2 needs even extents, got {h}×{w}")));
    }
    let src = x.data();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for j in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + j];
                out[(oy * ow + ox) * c + j] = 0.25
                    * (at(2 * oy, 2 * ox) + at(2 * oy, 2 * ox + 1) + at(2 * oy + 1, 2 * ox) + at(2 * oy + 1, 2 * ox + 1));
            }
        }
    }
    Tensor::new([oh, ow, c], out)
}

pub fn avg_pool2_backward(gy: &[f64], gx: &mut [f64], h: usize, w: usize, c: usize) {
    let ow = w / 2;
    for y in 0..h {
        for x in 0..w {
            let q = ((y / 2) * ow + x / 2) * c;
            for j in 0..c {
                gx[(y * w + x) * c + j] += 0.25 * gy[q + j];
            }
        }
    }
}

/// Per-pixel channel mean, summing channels in order before dividing.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let out = x.data().chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
    Tensor::new([h, w, 1], out)
}
