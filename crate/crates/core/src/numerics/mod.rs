//! Double-precision differentiable arrays: dense tensors, a parameter
//! registry, a reverse-mode tape and finite-difference gradient checking.

mod gradcheck;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, ParamStatus, REL_ERROR_FLOOR};
pub use param::{name_rng, GradMap, ParamStore, Parameter};
pub use tape::{sigmoid_scalar, Gradients, Tape, Var, SIGMOID_MAX, SIGMOID_MIN};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Spatial resampling between adjacent pyramid scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// 2×2 stride-2 convolution: (H, W, C) → (H/2, W/2, 2C).
    Down2,
    /// Nearest-neighbour 2× upsampling then 1×1 convolution: (H, W, C) → (2H, 2W, C/2).
    Up2,
}

impl Resample {
    pub fn weight_shape(self, channels: usize) -> Vec<usize> {
        match self {
            Resample::Down2 => vec![2, 2, channels, 2 * channels],
            Resample::Up2 => vec![1, 1, channels, channels / 2],
        }
    }

    pub fn output_shape(self, shape: &[usize]) -> Result<Vec<usize>> {
        let [h, w, c] = shape else {
            return Err(Error::Shape(format!("resample expects H×W×C, got {shape:?}")));
        };
        match self {
            Resample::Down2 if h % 2 == 0 && w % 2 == 0 => Ok(vec![h / 2, w / 2, 2 * c]),
            Resample::Down2 => Err(Error::Shape(format!("down2 needs even extents, got {h}×{w}"))),
            Resample::Up2 if c % 2 == 0 => Ok(vec![2 * h, 2 * w, c / 2]),
            Resample::Up2 => Err(Error::Shape(format!("up2 needs an even channel count, got {c}"))),
        }
    }

    /// Registers the (bias-free) resampling kernel for `channels` inputs.
    pub fn register(self, store: &mut ParamStore, name: &str, channels: usize, seed: u64) -> Result<()> {
        let shape = self.weight_shape(channels);
        let fan_in = shape[0] * shape[1] * shape[2];
        store.insert_uniform(name, &shape, fan_in, seed)?;
        Ok(())
    }

    pub fn apply(self, tape: &mut Tape<'_>, x: Var, weight: &str) -> Result<Var> {
        self.output_shape(tape.shape(x))?;
        let w = tape.param(weight)?;
        match self {
            Resample::Down2 => tape.conv2d(x, w, None, 2, 0),
            Resample::Up2 => {
                let up = tape.upsample2(x)?;
                tape.conv2d(up, w, None, 1, 0)
            }
        }
    }
}

/// `x[N×Cin] · W + b` on token matrices.
pub fn linear(tape: &mut Tape<'_>, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
    let w = tape.param(weight)?;
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => {
            let b = tape.param(b)?;
            tape.add_row_bias(y, b)
        }
        None => Ok(y),
    }
}

/// Registers a `fan_in × fan_out` weight and, optionally, a zero bias.
pub fn register_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    seed: u64,
) -> Result<()> {
    store.insert_uniform(format!("{prefix}.weight"), &[fan_in, fan_out], fan_in, seed)?;
    if bias {
        store.insert_const(format!("{prefix}.bias"), &[fan_out], 0.0)?;
    }
    Ok(())
}

/// Registers a kh×kw×Cin×Cout kernel and, optionally, a zero bias.
pub fn register_conv(
    store: &mut ParamStore,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    bias: bool,
    seed: u64,
) -> Result<()> {
    store.insert_uniform(format!("{prefix}.weight"), &[k, k, cin, cout], k * k * cin, seed)?;
    if bias {
        store.insert_const(format!("{prefix}.bias"), &[cout], 0.0)?;
    }
    Ok(())
}

pub fn conv(tape: &mut Tape<'_>, x: Var, prefix: &str, bias: bool, stride: usize, pad: usize) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = if bias { Some(tape.param(&format!("{prefix}.bias"))?) } else { None };
    tape.conv2d(x, w, b, stride, pad)
}

/// Graph-free matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Tensor::new([n, m], kernels::matmul(a.data(), b.data(), n, k, m))
}

/// Graph-free stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!("softmax axis {axis} invalid for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    kernels::softmax_strided(out.data_mut(), outer, shape[axis], inner);
    Ok(out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}
