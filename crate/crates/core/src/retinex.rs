//! One-stage Retinex framework: illumination prior, illumination estimator
//! and the restorer's entry features.
//!
//! The estimator maps `[I, L_p]` to lit-up features `F_lu` and an
//! illumination map `L̂`; the lit-up image is the elementwise product
//! `I ⊙ L̂`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv, kernels, register_conv, ParamStore, Resample, Tape, Tensor, Var};

/// How the illumination prior collapses the three channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PriorMode::Mean),
            "max" => Ok(PriorMode::Max),
            _ => Err(Error::Config(format!("unknown prior mode `{s}` (mean|max)"))),
        }
    }
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorMode::Mean => "mean",
            PriorMode::Max => "max",
        })
    }
}

/// Per-pixel channel mean of an H×W×3 image, as H×W×1.
pub fn compute_prior(low: &Tensor) -> Result<Tensor> {
    kernels::channel_mean(low)
}

pub fn compute_prior_with(low: &Tensor, mode: PriorMode) -> Result<Tensor> {
    match mode {
        PriorMode::Mean => compute_prior(low),
        PriorMode::Max => {
            let (h, w, c) = low.dims3()?;
            let out = low
                .data()
                .chunks(c)
                .map(|px| px.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::new([h, w, 1], out)
        }
    }
}

/// Prior computed on the tape so later refinement stages stay differentiable.
pub fn prior_on_tape(tape: &mut Tape<'_>, img: Var, mode: PriorMode) -> Result<Var> {
    match mode {
        PriorMode::Mean => tape.channel_mean(img),
        PriorMode::Max => tape.channel_max(img),
    }
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} values must lie in [0, 1]")))
    }
}

/// Paired low-light input, optional ground truth and optional prior.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementSample {
    pub low: Tensor,
    pub gt: Option<Tensor>,
    pub prior: Option<Tensor>,
}

impl EnhancementSample {
    pub fn new(low: Tensor, gt: Option<Tensor>) -> Result<Self> {
        let (_, _, c) = low.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {:?}", low.shape())));
        }
        check_unit_range(&low, "low-light image")?;
        if let Some(gt) = &gt {
            if gt.shape() != low.shape() {
                return Err(Error::Dimension {
                    op: "EnhancementSample",
                    lhs: low.shape().to_vec(),
                    rhs: gt.shape().to_vec(),
                });
            }
            check_unit_range(gt, "ground truth")?;
        }
        Ok(EnhancementSample { low, gt, prior: None })
    }

    pub fn with_prior(mut self, mode: PriorMode) -> Result<Self> {
        self.prior = Some(compute_prior_with(&self.low, mode)?);
        Ok(self)
    }
}

/// Outputs of the illumination estimator.
#[derive(Clone, Copy, Debug)]
pub struct LitUpState {
    /// `I_lu = I ⊙ L̂`, H×W×3.
    pub lit_image: Var,
    /// `F_lu`, H×W×C.
    pub lit_features: Var,
    /// `L̂`, H×W×3.
    pub illum_map: Var,
    /// `F_in = [I, L_p]`, H×W×4.
    pub restorer_input: Var,
}

/// 1×1 conv → 5×5 depthwise conv (`F_lu`) → 1×1 conv (`L̂`).
#[derive(Clone, Debug)]
pub struct IlluminationEstimator {
    prefix: String,
    width: usize,
}

impl IlluminationEstimator {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        IlluminationEstimator {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let c = self.width;
        register_conv(store, &self.name("conv_in"), 1, 4, c, true, seed)?;
        store.insert_uniform(self.name("depthwise.weight"), &[5, 5, c], 25, seed)?;
        store.insert_const(self.name("depthwise.bias"), &[c], 0.0)?;
        register_conv(store, &self.name("conv_out"), 1, c, 3, true, seed)?;
        // L̂ starts near 1 so the untrained estimator is close to a pass-through.
        store.fill(&self.name("conv_out.bias"), 1.0)?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<'_>, low: Var, prior: Var) -> Result<LitUpState> {
        let (h, w, _) = tape.value(low).dims3()?;
        let (ph, pw, _) = tape.value(prior).dims3()?;
        if (h, w) != (ph, pw) {
            return Err(Error::Dimension {
                op: "illumination_estimator",
                lhs: tape.shape(low).to_vec(),
                rhs: tape.shape(prior).to_vec(),
            });
        }
        let restorer_input = tape.concat_channels(&[low, prior])?;
        let hidden = conv(tape, restorer_input, &self.name("conv_in"), true, 1, 0)?;
        let dw = tape.param(&self.name("depthwise.weight"))?;
        let db = tape.param(&self.name("depthwise.bias"))?;
        let lit_features = tape.depthwise_conv2d(hidden, dw, Some(db), 2)?;
        let illum_map = conv(tape, lit_features, &self.name("conv_out"), true, 1, 0)?;
        let lit_image = tape.mul(low, illum_map)?;
        Ok(LitUpState {
            lit_image,
            lit_features,
            illum_map,
            restorer_input,
        })
    }
}

/// Entry features for the corruption restorer plus `F_lu` at every scale.
#[derive(Clone, Debug)]
pub struct RestorerFeed {
    /// `embed(I_lu) + F_lu`, H×W×C.
    pub entry: Var,
    /// `F_lu^s` with shape (H/2^s, W/2^s, 2^s·C), s = 0, 1, 2.
    pub lit_pyramid: Vec<Var>,
    pub lit_image: Var,
}

pub const NUM_SCALES: usize = 3;

/// Projects the lit-up image to C channels and threads `F_lu` down the
/// pyramid with bias-free strided convolutions.
#[derive(Clone, Debug)]
pub struct RestorerEntry {
    prefix: String,
    width: usize,
}

impl RestorerEntry {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        RestorerEntry {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        register_conv(store, &self.name("embed"), 3, 3, self.width, false, seed)?;
        for s in 1..NUM_SCALES {
            let ch = self.width << (s - 1);
            Resample::Down2.register(store, &self.name(&format!("lit_down{s}.weight")), ch, seed)?;
        }
        Ok(())
    }

    pub fn build(&self, tape: &mut Tape<'_>, lit: &LitUpState) -> Result<RestorerFeed> {
        let embedded = conv(tape, lit.lit_image, &self.name("embed"), false, 1, 1)?;
        let entry = tape.add(embedded, lit.lit_features)?;
        let mut lit_pyramid = vec![lit.lit_features];
        for s in 1..NUM_SCALES {
            let prev = lit_pyramid[s - 1];
            let next = Resample::Down2.apply(tape, prev, &self.name(&format!("lit_down{s}.weight")))?;
            lit_pyramid.push(next);
        }
        Ok(RestorerFeed {
            entry,
            lit_pyramid,
            lit_image: lit.lit_image,
        })
    }
}
