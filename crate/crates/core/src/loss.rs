//! Training objective: mean absolute error plus a perceptual term computed
//! by a frozen, seeded convolutional feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{name_rng, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA_PER: f64 = 0.5;
pub const PROXY_CHANNELS: [usize; 3] = [16, 32, 64];

/// Loss components of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub lambda_per: f64,
}

fn check_same(pred: &[usize], gt: &[usize], op: &'static str) -> Result<()> {
    if pred != gt {
        return Err(Error::Dimension {
            op,
            lhs: pred.to_vec(),
            rhs: gt.to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same(pred.shape(), gt.shape(), "l1_loss")?;
    Ok(pred.zip_map(gt, |a, b| (a - b).abs())?.mean())
}

pub fn l1_on_tape(tape: &mut Tape<'_>, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Three 3×3 stride-2 convolutions (3→16→32→64) with tanh activations and
/// fixed random weights.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    seed: u64,
    layers: Vec<Tensor>,
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut cin = 3;
        let mut layers = Vec::with_capacity(PROXY_CHANNELS.len());
        for (i, &cout) in PROXY_CHANNELS.iter().enumerate() {
            let mut rng = name_rng(seed, &format!("perceptual.conv{i}"));
            let fan_in = 9 * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            layers.push(Tensor::from_fn([3, 3, cin, cout], |_| rng.gen_range(-bound..bound)));
            cin = cout;
        }
        PerceptualProxy { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature maps after every layer.
    pub fn features(&self, tape: &mut Tape<'_>, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.layers.len());
        for w in &self.layers {
            let w = tape.constant(w.clone());
            let y = tape.conv2d(x, w, None, 2, 1)?;
            x = tape.tanh(y);
            out.push(x);
        }
        Ok(out)
    }

    /// `Σ_l mean((φ_l(pred) − φ_l(gt))²)`.
    pub fn loss_on_tape(&self, tape: &mut Tape<'_>, pred: Var, gt: Var) -> Result<Var> {
        check_same(tape.shape(pred), tape.shape(gt), "perceptual_loss")?;
        let fp = self.features(tape, pred)?;
        let fg = self.features(tape, gt)?;
        let mut total: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(fg) {
            let d = tape.sub(a, b)?;
            let sq = tape.mul(d, d)?;
            let m = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, m)?,
                None => m,
            });
        }
        Ok(total.expect("proxy has layers"))
    }

    pub fn loss(&self, pred: &Tensor, gt: &Tensor) -> Result<f64> {
        let store = crate::numerics::ParamStore::new();
        let mut tape = Tape::new(&store);
        let (p, g) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
        let l = self.loss_on_tape(&mut tape, p, g)?;
        Ok(tape.value(l).data()[0])
    }
}

/// `L1 + λ_per · L_per` on the tape; returns the scalar loss node and its
/// components.
pub fn combined_loss_on_tape(
    tape: &mut Tape<'_>,
    pred: Var,
    gt: &Tensor,
    proxy: &PerceptualProxy,
    lambda_per: f64,
) -> Result<(Var, LossReport)> {
    check_same(tape.shape(pred), gt.shape(), "combined_loss")?;
    let g = tape.constant(gt.clone());
    let l1 = l1_on_tape(tape, pred, g)?;
    let per = proxy.loss_on_tape(tape, pred, g)?;
    let weighted = tape.scale(per, lambda_per);
    let total = tape.add(l1, weighted)?;
    let report = LossReport {
        l1: tape.value(l1).data()[0],
        perceptual: tape.value(per).data()[0],
        total: tape.value(total).data()[0],
        lambda_per,
    };
    if ![report.l1, report.perceptual, report.total].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    Ok((total, report))
}

pub fn combined_loss(pred: &Tensor, gt: &Tensor, proxy: &PerceptualProxy, lambda_per: f64) -> Result<LossReport> {
    let store = crate::numerics::ParamStore::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(pred.clone());
    Ok(combined_loss_on_tape(&mut tape, p, gt, proxy, lambda_per)?.1)
}
