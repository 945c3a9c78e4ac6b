//! Modality-free control network, wired independently of the MMCAB code
//! path but reading the same parameter names. With an empty modality
//! registry the full restorer must agree with it exactly.

use super::RestorerConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var, LAYER_NORM_EPS};
use crate::retinex::RestorerFeed;

fn lin(tape: &mut Tape<'_>, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let y = tape.matmul(x, w)?;
    if bias {
        let b = tape.param(&format!("{prefix}.bias"))?;
        tape.add_row_bias(y, b)
    } else {
        Ok(y)
    }
}

fn norm(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gain"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Residual block with illumination-guided self-attention only.
pub fn baseline_block(tape: &mut Tape<'_>, prefix: &str, heads: usize, f_in: Var, f_lu: Var) -> Result<Var> {
    let (h, w, c) = tape.value(f_in).dims3()?;
    let n = h * w;
    let tokens = tape.reshape(f_in, &[n, c])?;
    let lu = tape.reshape(f_lu, &[n, c])?;
    let x = norm(tape, tokens, &format!("{prefix}.ln1"))?;
    let q = lin(tape, x, &format!("{prefix}.attn.q"), false)?;
    let k = lin(tape, x, &format!("{prefix}.attn.k"), false)?;
    let v = lin(tape, x, &format!("{prefix}.attn.v"), false)?;
    let v_img = tape.reshape(v, &[h, w, c])?;
    let pos_w = tape.param(&format!("{prefix}.attn.pos.weight"))?;
    let pos = tape.depthwise_conv2d(v_img, pos_w, None, 1)?;
    let pos = tape.reshape(pos, &[n, c])?;
    let v = tape.add(v, pos)?;
    let v = tape.mul(v, lu)?;
    let d = c / heads;
    let mut per_head = Vec::with_capacity(heads);
    for i in 0..heads {
        let (qi, ki, vi) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, i * d, d)?, tape.slice_cols(k, i * d, d)?, tape.slice_cols(v, i * d, d)?)
        };
        let logits = tape.matmul_nt(qi, ki)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax(logits, 1)?;
        per_head.push(tape.matmul(weights, vi)?);
    }
    let s = if heads == 1 { per_head[0] } else { tape.concat_cols(&per_head)? };
    let o = lin(tape, s, &format!("{prefix}.attn.out"), true)?;
    let mid = tape.add(tokens, o)?;
    let y = norm(tape, mid, &format!("{prefix}.ln2"))?;
    let y = lin(tape, y, &format!("{prefix}.ffn.fc1"), true)?;
    let y = tape.gelu(y);
    let y = lin(tape, y, &format!("{prefix}.ffn.fc2"), true)?;
    let out = tape.add(mid, y)?;
    tape.reshape(out, &[h, w, c])
}

/// Three-scale U-Net of [`baseline_block`]s.
pub fn baseline_restorer_forward(
    tape: &mut Tape<'_>,
    prefix: &str,
    config: &RestorerConfig,
    feed: &RestorerFeed,
) -> Result<Var> {
    let (h, w, _) = tape.value(feed.entry).dims3()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("extents {h}×{w} not divisible by 4")));
    }
    let [b0, b1, b2] = config.blocks;
    let heads = |s: usize| config.heads << s;
    let mut x = feed.entry;
    for i in 0..b0 {
        x = baseline_block(tape, &format!("{prefix}.enc0.{i}"), heads(0), x, feed.lit_pyramid[0])?;
    }
    let skip0 = x;
    let w1 = tape.param(&format!("{prefix}.down1.weight"))?;
    x = tape.conv2d(x, w1, None, 2, 0)?;
    for i in 0..b1 {
        x = baseline_block(tape, &format!("{prefix}.enc1.{i}"), heads(1), x, feed.lit_pyramid[1])?;
    }
    let skip1 = x;
    let w2 = tape.param(&format!("{prefix}.down2.weight"))?;
    x = tape.conv2d(x, w2, None, 2, 0)?;
    for i in 0..b2 {
        x = baseline_block(tape, &format!("{prefix}.mid2.{i}"), heads(2), x, feed.lit_pyramid[2])?;
    }
    for (s, skip, count) in [(1usize, skip1, b1), (0, skip0, b0)] {
        let up = tape.upsample2(x)?;
        let uw = tape.param(&format!("{prefix}.up{}.weight", s + 1))?;
        let up = tape.conv2d(up, uw, None, 1, 0)?;
        let cat = tape.concat_channels(&[up, skip])?;
        let fw = tape.param(&format!("{prefix}.fuse{s}.weight"))?;
        x = tape.conv2d(cat, fw, None, 1, 0)?;
        for i in 0..count {
            x = baseline_block(tape, &format!("{prefix}.dec{s}.{i}"), heads(s), x, feed.lit_pyramid[s])?;
        }
    }
    let ow = tape.param(&format!("{prefix}.out.weight"))?;
    let ob = tape.param(&format!("{prefix}.out.bias"))?;
    let rgb = tape.conv2d(x, ow, Some(ob), 1, 1)?;
    tape.add(rgb, feed.lit_image)
}
