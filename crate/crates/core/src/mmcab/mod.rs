//! Multi-modal cross-attention block (MMCAB) and the U-shaped restorer built
//! from it.
//!
//! Token matrices are N×C' with token `k` at pixel `(k / W', k % W')`.
//! Per block:
//!
//! ```text
//! X  = LN(F_in)
//! S  = softmax(Q Kᵀ / √d) · ((V + pos(V)) ⊙ F_lu)      per head
//! A_m = softmax(Q K_mᵀ / √d) · V_m                       per head, per modality
//! U  = Σ_m σ(X W_m + b_m) ⊙ A_m
//! O  = g_f ⊙ S + (1 − g_f) ⊙ U,   g_f = σ(X W_f + b_f)
//! F' = F_in + O W_o + b_o
//! F_out = F' + FFN(LN(F'))
//! ```
//!
//! With no modalities, `O = S` and the block carries no gate parameters.

pub mod baseline;
mod model;
mod restorer;

pub use model::{Model, ModelConfig, ModelOutput};
pub use restorer::{Restorer, RestorerConfig};

use crate::error::{Error, Result};
use crate::numerics::{linear, register_linear, ParamStore, Tape, Var, LAYER_NORM_EPS};

pub const FFN_EXPANSION: usize = 2;
/// Initial final-gate bias; σ(2) ≈ 0.88 favours the self-attention branch.
pub const FINAL_GATE_BIAS_INIT: f64 = 2.0;
pub const POS_KERNEL: usize = 3;

/// H'×W'×C' → N×C'.
pub fn tokenize(tape: &mut Tape<'_>, f: Var) -> Result<Var> {
    let (h, w, c) = tape.value(f).dims3()?;
    tape.reshape(f, &[h * w, c])
}

/// N×C' → H'×W'×C'.
pub fn detokenize(tape: &mut Tape<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c) = tape.value(x).dims2()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot fill {h}×{w}")));
    }
    tape.reshape(x, &[h, w, c])
}

fn check_aligned(tape: &Tape<'_>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Alignment(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

fn head_split(tape: &Tape<'_>, q: Var, heads: usize) -> Result<usize> {
    let (_, c) = tape.value(q).dims2()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split into {heads} heads")));
    }
    Ok(c / heads)
}

fn head_cols(tape: &mut Tape<'_>, x: Var, heads: usize, h: usize, d: usize) -> Result<Var> {
    if heads == 1 {
        Ok(x)
    } else {
        tape.slice_cols(x, h * d, d)
    }
}

/// Row-stochastic attention maps `softmax(Q_h K_hᵀ / √d)`, one per head,
/// where head `h` sees columns `h·d..(h+1)·d` and `d = C'/heads`.
pub fn attention_maps(tape: &mut Tape<'_>, q: Var, k: Var, heads: usize) -> Result<Vec<Var>> {
    let d = head_split(tape, q, heads)?;
    if tape.value(k).dims2()?.1 != d * heads {
        return Err(Error::Alignment(format!("queries {:?} vs keys {:?}", tape.shape(q), tape.shape(k))));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_cols(tape, q, heads, h, d)?;
        let kh = head_cols(tape, k, heads, h, d)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        maps.push(tape.softmax(scores, 1)?);
    }
    Ok(maps)
}

/// Multi-head scaled dot-product attention with heads concatenated back
/// along columns.
pub fn multi_head_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (nk, _) = tape.value(k).dims2()?;
    let (nv, cv) = tape.value(v).dims2()?;
    if nk != nv || cv != tape.value(q).dims2()?.1 {
        return Err(Error::Alignment(format!(
            "attention operands {:?} / {:?} / {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let maps = attention_maps(tape, q, k, heads)?;
    let d = cv / heads;
    let mut outs = Vec::with_capacity(heads);
    for (h, attn) in maps.into_iter().enumerate() {
        let vh = head_cols(tape, v, heads, h, d)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Parameter layout of one block at width C'.
#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub modalities: Vec<String>,
}

impl BlockSpec {
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize, modalities: Vec<String>) -> Self {
        BlockSpec {
            prefix: prefix.into(),
            width,
            heads,
            modalities,
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn cross_name(&self, modality: &str, part: &str) -> String {
        format!("{}.cross.{modality}.{part}", self.prefix)
    }

    pub fn gate_name(&self, modality: &str) -> String {
        format!("{}.gate.{modality}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let c = self.width;
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {c} not divisible by {} heads", self.heads)));
        }
        store.insert_const(self.name("ln1.gain"), &[c], 1.0)?;
        store.insert_const(self.name("ln1.bias"), &[c], 0.0)?;
        for part in ["attn.q", "attn.k", "attn.v"] {
            register_linear(store, &self.name(part), c, c, false, seed)?;
        }
        store.insert_uniform(self.name("attn.pos.weight"), &[POS_KERNEL, POS_KERNEL, c], POS_KERNEL * POS_KERNEL, seed)?;
        for m in &self.modalities {
            register_linear(store, &self.cross_name(m, "k"), c, c, false, seed)?;
            register_linear(store, &self.cross_name(m, "v"), c, c, false, seed)?;
            store.insert_const(format!("{}.weight", self.gate_name(m)), &[c, c], 0.0)?;
            store.insert_const(format!("{}.bias", self.gate_name(m)), &[c], 0.0)?;
        }
        if !self.modalities.is_empty() {
            store.insert_const(self.name("final_gate.weight"), &[c, c], 0.0)?;
            store.insert_const(self.name("final_gate.bias"), &[c], FINAL_GATE_BIAS_INIT)?;
        }
        register_linear(store, &self.name("attn.out"), c, c, true, seed)?;
        store.insert_const(self.name("ln2.gain"), &[c], 1.0)?;
        store.insert_const(self.name("ln2.bias"), &[c], 0.0)?;
        register_linear(store, &self.name("ffn.fc1"), c, FFN_EXPANSION * c, true, seed)?;
        register_linear(store, &self.name("ffn.fc2"), FFN_EXPANSION * c, c, true, seed)?;
        Ok(())
    }

    /// Closed-form scalar count of one block with `m` modalities.
    pub fn analytic_param_count(width: usize, m: usize) -> usize {
        let c = width;
        let base = 8 * c * c + 17 * c;
        let per_modality = 3 * c * c + c;
        let final_gate = if m > 0 { c * c + c } else { 0 };
        base + m * per_modality + final_gate
    }
}

fn layer_norm(tape: &mut Tape<'_>, x: Var, spec: &BlockSpec, which: &str) -> Result<Var> {
    let g = tape.param(&spec.name(&format!("{which}.gain")))?;
    let b = tape.param(&spec.name(&format!("{which}.bias")))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// `A_m = softmax(Q K_mᵀ/√d) V_m` with shared `W_Q` and modality-specific
/// `W_{K_m}`, `W_{V_m}`.
pub fn cross_attention(tape: &mut Tape<'_>, spec: &BlockSpec, x: Var, x_m: Var, modality: &str) -> Result<Var> {
    let (n, _) = tape.value(x).dims2()?;
    let (nm, _) = tape.value(x_m).dims2()?;
    if n != nm {
        return Err(Error::Alignment(format!("modality `{modality}` has {nm} tokens, expected {n}")));
    }
    let q = linear(tape, x, &spec.name("attn.q.weight"), None)?;
    let k = linear(tape, x_m, &spec.cross_name(modality, "k.weight"), None)?;
    let v = linear(tape, x_m, &spec.cross_name(modality, "v.weight"), None)?;
    multi_head_attention(tape, q, k, v, spec.heads)
}

/// Illumination-guided self-attention. `spatial` gives (H', W') for the
/// positional depthwise convolution on V.
pub fn ig_self_attention(
    tape: &mut Tape<'_>,
    spec: &BlockSpec,
    x: Var,
    f_lu: Var,
    spatial: (usize, usize),
) -> Result<Var> {
    check_aligned(tape, x, f_lu, "illumination features")?;
    let (h, w) = spatial;
    let q = linear(tape, x, &spec.name("attn.q.weight"), None)?;
    let k = linear(tape, x, &spec.name("attn.k.weight"), None)?;
    let v = linear(tape, x, &spec.name("attn.v.weight"), None)?;
    let v_img = detokenize(tape, v, h, w)?;
    let pos_w = tape.param(&spec.name("attn.pos.weight"))?;
    let pos = tape.depthwise_conv2d(v_img, pos_w, None, POS_KERNEL / 2)?;
    let pos = tokenize(tape, pos)?;
    let v = tape.add(v, pos)?;
    let modulated = tape.mul(v, f_lu)?;
    multi_head_attention(tape, q, k, modulated, spec.heads)
}

/// `U = Σ_m σ(X W_m + b_m) ⊙ A_m`, summed in the given order.
pub fn modality_gate(tape: &mut Tape<'_>, spec: &BlockSpec, x: Var, attended: &[(String, Var)]) -> Result<Var> {
    if attended.is_empty() {
        return Err(Error::Config("modality gate needs at least one modality".into()));
    }
    let mut total: Option<Var> = None;
    for (name, a) in attended {
        if !spec.modalities.contains(name) {
            return Err(Error::Config(format!("block `{}` has no gate for modality `{name}`", spec.prefix)));
        }
        check_aligned(tape, x, *a, "modality attention")?;
        let prefix = spec.gate_name(name);
        let logits = linear(tape, x, &format!("{prefix}.weight"), Some(&format!("{prefix}.bias")))?;
        let g = tape.sigmoid(logits);
        let term = tape.mul(g, *a)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `g_f ⊙ S + (1 − g_f) ⊙ U`.
pub fn final_gate_fuse(tape: &mut Tape<'_>, spec: &BlockSpec, x: Var, s: Var, u: Var) -> Result<Var> {
    check_aligned(tape, s, u, "fusion branches")?;
    check_aligned(tape, x, s, "fusion branches")?;
    let logits = linear(tape, x, &spec.name("final_gate.weight"), Some(&spec.name("final_gate.bias")))?;
    let g = tape.sigmoid(logits);
    let inv = tape.one_minus(g);
    let a = tape.mul(g, s)?;
    let b = tape.mul(inv, u)?;
    tape.add(a, b)
}

/// Attention core of the block on normalized tokens `x`: S alone when the
/// block has no modalities, otherwise the gated fusion.
pub fn mmcab_attention(
    tape: &mut Tape<'_>,
    spec: &BlockSpec,
    x: Var,
    f_lu: Var,
    modal: &[(String, Var)],
    spatial: (usize, usize),
) -> Result<Var> {
    let names: Vec<&String> = modal.iter().map(|(n, _)| n).collect();
    if names.len() != spec.modalities.len() || spec.modalities.iter().zip(&names).any(|(a, b)| a != *b) {
        return Err(Error::Config(format!(
            "block `{}` expects modalities {:?}, got {names:?}",
            spec.prefix, spec.modalities
        )));
    }
    let s = ig_self_attention(tape, spec, x, f_lu, spatial)?;
    if modal.is_empty() {
        return Ok(s);
    }
    let mut attended = Vec::with_capacity(modal.len());
    for (name, xm) in modal {
        attended.push((name.clone(), cross_attention(tape, spec, x, *xm, name)?));
    }
    let u = modality_gate(tape, spec, x, &attended)?;
    final_gate_fuse(tape, spec, x, s, u)
}

/// One residual block on H'×W'×C' feature maps. `modal` pairs each of the
/// block's modalities (in registration order) with its H'×W'×C' features.
pub fn mmcab_block(tape: &mut Tape<'_>, spec: &BlockSpec, f_in: Var, f_lu: Var, modal: &[(String, Var)]) -> Result<Var> {
    let (h, w, c) = tape.value(f_in).dims3()?;
    if c != spec.width {
        return Err(Error::Shape(format!("block `{}` has width {}, input has {c}", spec.prefix, spec.width)));
    }
    check_aligned(tape, f_in, f_lu, "illumination features")?;
    let tokens = tokenize(tape, f_in)?;
    let lu = tokenize(tape, f_lu)?;
    let mut modal_tokens = Vec::with_capacity(modal.len());
    for (name, fm) in modal {
        check_aligned(tape, f_in, *fm, &format!("modality `{name}`"))?;
        modal_tokens.push((name.clone(), tokenize(tape, *fm)?));
    }
    let x = layer_norm(tape, tokens, spec, "ln1")?;
    let fused = mmcab_attention(tape, spec, x, lu, &modal_tokens, (h, w))?;
    let proj = linear(tape, fused, &spec.name("attn.out.weight"), Some(&spec.name("attn.out.bias")))?;
    let mid = tape.add(tokens, proj)?;
    let y = layer_norm(tape, mid, spec, "ln2")?;
    let y = linear(tape, y, &spec.name("ffn.fc1.weight"), Some(&spec.name("ffn.fc1.bias")))?;
    let y = tape.gelu(y);
    let y = linear(tape, y, &spec.name("ffn.fc2.weight"), Some(&spec.name("ffn.fc2.bias")))?;
    let out = tape.add(mid, y)?;
    detokenize(tape, out, h, w)
}

#[cfg(test)]
mod tests;
