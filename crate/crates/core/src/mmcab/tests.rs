use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::baseline::{baseline_block, baseline_restorer_forward};
use super::*;
use crate::modality::{ModalityDescriptor, ModalityEncoder, ModalityExtractor, ModalityRegistry};
use crate::numerics::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor};
use crate::retinex::{IlluminationEstimator, RestorerEntry};

type Mat = Vec<Vec<f64>>;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn to_mat(t: &Tensor) -> Mat {
    let (n, c) = t.dims2().unwrap();
    (0..n).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let m = b[0].len();
    a.iter()
        .map(|row| (0..m).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

/// Direct-loop single-head attention.
fn oracle_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let n = q.len();
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i][h * d + t] = (0..k.len()).map(|j| e[j] / z * v[j][h * d + t]).sum();
            }
        }
    }
    out
}

fn assert_close(a: &Tensor, b: &Mat, tol: f64) {
    let m = to_mat(a);
    for (ra, rb) in m.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }
}

fn block_store(width: usize, heads: usize, modalities: &[&str], seed: u64) -> (BlockSpec, ParamStore) {
    let spec = BlockSpec::new("blk", width, heads, modalities.iter().map(|s| s.to_string()).collect());
    let mut store = ParamStore::new();
    spec.register(&mut store, seed).unwrap();
    (spec, store)
}

fn randomize(store: &mut ParamStore, names: &[String], seed: u64) {
    for (i, name) in names.iter().enumerate() {
        let shape = store.get(name).unwrap().value.shape().to_vec();
        store.set_value(name, rand_tensor(&shape, seed + i as u64, -1.0, 1.0)).unwrap();
    }
}

#[test]
fn tokenize_round_trip_and_order() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let f = rand_tensor(&[4, 4, 8], 1, -1.0, 1.0);
    let v = tape.constant(f.clone());
    let t = tokenize(&mut tape, v).unwrap();
    assert_eq!(tape.shape(t), &[16, 8]);
    for k in 0..16 {
        for c in 0..8 {
            assert_eq!(tape.value(t).data()[k * 8 + c], f.at(k / 4, k % 4, c));
        }
    }
    let back = detokenize(&mut tape, t, 4, 4).unwrap();
    assert_eq!(tape.value(back), &f);
    assert!(detokenize(&mut tape, t, 3, 5).is_err());
}

#[test]
fn cross_attention_zero_queries_average_values() {
    let (spec, mut store) = block_store(4, 1, &["m"], 0);
    store.fill("blk.attn.q.weight", 0.0).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(rand_tensor(&[5, 4], 2, -1.0, 1.0));
    let xm_t = rand_tensor(&[5, 4], 3, -1.0, 1.0);
    let xm = tape.constant(xm_t.clone());
    let a = cross_attention(&mut tape, &spec, x, xm, "m").unwrap();
    let v = mat_mul(&to_mat(&xm_t), &to_mat(&store.get("blk.cross.m.v.weight").unwrap().value));
    for row in to_mat(tape.value(a)) {
        for c in 0..4 {
            let mean = v.iter().map(|r| r[c]).sum::<f64>() / 5.0;
            assert!((row[c] - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn cross_attention_single_token_returns_value() {
    let (spec, store) = block_store(4, 2, &["m"], 1);
    let mut tape = Tape::new(&store);
    let x = tape.constant(rand_tensor(&[1, 4], 4, -1.0, 1.0));
    let xm_t = rand_tensor(&[1, 4], 5, -1.0, 1.0);
    let xm = tape.constant(xm_t.clone());
    let a = cross_attention(&mut tape, &spec, x, xm, "m").unwrap();
    let v = mat_mul(&to_mat(&xm_t), &to_mat(&store.get("blk.cross.m.v.weight").unwrap().value));
    assert_eq!(to_mat(tape.value(a)), v);
}

#[test]
fn cross_attention_hand_set_matches_oracle() {
    let (spec, mut store) = block_store(2, 1, &["m"], 0);
    store.set_value("blk.attn.q.weight", Tensor::new([2, 2], vec![1.0, 0.5, -0.5, 2.0]).unwrap()).unwrap();
    store.set_value("blk.cross.m.k.weight", Tensor::new([2, 2], vec![0.3, -1.0, 1.5, 0.2]).unwrap()).unwrap();
    store.set_value("blk.cross.m.v.weight", Tensor::new([2, 2], vec![2.0, 0.0, -1.0, 1.0]).unwrap()).unwrap();
    let x_t = Tensor::new([3, 2], vec![0.1, 0.2, -0.4, 0.9, 1.0, -1.0]).unwrap();
    let xm_t = Tensor::new([3, 2], vec![0.5, 0.5, 0.0, -0.3, 0.7, 0.2]).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(x_t.clone());
    let xm = tape.constant(xm_t.clone());
    let a = cross_attention(&mut tape, &spec, x, xm, "m").unwrap();
    let q = mat_mul(&to_mat(&x_t), &to_mat(&store.get("blk.attn.q.weight").unwrap().value));
    let k = mat_mul(&to_mat(&xm_t), &to_mat(&store.get("blk.cross.m.k.weight").unwrap().value));
    let v = mat_mul(&to_mat(&xm_t), &to_mat(&store.get("blk.cross.m.v.weight").unwrap().value));
    assert_close(tape.value(a), &oracle_attention(&q, &k, &v, 1), 1e-14);
}

#[test]
fn cross_attention_token_mismatch_is_alignment_error() {
    let (spec, store) = block_store(4, 1, &["m"], 0);
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::zeros([4, 4]));
    let xm = tape.constant(Tensor::zeros([5, 4]));
    assert!(matches!(
        cross_attention(&mut tape, &spec, x, xm, "m"),
        Err(crate::Error::Alignment(_))
    ));
}

#[test]
fn multi_head_matches_oracle() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (qt, kt, vt) = (
        rand_tensor(&[6, 8], 1, -1.0, 1.0),
        rand_tensor(&[6, 8], 2, -1.0, 1.0),
        rand_tensor(&[6, 8], 3, -1.0, 1.0),
    );
    let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
    let out = multi_head_attention(&mut tape, q, k, v, 4).unwrap();
    assert_close(tape.value(out), &oracle_attention(&to_mat(&qt), &to_mat(&kt), &to_mat(&vt), 4), 1e-14);
    assert!(multi_head_attention(&mut tape, q, k, v, 3).is_err());
    for map in attention_maps(&mut tape, q, k, 4).unwrap() {
        for row in to_mat(tape.value(map)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

/// IG self-attention oracle with the positional depthwise term.
fn oracle_ig(store: &ParamStore, x: &Tensor, f_lu: &Tensor, h: usize, w: usize, heads: usize) -> Mat {
    let xm = to_mat(x);
    let get = |n: &str| to_mat(&store.get(n).unwrap().value);
    let q = mat_mul(&xm, &get("blk.attn.q.weight"));
    let k = mat_mul(&xm, &get("blk.attn.k.weight"));
    let v = mat_mul(&xm, &get("blk.attn.v.weight"));
    let pw = &store.get("blk.attn.pos.weight").unwrap().value;
    let c = v[0].len();
    let lu = to_mat(f_lu);
    let mut vm = vec![vec![0.0; c]; h * w];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut pos = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            pos += pw.data()[(dy * 3 + dx) * c + ch] * v[sy as usize * w + sx as usize][ch];
                        }
                    }
                }
                let t = y * w + xx;
                vm[t][ch] = (v[t][ch] + pos) * lu[t][ch];
            }
        }
    }
    oracle_attention(&q, &k, &vm, heads)
}

#[test]
fn ig_self_attention_matches_oracle() {
    for heads in [1, 2] {
        let (spec, store) = block_store(4, heads, &[], 7);
        let x_t = rand_tensor(&[12, 4], 8, -1.0, 1.0);
        let lu_t = rand_tensor(&[12, 4], 9, -1.0, 1.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(x_t.clone());
        let lu = tape.constant(lu_t.clone());
        let s = ig_self_attention(&mut tape, &spec, x, lu, (3, 4)).unwrap();
        assert_close(tape.value(s), &oracle_ig(&store, &x_t, &lu_t, 3, 4, heads), 1e-13);
    }
}

#[test]
fn ig_self_attention_modulation_limits() {
    let (spec, mut store) = block_store(4, 1, &[], 3);
    let x_t = rand_tensor(&[16, 4], 1, -1.0, 1.0);
    {
        let mut tape = Tape::new(&store);
        let x = tape.constant(x_t.clone());
        let ones = tape.constant(Tensor::ones([16, 4]));
        let s = ig_self_attention(&mut tape, &spec, x, ones, (4, 4)).unwrap();
        let plain = oracle_ig(&store, &x_t, &Tensor::ones([16, 4]), 4, 4, 1);
        assert_close(tape.value(s), &plain, 1e-13);
    }
    store.fill("blk.attn.pos.weight", 0.0).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(x_t);
    let zeros = tape.constant(Tensor::zeros([16, 4]));
    let s = ig_self_attention(&mut tape, &spec, x, zeros, (4, 4)).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    let bad = tape.constant(Tensor::zeros([15, 4]));
    assert!(ig_self_attention(&mut tape, &spec, x, bad, (4, 4)).is_err());
}

#[test]
fn modality_gate_examples() {
    let (spec, mut store) = block_store(3, 1, &["a", "b"], 0);
    let x_t = rand_tensor(&[4, 3], 1, -1.0, 1.0);
    let a_t = rand_tensor(&[4, 3], 2, -1.0, 1.0);
    let b_t = rand_tensor(&[4, 3], 3, -1.0, 1.0);
    {
        let mut tape = Tape::new(&store);
        let x = tape.constant(x_t.clone());
        let a = tape.constant(a_t.clone());
        let u = modality_gate(&mut tape, &spec, x, &[("a".into(), a)]).unwrap();
        assert_eq!(tape.value(u), &a_t.map(|v| 0.5 * v));
    }
    store.fill("blk.gate.a.bias", -50.0).unwrap();
    {
        let mut tape = Tape::new(&store);
        let x = tape.constant(x_t.clone());
        let a = tape.constant(a_t.clone());
        let u = modality_gate(&mut tape, &spec, x, &[("a".into(), a)]).unwrap();
        assert!(tape.value(u).data().iter().all(|v| v.abs() < 1e-20));
    }
    randomize(
        &mut store,
        &["blk.gate.a.weight", "blk.gate.a.bias", "blk.gate.b.weight", "blk.gate.b.bias"].map(String::from),
        40,
    );
    let mut tape = Tape::new(&store);
    let x = tape.constant(x_t.clone());
    let a = tape.constant(a_t.clone());
    let b = tape.constant(b_t.clone());
    let u = modality_gate(&mut tape, &spec, x, &[("a".into(), a), ("b".into(), b)]).unwrap();
    let xm = to_mat(&x_t);
    let gate = |m: &str, i: usize, j: usize| {
        let w = &store.get(&format!("blk.gate.{m}.weight")).unwrap().value;
        let bias = store.get(&format!("blk.gate.{m}.bias")).unwrap().value.data()[j];
        let z: f64 = (0..3).map(|t| xm[i][t] * w.data()[t * 3 + j]).sum::<f64>() + bias;
        1.0 / (1.0 + (-z).exp())
    };
    for i in 0..4 {
        for j in 0..3 {
            let expect = gate("a", i, j) * a_t.data()[i * 3 + j] + gate("b", i, j) * b_t.data()[i * 3 + j];
            assert!((tape.value(u).data()[i * 3 + j] - expect).abs() < 1e-14);
        }
    }
    let c = tape.constant(b_t);
    assert!(matches!(
        modality_gate(&mut tape, &spec, x, &[("c".into(), c)]),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn final_gate_examples() {
    let (spec, mut store) = block_store(3, 1, &["a"], 0);
    let x_t = rand_tensor(&[5, 3], 1, -1.0, 1.0);
    let s_t = rand_tensor(&[5, 3], 2, -2.0, 2.0);
    let u_t = rand_tensor(&[5, 3], 3, -2.0, 2.0);
    let run = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let (x, s, u) = (tape.constant(x_t.clone()), tape.constant(s_t.clone()), tape.constant(u_t.clone()));
        let o = final_gate_fuse(&mut tape, &spec, x, s, u).unwrap();
        tape.value(o).clone()
    };
    store.fill("blk.final_gate.bias", 50.0).unwrap();
    assert!(run(&store).max_abs_diff(&s_t) <= 1e-15);
    store.fill("blk.final_gate.bias", -50.0).unwrap();
    assert!(run(&store).max_abs_diff(&u_t) <= 1e-15);
    store.fill("blk.final_gate.bias", 0.0).unwrap();
    let half = s_t.zip_map(&u_t, |a, b| (a + b) / 2.0).unwrap();
    assert_eq!(run(&store), half);
}

#[test]
fn block_zero_projections_is_identity() {
    let (spec, mut store) = block_store(4, 2, &["a"], 5);
    for name in ["blk.attn.out.weight", "blk.attn.out.bias", "blk.ffn.fc2.weight", "blk.ffn.fc2.bias"] {
        store.fill(name, 0.0).unwrap();
    }
    let f_t = rand_tensor(&[4, 4, 4], 1, -1.0, 1.0);
    let mut tape = Tape::new(&store);
    let f = tape.constant(f_t.clone());
    let lu = tape.constant(rand_tensor(&[4, 4, 4], 2, -1.0, 1.0));
    let m = tape.constant(rand_tensor(&[4, 4, 4], 3, -1.0, 1.0));
    let out = mmcab_block(&mut tape, &spec, f, lu, &[("a".into(), m)]).unwrap();
    assert_eq!(tape.value(out), &f_t);
}

#[test]
fn empty_modality_block_equals_baseline() {
    let (spec, store) = block_store(4, 2, &[], 11);
    let mut tape = Tape::new(&store);
    let f = tape.constant(rand_tensor(&[4, 4, 4], 1, -1.0, 1.0));
    let lu = tape.constant(rand_tensor(&[4, 4, 4], 2, -1.0, 1.0));
    let a = mmcab_block(&mut tape, &spec, f, lu, &[]).unwrap();
    let b = baseline_block(&mut tape, "blk", 2, f, lu).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn block_rejects_wrong_modality_set() {
    let (spec, store) = block_store(4, 1, &["a"], 0);
    let mut tape = Tape::new(&store);
    let f = tape.constant(Tensor::zeros([2, 2, 4]));
    assert!(matches!(mmcab_block(&mut tape, &spec, f, f, &[]), Err(crate::Error::Config(_))));
    assert!(matches!(
        mmcab_block(&mut tape, &spec, f, f, &[("b".into(), f)]),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn saturated_final_gate_ignores_modalities() {
    let (spec, mut store) = block_store(4, 1, &["a"], 2);
    store.fill("blk.final_gate.bias", 50.0).unwrap();
    let mut tape = Tape::new(&store);
    let f = tape.constant(rand_tensor(&[4, 4, 4], 1, -1.0, 1.0));
    let lu = tape.constant(rand_tensor(&[4, 4, 4], 2, -1.0, 1.0));
    let m1 = tape.constant(rand_tensor(&[4, 4, 4], 3, -1.0, 1.0));
    let m2 = tape.constant(rand_tensor(&[4, 4, 4], 4, -5.0, 5.0));
    let a = mmcab_block(&mut tape, &spec, f, lu, &[("a".into(), m1)]).unwrap();
    let b = mmcab_block(&mut tape, &spec, f, lu, &[("a".into(), m2)]).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) <= 1e-12);
}

#[test]
fn block_grad_check() {
    let (spec, mut store) = block_store(4, 2, &["a", "b"], 3);
    let names: Vec<String> = store
        .names()
        .filter(|n| n.contains("gate"))
        .map(String::from)
        .collect();
    randomize(&mut store, &names, 100);
    let f = rand_tensor(&[2, 4, 4], 1, -1.0, 1.0);
    let lu = rand_tensor(&[2, 4, 4], 2, -1.0, 1.0);
    let ma = rand_tensor(&[2, 4, 4], 3, -1.0, 1.0);
    let mb = rand_tensor(&[2, 4, 4], 4, -1.0, 1.0);
    let report = grad_check(
        &store,
        |t| {
            let (f, lu) = (t.constant(f.clone()), t.constant(lu.clone()));
            let (a, b) = (t.constant(ma.clone()), t.constant(mb.clone()));
            let out = mmcab_block(t, &spec, f, lu, &[("a".into(), a), ("b".into(), b)])?;
            let sq = t.mul(out, out)?;
            Ok(t.mean(sq))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn block_param_count_formula() {
    for (c, heads, m) in [(4, 1, 0), (4, 2, 1), (8, 4, 3), (6, 3, 2)] {
        let names: Vec<&str> = ["a", "b", "c"][..m].to_vec();
        let (_, store) = block_store(c, heads, &names, 0);
        assert_eq!(store.num_scalars(), BlockSpec::analytic_param_count(c, m));
    }
}

struct Constant;

impl ModalityEncoder for Constant {
    fn channels(&self) -> usize {
        2
    }

    fn encode(&self, img: &Tensor) -> crate::Result<Tensor> {
        let (h, w, _) = img.dims3()?;
        Ok(Tensor::full([h, w, 2], 0.25))
    }
}

fn small_config(c: usize, tau: usize) -> ModelConfig {
    ModelConfig {
        restorer: RestorerConfig {
            base_width: c,
            blocks: [1, 1, 2],
            heads: 1,
        },
        tau,
        ..ModelConfig::default()
    }
}

fn low_image(h: usize, w: usize, seed: u64) -> Tensor {
    rand_tensor(&[h, w, 3], seed, 0.0, 0.4)
}

#[test]
fn restorer_shape_and_global_residual() {
    let reg = ModalityRegistry::default_set(0);
    let model = Model::new(small_config(8, 1), &reg).unwrap();
    let mut store = model.init_params(&reg, 1).unwrap();
    let extractor = ModalityExtractor::new(reg);
    let low = low_image(16, 16, 2);
    let mut tape = Tape::new(&store);
    let out = model.forward(&mut tape, &extractor, &low, None).unwrap();
    assert_eq!(tape.shape(out.output), &[16, 16, 3]);
    drop(tape);

    store.fill("stage0.restorer.out.weight", 0.0).unwrap();
    store.fill("stage0.restorer.out.bias", 0.0).unwrap();
    let mut tape = Tape::new(&store);
    let out = model.forward(&mut tape, &extractor, &low, None).unwrap();
    assert_eq!(tape.value(out.output), tape.value(out.stages[0].lit_image));
}

#[test]
fn restorer_rejects_indivisible_extents() {
    let reg = ModalityRegistry::empty();
    let model = Model::new(small_config(4, 1), &reg).unwrap();
    let store = model.init_params(&reg, 0).unwrap();
    let extractor = ModalityExtractor::new(reg);
    let mut tape = Tape::new(&store);
    assert!(model.forward(&mut tape, &extractor, &low_image(6, 8, 0), None).is_err());
}

#[test]
fn model_param_count_matches_registry_walk() {
    for (names, share, tau) in [(vec![], false, 1), (vec!["depth"], false, 2), (vec!["depth", "luminance", "semantic"], true, 3)] {
        let reg = ModalityRegistry::from_names(&names, 0).unwrap();
        let mut cfg = small_config(4, tau);
        cfg.share_stages = share;
        let model = Model::new(cfg.clone(), &reg).unwrap();
        let store = model.init_params(&reg, 0).unwrap();
        let channels: Vec<usize> = reg.iter().map(|d| d.encoder.channels()).collect();
        assert_eq!(store.num_scalars(), Model::analytic_param_count(&cfg, &channels));
    }
}

#[test]
fn empty_registry_restorer_equals_control_network() {
    let reg = ModalityRegistry::empty();
    let cfg = ModelConfig {
        restorer: RestorerConfig {
            base_width: 4,
            blocks: [1, 2, 1],
            heads: 2,
        },
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone(), &reg).unwrap();
    let store = model.init_params(&reg, 9).unwrap();
    let low = low_image(8, 8, 4);
    let mut tape = Tape::new(&store);
    let img = tape.constant(low);
    let prior = tape.channel_mean(img).unwrap();
    let lit = IlluminationEstimator::new("stage0.estimator", 4).forward(&mut tape, img, prior).unwrap();
    let feed = RestorerEntry::new("stage0.entry", 4).build(&mut tape, &lit).unwrap();
    let a = model.restorer(0).forward(&mut tape, &feed, &[]).unwrap();
    let b = baseline_restorer_forward(&mut tape, "stage0.restorer", &cfg.restorer, &feed).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn progressive_refinement_reuses_extraction() {
    let reg = ModalityRegistry::default_set(3);
    let model = Model::new(small_config(4, 3), &reg).unwrap();
    let store = model.init_params(&reg, 2).unwrap();
    let extractor = ModalityExtractor::new(reg);
    let low = low_image(8, 8, 5);
    let mut tape = Tape::new(&store);
    let out = model.forward(&mut tape, &extractor, &low, None).unwrap();
    assert_eq!(out.stages.len(), 3);
    assert_eq!(tape.shape(out.output), &[8, 8, 3]);
    for d in extractor.registry().iter() {
        assert_eq!(d.calls(), 1, "{}", d.name);
    }
    let one = model.forward(&mut tape, &extractor, &low, Some(1)).unwrap();
    assert_eq!(tape.value(one.output), tape.value(out.stages[0].output));
    assert!(model.forward(&mut tape, &extractor, &low, Some(4)).is_err());
    assert!(Model::new(small_config(4, 0), extractor.registry()).is_err());
}

#[test]
fn later_stage_consumes_previous_output() {
    let reg = ModalityRegistry::empty();
    let model = Model::new(small_config(4, 2), &reg).unwrap();
    let store = model.init_params(&reg, 2).unwrap();
    let extractor = ModalityExtractor::new(reg);
    let low = low_image(8, 8, 6);
    let mut tape = Tape::new(&store);
    let out = model.forward(&mut tape, &extractor, &low, None).unwrap();
    let first = tape.value(out.stages[0].output).clone();
    let illum = tape.value(out.stages[1].illum_map).clone();
    let expect = first.zip_map(&illum, |a, b| a * b).unwrap();
    assert_eq!(tape.value(out.stages[1].lit_image), &expect);
}

#[test]
fn registry_mismatch_is_rejected() {
    let reg = ModalityRegistry::default_set(0);
    let model = Model::new(small_config(4, 1), &reg).unwrap();
    let store = model.init_params(&reg, 0).unwrap();
    let other = ModalityExtractor::new(ModalityRegistry::empty());
    let mut tape = Tape::new(&store);
    assert!(matches!(
        model.forward(&mut tape, &other, &low_image(8, 8, 0), None),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn extra_modality_adds_one_gate_group_per_block() {
    let base = ModalityRegistry::default_set(0);
    let mut extended = base.clone();
    extended
        .register(ModalityDescriptor::new("constant", Arc::new(Constant)))
        .unwrap();
    let cfg = small_config(4, 1);
    let a = Model::new(cfg.clone(), &base).unwrap().init_params(&base, 0).unwrap();
    let b = Model::new(cfg.clone(), &extended).unwrap().init_params(&extended, 0).unwrap();
    let gates = |s: &ParamStore, m: &str| s.names().filter(|n| n.ends_with(&format!(".gate.{m}.weight"))).count();
    let blocks = Model::new(cfg, &base).unwrap().restorer(0).block_specs().len();
    assert_eq!(gates(&a, "constant"), 0);
    assert_eq!(gates(&b, "constant"), blocks);
    for name in a.names() {
        assert_eq!(a.get(name).unwrap().value, b.get(name).unwrap().value, "{name}");
    }
}

#[test]
fn full_model_grad_check() {
    let reg = ModalityRegistry::default_set(1);
    let model = Model::new(small_config(2, 1), &reg).unwrap();
    let mut store = model.init_params(&reg, 4).unwrap();
    let gate_names: Vec<String> = store.names().filter(|n| n.contains("gate")).map(String::from).collect();
    randomize(&mut store, &gate_names, 500);
    let extractor = ModalityExtractor::new(reg);
    let low = low_image(4, 4, 7);
    let gt = rand_tensor(&[4, 4, 3], 8, 0.0, 1.0);
    let report = grad_check(
        &store,
        |t| {
            let out = model.forward(t, &extractor, &low, None)?;
            let g = t.constant(gt.clone());
            let d = t.sub(out.output, g)?;
            let sq = t.mul(d, d)?;
            Ok(t.mean(sq))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}
