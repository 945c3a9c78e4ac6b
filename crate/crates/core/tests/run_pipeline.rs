use m2retinex::data::{generate_corpus, MANIFEST_FILE};
use m2retinex::numerics::{GradCheckOptions, ParamStore, Tensor};
use m2retinex::run::checkpoint::{FORMAT_VERSION, MAGIC};
use m2retinex::run::optim::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS, PLATEAU_FLOOR};
use m2retinex::run::{
    cosine_lr, identity_metrics, load_images, reflect_pad_to, run_gradcheck, train, Adam, Checkpoint, Engine,
    GradCheckScope, Plateau, RunConfig, Schedule,
};
use m2retinex::Error;

mod common;
use common::rand_tensor;

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.width = 4;
    cfg.optim.patch = 8;
    cfg.optim.batch = 2;
    cfg.optim.iterations = 4;
    cfg.optim.eval_interval = 2;
    cfg.data.manifest = dir.join("corpus").join(MANIFEST_FILE);
    cfg.io.checkpoint_dir = dir.join("ckpt");
    cfg.io.log = dir.join("log.jsonl");
    cfg
}

#[test]
fn config_defaults() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.optim.lr, 2e-4);
    assert_eq!(cfg.optim.schedule, Schedule::Cosine);
    assert_eq!((cfg.optim.batch, cfg.optim.patch), (4, 32));
    assert_eq!(cfg.optim.lambda_per, 0.5);
    assert_eq!(cfg.model.modalities, ["depth", "luminance", "semantic"]);
    assert_eq!(RunConfig::parse("").unwrap(), cfg);
}

#[test]
fn config_round_trip() {
    let text = "# toy run\n\
                model.width = 12\n\
                model.heads = 3\n\
                model.blocks = 2, 1, 1\n\
                model.tau = 2\n\
                model.modalities = depth,semantic\n\
                model.prior = max\n\
                optim.lr = 0.001\n\
                optim.schedule = plateau\n\
                optim.patch = 0\n\
                data.flips = false\n\
                io.log = runs/a.jsonl\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.model.width, 12);
    assert_eq!(cfg.model.blocks, [2, 1, 1]);
    assert_eq!(cfg.model.modalities, ["depth", "semantic"]);
    assert_eq!(cfg.optim.schedule, Schedule::Plateau);
    assert!(!cfg.data.flips);
    let again = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_text(), cfg.to_text());

    let none = RunConfig::parse("model.modalities =\n").unwrap();
    assert!(none.model.modalities.is_empty());
    assert_eq!(RunConfig::parse(&none.to_text()).unwrap(), none);
}

#[test]
fn config_rejects_bad_input() {
    for bad in [
        "model.colour = 3\n",
        "model.width = 8\nmodel.width = 8\n",
        "model.width = eight\n",
        "model.blocks = 1,1\n",
        "model.tau = 4\n",
        "model.width = 6\nmodel.heads = 4\n",
        "optim.schedule = step\n",
        "optim.patch = 6\n",
        "optim.lr = -1\n",
        "data.flips = yes\n",
        "just words\n",
    ] {
        assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
    }
    match RunConfig::parse("\n\nbogus.key = 1\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("line 3") && msg.contains("bogus.key"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

fn sample_checkpoint() -> Checkpoint {
    let mut store = ParamStore::new();
    store.insert("a.weight", rand_tensor(&[3, 2], 1, -1.0, 1.0), true).unwrap();
    store.insert("b.bias", Tensor::new([2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(), false).unwrap();
    let mut adam = Adam::new(&store);
    adam.step = 7;
    adam.m[0][1] = 0.25;
    adam.v[1][0] = 1e-300;
    let mut config = RunConfig::default();
    config.model.semantic_seed = 99;
    Checkpoint {
        config,
        step: 42,
        params: store,
        optimizer: Some(adam),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = sample_checkpoint();
    let bytes = ckpt.to_bytes();
    assert!(bytes.starts_with(MAGIC));
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.optimizer, ckpt.optimizer);
    for (a, b) in ckpt.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.requires_grad, b.requires_grad);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/x.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(Checkpoint::load(&path).is_ok());
}

#[test]
fn checkpoint_version_is_checked_first() {
    let mut bytes = MAGIC.to_vec();
    bytes.extend_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    bytes.extend_from_slice(&[0xff; 5]);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedFormat(_))));

    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Parse { offset: 0, .. })));
    let good = sample_checkpoint().to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&good[..good.len() - 3]), Err(Error::Parse { .. })));
    let mut long = good.clone();
    long.push(0);
    match Checkpoint::from_bytes(&long) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, good.len()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn adam_matches_direct_formula() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new([2], vec![1.0, -2.0]).unwrap(), true).unwrap();
    store.insert("frozen", Tensor::new([1], vec![3.0]).unwrap(), false).unwrap();
    let mut adam = Adam::new(&store);
    let grads = [[0.5, -0.1], [-0.2, 0.3], [0.05, 0.05]];
    let lr = 0.01;
    let (mut w, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        store.get_mut("w").unwrap().grad = Tensor::new([2], g.to_vec()).unwrap();
        store.get_mut("frozen").unwrap().grad = Tensor::new([1], vec![1.0]).unwrap();
        adam.update(&mut store, lr).unwrap();
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let got = store.get("w").unwrap().value.data();
        assert!((got[0] - w[0]).abs() < 1e-15 && (got[1] - w[1]).abs() < 1e-15);
    }
    assert_eq!(store.get("frozen").unwrap().value.data(), [3.0]);
    assert_eq!((ADAM_BETA1, ADAM_BETA2, ADAM_EPS), (0.9, 0.999, 1e-8));
    assert_eq!(adam.step, 3);
}

#[test]
fn schedules() {
    assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
    assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
    assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    assert!((1..10).all(|s| cosine_lr(1.0, s, 10) < cosine_lr(1.0, s - 1, 10)));

    let mut p = Plateau::new(1e-3);
    assert_eq!(p.observe(1.0), 1e-3);
    assert_eq!(p.observe(0.9), 1e-3);
    for _ in 0..5 {
        assert_eq!(p.observe(0.95), 1e-3);
    }
    assert_eq!(p.observe(0.95), 5e-4);
    let mut p = Plateau::new(3e-6);
    p.observe(1.0);
    for _ in 0..30 {
        p.observe(2.0);
    }
    assert_eq!(p.lr, PLATEAU_FLOOR);
}

#[test]
fn reflect_padding() {
    let img = Tensor::from_fn([5, 6, 3], |i| i as f64);
    let p = reflect_pad_to(&img, 4).unwrap();
    assert_eq!(p.shape(), &[8, 8, 3]);
    assert_eq!(p.at(4, 5, 1), img.at(4, 5, 1));
    assert_eq!(p.at(5, 0, 0), img.at(3, 0, 0));
    assert_eq!(p.at(7, 6, 2), img.at(1, 4, 2));
    let q = Tensor::zeros([8, 4, 3]);
    assert_eq!(reflect_pad_to(&q, 4).unwrap(), q);
}

#[test]
fn enhance_any_extent() {
    let mut cfg = RunConfig::default();
    cfg.model.width = 4;
    cfg.model.tau = 2;
    let engine = Engine::new(cfg).unwrap();
    let store = engine.fresh_params().unwrap();
    let low = rand_tensor(&[9, 13, 3], 2, 0.0, 0.5);
    let (out, timings) = engine.enhance(&store, &low, None).unwrap();
    assert_eq!(out.shape(), low.shape());
    let labels: Vec<&str> = timings.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(labels, ["extract", "stage1", "stage2"]);
    let (one, _) = engine.enhance(&store, &low, Some(1)).unwrap();
    assert_ne!(one, out);
    assert!(matches!(engine.enhance(&store, &low, Some(3)), Err(Error::Config(_))));
}

#[test]
fn training_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(10, 16, 1, dir.path().join("corpus")).unwrap();
    let mut cfg = tiny(dir.path());
    cfg.optim.schedule = Schedule::Plateau;
    let summary = train(&cfg).unwrap();
    assert_eq!(summary.records.iter().map(|r| r.step).collect::<Vec<_>>(), [2, 4]);
    let log = std::fs::read_to_string(&cfg.io.log).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["event"], "start");
    assert_eq!(lines[2]["step"], 4);
    for key in ["lr", "train_loss", "val_psnr_db", "val_ssim", "val_loss"] {
        assert!(lines[1][key].is_number(), "{key}");
    }

    let ckpt = Checkpoint::load(&summary.final_checkpoint).unwrap();
    assert_eq!(ckpt.step, 4);
    assert_eq!(ckpt.config, cfg);
    assert_eq!(ckpt.optimizer.as_ref().unwrap().step, 4);
    assert!(Checkpoint::load(&summary.best_checkpoint).is_ok());
    let (engine, store) = Engine::from_checkpoint(ckpt).unwrap();
    let manifest = m2retinex::data::DatasetManifest::load(&cfg.data.manifest).unwrap();
    let val = load_images(&manifest, m2retinex::data::Split::Val).unwrap();
    let report = engine.evaluate(&store, &val).unwrap();
    assert_eq!(report.mean_psnr_db, summary.records[1].val_psnr_db);
}

#[test]
fn training_aborts_on_divergence_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(10, 16, 1, dir.path().join("corpus")).unwrap();
    let mut cfg = tiny(dir.path());
    cfg.optim.lr = 1e300;
    match train(&cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step "), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_reports_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(train(&cfg), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_must_match_model() {
    let mut ckpt = sample_checkpoint();
    ckpt.config.model.width = 4;
    assert!(matches!(Engine::from_checkpoint(ckpt), Err(Error::Config(_))));
}

#[test]
fn identity_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(5, 16, 2, dir.path()).unwrap();
    let val = load_images(&manifest, m2retinex::data::Split::Val).unwrap();
    let report = identity_metrics(&val, |p| &p.gt).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.mean_psnr_db, f64::INFINITY);
    assert!((report.mean_ssim - 1.0).abs() < 1e-12);
    let lines = report.json_lines();
    assert_eq!(lines.len(), 2);
    let agg: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    assert_eq!(agg["mean_psnr_db"], "inf");
    assert_eq!(agg["count"], 1);
}

#[test]
fn gradcheck_scopes_and_corruption_hook() {
    let mut cfg = RunConfig::default();
    cfg.model.width = 4;
    cfg.model.heads = 2;
    let engine = Engine::new(cfg).unwrap();
    let report = run_gradcheck(&engine, GradCheckScope::Block, 4, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report}");
    let corrupt = GradCheckOptions {
        analytic_scale: 2.0,
        ..GradCheckOptions::default()
    };
    let bad = run_gradcheck(&engine, GradCheckScope::Block, 4, &corrupt).unwrap();
    assert!(!bad.passed());
    assert!("diagonal".parse::<GradCheckScope>().is_err());
}
