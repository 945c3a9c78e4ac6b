//! Training, evaluation, enhancement and gradient auditing on top of the
//! model, driven by a [`RunConfig`].

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{RunConfig, Schedule};
pub use optim::{cosine_lr, Adam, Plateau};

use crate::data::{augment, shuffled_indices, AugmentConfig, DatasetManifest, Pair, Split};
use crate::error::{Error, Result};
use crate::loss::{combined_loss_on_tape, LossReport, PerceptualProxy};
use crate::metrics::{psnr, psnr_json, ssim};
use crate::mmcab::{mmcab_block, BlockSpec, Model};
use crate::modality::filters::reflect;
use crate::modality::{ModalityExtractor, ModalityRegistry};
use crate::numerics::{grad_check, name_rng, GradCheckOptions, GradCheckReport, GradMap, ParamStore, Tape, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Model, modality extractor and loss proxy built from one config.
pub struct Engine {
    pub config: RunConfig,
    pub model: Model,
    pub extractor: ModalityExtractor,
    pub proxy: PerceptualProxy,
}

impl Engine {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let registry = ModalityRegistry::from_names(&m.modalities, m.semantic_seed)?;
        Self::with_registry(config, registry)
    }

    /// Engine over a caller-built registry, for modalities outside the
    /// built-in set.
    pub fn with_registry(config: RunConfig, registry: ModalityRegistry) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), &registry)?;
        let proxy = PerceptualProxy::new(config.model.proxy_seed);
        Ok(Engine {
            config,
            model,
            extractor: ModalityExtractor::new(registry),
            proxy,
        })
    }

    pub fn fresh_params(&self) -> Result<ParamStore> {
        self.model.init_params(self.extractor.registry(), self.config.model.init_seed)
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let fresh = self.fresh_params()?;
        let same = fresh.len() == store.len()
            && fresh
                .iter()
                .zip(store.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Config("checkpoint parameters do not match the configured model".into()))
        }
    }

    /// Engine and parameters restored from a checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<(Self, ParamStore)> {
        let engine = Engine::new(ckpt.config)?;
        engine.check_params(&ckpt.params)?;
        Ok((engine, ckpt.params))
    }

    /// Combined loss of one pair and its parameter gradients.
    pub fn loss_and_grads(&self, store: &ParamStore, pair: &Pair) -> Result<(LossReport, GradMap)> {
        let mut tape = Tape::new(store);
        let out = self.model.forward(&mut tape, &self.extractor, &pair.low, None)?;
        let (loss, report) = combined_loss_on_tape(&mut tape, out.output, &pair.gt, &self.proxy, self.config.optim.lambda_per)?;
        Ok((report, tape.backward(loss)?.into_params()))
    }

    /// Per-image metrics and loss of the model's predictions.
    pub fn evaluate(&self, store: &ParamStore, images: &[(String, Pair)]) -> Result<EvalReport> {
        let mut rows = Vec::with_capacity(images.len());
        for (file, pair) in images {
            let mut tape = Tape::new(store);
            let out = self.model.forward(&mut tape, &self.extractor, &pair.low, None)?;
            let (_, loss) = combined_loss_on_tape(&mut tape, out.output, &pair.gt, &self.proxy, self.config.optim.lambda_per)?;
            let pred = tape.value(out.output);
            rows.push(ImageMetrics {
                file: file.clone(),
                psnr_db: psnr(pred, &pair.gt, 1.0)?,
                ssim: ssim(pred, &pair.gt)?,
                loss: loss.total,
            });
            self.extractor.clear_cache();
        }
        Ok(EvalReport::new(rows))
    }

    /// Enhances an image of any extent: reflect-pads to a multiple of 4,
    /// runs the stages and crops back. Returns the image and the wall time
    /// of modality extraction followed by each stage.
    pub fn enhance(&self, store: &ParamStore, low: &Tensor, tau: Option<usize>) -> Result<(Tensor, Vec<(String, Duration)>)> {
        let tau = self.model.resolve_tau(tau)?;
        let (h, w, _) = low.dims3()?;
        let padded = reflect_pad_to(low, 4)?;
        let mut tape = Tape::new(store);
        let mut timings = Vec::with_capacity(tau + 1);
        let start = Instant::now();
        let features = self.model.extract(&mut tape, &self.extractor, &padded)?;
        timings.push(("extract".to_string(), start.elapsed()));
        let mut image = tape.constant(padded);
        for t in 0..tau {
            let start = Instant::now();
            image = self.model.run_stage(&mut tape, t, image, &features)?.output;
            timings.push((format!("stage{}", t + 1), start.elapsed()));
        }
        let out = tape.value(image);
        let cropped = Tensor::from_fn([h, w, 3], |i| out.at(i / (3 * w), (i / 3) % w, i % 3));
        Ok((cropped, timings))
    }
}

/// Reflect-pads bottom and right edges up to the next multiple of `m`.
pub fn reflect_pad_to(img: &Tensor, m: usize) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    Ok(Tensor::from_fn([ph, pw, c], |i| {
        let (y, x, ch) = (i / (pw * c), (i / c) % pw, i % c);
        img.at(reflect(y as isize, h), reflect(x as isize, w), ch)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub file: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn new(rows: Vec<ImageMetrics>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EvalReport {
            mean_psnr_db: mean(|r| r.psnr_db),
            mean_ssim: mean(|r| r.ssim),
            mean_loss: mean(|r| r.loss),
            rows,
        }
    }

    /// One JSON object per image followed by the aggregate record.
    pub fn json_lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                json!({"file": r.file, "psnr_db": psnr_json(r.psnr_db), "ssim": r.ssim, "loss": r.loss}).to_string()
            })
            .collect();
        out.push(
            json!({
                "aggregate": true,
                "count": self.rows.len(),
                "mean_psnr_db": psnr_json(self.mean_psnr_db),
                "mean_ssim": self.mean_ssim,
                "mean_loss": self.mean_loss,
            })
            .to_string(),
        );
        out
    }
}

/// Metrics of the inputs themselves against ground truth.
pub fn input_metrics(images: &[(String, Pair)]) -> Result<EvalReport> {
    identity_metrics(images, |p| &p.low)
}

/// Metrics of `pick(pair)` used as the prediction, without running a model.
pub fn identity_metrics(images: &[(String, Pair)], pick: fn(&Pair) -> &Tensor) -> Result<EvalReport> {
    let rows = images
        .iter()
        .map(|(file, pair)| {
            let pred = pick(pair);
            Ok(ImageMetrics {
                file: file.clone(),
                psnr_db: psnr(pred, &pair.gt, 1.0)?,
                ssim: ssim(pred, &pair.gt)?,
                loss: f64::NAN,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows))
}

/// Loads a manifest split, keyed by the low-image path.
pub fn load_images(manifest: &DatasetManifest, split: Split) -> Result<Vec<(String, Pair)>> {
    manifest
        .split(split)
        .map(|e| Ok((e.low.display().to_string(), manifest.load_pair(e)?)))
        .collect()
}

/// One validation record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr_db: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    pub input_val_psnr_db: f64,
    pub best_val_psnr_db: f64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn append_line(log: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialization. Every random choice derives from the
/// config seeds, so equal configs give bit-identical checkpoints.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    let engine = Engine::new(config.clone())?;
    let manifest = DatasetManifest::load(&config.data.manifest)?;
    let train_pairs: Vec<Pair> = manifest.load_split(Split::Train)?;
    let val = load_images(&manifest, Split::Val)?;
    if train_pairs.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs nonempty train and val splits".into()));
    }
    train_with(&engine, &train_pairs, &val)
}

/// Training loop over preloaded data.
pub fn train_with(engine: &Engine, train_pairs: &[Pair], val: &[(String, Pair)]) -> Result<TrainSummary> {
    let cfg = &engine.config;
    let o = &cfg.optim;
    let aug = AugmentConfig {
        flips: cfg.data.flips,
        rotations: cfg.data.rotations,
        patch: (o.patch > 0).then_some(o.patch),
    };
    let mut store = engine.fresh_params()?;
    let mut adam = Adam::new(&store);
    let mut plateau = Plateau::new(o.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut order: Vec<usize> = Vec::new();

    let ckpt_dir = &cfg.io.checkpoint_dir;
    let best_path = ckpt_dir.join(BEST_CHECKPOINT);
    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    let mut log = open_log(&cfg.io.log)?;
    let input = input_metrics(val)?;
    append_line(
        &mut log,
        &cfg.io.log,
        &json!({
            "event": "start",
            "params": store.num_scalars(),
            "train_pairs": train_pairs.len(),
            "val_pairs": val.len(),
            "input_val_psnr_db": psnr_json(input.mean_psnr_db),
            "input_val_ssim": input.mean_ssim,
        })
        .to_string(),
    )?;

    let snapshot = |store: &ParamStore, adam: &Adam, step: usize| Checkpoint {
        config: cfg.clone(),
        step: step as u64,
        params: store.clone(),
        optimizer: Some(adam.clone()),
    };

    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for step in 1..=o.iterations {
        let lr = match o.schedule {
            Schedule::Cosine => cosine_lr(o.lr, step - 1, o.iterations),
            Schedule::Plateau => plateau.lr,
        };
        store.zero_grad();
        for _ in 0..o.batch {
            if order.is_empty() {
                order = shuffled_indices(train_pairs.len(), &mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let pair = augment(&train_pairs[idx], &aug, &mut rng)?;
            let (report, grads) = engine
                .loss_and_grads(&store, &pair)
                .map_err(|e| at_step(step, e))?;
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("step {step}: non-finite gradient")));
            }
            store.accumulate(&grads, 1.0 / o.batch as f64);
            loss_sum += report.total;
            loss_count += 1;
            engine.extractor.clear_cache();
        }
        adam.update(&mut store, lr)?;
        if store.iter().any(|p| !p.value.all_finite()) {
            return Err(Error::Numeric(format!("step {step}: parameters became non-finite")));
        }

        if step % o.eval_interval == 0 || step == o.iterations {
            let report = engine.evaluate(&store, val).map_err(|e| at_step(step, e))?;
            let record = TrainRecord {
                step,
                lr,
                train_loss: loss_sum / loss_count.max(1) as f64,
                val_loss: report.mean_loss,
                val_psnr_db: report.mean_psnr_db,
                val_ssim: report.mean_ssim,
            };
            loss_sum = 0.0;
            loss_count = 0;
            if o.schedule == Schedule::Plateau {
                plateau.observe(report.mean_loss);
            }
            append_line(&mut log, &cfg.io.log, &serde_json::to_string(&record).expect("plain record"))?;
            if report.mean_psnr_db > best {
                best = report.mean_psnr_db;
                snapshot(&store, &adam, step).save(&best_path)?;
            }
            records.push(record);
        }
    }
    snapshot(&store, &adam, o.iterations).save(&final_path)?;
    if records.is_empty() {
        snapshot(&store, &adam, 0).save(&best_path)?;
    }
    Ok(TrainSummary {
        records,
        input_val_psnr_db: input.mean_psnr_db,
        best_val_psnr_db: best,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckScope {
    Block,
    Full,
}

impl std::str::FromStr for GradCheckScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(GradCheckScope::Block),
            "full" => Ok(GradCheckScope::Full),
            other => Err(Error::Usage(format!("unknown gradcheck scope `{other}` (block|full)"))),
        }
    }
}

fn random_tensor(shape: &[usize], seed: u64, name: &str, lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    let mut rng = name_rng(seed, name);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Finite-difference audit of one MMCAB (scale-0 width and heads, every
/// configured modality) or of the whole model on a `size`×`size` input.
/// The objective is the mean squared distance to a fixed random target.
pub fn run_gradcheck(engine: &Engine, scope: GradCheckScope, size: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let seed = engine.config.model.init_seed;
    match scope {
        GradCheckScope::Full => {
            let store = engine.fresh_params()?;
            let low = random_tensor(&[size, size, 3], seed, "gradcheck.low", 0.0, 0.5);
            let target = random_tensor(&[size, size, 3], seed, "gradcheck.target", 0.0, 1.0);
            grad_check(
                &store,
                |t| {
                    let out = engine.model.forward(t, &engine.extractor, &low, None)?;
                    squared_distance(t, out.output, &target)
                },
                opts,
            )
        }
        GradCheckScope::Block => {
            let r = engine.model.config().restorer.clone();
            let names = engine.model.modalities().to_vec();
            let spec = BlockSpec::new("block", r.base_width, r.heads, names.clone());
            let mut store = ParamStore::new();
            spec.register(&mut store, seed)?;
            let shape = [size, size, r.base_width];
            let f_in = random_tensor(&shape, seed, "gradcheck.f_in", -1.0, 1.0);
            let f_lu = random_tensor(&shape, seed, "gradcheck.f_lu", -1.0, 1.0);
            let modal: Vec<Tensor> = names
                .iter()
                .map(|n| random_tensor(&shape, seed, &format!("gradcheck.{n}"), -1.0, 1.0))
                .collect();
            let target = random_tensor(&shape, seed, "gradcheck.target", -1.0, 1.0);
            grad_check(
                &store,
                |t| {
                    let (f, lu) = (t.constant(f_in.clone()), t.constant(f_lu.clone()));
                    let feats: Vec<(String, _)> = names
                        .iter()
                        .zip(&modal)
                        .map(|(n, m)| (n.clone(), t.constant(m.clone())))
                        .collect();
                    let out = mmcab_block(t, &spec, f, lu, &feats)?;
                    squared_distance(t, out, &target)
                },
                opts,
            )
        }
    }
}

fn squared_distance(t: &mut Tape<'_>, x: crate::numerics::Var, target: &Tensor) -> Result<crate::numerics::Var> {
    let g = t.constant(target.clone());
    let d = t.sub(x, g)?;
    let sq = t.mul(d, d)?;
    Ok(t.mean(sq))
}
