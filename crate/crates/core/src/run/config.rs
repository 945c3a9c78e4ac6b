//! Flat `section.key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::DEFAULT_LAMBDA_PER;
use crate::mmcab::{ModelConfig, RestorerConfig};
use crate::modality::DEFAULT_MODALITIES;
use crate::retinex::PriorMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Plateau,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::Plateau => "plateau",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "plateau" => Ok(Schedule::Plateau),
            other => Err(Error::Config(format!("unknown schedule `{other}` (cosine|plateau)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub width: usize,
    pub heads: usize,
    pub blocks: [usize; 3],
    pub tau: usize,
    pub share_stages: bool,
    pub prior: PriorMode,
    pub modalities: Vec<String>,
    pub init_seed: u64,
    pub semantic_seed: u64,
    pub proxy_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub lr: f64,
    pub schedule: Schedule,
    pub batch: usize,
    /// Training crop size; 0 trains on whole images.
    pub patch: usize,
    pub iterations: usize,
    pub lambda_per: f64,
    /// Steps between validation passes.
    pub eval_interval: usize,
    /// Drives sampling order and augmentation.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub flips: bool,
    pub rotations: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoSection {
    pub checkpoint_dir: PathBuf,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RestorerConfig::default();
        let m = ModelConfig::default();
        RunConfig {
            model: ModelSection {
                width: r.base_width,
                heads: r.heads,
                blocks: r.blocks,
                tau: m.tau,
                share_stages: m.share_stages,
                prior: m.prior,
                modalities: DEFAULT_MODALITIES.iter().map(|s| s.to_string()).collect(),
                init_seed: 0,
                semantic_seed: 0,
                proxy_seed: 0,
            },
            optim: OptimSection {
                lr: 2e-4,
                schedule: Schedule::Cosine,
                batch: 4,
                patch: 32,
                iterations: 1000,
                lambda_per: DEFAULT_LAMBDA_PER,
                eval_interval: 50,
                seed: 0,
            },
            data: DataSection {
                manifest: PathBuf::from("data/manifest.tsv"),
                flips: true,
                rotations: true,
            },
            io: IoSection {
                checkpoint_dir: PathBuf::from("checkpoints"),
                log: PathBuf::from("train.jsonl"),
            },
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}` (true|false)"))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

pub const KEYS: [&str; 23] = [
    "model.width",
    "model.heads",
    "model.blocks",
    "model.tau",
    "model.share_stages",
    "model.prior",
    "model.modalities",
    "model.init_seed",
    "model.semantic_seed",
    "model.proxy_seed",
    "optim.lr",
    "optim.schedule",
    "optim.batch",
    "optim.patch",
    "optim.iterations",
    "optim.lambda_per",
    "optim.eval_interval",
    "optim.seed",
    "data.manifest",
    "data.flips",
    "data.rotations",
    "io.checkpoint_dir",
    "io.log",
];

impl RunConfig {
    /// Assigns one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, o) = (&mut self.model, &mut self.optim);
        match key {
            "model.width" => m.width = parse_value(key, v)?,
            "model.heads" => m.heads = parse_value(key, v)?,
            "model.blocks" => {
                let parts = parse_list(v)
                    .iter()
                    .map(|p| parse_value(key, p))
                    .collect::<Result<Vec<usize>>>()?;
                m.blocks = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs three comma-separated counts, got `{v}`")))?;
            }
            "model.tau" => m.tau = parse_value(key, v)?,
            "model.share_stages" => m.share_stages = parse_bool(key, v)?,
            "model.prior" => m.prior = v.parse()?,
            "model.modalities" => m.modalities = parse_list(v),
            "model.init_seed" => m.init_seed = parse_value(key, v)?,
            "model.semantic_seed" => m.semantic_seed = parse_value(key, v)?,
            "model.proxy_seed" => m.proxy_seed = parse_value(key, v)?,
            "optim.lr" => o.lr = parse_value(key, v)?,
            "optim.schedule" => o.schedule = v.parse()?,
            "optim.batch" => o.batch = parse_value(key, v)?,
            "optim.patch" => o.patch = parse_value(key, v)?,
            "optim.iterations" => o.iterations = parse_value(key, v)?,
            "optim.lambda_per" => o.lambda_per = parse_value(key, v)?,
            "optim.eval_interval" => o.eval_interval = parse_value(key, v)?,
            "optim.seed" => o.seed = parse_value(key, v)?,
            "data.manifest" => self.data.manifest = PathBuf::from(v),
            "data.flips" => self.data.flips = parse_bool(key, v)?,
            "data.rotations" => self.data.rotations = parse_bool(key, v)?,
            "io.checkpoint_dir" => self.io.checkpoint_dir = PathBuf::from(v),
            "io.log" => self.io.log = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, o) = (&self.model, &self.optim);
        Ok(match key {
            "model.width" => m.width.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.blocks" => m.blocks.map(|b| b.to_string()).join(","),
            "model.tau" => m.tau.to_string(),
            "model.share_stages" => m.share_stages.to_string(),
            "model.prior" => m.prior.to_string(),
            "model.modalities" => m.modalities.join(","),
            "model.init_seed" => m.init_seed.to_string(),
            "model.semantic_seed" => m.semantic_seed.to_string(),
            "model.proxy_seed" => m.proxy_seed.to_string(),
            "optim.lr" => format!("{:?}", o.lr),
            "optim.schedule" => o.schedule.to_string(),
            "optim.batch" => o.batch.to_string(),
            "optim.patch" => o.patch.to_string(),
            "optim.iterations" => o.iterations.to_string(),
            "optim.lambda_per" => format!("{:?}", o.lambda_per),
            "optim.eval_interval" => o.eval_interval.to_string(),
            "optim.seed" => o.seed.to_string(),
            "data.manifest" => self.data.manifest.display().to_string(),
            "data.flips" => self.data.flips.to_string(),
            "data.rotations" => self.data.rotations.to_string(),
            "io.checkpoint_dir" => self.io.checkpoint_dir.display().to_string(),
            "io.log" => self.io.log.display().to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    /// Parses config text over the defaults. Blank lines and lines starting
    /// with `#` or `;` are ignored; a key may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", i + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, config_msg(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in canonical order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("known key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", o.lr)));
        }
        if !(o.lambda_per.is_finite() && o.lambda_per >= 0.0) {
            return Err(Error::Config(format!("optim.lambda_per must be nonnegative, got {}", o.lambda_per)));
        }
        if o.batch == 0 || o.eval_interval == 0 {
            return Err(Error::Config("optim.batch and optim.eval_interval must be positive".into()));
        }
        if !o.patch.is_multiple_of(4) {
            return Err(Error::Config(format!("optim.patch must be a multiple of 4, got {}", o.patch)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            restorer: RestorerConfig {
                base_width: m.width,
                blocks: m.blocks,
                heads: m.heads,
            },
            tau: m.tau,
            share_stages: m.share_stages,
            prior: m.prior,
        }
    }

    /// Joins relative data and io paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.manifest, &mut self.io.checkpoint_dir, &mut self.io.log] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn config_msg(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
