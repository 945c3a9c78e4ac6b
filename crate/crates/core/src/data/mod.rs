//! Synthetic paired data, manifests and joint augmentation.

pub mod ppm;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use ppm::{decode_ppm, encode_ppm, load_ppm, quantize, quantize_image, save_ppm};

use crate::error::{Error, Result};
use crate::numerics::{name_rng, Tensor};

pub const GAMMA_RANGE: (f64, f64) = (2.0, 5.0);
pub const GAIN_RANGE: (f64, f64) = (0.1, 0.5);
pub const MAX_NOISE_SIGMA: f64 = 0.1;
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Darkening applied to a ground-truth image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
}

impl Degradation {
    /// Accepts `gamma ∈ [1, 5]`, `gain ∈ (0, 1]`, `noise_sigma ∈ [0, 0.1]`.
    /// The corpus sampler draws from the narrower low-light ranges.
    pub fn validate(&self) -> Result<()> {
        let Degradation { gamma, gain, noise_sigma } = *self;
        if !(1.0..=GAMMA_RANGE.1).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [1, {}]", GAMMA_RANGE.1)));
        }
        if !(gain > 0.0 && gain <= 1.0) {
            return Err(Error::Config(format!("gain {gain} outside (0, 1]")));
        }
        if !(0.0..=MAX_NOISE_SIGMA).contains(&noise_sigma) {
            return Err(Error::Config(format!("noise sigma {noise_sigma} outside [0, {MAX_NOISE_SIGMA}]")));
        }
        Ok(())
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Degradation {
            gamma: rng.gen_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
            gain: rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1),
            noise_sigma: rng.gen_range(0.0..=0.03),
        }
    }
}

/// `clip(gain · gt^gamma + N(0, σ²), 0, 1)`.
pub fn synth_pair(gt: &Tensor, degradation: Degradation, seed: u64) -> Result<Tensor> {
    degradation.validate()?;
    if !gt.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Config("ground truth values must lie in [0, 1]".into()));
    }
    let Degradation { gamma, gain, noise_sigma } = degradation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = gt
        .data()
        .iter()
        .map(|&v| {
            let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (gain * v.powf(gamma) + n).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(gt.shape().to_vec(), data)
}

/// Procedural ground truth: a colored gradient, a few flat shapes and a
/// striped texture.
pub fn procedural_image(size: usize, rng: &mut impl Rng) -> Tensor {
    let mut img = Tensor::zeros([size, size, 3]);
    let base: [f64; 3] = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
    let slope: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)]);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            for c in 0..3 {
                img.set(y, x, c, base[c] + slope[c][0] * u + slope[c][1] * v);
            }
        }
    }
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let r = rng.gen_range(s / 8.0..s / 3.0);
        let circle = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if circle { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r * 0.6 };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        img.set(y, x, c, col);
                    }
                }
            }
        }
    }
    let freq = rng.gen_range(0.3..1.2);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let amp = rng.gen_range(0.02..0.12);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq;
            for c in 0..3 {
                let v = img.at(y, x, c) + amp * t.sin();
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val)"))),
        }
    }
}

/// One in-memory low/ground-truth pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub low: Tensor,
    pub gt: Tensor,
}

/// Generates `n` quantized pairs; the last `n / 5` form the validation split.
pub fn generate_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<(Pair, Split)>> {
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::Config(format!("image size {size} must be a positive multiple of 4")));
    }
    let val = n / 5;
    (0..n)
        .map(|i| {
            let mut rng = name_rng(seed, &format!("corpus.{i}"));
            let gt = quantize_image(&procedural_image(size, &mut rng))?;
            let deg = Degradation::sample(&mut rng);
            let low = quantize_image(&synth_pair(&gt, deg, rng.gen())?)?;
            let split = if i >= n - val { Split::Val } else { Split::Train };
            Ok((Pair { low, gt }, split))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub low: PathBuf,
    pub gt: PathBuf,
    pub split: Split,
}

/// Line-oriented listing `low<TAB>gt<TAB>split`, paths relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed {seed}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.low.display(), e.gt.display(), e.split));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seed = None;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if let Some(rest) = trimmed.strip_prefix("# seed ") {
                seed = rest.trim().parse().ok();
            } else if !trimmed.is_empty() && !trimmed.starts_with('#') {
                let fields: Vec<&str> = trimmed.split('\t').collect();
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("manifest line needs 3 tab-separated fields, got {}", fields.len()),
                    });
                }
                entries.push(ManifestEntry {
                    low: PathBuf::from(fields[0]),
                    gt: PathBuf::from(fields[1]),
                    split: fields[2].parse()?,
                });
            }
            offset += line.len();
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
            seed,
        })
    }

    /// Reads a manifest and checks that every listed file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        let missing: Vec<PathBuf> = manifest
            .entries
            .iter()
            .flat_map(|e| [manifest.resolve(&e.low), manifest.resolve(&e.gt)])
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        Ok(manifest)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<Pair> {
        let low = load_ppm(self.resolve(&entry.low))?;
        let gt = load_ppm(self.resolve(&entry.gt))?;
        if low.shape() != gt.shape() {
            return Err(Error::Dimension {
                op: "load_pair",
                lhs: low.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        Ok(Pair { low, gt })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Pair>> {
        self.split(split).map(|e| self.load_pair(e)).collect()
    }
}

/// Writes `n` pairs as `low/NNNN.ppm`, `gt/NNNN.ppm` plus `manifest.tsv`
/// under `out_dir`.
pub fn generate_corpus(n: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, (pair, split)) in generate_pairs(n, size, seed)?.into_iter().enumerate() {
        let low = PathBuf::from(format!("low/{i:04}.ppm"));
        let gt = PathBuf::from(format!("gt/{i:04}.ppm"));
        save_ppm(&pair.low, out_dir.join(&low))?;
        save_ppm(&pair.gt, out_dir.join(&gt))?;
        entries.push(ManifestEntry { low, gt, split });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        seed: Some(seed),
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Spatial transform drawn once and applied to both images of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns.
    pub rot90: u8,
    /// Top-left corner and side of the crop, in transformed coordinates.
    pub crop: Option<(usize, usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub flips: bool,
    pub rotations: bool,
    pub patch: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flips: true,
            rotations: true,
            patch: None,
        }
    }
}

pub fn flip_h(img: &Tensor) -> Tensor {
    let (h, w, c) = img.dims3().expect("image");
    Tensor::from_fn([h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        img.at(y, w - 1 - x, ch)
    })
}

pub fn flip_v(img: &Tensor) -> Tensor {
    let (h, w, c) = img.dims3().expect("image");
    Tensor::from_fn([h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        img.at(h - 1 - y, x, ch)
    })
}

/// One counter-clockwise quarter turn: (H, W) → (W, H).
pub fn rot90(img: &Tensor) -> Tensor {
    let (h, w, c) = img.dims3().expect("image");
    Tensor::from_fn([w, h, c], |i| {
        let (y, x, ch) = (i / (h * c), (i / c) % h, i % c);
        img.at(x, w - 1 - y, ch)
    })
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if top + size > h || left + size > w {
        return Err(Error::Shape(format!("crop {size} at ({top}, {left}) exceeds {h}×{w}")));
    }
    Ok(Tensor::from_fn([size, size, c], |i| {
        let (y, x, ch) = (i / (size * c), (i / c) % size, i % c);
        img.at(top + y, left + x, ch)
    }))
}

impl Transform {
    pub fn sample(rng: &mut impl Rng, cfg: &AugmentConfig, extent: (usize, usize)) -> Result<Self> {
        let flip_h = cfg.flips && rng.gen_bool(0.5);
        let flip_v = cfg.flips && rng.gen_bool(0.5);
        let rot90 = if cfg.rotations { rng.gen_range(0..4u8) } else { 0 };
        let (h, w) = if rot90 % 2 == 1 { (extent.1, extent.0) } else { extent };
        let crop = match cfg.patch {
            Some(p) if p > h || p > w => {
                return Err(Error::Config(format!("patch {p} larger than image {h}×{w}")));
            }
            Some(p) => Some((rng.gen_range(0..=h - p), rng.gen_range(0..=w - p), p)),
            None => None,
        };
        Ok(Transform { flip_h, flip_v, rot90, crop })
    }

    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let mut out = img.clone();
        if self.flip_h {
            out = flip_h(&out);
        }
        if self.flip_v {
            out = flip_v(&out);
        }
        for _ in 0..self.rot90 {
            out = rot90(&out);
        }
        match self.crop {
            Some((top, left, size)) => crop(&out, top, left, size),
            None => Ok(out),
        }
    }
}

/// Applies one randomly drawn transform to both images of the pair.
pub fn augment(pair: &Pair, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Pair> {
    if pair.low.shape() != pair.gt.shape() {
        return Err(Error::Dimension {
            op: "augment",
            lhs: pair.low.shape().to_vec(),
            rhs: pair.gt.shape().to_vec(),
        });
    }
    let (h, w, _) = pair.low.dims3()?;
    let t = Transform::sample(rng, cfg, (h, w))?;
    Ok(Pair {
        low: t.apply(&pair.low)?,
        gt: t.apply(&pair.gt)?,
    })
}

/// Seed-addressed variant of [`augment`].
pub fn augment_seeded(pair: &Pair, cfg: &AugmentConfig, seed: u64) -> Result<Pair> {
    augment(pair, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Deterministic shuffled order of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
