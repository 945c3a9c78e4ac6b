//! Auxiliary modality encoders, their registry, and projection of raw
//! encoder output onto the restorer's feature pyramid.

pub mod filters;

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub use filters::{
    depth_stub, gaussian_blur, local_contrast, luminance_pyramid, luminance_stack, ntsc_luminance, semantic_stub,
    sobel_edges, SemanticStub, NTSC_WEIGHTS,
};

use crate::error::{Error, Result};
use crate::numerics::{conv, kernels, register_conv, ParamStore, Tape, Tensor, Var};
use crate::retinex::NUM_SCALES;

pub const LUMINANCE_CHANNELS: usize = 7;
pub const DEFAULT_MODALITIES: [&str; 3] = ["depth", "luminance", "semantic"];
const DEFAULT_CACHE_CAPACITY: usize = 8;

/// Maps an RGB image (H×W×3) to raw modality channels (H×W×k).
pub trait ModalityEncoder: Send + Sync {
    fn channels(&self) -> usize;
    fn encode(&self, img: &Tensor) -> Result<Tensor>;
}

pub struct DepthEncoder;

impl ModalityEncoder for DepthEncoder {
    fn channels(&self) -> usize {
        1
    }

    fn encode(&self, img: &Tensor) -> Result<Tensor> {
        depth_stub(img)
    }
}

pub struct LuminanceEncoder;

impl ModalityEncoder for LuminanceEncoder {
    fn channels(&self) -> usize {
        LUMINANCE_CHANNELS
    }

    fn encode(&self, img: &Tensor) -> Result<Tensor> {
        luminance_stack(img)
    }
}

impl ModalityEncoder for SemanticStub {
    fn channels(&self) -> usize {
        filters::SEMANTIC_DIM
    }

    fn encode(&self, img: &Tensor) -> Result<Tensor> {
        self.features_full_res(img)
    }
}

#[derive(Clone)]
pub struct ModalityDescriptor {
    pub name: String,
    pub encoder: Arc<dyn ModalityEncoder>,
    /// Whether the modality's scale projections are optimized.
    pub trainable: bool,
    calls: Arc<AtomicUsize>,
}

impl ModalityDescriptor {
    pub fn new(name: impl Into<String>, encoder: Arc<dyn ModalityEncoder>) -> Self {
        ModalityDescriptor {
            name: name.into(),
            encoder,
            trainable: true,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// Number of times the encoder has run.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn encode(&self, img: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (h, w, _) = img.dims3()?;
        let raw = self.encoder.encode(img)?;
        let k = self.encoder.channels();
        if raw.shape() != [h, w, k] {
            return Err(Error::Shape(format!(
                "modality `{}` produced {:?}, expected {:?}",
                self.name,
                raw.shape(),
                [h, w, k]
            )));
        }
        Ok(raw)
    }
}

impl fmt::Debug for ModalityDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModalityDescriptor")
            .field("name", &self.name)
            .field("channels", &self.encoder.channels())
            .field("trainable", &self.trainable)
            .finish()
    }
}

/// Ordered set of modalities with unique names.
#[derive(Clone, Debug, Default)]
pub struct ModalityRegistry {
    descriptors: Vec<ModalityDescriptor>,
}

impl ModalityRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Depth, luminance and semantic stand-ins.
    pub fn default_set(semantic_seed: u64) -> Self {
        Self::from_names(&DEFAULT_MODALITIES, semantic_seed).expect("built-in modalities are distinct")
    }

    /// Builds a registry from built-in modality names.
    pub fn from_names<S: AsRef<str>>(names: &[S], semantic_seed: u64) -> Result<Self> {
        let mut reg = Self::empty();
        for name in names {
            let encoder: Arc<dyn ModalityEncoder> = match name.as_ref() {
                "depth" => Arc::new(DepthEncoder),
                "luminance" => Arc::new(LuminanceEncoder),
                "semantic" => Arc::new(SemanticStub::new(semantic_seed)),
                other => return Err(Error::Config(format!("unknown modality `{other}`"))),
            };
            reg.register(ModalityDescriptor::new(name.as_ref(), encoder))?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, descriptor: ModalityDescriptor) -> Result<()> {
        if self.get(&descriptor.name).is_some() {
            return Err(Error::Registration(format!("modality `{}` is already registered", descriptor.name)));
        }
        self.descriptors.push(descriptor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ModalityDescriptor> {
        self.descriptors.iter().find(|d| d.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.descriptors.iter().map(|d| d.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalityDescriptor> {
        self.descriptors.iter()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Raw encoder output of one modality, average-pooled to every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPyramid {
    pub modality: String,
    pub levels: Vec<Tensor>,
}

/// Average-pools a full-resolution map to scales 0, 1 and 2.
pub fn raw_pyramid(raw: &Tensor) -> Result<Vec<Tensor>> {
    let mut levels = vec![raw.clone()];
    for s in 1..NUM_SCALES {
        levels.push(kernels::avg_pool2(&levels[s - 1])?);
    }
    Ok(levels)
}

/// Encodes images through a registry, caching recent results so repeated
/// requests for the same image (e.g. successive refinement stages) do not
/// re-run the encoders.
#[derive(Debug)]
pub struct ModalityExtractor {
    registry: ModalityRegistry,
    cache: Mutex<VecDeque<(Tensor, Arc<Vec<RawPyramid>>)>>,
    capacity: usize,
}

impl ModalityExtractor {
    pub fn new(registry: ModalityRegistry) -> Self {
        Self::with_capacity(registry, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_capacity(registry: ModalityRegistry, capacity: usize) -> Self {
        ModalityExtractor {
            registry,
            cache: Mutex::new(VecDeque::new()),
            capacity,
        }
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.registry
    }

    /// Per-modality raw pyramids in registry order.
    pub fn extract_raw(&self, img: &Tensor) -> Result<Arc<Vec<RawPyramid>>> {
        {
            let cache = self.cache.lock().expect("cache lock poisoned");
            if let Some((_, hit)) = cache.iter().find(|(key, _)| key == img) {
                return Ok(Arc::clone(hit));
            }
        }
        let pyramids = self
            .registry
            .iter()
            .map(|d| {
                Ok(RawPyramid {
                    modality: d.name.clone(),
                    levels: raw_pyramid(&d.encode(img)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pyramids = Arc::new(pyramids);
        if self.capacity > 0 {
            let mut cache = self.cache.lock().expect("cache lock poisoned");
            if cache.len() == self.capacity {
                cache.pop_front();
            }
            cache.push_back((img.clone(), Arc::clone(&pyramids)));
        }
        Ok(pyramids)
    }

    pub fn clear_cache(&self) {
        self.cache.lock().expect("cache lock poisoned").clear();
    }
}

/// A modality's features on the tape, one entry per scale.
#[derive(Clone, Debug)]
pub struct ModalityFeatures {
    pub modality: String,
    pub pyramid: Vec<Var>,
}

pub fn projection_prefix(modality: &str, scale: usize) -> String {
    format!("modality.{modality}.proj{scale}")
}

/// Registers one 1×1 projection (with bias) per scale for every modality.
pub fn register_projections(store: &mut ParamStore, registry: &ModalityRegistry, base_width: usize, seed: u64) -> Result<()> {
    for d in registry.iter() {
        for s in 0..NUM_SCALES {
            let prefix = projection_prefix(&d.name, s);
            register_conv(store, &prefix, 1, d.encoder.channels(), base_width << s, true, seed)?;
            if !d.trainable {
                for suffix in ["weight", "bias"] {
                    store.get_mut(&format!("{prefix}.{suffix}"))?.requires_grad = false;
                }
            }
        }
    }
    Ok(())
}

/// Projects raw scale maps to `(H/2^s, W/2^s, 2^s·C)` with the modality's
/// per-scale 1×1 convolutions.
pub fn project_to_scales(tape: &mut Tape<'_>, raw: &RawPyramid, base_width: usize) -> Result<ModalityFeatures> {
    if raw.levels.len() != NUM_SCALES {
        return Err(Error::Shape(format!("raw pyramid of `{}` has {} levels", raw.modality, raw.levels.len())));
    }
    let mut pyramid = Vec::with_capacity(NUM_SCALES);
    for (s, level) in raw.levels.iter().enumerate() {
        let x = tape.constant(level.clone());
        let y = conv(tape, x, &projection_prefix(&raw.modality, s), true, 1, 0)?;
        let c = tape.shape(y)[2];
        if c != base_width << s {
            return Err(Error::Shape(format!(
                "modality `{}` projection at scale {s} yields {c} channels, expected {}",
                raw.modality,
                base_width << s
            )));
        }
        pyramid.push(y);
    }
    Ok(ModalityFeatures {
        modality: raw.modality.clone(),
        pyramid,
    })
}

/// Extracts (or reuses) every registered modality and projects it onto the
/// feature pyramid.
pub fn extract_all(tape: &mut Tape<'_>, extractor: &ModalityExtractor, img: &Tensor, base_width: usize) -> Result<Vec<ModalityFeatures>> {
    let raw = extractor.extract_raw(img)?;
    raw.iter().map(|r| project_to_scales(tape, r, base_width)).collect()
}

/// The luminance modality alone: 7-channel stack followed by its scale-0
/// projection to C channels.
pub fn luminance_encoder(tape: &mut Tape<'_>, img: &Tensor) -> Result<Var> {
    let stack = tape.constant(luminance_stack(img)?);
    conv(tape, stack, &projection_prefix("luminance", 0), true, 1, 0)
}
