use serde::{Deserialize, Serialize};

use super::restorer::{Restorer, RestorerConfig};
use crate::error::{Error, Result};
use crate::modality::{extract_all, register_projections, ModalityExtractor, ModalityFeatures, ModalityRegistry};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::retinex::{prior_on_tape, IlluminationEstimator, PriorMode, RestorerEntry};

pub const MAX_TAU: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub restorer: RestorerConfig,
    /// Number of refinement stages, 1 to 3.
    pub tau: usize,
    /// Reuse one set of stage weights for every refinement stage.
    pub share_stages: bool,
    pub prior: PriorMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            restorer: RestorerConfig::default(),
            tau: 1,
            share_stages: false,
            prior: PriorMode::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        self.restorer.validate()
    }
}

fn check_tau(tau: usize) -> Result<()> {
    if (1..=MAX_TAU).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must be in 1..={MAX_TAU}, got {tau}")))
    }
}

#[derive(Clone, Debug)]
struct StageNet {
    estimator: IlluminationEstimator,
    entry: RestorerEntry,
    restorer: Restorer,
}

/// Per-stage intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub lit_image: Var,
    pub illum_map: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub output: Var,
    pub stages: Vec<StageTrace>,
}

/// Progressive-refinement enhancer: τ stages of estimator + restorer, all
/// fed by one modality extraction of the original input.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    modalities: Vec<String>,
    stages: Vec<StageNet>,
}

impl Model {
    pub fn new(config: ModelConfig, registry: &ModalityRegistry) -> Result<Self> {
        config.validate()?;
        let modalities = registry.names();
        let distinct = if config.share_stages { 1 } else { config.tau };
        let stages = (0..distinct)
            .map(|t| {
                let p = format!("stage{t}");
                let c = config.restorer.base_width;
                StageNet {
                    estimator: IlluminationEstimator::new(format!("{p}.estimator"), c),
                    entry: RestorerEntry::new(format!("{p}.entry"), c),
                    restorer: Restorer::new(format!("{p}.restorer"), config.restorer.clone(), modalities.clone()),
                }
            })
            .collect();
        Ok(Model {
            config,
            modalities,
            stages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn restorer(&self, stage: usize) -> &Restorer {
        &self.stages[stage.min(self.stages.len() - 1)].restorer
    }

    /// Registers every stage and the shared modality projections.
    pub fn register(&self, store: &mut ParamStore, registry: &ModalityRegistry, seed: u64) -> Result<()> {
        self.check_registry(registry)?;
        for stage in &self.stages {
            stage.estimator.register(store, seed)?;
            stage.entry.register(store, seed)?;
            stage.restorer.register(store, seed)?;
        }
        register_projections(store, registry, self.config.restorer.base_width, seed)
    }

    /// Fresh parameter store for this model.
    pub fn init_params(&self, registry: &ModalityRegistry, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.register(&mut store, registry, seed)?;
        Ok(store)
    }

    fn check_registry(&self, registry: &ModalityRegistry) -> Result<()> {
        if registry.names() != self.modalities {
            return Err(Error::Config(format!(
                "model was built for modalities {:?}, registry has {:?}",
                self.modalities,
                registry.names()
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count; `channels[m]` is modality m's raw width.
    pub fn analytic_param_count(config: &ModelConfig, modality_channels: &[usize]) -> usize {
        let c = config.restorer.base_width;
        let estimator = (4 * c + c) + (25 * c + c) + (3 * c + 3);
        let entry = 27 * c + 8 * c * c + 32 * c * c;
        let restorer = Restorer::analytic_param_count(&config.restorer, modality_channels.len());
        let stages = if config.share_stages { 1 } else { config.tau };
        let projections: usize = modality_channels.iter().map(|k| (k + 1) * 7 * c).sum();
        stages * (estimator + entry + restorer) + projections
    }

    /// Resolves a requested stage count against the trained one.
    pub fn resolve_tau(&self, tau: Option<usize>) -> Result<usize> {
        let tau = tau.unwrap_or(self.config.tau);
        check_tau(tau)?;
        if !self.config.share_stages && tau > self.config.tau {
            return Err(Error::Config(format!(
                "model has {} trained stages, {tau} requested",
                self.config.tau
            )));
        }
        Ok(tau)
    }

    /// One modality extraction of the original input, shared by every stage.
    pub fn extract(&self, tape: &mut Tape<'_>, extractor: &ModalityExtractor, low: &Tensor) -> Result<Vec<ModalityFeatures>> {
        self.check_registry(extractor.registry())?;
        let (_, _, ch) = low.dims3()?;
        if ch != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {ch} channels")));
        }
        extract_all(tape, extractor, low, self.config.restorer.base_width)
    }

    /// Estimator and restorer of stage `t` applied to `image`.
    pub fn run_stage(&self, tape: &mut Tape<'_>, t: usize, image: Var, features: &[ModalityFeatures]) -> Result<StageTrace> {
        let net = &self.stages[t.min(self.stages.len() - 1)];
        let prior = prior_on_tape(tape, image, self.config.prior)?;
        let lit = net.estimator.forward(tape, image, prior)?;
        let feed = net.entry.build(tape, &lit)?;
        let output = net.restorer.forward(tape, &feed, features)?;
        Ok(StageTrace {
            lit_image: lit.lit_image,
            illum_map: lit.illum_map,
            output,
        })
    }

    /// Runs `tau` stages (default: the configured count). Stage t consumes
    /// stage t−1's output; modalities are extracted once from `low`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        extractor: &ModalityExtractor,
        low: &Tensor,
        tau: Option<usize>,
    ) -> Result<ModelOutput> {
        let tau = self.resolve_tau(tau)?;
        let features = self.extract(tape, extractor, low)?;
        let mut image = tape.constant(low.clone());
        let mut stages = Vec::with_capacity(tau);
        for t in 0..tau {
            let trace = self.run_stage(tape, t, image, &features)?;
            image = trace.output;
            stages.push(trace);
        }
        Ok(ModelOutput { output: image, stages })
    }

    /// Graph-free inference.
    pub fn enhance(&self, store: &ParamStore, extractor: &ModalityExtractor, low: &Tensor, tau: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, extractor, low, tau)?;
        Ok(tape.value(out.output).clone())
    }
}
