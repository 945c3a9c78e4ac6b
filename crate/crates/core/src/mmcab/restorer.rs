use serde::{Deserialize, Serialize};

use super::{mmcab_block, BlockSpec};
use crate::error::{Error, Result};
use crate::modality::ModalityFeatures;
use crate::numerics::{conv, register_conv, ParamStore, Resample, Tape, Var};
use crate::retinex::{RestorerFeed, NUM_SCALES};

/// Shape of the corruption restorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerConfig {
    pub base_width: usize,
    /// Blocks at scale 0 and 1 (encoder, mirrored by the decoder) and at the
    /// scale-2 bottleneck.
    pub blocks: [usize; NUM_SCALES],
    /// Head count at scale 0; doubles with every scale.
    pub heads: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        RestorerConfig {
            base_width: 8,
            blocks: [1, 1, 2],
            heads: 1,
        }
    }
}

impl RestorerConfig {
    pub fn width_at(&self, scale: usize) -> usize {
        self.base_width << scale
    }

    pub fn heads_at(&self, scale: usize) -> usize {
        self.heads << scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base width must be positive".into()));
        }
        if self.heads == 0 || !self.base_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "base width {} not divisible by {} heads",
                self.base_width, self.heads
            )));
        }
        Ok(())
    }
}

/// U-shaped encoder / bottleneck / decoder of MMCABs.
#[derive(Clone, Debug)]
pub struct Restorer {
    prefix: String,
    config: RestorerConfig,
    modalities: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Encoder,
    Bottleneck,
    Decoder,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Encoder => "enc",
            Stage::Bottleneck => "mid",
            Stage::Decoder => "dec",
        }
    }
}

impl Restorer {
    pub fn new(prefix: impl Into<String>, config: RestorerConfig, modalities: Vec<String>) -> Self {
        Restorer {
            prefix: prefix.into(),
            config,
            modalities,
        }
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.config
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn layout(&self) -> Vec<(Stage, usize, usize)> {
        let b = self.config.blocks;
        let mut out = Vec::new();
        for s in 0..NUM_SCALES - 1 {
            for i in 0..b[s] {
                out.push((Stage::Encoder, s, i));
            }
        }
        for i in 0..b[NUM_SCALES - 1] {
            out.push((Stage::Bottleneck, NUM_SCALES - 1, i));
        }
        for s in (0..NUM_SCALES - 1).rev() {
            for i in 0..b[s] {
                out.push((Stage::Decoder, s, i));
            }
        }
        out
    }

    /// Every block of the network, encoder first, decoder last.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        self.layout()
            .into_iter()
            .map(|(stage, s, i)| self.block(stage, s, i))
            .collect()
    }

    fn block(&self, stage: Stage, scale: usize, index: usize) -> BlockSpec {
        BlockSpec::new(
            self.name(&format!("{}{scale}.{index}", stage.tag())),
            self.config.width_at(scale),
            self.config.heads_at(scale),
            self.modalities.clone(),
        )
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.config.validate()?;
        for spec in self.block_specs() {
            spec.register(store, seed)?;
        }
        for s in 1..NUM_SCALES {
            let below = self.config.width_at(s - 1);
            Resample::Down2.register(store, &self.name(&format!("down{s}.weight")), below, seed)?;
            Resample::Up2.register(store, &self.name(&format!("up{s}.weight")), 2 * below, seed)?;
            register_conv(store, &self.name(&format!("fuse{}", s - 1)), 1, 2 * below, below, false, seed)?;
        }
        register_conv(store, &self.name("out"), 3, self.config.base_width, 3, true, seed)?;
        Ok(())
    }

    /// Closed-form scalar count, excluding the estimator and modality
    /// projections.
    pub fn analytic_param_count(config: &RestorerConfig, num_modalities: usize) -> usize {
        let c = config.base_width;
        let mut total = 0;
        for s in 0..NUM_SCALES {
            let copies = if s == NUM_SCALES - 1 { 1 } else { 2 };
            total += copies * config.blocks[s] * BlockSpec::analytic_param_count(c << s, num_modalities);
        }
        for s in 1..NUM_SCALES {
            let below = c << (s - 1);
            // down: 2·2·below·2below, up: 2below·below, fuse: 2below·below
            total += 8 * below * below + 2 * below * below + 2 * below * below;
        }
        total + 9 * c * 3 + 3
    }

    fn modal_at(&self, features: &[ModalityFeatures], scale: usize) -> Result<Vec<(String, Var)>> {
        if features.len() != self.modalities.len()
            || features.iter().zip(&self.modalities).any(|(f, m)| &f.modality != m)
        {
            let got: Vec<&str> = features.iter().map(|f| f.modality.as_str()).collect();
            return Err(Error::Config(format!(
                "restorer expects modalities {:?}, got {got:?}",
                self.modalities
            )));
        }
        Ok(features
            .iter()
            .map(|f| (f.modality.clone(), f.pyramid[scale]))
            .collect())
    }

    fn run_blocks(
        &self,
        tape: &mut Tape<'_>,
        stage: Stage,
        scale: usize,
        mut x: Var,
        feed: &RestorerFeed,
        features: &[ModalityFeatures],
    ) -> Result<Var> {
        let modal = self.modal_at(features, scale)?;
        for i in 0..self.config.blocks[scale] {
            let spec = self.block(stage, scale, i);
            x = mmcab_block(tape, &spec, x, feed.lit_pyramid[scale], &modal)?;
        }
        Ok(x)
    }

    /// `I_en = out(decoder(...)) + I_lu`.
    pub fn forward(&self, tape: &mut Tape<'_>, feed: &RestorerFeed, features: &[ModalityFeatures]) -> Result<Var> {
        let (h, w, _) = tape.value(feed.entry).dims3()?;
        let div = 1 << (NUM_SCALES - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!("restorer needs extents divisible by {div}, got {h}×{w}")));
        }
        let mut skips = Vec::with_capacity(NUM_SCALES - 1);
        let mut x = feed.entry;
        for s in 0..NUM_SCALES - 1 {
            x = self.run_blocks(tape, Stage::Encoder, s, x, feed, features)?;
            skips.push(x);
            x = Resample::Down2.apply(tape, x, &self.name(&format!("down{}.weight", s + 1)))?;
        }
        x = self.run_blocks(tape, Stage::Bottleneck, NUM_SCALES - 1, x, feed, features)?;
        for s in (0..NUM_SCALES - 1).rev() {
            let up = Resample::Up2.apply(tape, x, &self.name(&format!("up{}.weight", s + 1)))?;
            let cat = tape.concat_channels(&[up, skips[s]])?;
            x = conv(tape, cat, &self.name(&format!("fuse{s}")), false, 1, 0)?;
            x = self.run_blocks(tape, Stage::Decoder, s, x, feed, features)?;
        }
        let rgb = conv(tape, x, &self.name("out"), true, 1, 1)?;
        tape.add(rgb, feed.lit_image)
    }
}
