//! Miniature prompted vision transformer and text encoder.

mod checkpoint;
mod config;
pub(crate) mod layers;
mod params;
mod text;
mod vision;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamEntry};
pub use config::ModelConfig;
pub use params::{Binder, Param, ParamStore, Role};
pub use text::{ClassDescriptor, TextEncoder};
pub use vision::PromptedVisionEncoder;

use crate::error::Result;
use crate::numerics::Graph;
use crate::rng;

/// The dual encoder's frozen-able weights (everything tagged `backbone`).
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[0xB0B0]);
        PromptedVisionEncoder::init_backbone(&config, &mut params, &mut r)?;
        TextEncoder::init_backbone(&config, &mut params, &mut r)?;
        Ok(Self { config, params })
    }

    pub fn vision(&self) -> PromptedVisionEncoder<'_> {
        PromptedVisionEncoder::new(&self.config)
    }

    pub fn text(&self) -> TextEncoder<'_> {
        TextEncoder::new(&self.config)
    }

    /// Inference-only image features, row-major `[B, d_j]`.
    ///
    /// `prompts` supplies per-layer vision prompts; `None` runs the plain backbone.
    pub fn encode_images(&self, prompts: Option<&ParamStore>, pixels: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut stores = vec![&self.params];
        stores.extend(prompts);
        let mut b = Binder::new(stores, false);
        let mut g = Graph::new();
        let f = self.vision().forward(&mut g, &mut b, pixels, batch, prompts.is_some())?;
        Ok(g.value(f).to_vec())
    }

    /// Inference-only text features for every class, `[C, d_j]`, optionally
    /// with a `[L_v, d_e]` prompt prepended.
    pub fn encode_classes(&self, prompt: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut b = Binder::new(vec![&self.params], false);
        let mut g = Graph::new();
        let prefix = match prompt {
            Some(v) => {
                let lv = v.len() / self.config.width;
                Some(g.constant(&[lv.max(1), self.config.width], v.to_vec())?)
            }
            None => None,
        };
        let f = self
            .text()
            .forward(&mut g, &mut b, &ClassDescriptor::all(&self.config), prefix)?;
        Ok(g.value(f).to_vec())
    }
}
