use rand::Rng;

use crate::encoders::config::ModelConfig;
use crate::encoders::layers::{broadcast, init_block, init_layer_norm, init_linear, layer_norm, linear, transformer_block};
use crate::encoders::params::{Binder, ParamStore, Role};
use crate::error::{Result, TplError};
use crate::numerics::{Graph, NodeId, Tensor};

/// Miniature ViT with deep prompts: at every layer the previous layer's
/// prompt outputs are dropped and that layer's fresh prompt tokens appended.
#[derive(Clone, Copy, Debug)]
pub struct PromptedVisionEncoder<'a> {
    config: &'a ModelConfig,
}

pub(crate) fn prompt_name(layer: usize) -> String {
    format!("prompt.vision.{layer}")
}

impl<'a> PromptedVisionEncoder<'a> {
    pub fn new(config: &'a ModelConfig) -> Self {
        Self { config }
    }

    pub(crate) fn init_backbone<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (d, std) = (config.width, config.init_std);
        // fan-in scale so patch tokens, not the shared class/position
        // embeddings, dominate the residual stream at initialization
        let patch_std = 1.0 / (config.patch_dim() as f64).sqrt();
        init_linear(store, "vision.patch", config.patch_dim(), d, patch_std, Role::Backbone, rng)?;
        store.insert("vision.cls", Role::Backbone, Tensor::randn(&[d], std, rng))?;
        store.insert("vision.pos", Role::Backbone, Tensor::randn(&[1 + config.num_patches(), d], std, rng))?;
        for k in 0..config.vision_layers {
            init_block(store, &format!("vision.block{k}"), d, config.mlp_ratio, rng)?;
        }
        init_layer_norm(store, "vision.ln_post", d, Role::Backbone)?;
        store.insert("vision.proj", Role::Backbone, Tensor::randn(&[d, config.joint_dim], 1.0 / (d as f64).sqrt(), rng))
    }

    /// One `L_p × d_e` prompt per layer, i.i.d. normal.
    pub fn init_prompts<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for k in 0..config.vision_layers {
            let t = Tensor::randn(&[config.vision_prompt_len, config.width], config.prompt_init_std, rng);
            store.insert(prompt_name(k), Role::VisionPrompt, t.with_requires_grad(true))?;
        }
        Ok(store)
    }

    /// Rearranges `[B, H, W, C]` pixels into `[B * patches, patch_dim]` rows.
    pub fn patchify(&self, pixels: &[f64], batch: usize) -> Result<Vec<f64>> {
        let c = self.config;
        if pixels.len() != batch * c.pixels_per_image() {
            return Err(TplError::ShapeMismatch {
                op: "encode_image",
                lhs: vec![batch, c.image_size, c.image_size, c.channels],
                rhs: vec![pixels.len()],
            });
        }
        let (s, p, ch) = (c.image_size, c.patch_size, c.channels);
        let side = c.patches_per_side();
        let mut out = Vec::with_capacity(pixels.len());
        for b in 0..batch {
            let img = &pixels[b * c.pixels_per_image()..(b + 1) * c.pixels_per_image()];
            for py in 0..side {
                for px in 0..side {
                    for y in 0..p {
                        let row = (py * p + y) * s + px * p;
                        out.extend_from_slice(&img[row * ch..(row + p) * ch]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Token sequence entering the first block: `[c_0, e_0(x)]` plus positions.
    fn embed(&self, g: &mut Graph, b: &mut Binder, pixels: &[f64], batch: usize) -> Result<NodeId> {
        let c = self.config;
        let patches = self.patchify(pixels, batch)?;
        let patches = g.constant(&[batch * c.num_patches(), c.patch_dim()], patches)?;
        let e0 = linear(g, b, "vision.patch", patches)?;
        let e0 = g.reshape(e0, &[batch, c.num_patches(), c.width])?;
        let cls = b.get(g, "vision.cls")?;
        let cls = g.reshape(cls, &[1, c.width])?;
        let cls = broadcast(g, cls, batch)?;
        let x = g.concat(&[cls, e0], 1)?;
        let pos = b.get(g, "vision.pos")?;
        g.add_row(x, pos)
    }

    /// Class-token output of the last block, `[B, d_e]`, before projection.
    pub fn class_token(&self, g: &mut Graph, b: &mut Binder, pixels: &[f64], batch: usize, prompted: bool) -> Result<NodeId> {
        let c = self.config;
        let mut x = self.embed(g, b, pixels, batch)?;
        let keep = 1 + c.num_patches();
        for k in 0..c.vision_layers {
            let input = if prompted {
                let p = b.get(g, &prompt_name(k))?;
                let p = broadcast(g, p, batch)?;
                g.concat(&[x, p], 1)?
            } else {
                x
            };
            let out = transformer_block(g, b, &format!("vision.block{k}"), input, c.heads, c.ln_eps)?;
            x = if prompted { g.slice(out, 1, 0, keep)? } else { out };
        }
        let cls = g.slice(x, 1, 0, 1)?;
        g.reshape(cls, &[batch, c.width])
    }

    /// L2-normalized image features `[B, d_j]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, pixels: &[f64], batch: usize, prompted: bool) -> Result<NodeId> {
        let cls = self.class_token(g, b, pixels, batch, prompted)?;
        let h = layer_norm(g, b, "vision.ln_post", cls, self.config.ln_eps)?;
        let proj = b.get(g, "vision.proj")?;
        let f = g.matmul(h, proj)?;
        g.l2_normalize(f)
    }
}
