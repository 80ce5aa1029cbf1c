use serde::{Deserialize, Serialize};

use crate::error::{Result, TplError};

/// Dimensions of the dual encoder, its prompts and the prompt generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Token width shared by both towers (d_e).
    pub width: usize,
    pub vision_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Learnable vision prompt tokens per layer (L_p).
    pub vision_prompt_len: usize,
    pub text_layers: usize,
    pub context_len: usize,
    /// Joint embedding dimension (d_j).
    pub joint_dim: usize,
    /// Generated language prompt tokens (L_v).
    pub text_prompt_len: usize,
    pub num_classes: usize,
    /// Fixed template tokens standing for "a photo of a".
    pub template_len: usize,
    pub generator_hidden: usize,
    /// Std of token, position and class embeddings; linear layers use
    /// fan-in scaling.
    pub init_std: f64,
    pub prompt_init_std: f64,
    pub gate_init: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            width: 64,
            vision_layers: 4,
            heads: 4,
            mlp_ratio: 4,
            vision_prompt_len: 4,
            text_layers: 2,
            context_len: 8,
            joint_dim: 64,
            text_prompt_len: 2,
            num_classes: 8,
            template_len: 4,
            generator_hidden: 128,
            init_std: 0.2,
            prompt_init_std: 0.02,
            gate_init: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A narrower, shallower preset that keeps every mechanism but trains in
    /// seconds on one core.
    pub fn compact() -> Self {
        Self {
            width: 32,
            vision_layers: 2,
            heads: 2,
            mlp_ratio: 2,
            text_layers: 1,
            joint_dim: 32,
            generator_hidden: 64,
            ..Self::default()
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Tokens seen by each vision block: class token, patches, prompts.
    pub fn vision_seq_len(&self, with_prompts: bool) -> usize {
        1 + self.num_patches() + if with_prompts { self.vision_prompt_len } else { 0 }
    }

    pub fn vocab_size(&self) -> usize {
        self.template_len + self.num_classes
    }

    /// Template plus class token.
    pub fn descriptor_len(&self) -> usize {
        self.template_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("vision_layers", self.vision_layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vision_prompt_len", self.vision_prompt_len),
            ("text_layers", self.text_layers),
            ("joint_dim", self.joint_dim),
            ("text_prompt_len", self.text_prompt_len),
            ("template_len", self.template_len),
            ("generator_hidden", self.generator_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TplError::invalid(format!("model config: {name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(TplError::invalid("model config: need at least 2 classes"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(TplError::invalid("model config: image_size must be a multiple of patch_size"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(TplError::invalid("model config: width must be divisible by heads"));
        }
        if self.descriptor_len() + self.text_prompt_len > self.context_len {
            return Err(TplError::invalid(format!(
                "model config: context_len {} cannot hold {} prompt + {} descriptor tokens",
                self.context_len,
                self.text_prompt_len,
                self.descriptor_len()
            )));
        }
        if !(self.init_std > 0.0 && self.prompt_init_std > 0.0 && self.ln_eps > 0.0) {
            return Err(TplError::invalid("model config: init scales and ln_eps must be positive"));
        }
        Ok(())
    }
}
