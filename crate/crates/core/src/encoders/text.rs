use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::config::ModelConfig;
use crate::encoders::layers::{broadcast, init_block, init_layer_norm, layer_norm, transformer_block};
use crate::encoders::params::{Binder, ParamStore, Role};
use crate::error::{Result, TplError};
use crate::numerics::{Graph, NodeId, Tensor};

/// Token ids for "a photo of a [CLASS]": the fixed template followed by
/// the class's own token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDescriptor {
    pub class: usize,
    pub tokens: Vec<usize>,
}

impl ClassDescriptor {
    /// `class` is zero-based.
    pub fn new(config: &ModelConfig, class: usize) -> Result<Self> {
        if class >= config.num_classes {
            return Err(TplError::invalid(format!(
                "class {class} out of range for {} classes",
                config.num_classes
            )));
        }
        let mut tokens: Vec<usize> = (0..config.template_len).collect();
        tokens.push(config.template_len + class);
        Ok(Self { class, tokens })
    }

    pub fn all(config: &ModelConfig) -> Vec<Self> {
        (0..config.num_classes)
            .map(|c| Self::new(config, c).expect("class in range"))
            .collect()
    }
}

/// Text tower over the micro-vocabulary. The class token sits last in
/// every sequence and its output feeds the projection.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder<'a> {
    config: &'a ModelConfig,
}

impl<'a> TextEncoder<'a> {
    pub fn new(config: &'a ModelConfig) -> Self {
        Self { config }
    }

    pub(crate) fn init_backbone<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (d, std) = (config.width, config.init_std);
        store.insert("text.tok", Role::Backbone, Tensor::randn(&[config.vocab_size(), d], std, rng))?;
        store.insert("text.pos", Role::Backbone, Tensor::randn(&[config.context_len, d], std, rng))?;
        for k in 0..config.text_layers {
            init_block(store, &format!("text.block{k}"), d, config.mlp_ratio, rng)?;
        }
        init_layer_norm(store, "text.ln_final", d, Role::Backbone)?;
        store.insert("text.proj", Role::Backbone, Tensor::randn(&[d, config.joint_dim], 1.0 / (d as f64).sqrt(), rng))
    }

    /// L2-normalized text features `[S, d_j]` for `descriptors`.
    ///
    /// `prefix`, when given, is `[L_v, d_e]` (shared by every sequence) or
    /// `[S, L_v, d_e]` (one per sequence) and is prepended to the token
    /// embeddings before positions are added.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        descriptors: &[ClassDescriptor],
        prefix: Option<NodeId>,
    ) -> Result<NodeId> {
        let c = self.config;
        let s = descriptors.len();
        if s == 0 {
            return Err(TplError::invalid("encode_text: no descriptors"));
        }
        let len = c.descriptor_len();
        if descriptors.iter().any(|d| d.tokens.len() != len || d.tokens.iter().any(|&t| t >= c.vocab_size())) {
            return Err(TplError::invalid("encode_text: malformed descriptor"));
        }
        let ids: Vec<usize> = descriptors.iter().flat_map(|d| d.tokens.iter().copied()).collect();
        let table = b.get(g, "text.tok")?;
        let emb = g.select_rows(table, &ids)?;
        let mut x = g.reshape(emb, &[s, len, c.width])?;
        if let Some(p) = prefix {
            let ps = g.shape(p).to_vec();
            let p = match ps.as_slice() {
                [lv, w] if *w == c.width => {
                    if lv + len > c.context_len {
                        return Err(TplError::invalid("encode_text: prompt too long for context"));
                    }
                    broadcast(g, p, s)?
                }
                [n, lv, w] if *n == s && *w == c.width && lv + len <= c.context_len => p,
                _ => {
                    return Err(TplError::ShapeMismatch {
                        op: "encode_text",
                        lhs: ps,
                        rhs: vec![s, c.text_prompt_len, c.width],
                    })
                }
            };
            x = g.concat(&[p, x], 1)?;
        }
        let total = g.shape(x)[1];
        let pos = b.get(g, "text.pos")?;
        let pos = g.slice(pos, 0, 0, total)?;
        x = g.add_row(x, pos)?;
        for k in 0..c.text_layers {
            x = transformer_block(g, b, &format!("text.block{k}"), x, c.heads, c.ln_eps)?;
        }
        let last = g.slice(x, 1, total - 1, total)?;
        let last = g.reshape(last, &[s, c.width])?;
        let h = layer_norm(g, b, "text.ln_final", last, c.ln_eps)?;
        let proj = b.get(g, "text.proj")?;
        let f = g.matmul(h, proj)?;
        g.l2_normalize(f)
    }
}
