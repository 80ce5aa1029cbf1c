//! Domain-specific language prompts and adaptive feature fusion.

use rand::Rng;

use crate::encoders::layers::{init_linear, linear};
use crate::encoders::{Binder, ModelConfig, ParamStore, Role};
use crate::error::{Result, TplError};
use crate::numerics::{Graph, NodeId, Tensor};

pub const GATE_P: &str = "gate.p";
pub const GATE_Q: &str = "gate.q";
pub const GATE_R: &str = "gate.r";

/// Three-layer MLP `d_j → hidden → hidden → L_v·d_e` with GELU between layers.
#[derive(Clone, Copy, Debug)]
pub struct DomainPromptGenerator<'a> {
    config: &'a ModelConfig,
}

impl<'a> DomainPromptGenerator<'a> {
    pub fn new(config: &'a ModelConfig) -> Self {
        Self { config }
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let h = config.generator_hidden;
        let out = config.text_prompt_len * config.width;
        // fan-in hidden layers; the output layer starts prompts at prompt scale
        init_linear(&mut store, "gen.fc1", config.joint_dim, h, 1.0 / (config.joint_dim as f64).sqrt(), Role::Generator, rng)?;
        init_linear(&mut store, "gen.fc2", h, h, 1.0 / (h as f64).sqrt(), Role::Generator, rng)?;
        init_linear(&mut store, "gen.fc3", h, out, config.prompt_init_std, Role::Generator, rng)?;
        store.set_trainable(Role::Generator, true);
        Ok(store)
    }

    /// `G(I)` for every row of `features` `[N, d_j]`, giving `[N, L_v·d_e]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, features: NodeId) -> Result<NodeId> {
        let s = g.shape(features).to_vec();
        if s.len() != 2 || s[1] != self.config.joint_dim {
            return Err(TplError::ShapeMismatch {
                op: "prompt_generator",
                lhs: s,
                rhs: vec![self.config.joint_dim],
            });
        }
        let h = linear(g, b, "gen.fc1", features)?;
        let h = g.gelu(h)?;
        let h = linear(g, b, "gen.fc2", h)?;
        let h = g.gelu(h)?;
        linear(g, b, "gen.fc3", h)
    }

    /// `v^m`: the mean of `G(I_i)` over the given rows, shaped `[L_v, d_e]`.
    pub fn domain_prompt(&self, g: &mut Graph, b: &mut Binder, features: NodeId) -> Result<NodeId> {
        if g.shape(features).first().copied().unwrap_or(0) == 0 {
            return Err(TplError::invalid("generate_domain_prompt: empty feature list"));
        }
        let out = self.forward(g, b, features)?;
        let mean = g.mean(out, 0)?;
        g.reshape(mean, &[self.config.text_prompt_len, self.config.width])
    }

    /// [`Self::domain_prompt`] for several groups of rows of `generated`,
    /// where `generated` is the output of [`Self::forward`].
    pub fn group_prompts(&self, g: &mut Graph, generated: NodeId, groups: &[Vec<usize>]) -> Result<Vec<NodeId>> {
        groups
            .iter()
            .map(|rows| {
                if rows.is_empty() {
                    return Err(TplError::invalid("generate_domain_prompt: empty feature list"));
                }
                let sel = g.select_rows(generated, rows)?;
                let mean = g.mean(sel, 0)?;
                g.reshape(mean, &[self.config.text_prompt_len, self.config.width])
            })
            .collect()
    }
}

/// Learnable gate vectors `P`, `Q`, `R`, each of the joint dimension.
pub struct FusionGates;

impl FusionGates {
    pub fn init(config: &ModelConfig, value: f64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for name in [GATE_P, GATE_Q, GATE_R] {
            store.insert(name, Role::Gate, Tensor::full(&[config.joint_dim], value).with_requires_grad(true))?;
        }
        Ok(store)
    }
}

/// `base + gate ∘ other` with `gate` broadcast over rows; not normalized.
pub fn fuse(g: &mut Graph, base: NodeId, other: NodeId, gate: NodeId) -> Result<NodeId> {
    if g.shape(base) != g.shape(other) {
        return Err(TplError::ShapeMismatch {
            op: "fuse",
            lhs: g.shape(base).to_vec(),
            rhs: g.shape(other).to_vec(),
        });
    }
    let gated = g.mul_row(other, gate)?;
    g.add(base, gated)
}

/// `I' = normalize(I + P ∘ I_orig)`.
pub fn fuse_image(g: &mut Graph, image: NodeId, original: NodeId, p: NodeId) -> Result<NodeId> {
    let f = fuse(g, image, original, p)?;
    g.l2_normalize(f)
}

/// `(T̄', T') = (normalize(T̄ + Q ∘ T), normalize(T + R ∘ T̄))`, both from
/// the pre-fusion inputs.
pub fn fuse_text(g: &mut Graph, specific: NodeId, agnostic: NodeId, q: NodeId, r: NodeId) -> Result<(NodeId, NodeId)> {
    let s = fuse(g, specific, agnostic, q)?;
    let a = fuse(g, agnostic, specific, r)?;
    Ok((g.l2_normalize(s)?, g.l2_normalize(a)?))
}
