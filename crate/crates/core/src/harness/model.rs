use std::collections::BTreeMap;

use crate::data::DomainDataset;
use crate::encoders::layers::broadcast;
use crate::encoders::{Backbone, Binder, ClassDescriptor, ModelConfig, ParamStore, PromptedVisionEncoder};
use crate::error::{Result, TplError};
use crate::exec::Execution;
use crate::harness::config::Components;
use crate::numerics::{Graph, NodeId};
use crate::prompting::{fuse_image, fuse_text, DomainPromptGenerator, FusionGates, GATE_P, GATE_Q, GATE_R};
use crate::rng;

/// Images per inference chunk; fixed so results do not depend on threading.
pub const CHUNK: usize = 64;

/// The learnable state of a tuned run plus its derived domain prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedModel {
    pub components: Components,
    pub params: ParamStore,
    /// `v^m` per source domain, flattened `[L_v·d_e]`, from all of that
    /// domain's training features.
    pub source_prompts: BTreeMap<u16, Vec<f64>>,
    pub temperature: f64,
}

impl TunedModel {
    /// Prompt for an unseen domain: the mean of the source prompts.
    pub fn target_prompt(&self) -> Option<Vec<f64>> {
        let n = self.source_prompts.len();
        let first = self.source_prompts.values().next()?;
        let mut acc = vec![0.0; first.len()];
        for v in self.source_prompts.values() {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Some(acc)
    }

    /// Prompt used when scoring images of `domain`.
    pub fn prompt_for(&self, domain: u16) -> Option<Vec<f64>> {
        self.source_prompts.get(&domain).cloned().or_else(|| self.target_prompt())
    }
}

/// Fresh learnable parameters for `components`.
pub fn init_learnables(cfg: &ModelConfig, components: Components, seed: u64) -> Result<ParamStore> {
    let mut r = rng::stream(seed, &[0x7E4A]);
    let mut store = ParamStore::new();
    if components.vision_prompts {
        store.extend(PromptedVisionEncoder::init_prompts(cfg, &mut r)?)?;
    }
    if components.language_prompts {
        store.extend(DomainPromptGenerator::init(cfg, &mut r)?)?;
    }
    if components.fusion {
        store.extend(FusionGates::init(cfg, cfg.gate_init)?)?;
    }
    Ok(store)
}

/// Text feature sets, one per domain slot.
pub struct TextSets {
    /// `T'` per slot.
    pub agnostic: Vec<NodeId>,
    /// `T̄'` per slot (empty without language prompts).
    pub specific: Vec<NodeId>,
}

/// Forward pieces of a prompted run over a frozen backbone.
#[derive(Clone, Copy)]
pub struct Forward<'a> {
    pub backbone: &'a Backbone,
    pub components: Components,
}

impl<'a> Forward<'a> {
    pub fn new(backbone: &'a Backbone, components: Components) -> Self {
        Self { backbone, components }
    }

    fn cfg(&self) -> &'a ModelConfig {
        &self.backbone.config
    }

    /// `(I', I)`: fused and pre-fusion image features `[B, d_j]`.
    /// `original` holds the frozen model's features of the same images.
    pub fn images(&self, g: &mut Graph, b: &mut Binder, pixels: &[f64], batch: usize, original: &[f64]) -> Result<(NodeId, NodeId)> {
        let dj = self.cfg().joint_dim;
        let pre = if self.components.vision_prompts {
            self.backbone.vision().forward(g, b, pixels, batch, true)?
        } else {
            g.constant(&[batch, dj], original.to_vec())?
        };
        if !self.components.fusion {
            return Ok((pre, pre));
        }
        let orig = g.constant(&[batch, dj], original.to_vec())?;
        let p = b.get(g, GATE_P)?;
        Ok((fuse_image(g, pre, orig, p)?, pre))
    }

    /// `v^m` per group of rows of the pre-fusion features.
    pub fn domain_prompts(&self, g: &mut Graph, b: &mut Binder, pre: NodeId, groups: &[Vec<usize>]) -> Result<Vec<NodeId>> {
        let gen = DomainPromptGenerator::new(self.cfg());
        let out = gen.forward(g, b, pre)?;
        gen.group_prompts(g, out, groups)
    }

    /// Text sets for each prompt in `prompts` (`[L_v, d_e]` nodes). `t` is the
    /// frozen `[C, d_j]` domain-agnostic text. Without language prompts a
    /// single slot holding `t` is returned.
    pub fn text(&self, g: &mut Graph, b: &mut Binder, t: NodeId, prompts: &[NodeId]) -> Result<TextSets> {
        if !self.components.language_prompts || prompts.is_empty() {
            return Ok(TextSets {
                agnostic: vec![t; prompts.len().max(1)],
                specific: Vec::new(),
            });
        }
        let cfg = self.cfg();
        let (c, s) = (cfg.num_classes, prompts.len());
        let classes = ClassDescriptor::all(cfg);
        let descriptors: Vec<ClassDescriptor> = (0..s).flat_map(|_| classes.iter().cloned()).collect();
        let prefix = if s == 1 {
            prompts[0]
        } else {
            let parts = prompts.iter().map(|&p| broadcast(g, p, c)).collect::<Result<Vec<_>>>()?;
            g.concat(&parts, 0)?
        };
        let specific = self.backbone.text().forward(g, b, &descriptors, Some(prefix))?;
        let (specific, agnostic) = if self.components.fusion {
            let reps = vec![t; s];
            let t_rep = if s == 1 { t } else { g.concat(&reps, 0)? };
            let q = b.get(g, GATE_Q)?;
            let r = b.get(g, GATE_R)?;
            let (sp, ag) = fuse_text(g, specific, t_rep, q, r)?;
            (sp, Some(ag))
        } else {
            (specific, None)
        };
        let mut out = TextSets {
            agnostic: Vec::with_capacity(s),
            specific: Vec::with_capacity(s),
        };
        for m in 0..s {
            let sl = |g: &mut Graph, n: NodeId| if s == 1 { Ok(n) } else { g.slice(n, 0, m * c, (m + 1) * c) };
            out.specific.push(sl(g, specific)?);
            out.agnostic.push(match agnostic {
                Some(a) => sl(g, a)?,
                None => t,
            });
        }
        Ok(out)
    }
}

/// Inference: fused and pre-fusion features for `indices`, in fixed-size
/// chunks. `original` holds the frozen features of the same rows.
pub fn infer_images(
    fwd: Forward,
    params: &ParamStore,
    ds: &DomainDataset,
    indices: &[usize],
    original: &[f64],
    exec: Execution,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dj = fwd.backbone.config.joint_dim;
    if original.len() != indices.len() * dj {
        return Err(TplError::ShapeMismatch {
            op: "infer_images",
            lhs: vec![original.len()],
            rhs: vec![indices.len(), dj],
        });
    }
    let chunks = indices.len().div_ceil(CHUNK);
    let parts = exec.try_map_range(chunks, |k| -> Result<(Vec<f64>, Vec<f64>)> {
        let (lo, hi) = (k * CHUNK, ((k + 1) * CHUNK).min(indices.len()));
        let pixels = ds.gather_pixels(&indices[lo..hi]);
        let mut g = Graph::new();
        let mut b = Binder::new(vec![&fwd.backbone.params, params], false);
        let (fused, pre) = fwd.images(&mut g, &mut b, &pixels, hi - lo, &original[lo * dj..hi * dj])?;
        Ok((g.value(fused).to_vec(), g.value(pre).to_vec()))
    })?;
    let mut fused = Vec::with_capacity(indices.len() * dj);
    let mut pre = Vec::with_capacity(indices.len() * dj);
    for (f, p) in parts {
        fused.extend(f);
        pre.extend(p);
    }
    Ok((fused, pre))
}

/// Rows `indices` of a row-major `[N, dim]` matrix.
pub fn gather_rows(values: &[f64], dim: usize, indices: &[usize]) -> Vec<f64> {
    indices.iter().flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied()).collect()
}

/// Frozen-model features of every image in `ds`, `[N, d_j]`.
pub fn original_features(backbone: &Backbone, ds: &DomainDataset, exec: Execution) -> Result<Vec<f64>> {
    let n = ds.len();
    let parts = exec.try_map_range(n.div_ceil(CHUNK), |k| {
        let idx: Vec<usize> = (k * CHUNK..((k + 1) * CHUNK).min(n)).collect();
        backbone.encode_images(None, &ds.gather_pixels(&idx), idx.len())
    })?;
    Ok(parts.concat())
}

/// `v^m` for each group of rows of `pre` (`[N, d_j]`), flattened.
pub fn infer_domain_prompts(fwd: Forward, params: &ParamStore, pre: &[f64], groups: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let dj = fwd.backbone.config.joint_dim;
    let mut g = Graph::new();
    let mut b = Binder::new(vec![params], false);
    let x = g.constant(&[pre.len() / dj, dj], pre.to_vec())?;
    let v = fwd.domain_prompts(&mut g, &mut b, x, groups)?;
    Ok(v.iter().map(|&n| g.value(n).to_vec()).collect())
}

/// `(T'^m, T̄'^m)` values per prompt; a single `(T, [])` pair without language prompts.
pub fn infer_text(fwd: Forward, params: &ParamStore, t: &[f64], prompts: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let cfg = &fwd.backbone.config;
    let mut g = Graph::new();
    let mut b = Binder::new(vec![&fwd.backbone.params, params], false);
    let tn = g.constant(&[cfg.num_classes, cfg.joint_dim], t.to_vec())?;
    let pn = prompts
        .iter()
        .map(|p| g.constant(&[cfg.text_prompt_len, cfg.width], p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let sets = fwd.text(&mut g, &mut b, tn, &pn)?;
    Ok((0..sets.agnostic.len())
        .map(|m| {
            let a = g.value(sets.agnostic[m]).to_vec();
            let s = sets.specific.get(m).map(|&n| g.value(n).to_vec()).unwrap_or_default();
            (a, s)
        })
        .collect())
}
