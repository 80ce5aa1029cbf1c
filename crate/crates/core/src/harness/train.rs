use std::collections::{BTreeMap, HashMap};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{FeatureDump, SplitTag};
use crate::data::{make_splits, DomainDataset, SplitPlan};
use crate::encoders::{Backbone, Binder, ParamStore};
use crate::error::{Result, TplError};
use crate::harness::config::TrainConfig;
use crate::harness::eval::{evaluate_indices, zero_shot_report, EvalOptions, EvalReport};
use crate::harness::model::{
    gather_rows, infer_domain_prompts, infer_images, init_learnables, original_features, Forward, TunedModel,
};
use crate::harness::pretrain::{pretrain_backbone, PretrainReport};
use crate::numerics::{adamw_step, cosine_lr, AdamWState, Graph, NodeId};
use crate::objective::{check_weights, loss_ls, loss_ls_slots, loss_lv, loss_lv_slots, LossBatch, Weights};
use crate::rng;
use crate::scheduler::{compute_domain_distance, per_domain_distances, strategy_weights, LabeledFeatures, ScheduleState, StrategyKind};

/// Everything about one held-out target that does not depend on the
/// stage-2 run: splits, the frozen backbone and its cached features.
#[derive(Clone, Debug)]
pub struct TargetContext {
    pub plan: SplitPlan,
    pub backbone: Backbone,
    pub pretrain: Option<PretrainReport>,
    /// Frozen-model features of every dataset image, `[N, d_j]`.
    pub original: Vec<f64>,
    /// Frozen class text features `T`, `[C, d_j]`.
    pub text: Vec<f64>,
    pub zero_shot: EvalReport,
    /// Probe rows (source training images) used to measure `d`.
    pub probe: Vec<usize>,
}

impl TargetContext {
    /// Splits the data and pretrains a backbone on the sources.
    pub fn prepare(ds: &DomainDataset, target: u16, cfg: &TrainConfig) -> Result<Self> {
        let plan = make_splits(ds, target, cfg.val_fraction, cfg.split_seed)?;
        let (backbone, report) = pretrain_backbone(ds, &plan, &cfg.model, &cfg.pretrain, cfg.temperature)?;
        info!(
            "target {target}: pretrained backbone, source-train accuracy {:.2}%",
            report.train_accuracy
        );
        Self::with_backbone(ds, plan, backbone, Some(report), cfg)
    }

    /// Uses an existing frozen backbone.
    pub fn with_backbone(
        ds: &DomainDataset,
        plan: SplitPlan,
        mut backbone: Backbone,
        pretrain: Option<PretrainReport>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        backbone.params.set_all_trainable(false);
        if backbone.config != cfg.model {
            return Err(TplError::invalid("backbone model config differs from the run config"));
        }
        let dj = backbone.config.joint_dim;
        let original = original_features(&backbone, ds, cfg.execution)?;
        let text = backbone.encode_classes(None)?;
        let test_rows = gather_rows(&original, dj, &plan.test);
        let zero_shot = zero_shot_report(ds, &plan.test, &test_rows, &text, dj, cfg.temperature);
        let mut probe = plan.all_train();
        probe.shuffle(&mut rng::stream(cfg.split_seed, &[0x960B, plan.target as u64]));
        probe.truncate(cfg.probe_size);
        probe.sort_unstable();
        Ok(Self {
            plan,
            backbone,
            pretrain,
            original,
            text,
            zero_shot,
            probe,
        })
    }

    fn rows(&self, indices: &[usize]) -> Vec<f64> {
        gather_rows(&self.original, self.backbone.config.joint_dim, indices)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub t: usize,
    /// Inter-domain distance on the probe set.
    pub d: f64,
    pub w_v: f64,
    pub w_s: f64,
    /// Mean training loss since the previous checkpoint (the iteration-0
    /// loss at `t = 0`).
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TunedModel,
    pub schedule: ScheduleState,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Checkpoint whose parameters were kept (best source validation).
    pub best_iteration: usize,
    pub val_accuracy: f64,
    pub theta: f64,
    pub initial_loss: f64,
    /// Fused probe features at every checkpoint.
    pub probe: FeatureDump,
}

/// Domain-balanced batches: each source domain contributes its share, drawn
/// without replacement from a per-domain shuffled pass.
struct Sampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    shares: Vec<usize>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Sampler {
    fn new(plan: &SplitPlan, batch: usize, seed: u64) -> Result<Self> {
        let pools: Vec<Vec<usize>> = plan.train.values().cloned().collect();
        let s = pools.len();
        if s == 0 || batch < s {
            return Err(TplError::invalid(format!("batch size {batch} cannot cover {s} source domains")));
        }
        let shares: Vec<usize> = (0..s).map(|m| batch / s + usize::from(m < batch % s)).collect();
        if pools.iter().zip(&shares).any(|(p, &k)| p.len() < k) {
            return Err(TplError::invalid("a source domain has fewer training images than its batch share"));
        }
        Ok(Self {
            cursors: pools.iter().map(|p| p.len()).collect(),
            pools,
            shares,
            rng: rng::stream(seed, &[0x5A3B, plan.target as u64]),
        })
    }

    /// Indices grouped by slot (source order).
    fn next(&mut self) -> Vec<Vec<usize>> {
        (0..self.pools.len())
            .map(|m| {
                let k = self.shares[m];
                if self.cursors[m] + k > self.pools[m].len() {
                    self.pools[m].shuffle(&mut self.rng);
                    self.cursors[m] = 0;
                }
                let c = self.cursors[m];
                self.cursors[m] += k;
                self.pools[m][c..c + k].to_vec()
            })
            .collect()
    }
}

/// Gradients keyed by parameter name.
type NamedGrads = Vec<(String, Vec<f64>)>;

fn ensemble_weight(t: usize, total: usize) -> f64 {
    let (mu, sd) = (0.6 * total as f64, 0.2 * total as f64);
    (-0.5 * ((t as f64 - mu) / sd).powi(2)).exp()
}

/// `Σ w·term`, skipping absent and zero-weighted terms.
fn weighted(g: &mut Graph, parts: &[(Option<NodeId>, f64)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(n, w) in parts {
        let Some(n) = n else { continue };
        if w == 0.0 {
            continue;
        }
        let s = g.scale(n, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| TplError::invalid("every loss term has zero weight"))
}

struct Run<'a> {
    ds: &'a DomainDataset,
    ctx: &'a TargetContext,
    cfg: &'a TrainConfig,
    fwd: Forward<'a>,
    sources: Vec<u16>,
    eval: EvalOptions,
}

impl Run<'_> {
    /// Fixed weights for runs that only have one loss term.
    fn forced_weights(&self) -> Option<Weights> {
        let c = self.cfg.components;
        match (c.vision_prompts, c.language_prompts) {
            (true, false) => Some(Weights::VISION),
            (false, true) => Some(Weights::LANGUAGE),
            _ => None,
        }
    }

    fn step_loss(&self, params: &ParamStore, groups: &[Vec<usize>], w: Weights, slot_w: Option<&[Weights]>) -> Result<(f64, NamedGrads)> {
        let dj = self.ctx.backbone.config.joint_dim;
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        let bsz = flat.len();
        let mut g = Graph::new();
        let mut b = Binder::new(vec![&self.ctx.backbone.params, params], true);
        let pixels = self.ds.gather_pixels(&flat);
        let (image, pre) = self.fwd.images(&mut g, &mut b, &pixels, bsz, &self.ctx.rows(&flat))?;
        let mut offsets = Vec::with_capacity(groups.len());
        let mut o = 0;
        for grp in groups {
            offsets.push((o..o + grp.len()).collect::<Vec<_>>());
            o += grp.len();
        }
        let prompts = if self.cfg.components.language_prompts {
            self.fwd.domain_prompts(&mut g, &mut b, pre, &offsets)?
        } else {
            Vec::new()
        };
        let t = g.constant(&[self.ctx.text.len() / dj, dj], self.ctx.text.clone())?;
        let sets = self.fwd.text(&mut g, &mut b, t, &prompts)?;
        let s = groups.len();
        let agnostic = if sets.agnostic.len() == s { sets.agnostic } else { vec![sets.agnostic[0]; s] };
        let slots: Vec<usize> = groups.iter().enumerate().flat_map(|(m, grp)| vec![m; grp.len()]).collect();
        let batch = LossBatch {
            image,
            labels: flat.iter().map(|&i| self.ds.class_index(i)).collect(),
            slots,
            agnostic,
            specific: sets.specific,
            temperature: self.cfg.temperature,
        };
        let sum = match slot_w {
            Some(sw) => {
                let lv = loss_lv_slots(&mut g, &batch)?;
                let ls = loss_ls_slots(&mut g, &batch)?;
                let mut parts = Vec::new();
                for (m, w) in sw.iter().enumerate() {
                    check_weights(*w)?;
                    parts.push((lv[m], w.vision));
                    parts.push((ls[m], w.language));
                }
                weighted(&mut g, &parts)?
            }
            None => {
                check_weights(w)?;
                let lv = if w.vision > 0.0 { Some(loss_lv(&mut g, &batch)?) } else { None };
                let ls = if w.language > 0.0 { Some(loss_ls(&mut g, &batch)?) } else { None };
                weighted(&mut g, &[(lv, w.vision), (ls, w.language)])?
            }
        };
        let loss = g.scale(sum, 1.0 / bsz as f64)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = b
            .bound()
            .filter(|(n, _)| params.contains(n))
            .filter_map(|(n, id)| g.grad(id).map(|gr| (n.to_string(), gr.to_vec())))
            .collect();
        Ok((value, grads))
    }

    /// `v^m` per source domain from the pre-fusion features of `indices`.
    fn source_prompts(&self, params: &ParamStore, indices: &[usize], pre: &[f64]) -> Result<BTreeMap<u16, Vec<f64>>> {
        if !self.cfg.components.language_prompts {
            return Ok(BTreeMap::new());
        }
        let groups: Vec<Vec<usize>> = self
            .sources
            .iter()
            .map(|&d| (0..indices.len()).filter(|&k| self.ds.domains[indices[k]] == d).collect())
            .collect();
        if groups.iter().any(|g| g.is_empty()) {
            return Err(TplError::invalid("a source domain has no rows for its prompt"));
        }
        let v = infer_domain_prompts(self.fwd, params, pre, &groups)?;
        Ok(self.sources.iter().copied().zip(v).collect())
    }

    fn model(&self, params: ParamStore, source_prompts: BTreeMap<u16, Vec<f64>>) -> TunedModel {
        TunedModel {
            components: self.cfg.components,
            params,
            source_prompts,
            temperature: self.cfg.temperature,
        }
    }
}

/// Stage-2 tuning of prompts, generator and gates over a frozen backbone.
pub fn train_tpl(ds: &DomainDataset, ctx: &TargetContext, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let total = cfg.iterations;
    let run = Run {
        ds,
        ctx,
        cfg,
        fwd: Forward::new(&ctx.backbone, cfg.components),
        sources: ctx.plan.sources(),
        eval: EvalOptions::from(cfg),
    };
    let dj = ctx.backbone.config.joint_dim;
    let mut params = init_learnables(&ctx.backbone.config, cfg.components, seed)?;
    let mut states: HashMap<String, AdamWState> = params
        .iter()
        .filter(|p| p.tensor.requires_grad())
        .map(|p| (p.name.clone(), AdamWState::new(p.tensor.len(), cfg.optimizer)))
        .collect();
    let mut sampler = Sampler::new(&ctx.plan, cfg.batch_size, seed)?;
    let val = ctx.plan.all_val();
    let val_orig = ctx.rows(&val);
    let probe_orig = ctx.rows(&ctx.probe);
    let probe_classes: Vec<usize> = ctx.probe.iter().map(|&i| ds.class_index(i)).collect();
    let probe_domains: Vec<usize> = ctx.probe.iter().map(|&i| ds.domains[i] as usize).collect();
    let slot_domains: Vec<usize> = run.sources.iter().map(|&d| d as usize).collect();
    let per_domain = cfg.per_domain_weights && cfg.strategy == StrategyKind::Transitive && run.forced_weights().is_none();

    let mut schedule: Option<ScheduleState> = None;
    let mut domain_d: BTreeMap<usize, f64> = BTreeMap::new();
    let mut checkpoints = Vec::new();
    let mut dump = FeatureDump::new(dj);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut ens: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut theta = 0.0;
    let mut initial_loss = f64::NAN;
    let mut loss_acc = (0.0, 0usize);
    let mut last_w = Weights::EVEN;

    for t in 0..=total {
        if t % cfg.checkpoint_every == 0 || t == total {
            let (fused, pre) = infer_images(run.fwd, &params, ds, &ctx.probe, &probe_orig, cfg.execution)?;
            let lf = LabeledFeatures::new(dj, &fused, &probe_classes, &probe_domains)?;
            let d = compute_domain_distance(&lf)?.clamp(0.0, 1.0);
            if t == 0 {
                theta = cfg.theta.resolve(d, total);
                schedule = Some(ScheduleState::new(cfg.strategy, total, theta, cfg.checkpoint_every)?);
            }
            let sched = schedule.as_mut().expect("schedule created at t = 0");
            sched.refresh(t, d)?;
            if per_domain {
                domain_d = per_domain_distances(&lf)?;
                let p = sched.params();
                sched.per_domain = Some(
                    slot_domains
                        .iter()
                        .map(|&m| (m, strategy_weights(StrategyKind::Transitive, t, domain_d[&m], &p)))
                        .collect(),
                );
            }
            for (k, &i) in ctx.probe.iter().enumerate() {
                dump.push(&fused[k * dj..(k + 1) * dj], ds.labels[i], ds.domains[i], SplitTag::Probe, t as u32)?;
            }

            let prompts = run.source_prompts(&params, &ctx.probe, &pre)?;
            let probe_model = run.model(params.clone(), prompts);
            let (rep, _) = evaluate_indices(&probe_model, &ctx.backbone, ds, &val, &val_orig, &ctx.text, &run.eval)?;
            let improved = best.as_ref().is_none_or(|(a, _, _)| rep.accuracy > *a);
            if improved {
                best = Some((rep.accuracy, t, params.clone()));
            }
            if cfg.prompt_ensemble {
                let w = ensemble_weight(t, total);
                let (sum_w, acc) = ens.get_or_insert_with(|| (0.0, params.iter().map(|p| vec![0.0; p.tensor.len()]).collect()));
                *sum_w += w;
                for (a, p) in acc.iter_mut().zip(params.iter()) {
                    a.iter_mut().zip(p.tensor.values()).for_each(|(x, v)| *x += w * v);
                }
            }
            let mean_loss = if loss_acc.1 > 0 { loss_acc.0 / loss_acc.1 as f64 } else { f64::NAN };
            checkpoints.push(CheckpointRecord {
                t,
                d,
                w_v: sched.weights.vision,
                w_s: sched.weights.language,
                loss: mean_loss,
                val_accuracy: rep.accuracy,
            });
            debug!("t={t} d={d:.5} w=({:.4},{:.4}) val={:.2}%", sched.weights.vision, sched.weights.language, rep.accuracy);
            loss_acc = (0.0, 0);
        }
        if t == total {
            break;
        }

        let sched = schedule.as_mut().expect("schedule created at t = 0");
        let w = run.forced_weights().unwrap_or_else(|| sched.weights_at(t));
        let slot_w: Option<Vec<Weights>> = per_domain.then(|| {
            let p = sched.params();
            slot_domains
                .iter()
                .map(|m| strategy_weights(StrategyKind::Transitive, t, domain_d[m], &p))
                .collect()
        });
        let groups = sampler.next();
        let (loss, grads) = run.step_loss(&params, &groups, w, slot_w.as_deref())?;
        if !loss.is_finite() {
            return Err(TplError::Diverged {
                iteration: t,
                detail: format!("loss {loss} with weights (w_V, w_S) = ({}, {})", last_w.vision, last_w.language),
            });
        }
        last_w = w;
        if t == 0 {
            initial_loss = loss;
            checkpoints[0].loss = loss;
        } else {
            loss_acc.0 += loss;
            loss_acc.1 += 1;
        }
        let lr = cosine_lr(t, total, cfg.lr, cfg.lr_floor)?;
        let grads: HashMap<String, Vec<f64>> = grads.into_iter().collect();
        for p in params.iter_mut() {
            if let (Some(gr), Some(st)) = (grads.get(&p.name), states.get_mut(&p.name)) {
                p.tensor.set_grad(gr.clone())?;
                adamw_step(&mut p.tensor, st, lr)?;
                p.tensor.clear_grad();
            }
        }
    }

    let (val_accuracy, best_iteration, mut chosen) = best.expect("at least one checkpoint");
    if let Some((sum_w, acc)) = ens {
        for (p, a) in chosen.iter_mut().zip(acc) {
            p.tensor.values_mut().iter_mut().zip(a).for_each(|(v, x)| *v = x / sum_w);
        }
    }
    if chosen.iter().any(|p| !p.tensor.is_finite()) {
        return Err(TplError::Diverged {
            iteration: total,
            detail: "non-finite learnable parameters".into(),
        });
    }
    let train = ctx.plan.all_train();
    let train_orig = ctx.rows(&train);
    let (_, pre) = infer_images(run.fwd, &chosen, ds, &train, &train_orig, cfg.execution)?;
    let prompts = run.source_prompts(&chosen, &train, &pre)?;
    if prompts.values().flatten().any(|v| !v.is_finite()) {
        return Err(TplError::Diverged {
            iteration: total,
            detail: "non-finite domain prompts".into(),
        });
    }
    Ok(TrainOutcome {
        model: run.model(chosen, prompts),
        schedule: schedule.expect("schedule created at t = 0"),
        checkpoints,
        best_iteration,
        val_accuracy,
        theta,
        initial_loss,
        probe: dump,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_weights_peak_at_sixty_percent() {
        assert_eq!(ensemble_weight(600, 1000), 1.0);
        assert!((ensemble_weight(800, 1000) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(ensemble_weight(0, 1000) < ensemble_weight(300, 1000));
    }
}
