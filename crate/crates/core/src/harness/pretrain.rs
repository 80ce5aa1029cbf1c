use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, SplitPlan};
use crate::encoders::{Backbone, Binder, ClassDescriptor, ModelConfig};
use crate::error::{Result, TplError};
use crate::numerics::{adamw_step, cosine_lr, AdamWState, Graph};
use crate::harness::config::PretrainConfig;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss over each tenth of training.
    pub loss_trace: Vec<f64>,
    /// Accuracy (percent) on the pooled source training images.
    pub train_accuracy: f64,
    pub fingerprint: String,
}

/// Contrastive dual-encoder training on the pooled source training split,
/// without prompts. The returned backbone is meant to stay frozen.
pub fn pretrain_backbone(
    ds: &DomainDataset,
    plan: &SplitPlan,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    temperature: f64,
) -> Result<(Backbone, PretrainReport)> {
    if model.num_classes != ds.manifest.num_classes || model.image_size != ds.manifest.image_size {
        return Err(TplError::invalid(format!(
            "model expects {} classes at {}px, dataset has {} at {}px",
            model.num_classes, model.image_size, ds.manifest.num_classes, ds.manifest.image_size
        )));
    }
    let pool = plan.all_train();
    if pool.is_empty() {
        return Err(TplError::invalid("pretraining needs source training images"));
    }
    let mut backbone = Backbone::init(model.clone(), cfg.seed)?;
    backbone.params.set_all_trainable(true);
    let mut states: Vec<AdamWState> = backbone
        .params
        .iter()
        .map(|p| AdamWState::new(p.tensor.len(), cfg.optimizer))
        .collect();
    let descriptors = ClassDescriptor::all(model);
    let mut r = rng::stream(cfg.seed, &[0x9E7A, plan.target as u64]);
    let mut order = pool.clone();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(pool.len());
    let window = cfg.iterations.div_ceil(10).max(1);
    let mut trace = Vec::new();
    let mut acc = 0.0;

    for t in 0..cfg.iterations {
        if cursor + bs > order.len() {
            order.shuffle(&mut r);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + bs];
        cursor += bs;
        let pixels = ds.gather_pixels(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| ds.class_index(i)).collect();

        let mut g = Graph::new();
        let mut b = Binder::new(vec![&backbone.params], true);
        let img = backbone.vision().forward(&mut g, &mut b, &pixels, bs, false)?;
        let txt = backbone.text().forward(&mut g, &mut b, &descriptors, None)?;
        let sims = g.matmul_ex(img, txt, false, true)?;
        let logits = g.scale(sims, 1.0 / temperature)?;
        let logp = g.log_softmax(logits)?;
        let picked = g.pick(logp, &labels)?;
        let s = g.sum_all(picked)?;
        let loss = g.scale(s, -1.0 / bs as f64)?;
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(TplError::Diverged {
                iteration: t,
                detail: format!("pretraining loss {lv}"),
            });
        }
        g.backward(loss)?;
        let grads: Vec<(String, Vec<f64>)> = b
            .bound()
            .filter_map(|(n, id)| g.grad(id).map(|gr| (n.to_string(), gr.to_vec())))
            .collect();
        drop(b);
        let lr = cosine_lr(t, cfg.iterations, cfg.lr, cfg.lr_floor)?;
        let names: std::collections::HashMap<String, Vec<f64>> = grads.into_iter().collect();
        for (p, st) in backbone.params.iter_mut().zip(states.iter_mut()) {
            if let Some(gr) = names.get(&p.name) {
                p.tensor.set_grad(gr.clone())?;
                adamw_step(&mut p.tensor, st, lr)?;
                p.tensor.clear_grad();
            }
        }

        acc += lv;
        if (t + 1) % window == 0 || t + 1 == cfg.iterations {
            let n = (t % window) + 1;
            trace.push(acc / n as f64);
            info!("pretrain target={} iter {}/{} loss {:.4}", plan.target, t + 1, cfg.iterations, acc / n as f64);
            acc = 0.0;
        }
    }
    backbone.params.set_all_trainable(false);

    let feats = super::model::original_features(&backbone, ds, crate::exec::Execution::default())?;
    let text = backbone.encode_classes(None)?;
    let dj = model.joint_dim;
    let rows = super::model::gather_rows(&feats, dj, &pool);
    let train_accuracy = super::eval::zero_shot_report(ds, &pool, &rows, &text, dj, temperature).accuracy;
    let fingerprint = backbone.params.fingerprint();
    Ok((
        backbone,
        PretrainReport {
            loss_trace: trace,
            train_accuracy,
            fingerprint,
        },
    ))
}
