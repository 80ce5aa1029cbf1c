use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::encoders::Backbone;
use crate::error::{Result, TplError};
use crate::exec::Execution;
use crate::harness::config::{Components, EvalSpace, TrainConfig};
use crate::harness::model::{gather_rows, infer_images, infer_text, original_features, Forward, TunedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Average with the frozen model's predictions.
    pub eval_average: bool,
    pub space: EvalSpace,
    pub execution: Execution,
}

impl From<&TrainConfig> for EvalOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            eval_average: c.eval_average,
            space: c.eval_space,
            execution: c.execution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent correct.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// 1-based predicted class per evaluated image.
    pub predictions: Vec<u16>,
}

/// `features · textᵀ / τ`, `[n, C]`.
pub fn logits(features: &[f64], text: &[f64], dim: usize, temperature: f64) -> Vec<f64> {
    let c = text.len() / dim;
    let mut out = Vec::with_capacity(features.len() / dim * c);
    for f in features.chunks_exact(dim) {
        for t in text.chunks_exact(dim) {
            out.push(f.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / temperature);
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Mean of two score sets, in logit or probability space.
pub fn combine_logits(tuned: &[f64], original: &[f64], classes: usize, space: EvalSpace) -> Vec<f64> {
    match space {
        EvalSpace::Logit => tuned.iter().zip(original).map(|(a, b)| 0.5 * (a + b)).collect(),
        EvalSpace::Probability => tuned
            .chunks_exact(classes)
            .zip(original.chunks_exact(classes))
            .flat_map(|(a, b)| {
                let (pa, pb) = (softmax_row(a), softmax_row(b));
                pa.into_iter().zip(pb).map(|(x, y)| 0.5 * (x + y)).collect::<Vec<_>>()
            })
            .collect(),
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// The text set a run scores against: `T̄'` for language-only runs (their
/// `T'` is the frozen text), `T'` otherwise.
pub fn scoring_set(components: Components, set: &(Vec<f64>, Vec<f64>)) -> &[f64] {
    if components.language_prompts && !components.vision_prompts && !set.1.is_empty() {
        &set.1
    } else {
        &set.0
    }
}

/// Zero-based predictions. Row `i` is scored against `tuned_text[slot[i]]`,
/// optionally averaged with the frozen scores against `original_text`.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    fused: &[f64],
    original: &[f64],
    slots: &[usize],
    tuned_text: &[&[f64]],
    original_text: &[f64],
    dim: usize,
    temperature: f64,
    opts: &EvalOptions,
) -> Vec<usize> {
    let c = original_text.len() / dim;
    slots
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let tuned = logits(&fused[i * dim..(i + 1) * dim], tuned_text[s], dim, temperature);
            if !opts.eval_average {
                return argmax_lowest(&tuned);
            }
            let orig = logits(&original[i * dim..(i + 1) * dim], original_text, dim, temperature);
            argmax_lowest(&combine_logits(&tuned, &orig, c, opts.space))
        })
        .collect()
}

pub fn report(predictions: &[usize], ds: &DomainDataset, indices: &[usize]) -> EvalReport {
    let correct = predictions
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| p == ds.class_index(i))
        .count();
    EvalReport {
        accuracy: 100.0 * correct as f64 / indices.len().max(1) as f64,
        correct,
        total: indices.len(),
        predictions: predictions.iter().map(|&p| p as u16 + 1).collect(),
    }
}

/// Accuracy of the frozen model alone.
pub fn zero_shot_report(ds: &DomainDataset, indices: &[usize], original: &[f64], text: &[f64], dim: usize, temperature: f64) -> EvalReport {
    let preds: Vec<usize> = original
        .chunks_exact(dim)
        .map(|f| argmax_lowest(&logits(f, text, dim, temperature)))
        .collect();
    report(&preds, ds, indices)
}

/// Evaluates `model` on `indices`, each image scored with its own domain's
/// prompt (the mean source prompt for unseen domains). `original` holds the
/// frozen features of the same rows. Returns the report and the fused features.
pub fn evaluate_indices(
    model: &TunedModel,
    backbone: &Backbone,
    ds: &DomainDataset,
    indices: &[usize],
    original: &[f64],
    text: &[f64],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<f64>)> {
    let dj = backbone.config.joint_dim;
    let fwd = Forward::new(backbone, model.components);
    let (fused, _) = infer_images(fwd, &model.params, ds, indices, original, opts.execution)?;
    let mut slot_of: BTreeMap<u16, usize> = BTreeMap::new();
    let mut prompts = Vec::new();
    let slots: Vec<usize> = if model.components.language_prompts {
        indices
            .iter()
            .map(|&i| {
                let d = ds.domains[i];
                if let Some(&s) = slot_of.get(&d) {
                    return Ok(s);
                }
                let p = model
                    .prompt_for(d)
                    .ok_or_else(|| TplError::invalid("tuned model has no domain prompts"))?;
                prompts.push(p);
                slot_of.insert(d, prompts.len() - 1);
                Ok(prompts.len() - 1)
            })
            .collect::<Result<_>>()?
    } else {
        vec![0; indices.len()]
    };
    let sets = infer_text(fwd, &model.params, text, &prompts)?;
    let tuned: Vec<&[f64]> = sets.iter().map(|s| scoring_set(model.components, s)).collect();
    let preds = predict(&fused, original, &slots, &tuned, text, dj, model.temperature, opts);
    Ok((report(&preds, ds, indices), fused))
}

/// Accuracy of `model` on every image of domain `target`.
pub fn evaluate(model: &TunedModel, original: &Backbone, ds: &DomainDataset, target: u16, opts: &EvalOptions) -> Result<EvalReport> {
    let indices: Vec<usize> = (0..ds.len()).filter(|&i| ds.domains[i] == target).collect();
    if indices.is_empty() {
        return Err(TplError::invalid(format!("domain {target} has no images")));
    }
    let all = original_features(original, ds, opts.execution)?;
    let orig = gather_rows(&all, original.config.joint_dim, &indices);
    let text = original.encode_classes(None)?;
    Ok(evaluate_indices(model, original, ds, &indices, &orig, &text, opts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_goes_to_lowest_class() {
        let avg = combine_logits(&[2.0, 1.0, 0.0], &[0.0, 1.0, 2.0], 3, EvalSpace::Logit);
        assert_eq!(avg, vec![1.0, 1.0, 1.0]);
        assert_eq!(argmax_lowest(&avg), 0);
        let p = combine_logits(&[2.0, 1.0, 0.0], &[0.0, 1.0, 2.0], 3, EvalSpace::Probability);
        assert!((p[0] - p[2]).abs() < 1e-15);
    }

    #[test]
    fn averaging_identical_scores_is_identity() {
        let a = [0.3, -1.0, 2.5, 0.1];
        assert_eq!(combine_logits(&a, &a, 4, EvalSpace::Logit), a.to_vec());
    }
}
