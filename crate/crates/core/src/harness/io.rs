//! Backbone and tuned-model checkpoints on top of the encoder checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{load_checkpoint, save_checkpoint, Backbone};
use crate::error::{Result, TplError};
use crate::harness::config::Components;
use crate::harness::model::TunedModel;

pub const KIND_BACKBONE: &str = "backbone";
pub const KIND_TUNED: &str = "tuned";

/// What a tuned checkpoint carries besides its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunedMetadata {
    pub components: Components,
    pub temperature: f64,
    /// Domain id → flattened `v^m`.
    pub source_prompts: BTreeMap<u16, Vec<f64>>,
    /// Fingerprint of the backbone the model was tuned on.
    pub backbone: String,
    pub extra: serde_json::Value,
}

pub fn save_backbone(dir: &Path, backbone: &Backbone, metadata: serde_json::Value) -> Result<()> {
    save_checkpoint(dir, KIND_BACKBONE, &backbone.config, &backbone.params, metadata)
}

pub fn load_backbone(dir: &Path) -> Result<(Backbone, serde_json::Value)> {
    let ck = load_checkpoint(dir)?;
    if ck.manifest.kind != KIND_BACKBONE {
        return Err(TplError::format("checkpoint", format!("expected a backbone, found '{}'", ck.manifest.kind)));
    }
    ck.manifest.model.validate()?;
    let mut params = ck.params;
    params.set_all_trainable(false);
    Ok((
        Backbone {
            config: ck.manifest.model,
            params,
        },
        ck.manifest.metadata,
    ))
}

pub fn save_tuned(dir: &Path, model: &TunedModel, backbone: &Backbone, extra: serde_json::Value) -> Result<()> {
    let meta = TunedMetadata {
        components: model.components,
        temperature: model.temperature,
        source_prompts: model.source_prompts.clone(),
        backbone: backbone.params.fingerprint(),
        extra,
    };
    save_checkpoint(dir, KIND_TUNED, &backbone.config, &model.params, serde_json::to_value(meta)?)
}

/// Loads a tuned model and checks it belongs to `backbone`.
pub fn load_tuned(dir: &Path, backbone: &Backbone) -> Result<(TunedModel, TunedMetadata)> {
    let ck = load_checkpoint(dir)?;
    if ck.manifest.kind != KIND_TUNED {
        return Err(TplError::format("checkpoint", format!("expected a tuned model, found '{}'", ck.manifest.kind)));
    }
    let meta: TunedMetadata = serde_json::from_value(ck.manifest.metadata)
        .map_err(|e| TplError::format("checkpoint", format!("tuned metadata: {e}")))?;
    if ck.manifest.model != backbone.config {
        return Err(TplError::format("checkpoint", "tuned model and backbone have different model configs"));
    }
    if meta.backbone != backbone.params.fingerprint() {
        return Err(TplError::format("checkpoint", "tuned model was trained on a different backbone"));
    }
    let model = TunedModel {
        components: meta.components,
        params: ck.params,
        source_prompts: meta.source_prompts.clone(),
        temperature: meta.temperature,
    };
    Ok((model, meta))
}
