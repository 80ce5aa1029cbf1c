use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{class_separability_metric, FeatureDump, SplitTag};
use crate::data::DomainDataset;
use crate::error::{Result, TplError};
use crate::harness::config::{Components, TrainConfig};
use crate::harness::eval::{evaluate_indices, EvalOptions};
use crate::harness::model::gather_rows;
use crate::harness::train::{train_tpl, CheckpointRecord, TargetContext, TrainOutcome};
use crate::scheduler::{ScheduleRecord, StrategyKind};

/// Named run configurations compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    ZeroShot,
    LanguageOnly,
    VisionOnly,
    JointNoFusion,
    Joint,
    Tpl,
    Alternating,
    TwoStage,
    Cumulative,
}

impl Arm {
    pub const ALL: [Arm; 9] = [
        Arm::ZeroShot,
        Arm::LanguageOnly,
        Arm::VisionOnly,
        Arm::JointNoFusion,
        Arm::Joint,
        Arm::Tpl,
        Arm::Alternating,
        Arm::TwoStage,
        Arm::Cumulative,
    ];
    /// Prompt-design comparison rows.
    pub const PROMPT_DESIGN: [Arm; 6] = [
        Arm::ZeroShot,
        Arm::LanguageOnly,
        Arm::VisionOnly,
        Arm::JointNoFusion,
        Arm::Joint,
        Arm::Tpl,
    ];
    /// Learning-strategy comparison rows; all use the full model.
    pub const STRATEGIES: [(Arm, StrategyKind); 5] = [
        (Arm::Joint, StrategyKind::Joint),
        (Arm::Alternating, StrategyKind::Alternating),
        (Arm::TwoStage, StrategyKind::TwoStage),
        (Arm::Cumulative, StrategyKind::Cumulative),
        (Arm::Tpl, StrategyKind::Transitive),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::ZeroShot => "zero_shot",
            Arm::LanguageOnly => "language_only",
            Arm::VisionOnly => "vision_only",
            Arm::JointNoFusion => "joint_no_fusion",
            Arm::Joint => "joint",
            Arm::Tpl => "tpl",
            Arm::Alternating => "alternating",
            Arm::TwoStage => "two_stage",
            Arm::Cumulative => "cumulative",
        }
    }

    /// The stage-2 config of this arm; `None` for the untuned baseline.
    pub fn config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let full = Components::default();
        let (components, strategy) = match self {
            Arm::ZeroShot => return None,
            Arm::LanguageOnly => (
                Components { vision_prompts: false, fusion: false, ..full },
                StrategyKind::Joint,
            ),
            Arm::VisionOnly => (
                Components { language_prompts: false, fusion: false, ..full },
                StrategyKind::Joint,
            ),
            Arm::JointNoFusion => (Components { fusion: false, ..full }, StrategyKind::Joint),
            Arm::Joint => (full, StrategyKind::Joint),
            Arm::Tpl => (full, StrategyKind::Transitive),
            Arm::Alternating => (full, StrategyKind::Alternating),
            Arm::TwoStage => (full, StrategyKind::TwoStage),
            Arm::Cumulative => (full, StrategyKind::Cumulative),
        };
        Some(TrainConfig {
            components,
            strategy,
            ..base.clone()
        })
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arm {
    type Err = TplError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| TplError::invalid(format!("unknown arm '{s}'")))
    }
}

/// One (target, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub target: u16,
    pub seed: u64,
    /// Target accuracy, percent.
    pub accuracy: f64,
    pub zero_shot_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub best_iteration: Option<usize>,
    pub theta: Option<f64>,
    pub initial_loss: Option<f64>,
    /// Class separability of the target's evaluated features.
    pub separability: f64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub schedule: Vec<ScheduleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: u16,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub records: Vec<RunRecord>,
    pub targets: Vec<TargetSummary>,
    /// Mean of the per-target means.
    pub grand_mean: f64,
    /// Spread of the per-seed averages over targets.
    pub grand_std: Option<f64>,
}

/// `(mean, sample std)`; the std needs at least two values.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl RunResult {
    pub fn from_records(label: impl Into<String>, mut records: Vec<RunRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(TplError::invalid("no runs to summarize"));
        }
        records.sort_by_key(|r| (r.target, r.seed));
        let mut by_target: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &records {
            by_target.entry(r.target).or_default().push(r.accuracy);
            by_seed.entry(r.seed).or_default().push(r.accuracy);
        }
        let targets: Vec<TargetSummary> = by_target
            .iter()
            .map(|(&target, xs)| {
                let (mean, std) = mean_std(xs);
                TargetSummary { target, mean, std, runs: xs.len() }
            })
            .collect();
        let grand_mean = targets.iter().map(|t| t.mean).sum::<f64>() / targets.len() as f64;
        let seed_means: Vec<f64> = by_seed.values().map(|xs| xs.iter().sum::<f64>() / xs.len() as f64).collect();
        Ok(Self {
            label: label.into(),
            records,
            targets,
            grand_mean,
            grand_std: mean_std(&seed_means).1,
        })
    }

    pub fn target_mean(&self, target: u16) -> Option<f64> {
        self.targets.iter().find(|t| t.target == target).map(|t| t.mean)
    }

    /// `target,seed,accuracy,...` per run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("label,target,seed,accuracy,zero_shot_accuracy,val_accuracy,best_iteration,theta,separability\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{},{},{},{:?}",
                self.label,
                r.target,
                r.seed,
                r.accuracy,
                r.zero_shot_accuracy,
                r.val_accuracy.map(|v| format!("{v:?}")).unwrap_or_default(),
                r.best_iteration.map(|v| v.to_string()).unwrap_or_default(),
                r.theta.map(|v| format!("{v:?}")).unwrap_or_default(),
                r.separability,
            );
        }
        s
    }
}

fn fmt_cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.1} ± {s:.1}"),
        None => format!("{mean:.1}"),
    }
}

/// Accuracy rows, one column per target plus the average.
pub fn format_table(title: &str, rows: &[&RunResult]) -> String {
    let targets: Vec<u16> = rows.first().map(|r| r.targets.iter().map(|t| t.target).collect()).unwrap_or_default();
    let mut s = format!("{title}\n{:<16}", "method");
    for t in &targets {
        let _ = write!(s, " | {:>12}", format!("domain {t}"));
    }
    let _ = writeln!(s, " | {:>12}", "avg");
    for r in rows {
        let _ = write!(s, "{:<16}", r.label);
        for t in &r.targets {
            let _ = write!(s, " | {:>12}", fmt_cell(t.mean, t.std));
        }
        let _ = writeln!(s, " | {:>12}", fmt_cell(r.grand_mean, r.grand_std));
    }
    s
}

fn separability_of(ds: &DomainDataset, indices: &[usize], features: &[f64], dim: usize) -> Result<f64> {
    let mut dump = FeatureDump::new(dim);
    for (k, &i) in indices.iter().enumerate() {
        dump.push(&features[k * dim..(k + 1) * dim], ds.labels[i], ds.domains[i], SplitTag::Test, 0)?;
    }
    Ok(class_separability_metric(&dump)?.mean)
}

/// The untuned baseline on a prepared target.
pub fn zero_shot_record(ds: &DomainDataset, ctx: &TargetContext, seed: u64) -> Result<RunRecord> {
    let dj = ctx.backbone.config.joint_dim;
    let feats = gather_rows(&ctx.original, dj, &ctx.plan.test);
    Ok(RunRecord {
        target: ctx.plan.target,
        seed,
        accuracy: ctx.zero_shot.accuracy,
        zero_shot_accuracy: ctx.zero_shot.accuracy,
        val_accuracy: None,
        best_iteration: None,
        theta: None,
        initial_loss: None,
        separability: separability_of(ds, &ctx.plan.test, &feats, dj)?,
        checkpoints: Vec::new(),
        schedule: Vec::new(),
    })
}

/// Trains one seed on a prepared target and evaluates it on the held-out domain.
pub fn run_single(ds: &DomainDataset, ctx: &TargetContext, cfg: &TrainConfig, seed: u64) -> Result<(RunRecord, TrainOutcome, Vec<f64>)> {
    let out = train_tpl(ds, ctx, cfg, seed)?;
    let dj = ctx.backbone.config.joint_dim;
    let test = &ctx.plan.test;
    let orig = gather_rows(&ctx.original, dj, test);
    let (rep, fused) = evaluate_indices(&out.model, &ctx.backbone, ds, test, &orig, &ctx.text, &EvalOptions::from(cfg))?;
    info!(
        "target {} seed {seed} {}: accuracy {:.2}% (zero-shot {:.2}%)",
        ctx.plan.target, cfg.strategy, rep.accuracy, ctx.zero_shot.accuracy
    );
    let record = RunRecord {
        target: ctx.plan.target,
        seed,
        accuracy: rep.accuracy,
        zero_shot_accuracy: ctx.zero_shot.accuracy,
        val_accuracy: Some(out.val_accuracy),
        best_iteration: Some(out.best_iteration),
        theta: Some(out.theta),
        initial_loss: Some(out.initial_loss),
        separability: separability_of(ds, test, &fused, dj)?,
        checkpoints: out.checkpoints.clone(),
        schedule: out.schedule.history.clone(),
    };
    Ok((record, out, fused))
}

/// Pretrains one backbone per held-out domain.
pub fn prepare_targets(ds: &DomainDataset, cfg: &TrainConfig) -> Result<Vec<TargetContext>> {
    let ids = ds.domain_ids();
    cfg.execution.try_map_range(ids.len(), |k| TargetContext::prepare(ds, ids[k], cfg))
}

fn run_on(ds: &DomainDataset, contexts: &[TargetContext], label: &str, cfg: Option<&TrainConfig>, seeds: &[u64], exec: crate::exec::Execution) -> Result<RunResult> {
    let jobs: Vec<(usize, u64)> = (0..contexts.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let records = exec.try_map_range(jobs.len(), |j| {
        let (c, seed) = jobs[j];
        match cfg {
            None => zero_shot_record(ds, &contexts[c], seed),
            Some(cfg) => run_single(ds, &contexts[c], cfg, seed).map(|r| r.0),
        }
    })?;
    RunResult::from_records(label, records)
}

/// Leave-one-domain-out over every domain and every configured seed.
pub fn run_protocol(ds: &DomainDataset, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let contexts = prepare_targets(ds, cfg)?;
    run_on(ds, &contexts, cfg.strategy.as_str(), Some(cfg), &cfg.seeds, cfg.execution)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub arms: BTreeMap<Arm, RunResult>,
}

impl AblationResult {
    pub fn arm(&self, arm: Arm) -> &RunResult {
        &self.arms[&arm]
    }

    pub fn prompt_design(&self) -> Vec<&RunResult> {
        Arm::PROMPT_DESIGN.iter().map(|a| self.arm(*a)).collect()
    }

    /// Strategy rows, labelled by strategy name.
    pub fn strategies(&self) -> Vec<RunResult> {
        Arm::STRATEGIES
            .iter()
            .map(|(a, k)| RunResult {
                label: k.as_str().to_string(),
                ..self.arm(*a).clone()
            })
            .collect()
    }

    pub fn tables(&self) -> String {
        let strategies = self.strategies();
        format!(
            "{}\n{}",
            format_table("prompt designs (target accuracy, %)", &self.prompt_design()),
            format_table("learning strategies (target accuracy, %)", &strategies.iter().collect::<Vec<_>>())
        )
    }

    /// `table,label,target,mean,std` with `avg` as the last target of each row.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("table,label,target,mean,std\n");
        let strategies = self.strategies();
        let tables: [(&str, Vec<&RunResult>); 2] = [
            ("prompt_design", self.prompt_design()),
            ("strategy", strategies.iter().collect()),
        ];
        for (name, rows) in tables {
            for r in rows {
                for t in &r.targets {
                    let _ = writeln!(s, "{name},{},{},{:?},{}", r.label, t.target, t.mean, t.std.map(|v| format!("{v:?}")).unwrap_or_default());
                }
                let _ = writeln!(s, "{name},{},avg,{:?},{}", r.label, r.grand_mean, r.grand_std.map(|v| format!("{v:?}")).unwrap_or_default());
            }
        }
        s
    }
}

/// Every arm on every held-out domain and seed, sharing one pretrained
/// backbone per target.
pub fn run_ablation(ds: &DomainDataset, cfg: &TrainConfig) -> Result<AblationResult> {
    cfg.validate()?;
    let contexts = prepare_targets(ds, cfg)?;
    run_ablation_on(ds, &contexts, cfg)
}

pub fn run_ablation_on(ds: &DomainDataset, contexts: &[TargetContext], cfg: &TrainConfig) -> Result<AblationResult> {
    let mut arms = BTreeMap::new();
    for arm in Arm::ALL {
        let arm_cfg = arm.config(cfg);
        info!("ablation arm {arm}");
        let r = run_on(ds, contexts, arm.as_str(), arm_cfg.as_ref(), &cfg.seeds, cfg.execution)?;
        arms.insert(arm, r);
    }
    Ok(AblationResult { arms })
}
