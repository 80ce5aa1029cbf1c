use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use tpl_core::analysis::{
    class_separability_metric, domain_invariance_metric, export_report, load_feature_dump, mds_of_dump,
    save_feature_dump, FeatureDump, Report, SplitTag,
};
use tpl_core::data::{generate_synthetic, load_dataset, make_splits, save_dataset, DomainDataset, SynthConfig};
use tpl_core::exec::Execution;
use tpl_core::harness::io::{load_backbone, load_tuned, save_backbone, save_tuned};
use tpl_core::harness::protocol::run_single;
use tpl_core::harness::{evaluate, pretrain_backbone, run_ablation, EvalOptions, RunResult, TargetContext};
use tpl_core::scheduler::{ScheduleRecord, StrategyKind};

use crate::config::{CliConfig, Resolver};
use crate::{emit, AblateArgs, AnalyzeArgs, CliError, ConfigArgs, EvalArgs, GenDataArgs, PretrainArgs, TrainArgs};

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(CliError::internal)?;
    fs::write(path, s + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, s: &str) -> Result<(), CliError> {
    fs::write(path, s).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::usage(format!("{flag} is required (flag or config file)")))
}

fn build_info() -> serde_json::Value {
    json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "git": env!("TPL_GIT_REV"),
        "parallel": Execution::parallel_available(),
    })
}

/// Echoes the resolved configuration and the build identifier.
fn write_run_files(out: &Path, cfg: &CliConfig) -> Result<(), CliError> {
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("build.json"), &build_info())
}

fn resolver(c: &ConfigArgs) -> Result<Resolver, CliError> {
    Resolver::new(c.preset, c.config.as_deref(), &c.set)
}

fn open_dataset(p: &Path) -> Result<DomainDataset, CliError> {
    load_dataset(p).map_err(|e| match e.kind() {
        tpl_core::error::ErrorKind::Usage => CliError::from(e),
        _ => CliError::data(format!("{}: {e}", p.display())),
    })
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        classes: a.classes,
        domains: a.domains,
        per_cell: a.per_cell,
        image_size: a.image_size,
    };
    let ds = generate_synthetic(&cfg, a.seed, Execution::default())?;
    save_dataset(&ds, &a.out)?;
    let summary = json!({
        "out": a.out,
        "images": ds.len(),
        "config_hash": ds.manifest.config_hash,
        "oracle": ds.manifest.oracle,
    });
    emit(serde_json::to_string_pretty(&summary).map_err(CliError::internal)?);
    Ok(())
}

fn backbone_metadata(ds: &DomainDataset, cfg: &CliConfig, target: u16, report: &impl Serialize) -> serde_json::Value {
    json!({
        "target": target,
        "split_seed": cfg.train.split_seed,
        "val_fraction": cfg.train.val_fraction,
        "dataset": ds.manifest.config_hash,
        "pretrain": report,
    })
}

pub fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let mut r = resolver(&a.config)?;
    r.set("data", a.data)?;
    r.set("target_domain", a.target_domain)?;
    r.set("out", a.out)?;
    let cfg = r.finish()?;
    let (data, target, out) = (
        required(&cfg.data, "--data")?,
        required(&cfg.target_domain, "--target-domain")?,
        required(&cfg.out, "--out")?,
    );
    let ds = open_dataset(&data)?;
    let plan = make_splits(&ds, target, cfg.train.val_fraction, cfg.train.split_seed)?;
    let (backbone, report) = pretrain_backbone(&ds, &plan, &cfg.train.model, &cfg.train.pretrain, cfg.train.temperature)?;
    write_run_files(&out, &cfg)?;
    save_backbone(&out, &backbone, backbone_metadata(&ds, &cfg, target, &report))?;
    write_json(&out.join("pretrain.json"), &report)?;
    emit(
        json!({ "out": out, "target": target, "train_accuracy": report.train_accuracy, "fingerprint": report.fingerprint })
    );
    Ok(())
}

/// Loads a backbone and checks it was pretrained without `target`'s images
/// under the same split.
fn checked_backbone(path: &Path, ds: &DomainDataset, cfg: &CliConfig, target: u16) -> Result<tpl_core::encoders::Backbone, CliError> {
    let (backbone, meta) = load_backbone(path)?;
    let expect = backbone_metadata(ds, cfg, target, &());
    for key in ["target", "split_seed", "val_fraction", "dataset"] {
        if meta.get(key) != expect.get(key) {
            return Err(CliError::usage(format!(
                "backbone {} was pretrained with {key} = {}, this run needs {}",
                path.display(),
                meta.get(key).unwrap_or(&serde_json::Value::Null),
                expect[key]
            )));
        }
    }
    if backbone.config != cfg.train.model {
        return Err(CliError::usage("backbone model differs from train.model in the run config"));
    }
    Ok(backbone)
}

fn seed_dump(probe: &FeatureDump, ds: &DomainDataset, test: &[usize], fused: &[f64], final_t: usize, meta: serde_json::Value) -> Result<FeatureDump, CliError> {
    let mut dump = probe.clone();
    let dim = dump.dim;
    for (k, &i) in test.iter().enumerate() {
        dump.push(&fused[k * dim..(k + 1) * dim], ds.labels[i], ds.domains[i], SplitTag::Test, final_t as u32)?;
    }
    dump.metadata = meta;
    Ok(dump)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut r = resolver(&a.config)?;
    r.set("data", a.data)?;
    r.set("backbone", a.backbone)?;
    r.set("target_domain", a.target_domain)?;
    r.set("out", a.out)?;
    r.set("train.seeds", a.seed.map(|s| vec![s]))?;
    if let Some(s) = &a.strategy {
        r.set("train.strategy", Some(s.parse::<StrategyKind>()?))?;
    }
    r.set("train.per_domain_weights", a.per_domain_weights)?;
    r.set("train.prompt_ensemble", a.ensemble)?;
    r.set("train.eval_average", a.eval_average)?;
    let cfg = r.finish()?;
    let (data, target, out) = (
        required(&cfg.data, "--data")?,
        required(&cfg.target_domain, "--target-domain")?,
        required(&cfg.out, "--out")?,
    );
    let ds = open_dataset(&data)?;
    let t = &cfg.train;
    let plan = make_splits(&ds, target, t.val_fraction, t.split_seed)?;
    write_run_files(&out, &cfg)?;
    let ctx = match &cfg.backbone {
        Some(p) => TargetContext::with_backbone(&ds, plan, checked_backbone(p, &ds, &cfg, target)?, None, t)?,
        None => {
            let (bb, report) = pretrain_backbone(&ds, &plan, &t.model, &t.pretrain, t.temperature)?;
            save_backbone(&out.join("backbone"), &bb, backbone_metadata(&ds, &cfg, target, &report))?;
            TargetContext::with_backbone(&ds, plan, bb, Some(report), t)?
        }
    };

    let mut records = Vec::new();
    for &seed in &t.seeds {
        let (record, outcome, fused) = run_single(&ds, &ctx, t, seed)?;
        let dir = out.join(format!("seed-{seed}"));
        let extra = json!({ "target": target, "seed": seed, "eval": EvalOptions::from(t) });
        save_tuned(&dir.join("model"), &outcome.model, &ctx.backbone, extra)?;
        let meta = json!({
            "target": target,
            "seed": seed,
            "strategy": t.strategy,
            "schedule": outcome.schedule.history,
        });
        let dump = seed_dump(&outcome.probe, &ds, &ctx.plan.test, &fused, t.iterations, meta)?;
        save_feature_dump(&dump, &dir.join("features"))?;
        write_text(&dir.join("schedule.csv"), &outcome.schedule.history_csv())?;
        records.push(record);
    }
    let result = RunResult::from_records(t.strategy.as_str(), records)?;
    write_json(&out.join("run_result.json"), &result)?;
    write_text(&out.join("runs.csv"), &result.runs_csv())?;
    emit(
        json!({
            "out": out,
            "target": target,
            "strategy": t.strategy,
            "accuracy": result.grand_mean,
            "zero_shot_accuracy": ctx.zero_shot.accuracy,
        })
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (backbone, _) = load_backbone(&a.backbone)?;
    let (model, meta) = load_tuned(&a.model, &backbone)?;
    let ds = open_dataset(&a.data)?;
    let mut opts: EvalOptions = match meta.extra.get("eval") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::data(format!("model eval options: {e}")))?,
        None => EvalOptions::from(&tpl_core::harness::TrainConfig::default()),
    };
    if let Some(v) = a.eval_average {
        opts.eval_average = v;
    }
    if let Some(t) = meta.extra.get("target").and_then(|v| v.as_u64()) {
        if t != a.target_domain as u64 {
            warn!("model was tuned with domain {t} held out; evaluating on domain {}", a.target_domain);
        }
    }
    let rep = evaluate(&model, &backbone, &ds, a.target_domain, &opts)?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(out, &rep)?;
    }
    emit(
        json!({ "target": a.target_domain, "accuracy": rep.accuracy, "correct": rep.correct, "total": rep.total })
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let mut r = resolver(&a.config)?;
    r.set("data", a.data)?;
    r.set("out", a.out)?;
    let cfg = r.finish()?;
    let (data, out) = (required(&cfg.data, "--data")?, required(&cfg.out, "--out")?);
    let ds = open_dataset(&data)?;
    write_run_files(&out, &cfg)?;
    let res = run_ablation(&ds, &cfg.train)?;
    write_json(&out.join("ablation.json"), &res)?;
    let tables = res.tables();
    write_text(&out.join("tables.txt"), &tables)?;
    write_text(&out.join("summary.csv"), &res.summary_csv())?;
    let mut runs = String::new();
    for (k, r) in res.arms.values().enumerate() {
        let csv = r.runs_csv();
        // one header for the concatenation
        runs.push_str(if k == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
    }
    write_text(&out.join("runs.csv"), &runs)?;
    emit(tables.trim_end());
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let dump = load_feature_dump(&a.dump)?;
    if dump.is_empty() {
        return Err(CliError::data(format!("{}: feature dump is empty", a.dump.display())));
    }
    let last = *dump.iterations.iter().max().expect("nonempty");
    let latest = dump.filter(|_, t| t == last);
    let invariance = domain_invariance_metric(&latest)?;
    let separability = class_separability_metric(&latest)?;

    // invariance of the source probe at every recorded iteration
    let mut trace: BTreeMap<u32, f64> = BTreeMap::new();
    for t in dump.iteration_tags() {
        let rows = dump.filter(|s, it| it == t && s != SplitTag::Test);
        if rows.is_empty() {
            continue;
        }
        match domain_invariance_metric(&rows) {
            Ok(m) => {
                trace.insert(t, m.mean);
            }
            Err(e) => info!("iteration {t}: {e}"),
        }
    }

    let (embedding, keep) = mds_of_dump(&latest, a.max_points.max(3))?;
    let classes = keep.iter().map(|&i| latest.classes[i]).collect();
    let domains = keep.iter().map(|&i| latest.domains[i]).collect();
    let schedule: Vec<ScheduleRecord> = match dump.metadata.get("schedule") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::data(format!("dump schedule: {e}")))?,
        None => Vec::new(),
    };
    let report = Report {
        invariance: Some(invariance.clone()),
        separability: Some(separability.clone()),
        embedding: Some((embedding, classes, domains)),
        schedule,
    };
    let mut files: Vec<PathBuf> = export_report(&report, &a.out)?;
    let mut csv = String::from("iteration,domain_invariance\n");
    for (t, v) in &trace {
        csv.push_str(&format!("{t},{v:?}\n"));
    }
    let trace_path = a.out.join("invariance_trace.csv");
    write_text(&trace_path, &csv)?;
    files.push(trace_path);
    let metrics_path = a.out.join("metrics.json");
    write_json(
        &metrics_path,
        &json!({ "iteration": last, "invariance": invariance, "separability": separability, "invariance_trace": trace }),
    )?;
    files.push(metrics_path);
    emit(json!({ "files": files }));
    Ok(())
}
