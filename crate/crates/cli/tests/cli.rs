use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tpl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tpl")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = tpl(dir, args);
    assert!(o.status.success(), "tpl {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--preset", "quick",
    "--set", "train.model.image_size=16",
    "--set", "train.model.num_classes=3",
    "--set", "train.pretrain.iterations=30",
    "--set", "train.iterations=12",
    "--set", "train.checkpoint_every=4",
    "--set", "train.probe_size=48",
    "--set", "train.seeds=[0]",
];

fn tiny_data(dir: &Path) {
    ok(dir, &["gen-data", "--classes", "3", "--domains", "3", "--per-cell", "12", "--image-size", "16", "--seed", "7", "--out", "data"]);
}

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: Vec<String>) -> String {
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn gen_data_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(d.path(), &["gen-data", "--classes", "2", "--domains", "3", "--per-cell", "8", "--image-size", "8", "--seed", "7", "--out", out]);
    }
    let names = |p: &Path| {
        let mut v: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (na, nb) = (names(&d.path().join("a")), names(&d.path().join("b")));
    assert_eq!(na, nb);
    for n in na {
        assert_eq!(fs::read(d.path().join("a").join(&n)).unwrap(), fs::read(d.path().join("b").join(&n)).unwrap());
    }
}

#[test]
fn exit_codes_and_structured_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = tpl(d.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tpl(d.path(), &["train", "--data", "missing", "--target-domain", "1", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(err["kind"], "data");
    let o = tpl(d.path(), &["train", "--data", "missing", "--out", "x", "--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tpl(d.path(), &["train", "--out", "x", "--strategy", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tpl(d.path(), &["train", "--out", "x", "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tpl(d.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn help_json_lists_every_flag() {
    let d = tempfile::tempdir().unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(d.path(), &["--help-json"])).unwrap();
    let subs: Vec<&str> = v["subcommands"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(subs, ["gen-data", "pretrain", "train", "eval", "ablate", "analyze"]);
    let train = v["subcommands"].as_array().unwrap().iter().find(|s| s["name"] == "train").unwrap();
    let longs: Vec<&str> = train["args"].as_array().unwrap().iter().filter_map(|a| a["long"].as_str()).collect();
    for flag in ["data", "backbone", "config", "target-domain", "seed", "strategy", "per-domain-weights", "ensemble", "eval-average", "out", "set"] {
        assert!(longs.contains(&flag), "missing --{flag}");
    }
}

#[test]
fn pipeline_replays_exactly_and_leaves_inputs_alone() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    tiny_data(p);
    let data_before: Vec<Vec<u8>> = ["manifest.json", "data.tpld"].iter().map(|f| fs::read(p.join("data").join(f)).unwrap()).collect();

    run(p, with(&["pretrain", "--data", "data", "--target-domain", "2", "--out", "bb"], TINY));
    let bb_before = fs::read(p.join("bb/manifest.json")).unwrap();
    run(p, with(&["train", "--data", "data", "--backbone", "bb", "--target-domain", "2", "--seed", "5", "--out", "r1"], TINY));
    for f in ["config.json", "build.json", "run_result.json", "runs.csv", "seed-5/schedule.csv", "seed-5/model/manifest.json", "seed-5/features/manifest.json"] {
        assert!(p.join("r1").join(f).exists(), "{f}");
    }

    // replay from the echoed config
    ok(p, &["train", "--config", "r1/config.json", "--out", "r2"]);
    for f in ["run_result.json", "runs.csv", "seed-5/schedule.csv"] {
        assert_eq!(fs::read(p.join("r1").join(f)).unwrap(), fs::read(p.join("r2").join(f)).unwrap(), "{f}");
    }

    let rr: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r1/run_result.json")).unwrap()).unwrap();
    let ev: serde_json::Value = serde_json::from_str(&ok(
        p,
        &["eval", "--model", "r1/seed-5/model", "--backbone", "bb", "--data", "data", "--target-domain", "2"],
    ))
    .unwrap();
    assert_eq!(ev["accuracy"], rr["grand_mean"]);

    // a backbone pretrained for another target is refused
    let o = tpl(p, &with(&["train", "--data", "data", "--backbone", "bb", "--target-domain", "1", "--out", "r3"], TINY).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(1));

    let out: serde_json::Value = serde_json::from_str(&ok(p, &["analyze", "--dump", "r1/seed-5/features", "--out", "an"])).unwrap();
    assert!(out["files"].as_array().unwrap().len() >= 8);
    let sched = fs::read_to_string(p.join("an/schedule.csv")).unwrap();
    assert_eq!(sched, fs::read_to_string(p.join("r1/seed-5/schedule.csv")).unwrap());

    let data_after: Vec<Vec<u8>> = ["manifest.json", "data.tpld"].iter().map(|f| fs::read(p.join("data").join(f)).unwrap()).collect();
    assert_eq!(data_before, data_after);
    assert_eq!(bb_before, fs::read(p.join("bb/manifest.json")).unwrap());
}

#[test]
fn ablate_emits_six_design_rows_and_five_strategy_rows() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    tiny_data(p);
    run(p, with(&["ablate", "--data", "data", "--out", "ab"], TINY));
    let summary = fs::read_to_string(p.join("ab/summary.csv")).unwrap();
    let avg = |table: &str| summary.lines().filter(|l| l.starts_with(table) && l.split(',').nth(2) == Some("avg")).count();
    assert_eq!(avg("prompt_design"), 6);
    assert_eq!(avg("strategy"), 5);
    let labels: Vec<&str> = summary
        .lines()
        .filter(|l| l.starts_with("strategy") && l.contains(",avg,"))
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(labels, ["joint", "alternating", "two_stage", "cumulative", "transitive"]);
    assert!(p.join("ab/ablation.json").exists() && p.join("ab/tables.txt").exists());
}
