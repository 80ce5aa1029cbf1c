mod common;

use std::collections::BTreeMap;

use common::{procrustes, randn, rng, unit};
use rand_distr::{Distribution, StandardNormal};
use tpl_core::analysis::{
    class_separability_metric, classical_mds, domain_invariance_metric, export_report, gaussian_ellipse,
    load_feature_dump, save_feature_dump, Ellipse, FeatureDump, MetricTable, Report, SplitTag, CHI2_2_95,
};
use tpl_core::scheduler::ScheduleRecord;

fn seeded_dump(seed: u64, classes: u16, domains: u16, per: usize, dim: usize) -> FeatureDump {
    let mut d = FeatureDump::new(dim);
    let mut k = 0;
    for c in 1..=classes {
        for m in 1..=domains {
            for _ in 0..per {
                let mut row = randn(&[dim], 1.0, seed * 1000 + k).into_values();
                unit(&mut row);
                d.push(&row, c, m, SplitTag::Test, 0).unwrap();
                k += 1;
            }
        }
    }
    d
}

/// Mean over `outer` groups of the mean pairwise `(1 − cos)/2` between the
/// unit centroids of their `inner` groups, enumerated directly.
fn brute(d: &FeatureDump, outer_is_class: bool) -> BTreeMap<u16, f64> {
    let key = |i: usize| if outer_is_class { (d.classes[i], d.domains[i]) } else { (d.domains[i], d.classes[i]) };
    let mut sums: BTreeMap<(u16, u16), Vec<f64>> = BTreeMap::new();
    for i in 0..d.len() {
        let e = sums.entry(key(i)).or_insert_with(|| vec![0.0; d.dim]);
        e.iter_mut().zip(d.row(i)).for_each(|(a, x)| *a += x);
    }
    sums.values_mut().for_each(|v| unit(v));
    let mut out = BTreeMap::new();
    let outers: Vec<u16> = sums.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for o in outers {
        let cs: Vec<&Vec<f64>> = sums.iter().filter(|(k, _)| k.0 == o).map(|(_, v)| v).collect();
        let mut terms = Vec::new();
        for a in 0..cs.len() {
            for b in a + 1..cs.len() {
                let cos: f64 = cs[a].iter().zip(cs[b]).map(|(x, y)| x * y).sum();
                terms.push((1.0 - cos) / 2.0);
            }
        }
        if !terms.is_empty() {
            out.insert(o, terms.iter().sum::<f64>() / terms.len() as f64);
        }
    }
    out
}

fn assert_table(t: &MetricTable, want: &BTreeMap<u16, f64>) {
    assert_eq!(t.values.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (k, v) in want {
        assert!((t.values[k] - v).abs() < 1e-12, "group {k}: {} vs {v}", t.values[k]);
    }
    let mean = want.values().sum::<f64>() / want.len() as f64;
    assert!((t.mean - mean).abs() < 1e-12);
}

#[test]
fn metrics_match_enumeration() {
    let d = seeded_dump(3, 4, 3, 5, 6);
    assert_table(&domain_invariance_metric(&d).unwrap(), &brute(&d, true));
    assert_table(&class_separability_metric(&d).unwrap(), &brute(&d, false));
}

#[test]
fn metrics_ignore_a_common_rotation() {
    let d = seeded_dump(4, 3, 3, 4, 3);
    // rotation about the z axis, then about x
    let (a, b) = (0.7f64, -1.1f64);
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
    let mut r = d.clone();
    for i in 0..d.len() {
        let v = d.row(i);
        let z: Vec<f64> = (0..3).map(|j| (0..3).map(|k| rz[j][k] * v[k]).sum()).collect();
        let x: Vec<f64> = (0..3).map(|j| (0..3).map(|k| rx[j][k] * z[k]).sum()).collect();
        r.features[i * 3..(i + 1) * 3].copy_from_slice(&x);
    }
    let (p, q) = (domain_invariance_metric(&d).unwrap(), domain_invariance_metric(&r).unwrap());
    assert!((p.mean - q.mean).abs() < 1e-12);
    let (p, q) = (class_separability_metric(&d).unwrap(), class_separability_metric(&r).unwrap());
    assert!((p.mean - q.mean).abs() < 1e-12);
}

#[test]
fn mds_recovers_planted_plane() {
    let n = 25;
    let dim = 6;
    let planted: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let v = randn(&[2], 1.0, 100 + i as u64);
            [3.0 * v.values()[0], v.values()[1]]
        })
        .collect();
    // orthonormal 2-frame in 6-D plus an offset
    let mut e1 = randn(&[dim], 1.0, 1).into_values();
    unit(&mut e1);
    let mut e2 = randn(&[dim], 1.0, 2).into_values();
    let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
    e2.iter_mut().zip(&e1).for_each(|(b, a)| *b -= dot * a);
    unit(&mut e2);
    let offset = randn(&[dim], 2.0, 3).into_values();
    let points: Vec<f64> = planted
        .iter()
        .flat_map(|p| (0..dim).map(|k| offset[k] + p[0] * e1[k] + p[1] * e2[k]).collect::<Vec<_>>())
        .collect();
    let emb = classical_mds(&points, dim).unwrap();
    assert!(emb.eigenvalues[0] >= emb.eigenvalues[1] && emb.eigenvalues[1] >= -1e-9);
    let err = procrustes(&emb.coords, &planted);
    assert!(err < 1e-6, "Procrustes residual {err:e}");
    // a mirrored input still aligns
    let mirrored: Vec<[f64; 2]> = planted.iter().map(|p| [-p[0], p[1]]).collect();
    assert!(procrustes(&emb.coords, &mirrored) < 1e-6);
}

#[test]
fn mds_of_identical_points_is_the_origin() {
    let emb = classical_mds(&[0.3, -0.2, 0.3, -0.2, 0.3, -0.2, 0.3, -0.2], 2).unwrap();
    assert!(emb.coords.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));
}

#[test]
fn isotropic_sample_ellipse() {
    let mut r = rng(42);
    let pts: Vec<[f64; 2]> = (0..50_000)
        .map(|_| [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)])
        .collect();
    let want = CHI2_2_95.sqrt();
    assert!((want - 2.4477).abs() < 1e-4);
    match gaussian_ellipse(&pts).unwrap() {
        Ellipse::Fitted { semi_axes, .. } => {
            for a in semi_axes {
                assert!((a - want).abs() / want < 0.03, "semi-axis {a}");
            }
        }
        e => panic!("{e:?}"),
    }
    let line: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 2.0 * i as f64]).collect();
    assert!(matches!(gaussian_ellipse(&line).unwrap(), Ellipse::Degenerate { .. }));
}

#[test]
fn ellipse_rotates_with_its_points() {
    let pts: Vec<[f64; 2]> = (0..200)
        .map(|i| {
            let v = randn(&[2], 1.0, i);
            [2.0 * v.values()[0] + 0.5 * v.values()[1], 0.7 * v.values()[1]]
        })
        .collect();
    let turned: Vec<[f64; 2]> = pts.iter().map(|p| [-p[1], p[0]]).collect();
    let (Ellipse::Fitted { semi_axes: a, orientation: o, .. }, Ellipse::Fitted { semi_axes: b, orientation: q, .. }) =
        (gaussian_ellipse(&pts).unwrap(), gaussian_ellipse(&turned).unwrap())
    else {
        panic!("degenerate")
    };
    assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    let turn = (q - o).rem_euclid(std::f64::consts::PI);
    assert!((turn - std::f64::consts::FRAC_PI_2).abs() < 1e-12, "turned by {turn}");
}

fn full_report() -> Report {
    let d = seeded_dump(5, 3, 3, 4, 4);
    let emb = classical_mds(&d.features, d.dim).unwrap();
    Report {
        invariance: Some(domain_invariance_metric(&d).unwrap()),
        separability: Some(class_separability_metric(&d).unwrap()),
        embedding: Some((emb, d.classes.clone(), d.domains.clone())),
        schedule: (0..4)
            .map(|k| ScheduleRecord { t: 10 * k, d: 0.3 / (k + 1) as f64, lambda: 0.1 * k as f64, w_v: 1.0 / (1.0 + 0.1 * k as f64), w_s: 1.0 - 1.0 / (1.0 + 0.1 * k as f64) })
            .collect(),
    }
}

#[test]
fn csv_exports_reparse_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let rep = full_report();
    let files = export_report(&rep, dir.path()).unwrap();
    assert_eq!(files.len(), 8);
    let parse = |name: &str| -> Vec<Vec<String>> {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    };
    let inv = rep.invariance.as_ref().unwrap();
    for row in parse("invariance.csv") {
        let v: f64 = row[1].parse().unwrap();
        if row[0] == "mean" {
            assert_eq!(v.to_bits(), inv.mean.to_bits());
        } else {
            assert_eq!(v.to_bits(), inv.values[&row[0].parse::<u16>().unwrap()].to_bits());
        }
    }
    let (emb, classes, _) = rep.embedding.as_ref().unwrap();
    for row in parse("embedding.csv") {
        let i: usize = row[0].parse().unwrap();
        assert_eq!(row[1].parse::<f64>().unwrap().to_bits(), emb.coords[i][0].to_bits());
        assert_eq!(row[2].parse::<f64>().unwrap().to_bits(), emb.coords[i][1].to_bits());
        assert_eq!(row[3].parse::<u16>().unwrap(), classes[i]);
    }
    for (row, rec) in parse("schedule.csv").iter().zip(&rep.schedule) {
        let vals: Vec<f64> = row[1..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(vals, [rec.d, rec.lambda, rec.w_v, rec.w_s]);
    }
}

#[test]
fn exports_are_deterministic_and_atomic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rep = full_report();
    export_report(&rep, a.path()).unwrap();
    export_report(&rep, b.path()).unwrap();
    for f in ["invariance.svg", "separability.svg", "embedding.svg", "schedule.svg"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let target = a.path().join("empty");
    assert!(export_report(&Report::default(), &target).is_err());
    assert!(!target.exists());
}

#[test]
fn dump_roundtrips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = seeded_dump(6, 2, 2, 3, 5);
    d.push(&[f64::MIN_POSITIVE, -0.0, 1e300, 0.1, -7.5], 9, 4, SplitTag::Probe, 1234).unwrap();
    d.metadata = serde_json::json!({ "note": "x", "values": [0.1, 1e-17] });
    save_feature_dump(&d, dir.path()).unwrap();
    let back = load_feature_dump(dir.path()).unwrap();
    assert_eq!(back.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), d.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!((back.classes, back.domains, back.splits, back.iterations), (d.classes, d.domains, d.splits, d.iterations));
    assert_eq!(back.metadata, d.metadata);
    // a truncated buffer is refused
    let buf = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "tplf")).unwrap();
    let bytes = std::fs::read(&buf).unwrap();
    std::fs::write(&buf, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_feature_dump(dir.path()).is_err());
}
