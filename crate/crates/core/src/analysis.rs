//! Feature diagnostics: domain-invariance and class-separability metrics,
//! classical MDS, Gaussian confidence ellipses, and CSV/SVG export.
//!
//! A feature dump directory holds `manifest.json` and `features.tplf`:
//! `b"TPLF"`, a version byte, then `f64` features, `u16` class ids, `u16`
//! domain ids, `u8` split tags and `u32` iteration tags, all little-endian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TplError};
use crate::rng;
use crate::scheduler::{grouped_centroid_distance, LabeledFeatures, ScheduleRecord};

pub const DUMP_MAGIC: &[u8; 4] = b"TPLF";
pub const DUMP_VERSION: u8 = 1;
const DUMP_MANIFEST: &str = "manifest.json";
const DUMP_BUFFER: &str = "features.tplf";

/// 0.95 quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_2_95: f64 = 5.991;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Probe,
}

impl SplitTag {
    fn code(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Test => 2,
            SplitTag::Probe => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => SplitTag::Train,
            1 => SplitTag::Val,
            2 => SplitTag::Test,
            3 => SplitTag::Probe,
            _ => return Err(TplError::format("feature dump", format!("unknown split tag {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpManifest {
    pub format: String,
    pub version: u8,
    pub buffer: String,
    pub buffer_bytes: usize,
    pub rows: usize,
    pub dim: usize,
    /// Free-form provenance (arm, target, seed, ...).
    pub metadata: serde_json::Value,
}

/// Feature rows tagged with class, domain, split and iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDump {
    pub dim: usize,
    pub features: Vec<f64>,
    pub classes: Vec<u16>,
    pub domains: Vec<u16>,
    pub splits: Vec<SplitTag>,
    pub iterations: Vec<u32>,
    pub metadata: serde_json::Value,
}

impl FeatureDump {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn push(&mut self, feature: &[f64], class: u16, domain: u16, split: SplitTag, iteration: u32) -> Result<()> {
        if feature.len() != self.dim {
            return Err(TplError::ShapeMismatch {
                op: "feature_dump",
                lhs: vec![feature.len()],
                rhs: vec![self.dim],
            });
        }
        self.features.extend_from_slice(feature);
        self.classes.push(class);
        self.domains.push(domain);
        self.splits.push(split);
        self.iterations.push(iteration);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows whose tags satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(SplitTag, u32) -> bool) -> FeatureDump {
        let mut out = FeatureDump::new(self.dim);
        out.metadata = self.metadata.clone();
        for i in 0..self.len() {
            if keep(self.splits[i], self.iterations[i]) {
                out.push(self.row(i), self.classes[i], self.domains[i], self.splits[i], self.iterations[i])
                    .expect("same dim");
            }
        }
        out
    }

    pub fn iteration_tags(&self) -> Vec<u32> {
        let mut t = self.iterations.clone();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.dim == 0
            || self.features.len() != n * self.dim
            || self.domains.len() != n
            || self.splits.len() != n
            || self.iterations.len() != n
        {
            return Err(TplError::format("feature dump", "inconsistent row counts or dimension"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(TplError::format("feature dump", "non-finite feature value"));
        }
        Ok(())
    }

    fn keys(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.classes.iter().map(|&c| c as usize).collect(),
            self.domains.iter().map(|&d| d as usize).collect(),
        )
    }
}

pub fn save_feature_dump(dump: &FeatureDump, dir: &Path) -> Result<()> {
    dump.validate()?;
    let mut buf = Vec::with_capacity(5 + dump.features.len() * 8 + dump.len() * 9);
    buf.extend_from_slice(DUMP_MAGIC);
    buf.push(DUMP_VERSION);
    for v in &dump.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in dump.classes.iter().chain(&dump.domains) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(dump.splits.iter().map(|s| s.code()));
    for v in &dump.iterations {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = DumpManifest {
        format: "tplf".into(),
        version: DUMP_VERSION,
        buffer: DUMP_BUFFER.into(),
        buffer_bytes: buf.len(),
        rows: dump.len(),
        dim: dump.dim,
        metadata: dump.metadata.clone(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(DUMP_BUFFER), &buf)?;
    fs::write(dir.join(DUMP_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_feature_dump(dir: &Path) -> Result<FeatureDump> {
    let m: DumpManifest = serde_json::from_str(&fs::read_to_string(dir.join(DUMP_MANIFEST))?)?;
    let bytes = fs::read(dir.join(&m.buffer))?;
    if bytes.len() < 5 || &bytes[..4] != DUMP_MAGIC {
        return Err(TplError::format("feature dump", "bad magic bytes (expected TPLF)"));
    }
    if bytes[4] != DUMP_VERSION || m.version != DUMP_VERSION {
        return Err(TplError::format("feature dump", format!("unsupported version {}", bytes[4])));
    }
    let (n, d) = (m.rows, m.dim);
    let expected = 5 + n * d * 8 + n * (2 + 2 + 1 + 4);
    if bytes.len() != expected {
        return Err(TplError::Truncated {
            what: "feature dump buffer".into(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut at = 5;
    let mut take = |len: usize| {
        let s = &bytes[at..at + len];
        at += len;
        s
    };
    let features = take(n * d * 8)
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let u16s = |s: &[u8]| -> Vec<u16> { s.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect() };
    let classes = u16s(take(n * 2));
    let domains = u16s(take(n * 2));
    let splits = take(n).iter().map(|&c| SplitTag::from_code(c)).collect::<Result<_>>()?;
    let iterations = take(n * 4)
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let dump = FeatureDump {
        dim: d,
        features,
        classes,
        domains,
        splits,
        iterations,
        metadata: m.metadata,
    };
    dump.validate()?;
    Ok(dump)
}

// ---------------------------------------------------------------------------
// metrics

/// A per-group metric with its mean over groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub name: String,
    /// Class id (invariance) or domain id (separability) → value.
    pub values: BTreeMap<u16, f64>,
    pub mean: f64,
    /// Groups without enough members to measure.
    pub skipped: Vec<u16>,
}

/// Per class, mean pairwise centroid distance across domains. Lower is more invariant.
pub fn domain_invariance_metric(dump: &FeatureDump) -> Result<MetricTable> {
    dump.validate()?;
    let (classes, domains) = dump.keys();
    let f = LabeledFeatures::new(dump.dim, &dump.features, &classes, &domains)?;
    let values = grouped_centroid_distance(&f, &classes, &domains);
    let mut all: Vec<u16> = dump.classes.clone();
    all.sort_unstable();
    all.dedup();
    let skipped: Vec<u16> = all.into_iter().filter(|c| !values.contains_key(&(*c as usize))).collect();
    for c in &skipped {
        log::warn!("domain invariance: class {c} appears in a single domain; skipped");
    }
    table("domain_invariance", values, skipped)
}

/// Per domain, mean pairwise centroid distance across classes. Higher is more separable.
pub fn class_separability_metric(dump: &FeatureDump) -> Result<MetricTable> {
    dump.validate()?;
    let (classes, domains) = dump.keys();
    let f = LabeledFeatures::new(dump.dim, &dump.features, &classes, &domains)?;
    let values = grouped_centroid_distance(&f, &domains, &classes);
    if let Some(d) = dump.domains.iter().find(|d| !values.contains_key(&(**d as usize))) {
        return Err(TplError::invalid(format!("class separability: domain {d} has a single class")));
    }
    table("class_separability", values, Vec::new())
}

fn table(name: &str, values: BTreeMap<usize, f64>, skipped: Vec<u16>) -> Result<MetricTable> {
    if values.is_empty() {
        return Err(TplError::invalid(format!("{name}: no group could be measured")));
    }
    let mean = values.values().sum::<f64>() / values.len() as f64;
    Ok(MetricTable {
        name: name.into(),
        values: values.into_iter().map(|(k, v)| (k as u16, v)).collect(),
        mean,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// MDS

pub const MDS_RQ_TOL: f64 = 1e-10;
pub const MDS_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
}

fn sym_matvec(b: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = b[i * n..(i + 1) * n].iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading eigenpair of symmetric `b` by power iteration.
///
/// Converged when successive Rayleigh quotients differ by less than
/// `MDS_RQ_TOL` (relative to the matrix scale) and the eigen-residual
/// `‖Bv − λv‖` is below `1e-9` of that scale.
fn power_iteration(b: &[f64], n: usize, seed_tag: u64) -> Result<(f64, Vec<f64>)> {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max) * n as f64;
    if scale == 0.0 {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        return Ok((0.0, e));
    }
    let mut r = rng::stream(0x3D5, &[seed_tag]);
    let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; n];
    let mut prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for _ in 0..MDS_MAX_ITER {
        sym_matvec(b, n, &v, &mut w);
        let rq: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        residual = w.iter().zip(&v).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
        if (rq - prev).abs() < MDS_RQ_TOL * scale && residual < 1e-9 * scale {
            return Ok((rq, v));
        }
        prev = rq;
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok((0.0, v));
        }
        v.iter_mut().zip(&w).for_each(|(x, y)| *x = y / nw);
    }
    Err(TplError::Numerical(format!(
        "MDS eigensolver did not converge in {MDS_MAX_ITER} iterations (residual {residual:e})"
    )))
}

/// Classical MDS of row-major `points` (`n × dim`) to two dimensions.
pub fn classical_mds(points: &[f64], dim: usize) -> Result<Embedding2D> {
    if dim == 0 || !points.len().is_multiple_of(dim) || points.len() / dim < 3 {
        return Err(TplError::invalid("classical MDS needs at least 3 rows of a fixed dimension"));
    }
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    // B = −½ J D² J, by double centering
    let row_mean: Vec<f64> = (0..n).map(|i| d2[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = -0.5 * (d2[i * n + j] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let (l1, v1) = power_iteration(&b, n, 1)?;
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, v2) = power_iteration(&b, n, 2)?;
    let (s1, s2) = (l1.max(0.0).sqrt(), l2.max(0.0).sqrt());
    let coords = (0..n).map(|i| [v1[i] * s1, v2[i] * s2]).collect();
    Ok(Embedding2D {
        coords,
        eigenvalues: [l1, l2],
    })
}

/// [`classical_mds`] over (at most `max_rows`, evenly strided) rows of a dump;
/// returns the embedding and the chosen row indices.
pub fn mds_of_dump(dump: &FeatureDump, max_rows: usize) -> Result<(Embedding2D, Vec<usize>)> {
    dump.validate()?;
    let n = dump.len();
    let keep: Vec<usize> = if n <= max_rows {
        (0..n).collect()
    } else {
        (0..max_rows).map(|k| k * n / max_rows).collect()
    };
    let pts: Vec<f64> = keep.iter().flat_map(|&i| dump.row(i).iter().copied()).collect();
    Ok((classical_mds(&pts, dump.dim)?, keep))
}

// ---------------------------------------------------------------------------
// ellipses

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ellipse {
    Fitted {
        mean: [f64; 2],
        /// Major then minor 95% semi-axis.
        semi_axes: [f64; 2],
        /// Angle of the major axis, radians in `(−π/2, π/2]`.
        orientation: f64,
    },
    /// Covariance is (numerically) singular.
    Degenerate { mean: [f64; 2] },
}

pub fn gaussian_ellipse(points: &[[f64; 2]]) -> Result<Ellipse> {
    let n = points.len();
    if n < 3 {
        return Err(TplError::invalid("gaussian_ellipse needs at least 3 points"));
    }
    let nf = n as f64;
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / nf,
        points.iter().map(|p| p[1]).sum::<f64>() / nf,
    ];
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / (nf - 1.0), syy / (nf - 1.0), sxy / (nf - 1.0));
    let tr = sxx + syy;
    let disc = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    if !(l2 > 1e-12 * l1.max(f64::MIN_POSITIVE)) {
        return Ok(Ellipse::Degenerate { mean });
    }
    let mut orientation = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    if orientation <= -std::f64::consts::FRAC_PI_2 {
        orientation += std::f64::consts::PI;
    }
    Ok(Ellipse::Fitted {
        mean,
        semi_axes: [(CHI2_2_95 * l1).sqrt(), (CHI2_2_95 * l2).sqrt()],
        orientation,
    })
}

// ---------------------------------------------------------------------------
// export

/// Everything [`export_report`] can write; at least one metric is required.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub invariance: Option<MetricTable>,
    pub separability: Option<MetricTable>,
    /// Embedding with the class and domain id of each point.
    pub embedding: Option<(Embedding2D, Vec<u16>, Vec<u16>)>,
    pub schedule: Vec<ScheduleRecord>,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn svg_open(w: f64, h: f64) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n")
}

fn metric_csv(t: &MetricTable, key: &str) -> String {
    let mut s = format!("{key},{}\n", t.name);
    for (k, v) in &t.values {
        let _ = writeln!(s, "{k},{v:?}");
    }
    let _ = writeln!(s, "mean,{:?}", t.mean);
    s
}

fn bar_svg(t: &MetricTable, key: &str) -> String {
    let (w, h, pad) = (60.0 + 50.0 * t.values.len() as f64, 240.0, 30.0);
    let top = t.values.values().cloned().fold(1e-12, f64::max);
    let mut s = svg_open(w, h);
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"18\" font-size=\"12\">{} per {key}</text>", t.name);
    for (i, (k, v)) in t.values.iter().enumerate() {
        let bh = (h - 2.0 * pad - 20.0) * v / top;
        let x = pad + 50.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.3}\" y=\"{:.3}\" width=\"36\" height=\"{bh:.3}\" fill=\"{}\"/>",
            h - pad - bh,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, "<text x=\"{x:.3}\" y=\"{:.3}\" font-size=\"10\">{k}: {v:.4}</text>", h - pad + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn schedule_svg(hist: &[ScheduleRecord]) -> String {
    let (w, h, pad) = (480.0, 260.0, 36.0);
    let tmax = hist.iter().map(|r| r.t).max().unwrap_or(1).max(1) as f64;
    let px = |t: usize| pad + (w - 2.0 * pad) * t as f64 / tmax;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut s = svg_open(w, h);
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    for (name, color, get) in [
        ("d", "#d62728", (|r: &ScheduleRecord| r.d) as fn(&ScheduleRecord) -> f64),
        ("w_V", "#1f77b4", |r| r.w_v),
        ("w_S", "#2ca02c", |r| r.w_s),
    ] {
        let pts: Vec<String> = hist.iter().map(|r| format!("{:.3},{:.3}", px(r.t), py(get(r)))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"><title>{name}</title></polyline>",
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn scatter_svg(e: &Embedding2D, classes: &[u16], domains: &[u16]) -> Result<String> {
    let (w, h, pad) = (520.0, 520.0, 20.0);
    let xs = e.coords.iter().map(|c| c[0]);
    let ys = e.coords.iter().map(|c| c[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let map = |p: [f64; 2]| [pad + (w - 2.0 * pad) * (p[0] - x0) / span, pad + (h - 2.0 * pad) * (p[1] - y0) / span];
    let mut s = svg_open(w, h);
    for (i, c) in e.coords.iter().enumerate() {
        let [x, y] = map(*c);
        let color = PALETTE[classes[i] as usize % PALETTE.len()];
        // shape encodes the domain
        match domains[i] % 3 {
            0 => {
                let _ = writeln!(s, "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"3\" fill=\"{color}\"/>");
            }
            1 => {
                let _ = writeln!(s, "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"6\" height=\"6\" fill=\"{color}\"/>", x - 3.0, y - 3.0);
            }
            _ => {
                let _ = writeln!(
                    s,
                    "<polygon points=\"{:.3},{:.3} {:.3},{:.3} {:.3},{:.3}\" fill=\"{color}\"/>",
                    x,
                    y - 3.5,
                    x - 3.5,
                    y + 3.0,
                    x + 3.5,
                    y + 3.0
                );
            }
        }
    }
    let mut groups: BTreeMap<u16, Vec<[f64; 2]>> = BTreeMap::new();
    for (i, c) in e.coords.iter().enumerate() {
        groups.entry(classes[i]).or_default().push(*c);
    }
    for (k, pts) in groups {
        if pts.len() < 3 {
            continue;
        }
        if let Ellipse::Fitted { mean, semi_axes, orientation } = gaussian_ellipse(&pts)? {
            let [cx, cy] = map(mean);
            let f = (w - 2.0 * pad) / span;
            let _ = writeln!(
                s,
                "<ellipse cx=\"{cx:.3}\" cy=\"{cy:.3}\" rx=\"{:.3}\" ry=\"{:.3}\" transform=\"rotate({:.3} {cx:.3} {cy:.3})\" fill=\"none\" stroke=\"{}\"/>",
                semi_axes[0] * f,
                semi_axes[1] * f,
                orientation.to_degrees(),
                PALETTE[k as usize % PALETTE.len()]
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes CSV tables and SVG figures into `dir`; every file is rendered in
/// memory first, so invalid input leaves nothing behind.
pub fn export_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.invariance.is_none() && report.separability.is_none() {
        return Err(TplError::invalid("export_report: no metrics to export"));
    }
    for t in report.invariance.iter().chain(&report.separability) {
        if t.values.is_empty() || !t.mean.is_finite() {
            return Err(TplError::invalid(format!("export_report: metric {} is empty", t.name)));
        }
    }
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(t) = &report.invariance {
        files.push(("invariance.csv", metric_csv(t, "class")));
        files.push(("invariance.svg", bar_svg(t, "class")));
    }
    if let Some(t) = &report.separability {
        files.push(("separability.csv", metric_csv(t, "domain")));
        files.push(("separability.svg", bar_svg(t, "domain")));
    }
    if let Some((e, classes, domains)) = &report.embedding {
        if e.coords.len() != classes.len() || e.coords.len() != domains.len() {
            return Err(TplError::invalid("export_report: embedding labels do not match coordinates"));
        }
        let mut s = String::from("row,x,y,class,domain\n");
        for (i, c) in e.coords.iter().enumerate() {
            let _ = writeln!(s, "{i},{:?},{:?},{},{}", c[0], c[1], classes[i], domains[i]);
        }
        files.push(("embedding.csv", s));
        files.push(("embedding.svg", scatter_svg(e, classes, domains)?));
    }
    if !report.schedule.is_empty() {
        let mut s = String::from("t,d,lambda,w_V,w_S\n");
        for r in &report.schedule {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.t, r.d, r.lambda, r.w_v, r.w_s);
        }
        files.push(("schedule.csv", s));
        files.push(("schedule.svg", schedule_svg(&report.schedule)));
    }
    fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}
