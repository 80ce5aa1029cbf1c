//! Synthetic multi-domain image benchmark, the TPLD file format and
//! leave-one-domain-out splits.
//!
//! A dataset directory holds `manifest.json` and `data.tpld`. The buffer is
//! `b"TPLD"`, a version byte, then every image as little-endian `f32`
//! (row-major `H×W×C`), the labels as `u16`, and the domain ids as `u16`.
//! Class and domain ids are 1-based on disk and in the public API.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TplError};
use crate::exec::Execution;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"TPLD";
pub const FORMAT_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUFFER_FILE: &str = "data.tpld";
const HEADER_BYTES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            domains: 4,
            per_cell: 64,
            image_size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.domains < 3 || self.per_cell < 8 {
            return Err(TplError::invalid(format!(
                "synthetic data needs classes ≥ 2, domains ≥ 3, per_cell ≥ 8 (got {}, {}, {})",
                self.classes, self.domains, self.per_cell
            )));
        }
        if self.classes > u16::MAX as usize || self.domains > u16::MAX as usize {
            return Err(TplError::invalid("class/domain count exceeds the u16 id range"));
        }
        if self.image_size < 8 {
            return Err(TplError::invalid("image_size must be at least 8"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the generator settings.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plain struct")))
    }
}

/// Nearest-class-centroid check on raw pixels, run at generation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleReport {
    /// Mean accuracy (percent) fitting and testing within each domain.
    pub within_domain: f64,
    /// Mean accuracy (percent) fitting on one domain, testing on another.
    pub cross_domain: f64,
    /// `within_domain − cross_domain`, in points.
    pub drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u8,
    pub buffer: String,
    pub buffer_bytes: usize,
    pub num_images: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    /// `counts[class − 1][domain − 1]`.
    pub counts: Vec<Vec<usize>>,
    pub seed: Option<u64>,
    pub generator: Option<SynthConfig>,
    pub config_hash: Option<String>,
    pub oracle: Option<OracleReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub manifest: DatasetManifest,
    /// `N × H × W × C` values in `[0, 1]`.
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
    pub domains: Vec<u16>,
}

impl DomainDataset {
    /// Builds a dataset (and its manifest counts) from raw arrays.
    pub fn from_parts(
        image_size: usize,
        channels: usize,
        num_classes: usize,
        num_domains: usize,
        images: Vec<f32>,
        labels: Vec<u16>,
        domains: Vec<u16>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            format: "tpld".into(),
            version: FORMAT_VERSION,
            buffer: BUFFER_FILE.into(),
            buffer_bytes: 0,
            num_images: labels.len(),
            image_size,
            channels,
            num_classes,
            num_domains,
            counts: Vec::new(),
            seed: None,
            generator: None,
            config_hash: None,
            oracle: None,
        };
        let mut ds = Self { manifest, images, labels, domains };
        ds.manifest.counts = ds.count_cells()?;
        ds.manifest.buffer_bytes = ds.buffer_len();
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.manifest.image_size * self.manifest.image_size * self.manifest.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Concatenated pixels of `indices`, widened to `f64`.
    pub fn gather_pixels(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            out.extend(self.image(i).iter().map(|&v| v as f64));
        }
        out
    }

    /// Zero-based class of sample `i`.
    pub fn class_index(&self, i: usize) -> usize {
        self.labels[i] as usize - 1
    }

    pub fn domain_ids(&self) -> Vec<u16> {
        (1..=self.manifest.num_domains as u16).collect()
    }

    fn buffer_len(&self) -> usize {
        HEADER_BYTES + self.images.len() * 4 + self.labels.len() * 4
    }

    fn count_cells(&self) -> Result<Vec<Vec<usize>>> {
        let (c, m) = (self.manifest.num_classes, self.manifest.num_domains);
        let mut counts = vec![vec![0; m]; c];
        for (&y, &d) in self.labels.iter().zip(&self.domains) {
            if y == 0 || y as usize > c || d == 0 || d as usize > m {
                return Err(TplError::format(
                    "dataset",
                    format!("label {y} / domain {d} outside 1..={c} / 1..={m}"),
                ));
            }
            counts[y as usize - 1][d as usize - 1] += 1;
        }
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.labels.len() != m.num_images
            || self.domains.len() != m.num_images
            || self.images.len() != m.num_images * self.pixels_per_image()
        {
            return Err(TplError::format(
                "dataset",
                format!(
                    "manifest declares {} images but arrays hold {} labels, {} domains, {} pixel values",
                    m.num_images,
                    self.labels.len(),
                    self.domains.len(),
                    self.images.len()
                ),
            ));
        }
        if self.count_cells()? != m.counts {
            return Err(TplError::format("dataset", "manifest cell counts disagree with the data"));
        }
        if let Some(v) = self.images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TplError::format("dataset", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }
}

pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut buf = Vec::with_capacity(ds.buffer_len());
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    for v in &ds.images {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in ds.labels.iter().chain(&ds.domains) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut manifest = ds.manifest.clone();
    manifest.buffer = BUFFER_FILE.into();
    manifest.buffer_bytes = buf.len();
    fs::write(dir.join(BUFFER_FILE), &buf)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(&manifest.buffer))?;
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(TplError::format("dataset", "bad magic bytes (expected TPLD)"));
    }
    if bytes[4] != FORMAT_VERSION || manifest.version != FORMAT_VERSION {
        return Err(TplError::format(
            "dataset",
            format!("unsupported version {} (expected {FORMAT_VERSION})", bytes[4]),
        ));
    }
    let n = manifest.num_images;
    let px = n * manifest.image_size * manifest.image_size * manifest.channels;
    let expected = HEADER_BYTES + px * 4 + n * 4;
    if bytes.len() != expected {
        return Err(TplError::Truncated {
            what: "dataset buffer".into(),
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[HEADER_BYTES..];
    let images = body[..px * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut u16s = body[px * 4..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")));
    let labels = u16s.by_ref().take(n).collect();
    let domains = u16s.collect();
    let ds = DomainDataset { manifest, images, labels, domains };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// generation

#[derive(Clone, Copy, Debug)]
enum Texture {
    Gradient,
    Plain,
    Checker,
    Stripes,
}

#[derive(Clone, Copy, Debug)]
struct DomainStyle {
    gain: [f64; 3],
    bias: [f64; 3],
    texture: Texture,
    texture_amp: f64,
    noise: f64,
    blur: usize,
}

fn style(domain: usize) -> DomainStyle {
    // Four hand-set styles (photo-, sketch-, cartoon- and painting-like);
    // further domains are drawn from a fixed stream.
    match domain {
        0 => DomainStyle {
            gain: [0.85, 0.75, 0.6],
            bias: [0.05, 0.1, 0.2],
            texture: Texture::Gradient,
            texture_amp: 0.1,
            noise: 0.03,
            blur: 0,
        },
        1 => DomainStyle {
            gain: [0.9, 0.9, 0.9],
            bias: [0.02, 0.02, 0.02],
            texture: Texture::Plain,
            texture_amp: 0.0,
            noise: 0.08,
            blur: 0,
        },
        2 => DomainStyle {
            gain: [0.9, 0.2, 0.6],
            bias: [0.0, 0.7, 0.3],
            texture: Texture::Checker,
            texture_amp: 0.15,
            noise: 0.04,
            blur: 1,
        },
        3 => DomainStyle {
            gain: [0.45, 0.6, -0.4],
            bias: [0.35, 0.2, 0.85],
            texture: Texture::Stripes,
            texture_amp: 0.2,
            noise: 0.06,
            blur: 1,
        },
        _ => {
            let mut r = rng::stream(0x57_7E5, &[domain as u64]);
            let mut gain = [0.0; 3];
            let mut bias = [0.0; 3];
            for c in 0..3 {
                let g: f64 = r.random_range(0.4..0.9);
                gain[c] = if r.random::<bool>() { g } else { -g };
                bias[c] = if gain[c] > 0.0 {
                    r.random_range(0.0..1.0 - g)
                } else {
                    r.random_range(g..1.0)
                };
            }
            DomainStyle {
                gain,
                bias,
                texture: [Texture::Gradient, Texture::Plain, Texture::Checker, Texture::Stripes][domain % 4],
                texture_amp: r.random_range(0.0..0.2),
                noise: r.random_range(0.02..0.08),
                blur: r.random_range(0..2),
            }
        }
    }
}

fn smooth_edge(signed_dist: f64) -> f64 {
    // ≈1 inside, ≈0 outside, one-pixel-ish ramp
    (0.5 - signed_dist * 6.0).clamp(0.0, 1.0)
}

/// Glyph coverage at glyph-local coordinates `(u, v)` (unit scale).
fn glyph(class: usize, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    let box_d = |hx: f64, hy: f64| (u.abs() - hx).max(v.abs() - hy);
    let d = match class {
        0 => r - 0.75,                                 // disk
        1 => (r - 0.65).abs() - 0.15,                  // ring
        2 => box_d(0.85, 0.22),                        // horizontal bar
        3 => box_d(0.22, 0.85),                        // vertical bar
        4 => box_d(0.85, 0.18).min(box_d(0.18, 0.85)), // plus
        5 => {
            let a = (u - v).abs() / 2f64.sqrt() - 0.16;
            let b = (u + v).abs() / 2f64.sqrt() - 0.16;
            a.min(b).max(r - 0.95) // X
        }
        6 => box_d(0.7, 0.7).abs() - 0.14, // square outline
        7 => {
            // upward triangle
            let e1 = -v - 0.6;
            let e2 = (v * 0.5 + u * 0.866) - 0.45;
            let e3 = (v * 0.5 - u * 0.866) - 0.45;
            e1.max(e2).max(e3)
        }
        k => {
            // oriented grating in a disk; orientation and frequency vary by class
            let th = k as f64 * 2.399_963;
            let f = 2.0 + (k % 3) as f64;
            let s = (PI * f * (u * th.cos() + v * th.sin())).sin();
            (r - 0.85).max(-s * 0.3)
        }
    };
    smooth_edge(d)
}

fn box_blur(img: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let src = img.to_vec();
    let r = radius as isize;
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                            s += src[((yy as usize) * size + xx as usize) * 3 + c];
                            n += 1.0;
                        }
                    }
                }
                img[(y * size + x) * 3 + c] = s / n;
            }
        }
    }
}

fn render<R: Rng>(class: usize, st: &DomainStyle, size: usize, r: &mut R) -> Vec<f32> {
    let s = size as f64;
    let cx = s / 2.0 + r.random_range(-0.06..0.06) * s;
    let cy = s / 2.0 + r.random_range(-0.06..0.06) * s;
    let scale = s * 0.34 * r.random_range(0.88..1.12);
    let rot: f64 = r.random_range(-0.15..0.15);
    let (sin, cos) = rot.sin_cos();
    let phase: f64 = r.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, st.noise).expect("finite std");
    let mut img = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / scale, (y as f64 + 0.5 - cy) / scale);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let (fx, fy) = (x as f64 / s, y as f64 / s);
            let tex = match st.texture {
                Texture::Plain => 0.0,
                Texture::Gradient => fx + fy - 1.0,
                Texture::Checker => {
                    if ((x / 4) + (y / 4)) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                Texture::Stripes => (2.0 * PI * 3.0 * (fx + 0.5 * fy) + phase).sin(),
            };
            let level = 0.1 + 0.8 * glyph(class, u, v) + st.texture_amp * tex;
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = st.bias[c] + st.gain[c] * level;
            }
        }
    }
    box_blur(&mut img, size, st.blur);
    img.iter()
        .map(|&v| (v + noise.sample(r)).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Generates the benchmark; cell `(class, domain)` draws from its own stream
/// so parallel and sequential generation agree bit-for-bit.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, exec: Execution) -> Result<DomainDataset> {
    cfg.validate()?;
    let (c, m, n) = (cfg.classes, cfg.domains, cfg.per_cell);
    let cells = exec.map_range(c * m, |cell| {
        let (d, k) = (cell / c, cell % c);
        let st = style(d);
        let mut r = rng::stream(seed, &[k as u64, d as u64]);
        (0..n).flat_map(|_| render(k, &st, cfg.image_size, &mut r)).collect::<Vec<f32>>()
    });
    let mut labels = Vec::with_capacity(c * m * n);
    let mut domains = Vec::with_capacity(c * m * n);
    for cell in 0..c * m {
        let (d, k) = (cell / c, cell % c);
        labels.extend(std::iter::repeat_n(k as u16 + 1, n));
        domains.extend(std::iter::repeat_n(d as u16 + 1, n));
    }
    let images = cells.concat();
    let mut ds = DomainDataset::from_parts(cfg.image_size, 3, c, m, images, labels, domains)?;
    ds.manifest.seed = Some(seed);
    ds.manifest.generator = Some(cfg.clone());
    ds.manifest.config_hash = Some(cfg.hash());
    ds.manifest.oracle = Some(nearest_centroid_oracle(&ds));
    Ok(ds)
}

/// Fits class centroids on the first half of each cell and tests on the
/// second half, within each domain and across every ordered domain pair.
pub fn nearest_centroid_oracle(ds: &DomainDataset) -> OracleReport {
    let (c, m, p) = (ds.manifest.num_classes, ds.manifest.num_domains, ds.pixels_per_image());
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        cells.entry((ds.class_index(i), ds.domains[i] as usize - 1)).or_default().push(i);
    }
    let half = |v: &Vec<usize>, second: bool| -> Vec<usize> {
        let h = v.len() / 2;
        if second { v[h..].to_vec() } else { v[..h].to_vec() }
    };
    // centroids[d][k]
    let centroids: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|d| {
            (0..c)
                .map(|k| {
                    let mut acc = vec![0.0; p];
                    let fit = cells.get(&(k, d)).map(|v| half(v, false)).unwrap_or_default();
                    for &i in &fit {
                        for (a, &x) in acc.iter_mut().zip(ds.image(i)) {
                            *a += x as f64;
                        }
                    }
                    let nfit = fit.len().max(1) as f64;
                    acc.iter_mut().for_each(|a| *a /= nfit);
                    acc
                })
                .collect()
        })
        .collect();
    let accuracy = |fit_d: usize, test_d: usize| -> f64 {
        let (mut ok, mut total) = (0usize, 0usize);
        for k in 0..c {
            for &i in &cells.get(&(k, test_d)).map(|v| half(v, true)).unwrap_or_default() {
                let img = ds.image(i);
                let pred = (0..c)
                    .map(|j| {
                        let d2: f64 = centroids[fit_d][j].iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                        (j, d2)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(j, _)| j)
                    .unwrap_or(0);
                ok += (pred == k) as usize;
                total += 1;
            }
        }
        100.0 * ok as f64 / total.max(1) as f64
    };
    let within = (0..m).map(|d| accuracy(d, d)).sum::<f64>() / m as f64;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let cross = pairs.iter().map(|&(a, b)| accuracy(a, b)).sum::<f64>() / pairs.len().max(1) as f64;
    OracleReport {
        within_domain: within,
        cross_domain: cross,
        drop: within - cross,
    }
}

// ---------------------------------------------------------------------------
// splits

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target: u16,
    pub val_fraction: f64,
    pub seed: u64,
    /// Source domain id → sample indices.
    pub train: BTreeMap<u16, Vec<usize>>,
    pub val: BTreeMap<u16, Vec<usize>>,
    /// Every sample of the target domain.
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn sources(&self) -> Vec<u16> {
        self.train.keys().copied().collect()
    }

    pub fn all_train(&self) -> Vec<usize> {
        self.train.values().flatten().copied().collect()
    }

    pub fn all_val(&self) -> Vec<usize> {
        self.val.values().flatten().copied().collect()
    }
}

/// Per source-domain, class-stratified split: each cell keeps
/// `⌊n·(1 − val_fraction)⌋` samples for training and the rest for validation.
pub fn make_splits(ds: &DomainDataset, target: u16, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(TplError::invalid(format!("val_fraction must be in (0, 0.5), got {val_fraction}")));
    }
    if !ds.domains.contains(&target) {
        return Err(TplError::invalid(format!("target domain {target} not present in dataset")));
    }
    let mut cells: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    let mut test = Vec::new();
    for i in 0..ds.len() {
        if ds.domains[i] == target {
            test.push(i);
        } else {
            cells.entry((ds.domains[i], ds.labels[i])).or_default().push(i);
        }
    }
    let mut train: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    let mut val: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for ((d, y), mut idx) in cells {
        let mut r = rng::stream(seed, &[0x5911, d as u64, y as u64]);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
        let n_train = (idx.len() as f64 * (1.0 - val_fraction)).floor() as usize;
        let (a, b) = idx.split_at(n_train);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        train.entry(d).or_default().extend(a);
        val.entry(d).or_default().extend(b);
    }
    for v in train.values_mut().chain(val.values_mut()) {
        v.sort_unstable();
    }
    Ok(SplitPlan {
        target,
        val_fraction,
        seed,
        train,
        val,
        test,
    })
}
