//! Synthetic complexity-labelled corpus and folder ingestion.
//!
//! Each synthetic image comes from one generator family and a control value
//! `u ∈ [0, 1]` that sets how much detail and contrast it carries. The stored
//! score is `u` itself; measured entropy is kept as an independent signal.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{image_entropy, load_image, ImageTensor};
use crate::rng::{tagged_stream, StreamRng};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Multi-octave value noise; `u` raises frequency, octaves and contrast.
    NoiseField,
    /// Flat shapes on a flat background; `u` sets the shape count.
    ShapeScatter,
    /// Oriented gratings over a soft gradient; `u` sets frequency and mix.
    TextureMix,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::NoiseField => "noise-field",
            Family::ShapeScatter => "shape-scatter",
            Family::TextureMix => "texture-mix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub families: Vec<Family>,
    pub count: usize,
    pub image_size: usize,
    /// Noise / grating frequency in cycles per image side at `u = 0` and `u = 1`.
    pub frequency_range: (f64, f64),
    pub shape_count_range: (usize, usize),
    /// Peak contrast reached at `u = 1`, starting from the lower bound.
    pub contrast_range: (f64, f64),
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            families: vec![Family::NoiseField, Family::ShapeScatter, Family::TextureMix],
            count: 2048,
            image_size: 64,
            frequency_range: (1.0, 12.0),
            shape_count_range: (0, 48),
            contrast_range: (0.0, 0.9),
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("generator.families must not be empty".into()));
        }
        if self.image_size == 0 || patch_size == 0 || self.image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {patch_size}",
                self.image_size
            )));
        }
        let (f0, f1) = self.frequency_range;
        let (c0, c1) = self.contrast_range;
        if !(f0 >= 0.0 && f1 >= f0 && c0 >= 0.0 && c1 >= c0 && c1 <= 1.0) {
            return Err(Error::Config("generator ranges must be ordered and within bounds".into()));
        }
        if self.shape_count_range.1 < self.shape_count_range.0 {
            return Err(Error::Config("shape_count_range must be ordered".into()));
        }
        Ok(())
    }
}

/// Per-image generator settings recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub family: Family,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub score: f64,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SampleParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class: String,
    pub score: f64,
    pub image: ImageTensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus { samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    pub fn classes(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.class.clone()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Random lattice of values, bilinearly sampled with smoothstep weights.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut StreamRng, cells: usize) -> Self {
        let cells = cells.max(1);
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        Self { cells, lattice }
    }

    /// `x, y ∈ [0, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        let fx = x * self.cells as f64;
        let fy = y * self.cells as f64;
        let (ix, iy) = ((fx as usize).min(self.cells - 1), (fy as usize).min(self.cells - 1));
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let w = self.cells + 1;
        let v = |i: usize, j: usize| self.lattice[j * w + i];
        lerp(lerp(v(ix, iy), v(ix + 1, iy), tx), lerp(v(ix, iy + 1), v(ix + 1, iy + 1), tx), ty)
    }
}

fn random_color(rng: &mut StreamRng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Maps `u` onto `[0, 1]` with exponential growth, so that the number of
/// distinct intensity levels (and hence entropy in bits) rises roughly
/// linearly with `u`.
fn growth(u: f64, rate: f64) -> f64 {
    (2f64.powf(rate * u) - 1.0) / (2f64.powf(rate) - 1.0)
}

const LEVEL_GROWTH: f64 = 7.0;
const COUNT_GROWTH: f64 = 3.0;

fn noise_field(rng: &mut StreamRng, size: usize, u: f64, p: &GeneratorParams) -> Array3<f64> {
    let base = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
    let tint = random_color(rng).map(|c| 0.6 + 0.4 * c);
    let contrast = lerp(p.contrast_range.0, p.contrast_range.1, growth(u, LEVEL_GROWTH));
    let freq = lerp(p.frequency_range.0, p.frequency_range.1, u);
    let octaves = 1 + (u * 3.0).floor() as usize;
    let layers: Vec<(ValueNoise, f64)> = (0..octaves)
        .map(|o| {
            let cells = (freq * 2f64.powi(o as i32)).round().max(1.0) as usize;
            (ValueNoise::new(rng, cells), 0.5f64.powi(o as i32))
        })
        .collect();
    let norm: f64 = layers.iter().map(|(_, a)| a).sum();
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
        let n: f64 = layers.iter().map(|(l, a)| a * l.at(fx, fy)).sum::<f64>() / norm;
        base[c] + contrast * tint[c] * (n - 0.5) * 2.0
    })
}

fn shape_scatter(rng: &mut StreamRng, size: usize, u: f64, p: &GeneratorParams) -> Array3<f64> {
    let bg = random_color(rng);
    let mut img = Array3::from_shape_fn((size, size, 3), |(_, _, c)| bg[c]);
    let (lo, hi) = p.shape_count_range;
    let count = (lo as f64 + growth(u, COUNT_GROWTH) * (hi - lo) as f64).round() as usize;
    let shading = lerp(p.contrast_range.0, p.contrast_range.1, u) * 0.5;
    let s = size as f64;
    for _ in 0..count {
        let color = random_color(rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(s * 0.04..s * 0.16);
        let disc = rng.random::<bool>();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (gx, gy) = (theta.cos() * shading / r, theta.sin() * shading / r);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r * 0.7 };
                if inside {
                    let shade = 0.5 * (gx * dx + gy * dy);
                    for c in 0..3 {
                        img[[y, x, c]] = color[c] + shade;
                    }
                }
            }
        }
    }
    img
}

fn texture_mix(rng: &mut StreamRng, size: usize, u: f64, p: &GeneratorParams) -> Array3<f64> {
    let a = random_color(rng).map(|c| 0.3 + 0.4 * c);
    let b = random_color(rng).map(|c| 0.3 + 0.4 * c);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = lerp(p.frequency_range.0, p.frequency_range.1, u) * rng.random_range(0.7..1.3);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let weight = rng.random_range(0.5..1.0);
            (theta, freq, phase, weight)
        })
        .collect();
    let total_w: f64 = gratings.iter().map(|g| g.3).sum();
    let amp = lerp(p.contrast_range.0, p.contrast_range.1, growth(u, LEVEL_GROWTH)) * 0.5;
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
        let t = 0.5 + 0.5 * ((fx - 0.5) * angle.cos() + (fy - 0.5) * angle.sin());
        let soft = lerp(a[c], b[c], t * 0.03);
        let tex: f64 = gratings
            .iter()
            .map(|&(theta, f, ph, w)| w * (std::f64::consts::TAU * f * (fx * theta.cos() + fy * theta.sin()) + ph).sin())
            .sum::<f64>()
            / total_w;
        soft + amp * tex
    })
}

fn quantize(data: Array3<f64>) -> ImageTensor {
    let q = data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    ImageTensor::new(q).expect("quantized values lie in [0, 1]")
}

/// Renders one synthetic image.
pub fn render(family: Family, u: f64, rng: &mut StreamRng, params: &GeneratorParams) -> ImageTensor {
    let size = params.image_size;
    let data = match family {
        Family::NoiseField => noise_field(rng, size, u, params),
        Family::ShapeScatter => shape_scatter(rng, size, u, params),
        Family::TextureMix => texture_mix(rng, size, u, params),
    };
    quantize(data)
}

/// Generates `n` images. Sample `i` uses family `families[i % len]` and a
/// stream keyed by `(seed, i)`, so every image is a pure function of both.
pub fn generate_synthetic(n: usize, params: &GeneratorParams, seed: u64) -> Result<(Corpus, CorpusManifest)> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if params.families.is_empty() || params.image_size == 0 {
        return Err(Error::Config("generator needs at least one family and a positive size".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = tagged_stream(seed, "corpus", i as u64);
        let family = params.families[i % params.families.len()];
        let u: f64 = rng.random();
        let image = render(family, u, &mut rng, params);
        let id = format!("{i:06}");
        entries.push(ManifestEntry {
            id: id.clone(),
            path: format!("{id}.png"),
            score: u,
            class: family.name().to_string(),
            params: Some(SampleParams { family, u }),
        });
        samples.push(Sample { id, class: family.name().to_string(), score: u, image });
    }
    Ok((Corpus { samples }, CorpusManifest { format_version: MANIFEST_VERSION, seed, entries }))
}

/// Spearman correlation between score and measured entropy, per class.
pub fn generator_self_check(corpus: &Corpus, bins: usize) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &corpus.samples {
        let e = image_entropy(&s.image, bins)?.bits;
        let g = groups.entry(s.class.clone()).or_default();
        g.0.push(s.score);
        g.1.push(e);
    }
    groups
        .into_iter()
        .map(|(class, (u, e))| Ok((class, crate::metrics::srcc(&u, &e)?)))
        .collect()
}

/// Writes the images as PNG files plus a pretty-printed manifest.
pub fn write_corpus(dir: &Path, corpus: &Corpus, manifest: &CorpusManifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    for (sample, entry) in corpus.samples.iter().zip(&manifest.entries) {
        sample.image.save_png(&dir.join(&entry.path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: MANIFEST_VERSION });
    }
    Ok(manifest)
}

/// Loads every manifest entry from `dir`, validating ids, scores and files.
pub fn ingest_folder(dir: &Path, manifest_path: &Path, image_size: usize) -> Result<Corpus> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Validation(format!("duplicate id `{}`", e.id)));
        }
        if !(0.0..=1.0).contains(&e.score) {
            return Err(Error::Validation(format!("score {} of `{}` outside [0, 1]", e.score, e.id)));
        }
    }
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| !dir.join(&e.path).is_file())
        .map(|e| format!("{} ({})", e.id, e.path))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Sample {
                id: e.id.clone(),
                class: e.class.clone(),
                score: e.score,
                image: load_image(&dir.join(&e.path), image_size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { samples })
}

/// Index sets of a train/val/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: within each class, a seeded shuffle is cut by
/// `round(fraction · class size)`; the test part takes the remainder.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        by_class.entry(&s.class).or_default().push(i);
    }
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (k, (_, mut idx)) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut tagged_stream(seed, "split", k as u64));
        let n = idx.len() as f64;
        let n_train = ((ft * n).round() as usize).min(idx.len());
        let n_val = ((fv * n).round() as usize).min(idx.len() - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
