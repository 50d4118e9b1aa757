//! Frozen-encoder embeddings, the linear probe and its report.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{Preprocess, ProbeConfig};
use crate::corpus::Corpus;
use crate::encoder::{encode_on_tape, flatten_patches, DualEncoderState, TokenInput, QUERY_GROUP};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::to_patch_grid;
use crate::metrics::{pcc, srcc};
use crate::rng::tagged_stream;

const EXTRACT_BATCH: usize = 64;

/// Mean-pooled final-layer tokens, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    /// Empty string when a sample has no class.
    pub classes: Vec<String>,
    pub scores: Vec<Option<f64>>,
    pub vectors: Array2<f64>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            classes: indices.iter().map(|&i| self.classes[i].clone()).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            vectors: self.vectors.select(Axis(0), indices),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.classes.len() != n || self.scores.len() != n || self.vectors.nrows() != n {
            return Err(Error::Contract("embedding set fields have different lengths".into()));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("embedding contains a non-finite value".into()));
        }
        Ok(())
    }

    /// All scores, or a contract error naming the first sample without one.
    pub fn required_scores(&self) -> Result<Vec<f64>> {
        self.scores
            .iter()
            .zip(&self.ids)
            .map(|(s, id)| s.ok_or_else(|| Error::Contract(format!("sample `{id}` has no score"))))
            .collect()
    }
}

/// Encodes every image of `corpus` with the query branch: no augmentation,
/// no shift, no mask; embedding = mean over all final-layer patch tokens.
pub fn extract_embeddings(corpus: &Corpus, model: &DualEncoderState) -> Result<EmbeddingSet> {
    model.validate_shapes()?;
    let cfg = &model.config;
    let layout = model.branch_layout();
    let all: Vec<usize> = (0..cfg.grid_len()).collect();
    let mut rows = Vec::with_capacity(corpus.len());
    for chunk in corpus.samples.chunks(EXTRACT_BATCH) {
        let patches = chunk
            .iter()
            .map(|s| {
                if s.image.height() != cfg.image_size() || s.image.width() != cfg.image_size() {
                    return Err(Error::Shape(format!(
                        "image `{}` is {}x{}, encoder expects {}x{}",
                        s.id,
                        s.image.height(),
                        s.image.width(),
                        cfg.image_size(),
                        cfg.image_size()
                    )));
                }
                Ok(flatten_patches(to_patch_grid(&s.image, cfg.patch_size)?.patches(), &all))
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<TokenInput> = patches.iter().map(|p| TokenInput { patches: p.view(), index_map: &all }).collect();
        let mut g = Graph::new();
        let (tokens, segments) = encode_on_tape(&mut g, QUERY_GROUP, &model.query, &layout, cfg, &inputs)?;
        let pooled = g.mean_rows(tokens, &segments);
        rows.extend(g.value(pooled).outer_iter().map(|r| r.to_owned()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let vectors = if views.is_empty() {
        Array2::zeros((0, cfg.embed_dim))
    } else {
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
    };
    Ok(EmbeddingSet {
        ids: corpus.samples.iter().map(|s| s.id.clone()).collect(),
        classes: corpus.samples.iter().map(|s| s.class.clone()).collect(),
        scores: corpus.samples.iter().map(|s| Some(s.score)).collect(),
        vectors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    class: String,
    score: Option<f64>,
    vector: Vec<f64>,
}

/// One JSON record per line: `{id, class, score, vector}`.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    set.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in 0..set.len() {
        let rec = EmbeddingRecord {
            id: set.ids[i].clone(),
            class: set.classes[i].clone(),
            score: set.scores[i],
            vector: set.vectors.row(i).to_vec(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut recs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            recs.push(serde_json::from_str::<EmbeddingRecord>(&line)?);
        }
    }
    let dim = recs.first().map_or(0, |r| r.vector.len());
    if recs.iter().any(|r| r.vector.len() != dim) {
        return Err(Error::Validation("embedding records differ in dimension".into()));
    }
    let mut vectors = Array2::zeros((recs.len(), dim));
    for (i, r) in recs.iter().enumerate() {
        vectors.row_mut(i).assign(&Array1::from(r.vector.clone()));
    }
    let set = EmbeddingSet {
        ids: recs.iter().map(|r| r.id.clone()).collect(),
        classes: recs.iter().map(|r| r.class.clone()).collect(),
        scores: recs.iter().map(|r| r.score).collect(),
        vectors,
    };
    set.validate()?;
    Ok(set)
}

/// `prediction = x · weights + bias` on raw embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::Shape(format!("probe expects {} features, got {}", self.weights.len(), x.ncols())));
        }
        let w = Array1::from(self.weights.clone());
        Ok(x.dot(&w).iter().map(|v| v + self.bias).collect())
    }
}

/// Fixed affine input map `z = (x − mean) · transform`.
struct InputMap {
    mean: Array1<f64>,
    transform: Array2<f64>,
}

fn fit_input_map(x: &Array2<f64>, mode: Preprocess) -> InputMap {
    let d = x.ncols();
    let mean = match mode {
        Preprocess::None => Array1::zeros(d),
        _ => x.mean_axis(Axis(0)).expect("non-empty"),
    };
    let transform = match mode {
        Preprocess::None => Array2::eye(d),
        Preprocess::Standardize => {
            let std = x.std_axis(Axis(0), 0.0);
            Array2::from_diag(&std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 0.0 }))
        }
        Preprocess::Whiten => {
            let centered = x - &mean;
            let cov = centered.t().dot(&centered) / x.nrows() as f64;
            let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
            let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
            let kept: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > 1e-10 * max).collect();
            Array2::from_shape_fn((d, kept.len()), |(r, c)| {
                let i = kept[c];
                eig.eigenvectors[(r, i)] / eig.eigenvalues[i].sqrt()
            })
        }
    };
    InputMap { mean, transform }
}

/// Trains a single linear layer on squared error with momentum SGD
/// (`buf ← μ·buf + g + wd·w`, `w ← w − lr·buf`; the bias is not decayed).
/// Training runs on the preprocessed inputs; the returned probe folds the
/// input map back into weights over raw embeddings.
pub fn fit_linear_probe(train: &EmbeddingSet, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("cannot fit a probe on an empty set".into()));
    }
    let y = Array1::from(train.required_scores()?);
    let map = fit_input_map(&train.vectors, cfg.preprocess);
    let x = (&train.vectors - &map.mean).dot(&map.transform);
    let k = x.ncols();
    let mut w = Array1::<f64>::zeros(k);
    let mut b = 0.0;
    let (mut buf_w, mut buf_b) = (Array1::<f64>::zeros(k), 0.0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = tagged_stream(cfg.seed, "probe", 0);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let err = xb.dot(&w) + b - &yb;
            let scale = 2.0 / chunk.len() as f64;
            let gw = xb.t().dot(&err) * scale + &w * cfg.weight_decay;
            let gb = err.sum() * scale;
            buf_w = buf_w * cfg.momentum + gw;
            buf_b = buf_b * cfg.momentum + gb;
            w = w - &buf_w * cfg.lr;
            b -= cfg.lr * buf_b;
        }
    }
    let raw = map.transform.dot(&w);
    Ok(LinearProbe { bias: b - map.mean.dot(&raw), weights: raw.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pcc: f64,
    pub srcc: f64,
    pub per_class_pcc: BTreeMap<String, f64>,
    /// Population variance of the per-class values.
    pub pcc_variance: f64,
    pub excluded_classes: Vec<String>,
    pub ids: Vec<String>,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Mean squared deviation from the mean; zero for an empty slice.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k
}

/// Global PCC/SRCC plus per-class PCC. Classes with fewer than two samples,
/// or whose PCC is undefined, are excluded with a warning.
pub fn per_class_report(pred: &[f64], target: &[f64], classes: &[String]) -> Result<ProbeReport> {
    if pred.len() != target.len() || pred.len() != classes.len() {
        return Err(Error::Contract("predictions, targets and classes differ in length".into()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((p, t), c) in pred.iter().zip(target).zip(classes) {
        let g = groups.entry(c.as_str()).or_default();
        g.0.push(*p);
        g.1.push(*t);
    }
    let mut per_class_pcc = BTreeMap::new();
    let mut excluded_classes = Vec::new();
    for (class, (p, t)) in groups {
        if p.len() < 2 {
            log::warn!("class `{class}` has {} sample(s); excluded from per-class PCC", p.len());
            excluded_classes.push(class.to_string());
            continue;
        }
        match pcc(&p, &t) {
            Ok(v) => {
                per_class_pcc.insert(class.to_string(), v);
            }
            Err(Error::UndefinedCorrelation(why)) => {
                log::warn!("class `{class}` PCC undefined ({why}); excluded");
                excluded_classes.push(class.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    let pcc_variance = population_variance(&per_class_pcc.values().copied().collect::<Vec<_>>());
    Ok(ProbeReport {
        pcc: pcc(pred, target)?,
        srcc: srcc(pred, target)?,
        per_class_pcc,
        pcc_variance,
        excluded_classes,
        ids: Vec::new(),
        predictions: pred.to_vec(),
        targets: target.to_vec(),
    })
}

/// Fits on `train`, evaluates on `test`.
pub fn run_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &ProbeConfig) -> Result<(LinearProbe, ProbeReport)> {
    let probe = fit_linear_probe(train, cfg)?;
    let pred = probe.predict(&test.vectors)?;
    let mut report = per_class_report(&pred, &test.required_scores()?, &test.classes)?;
    report.ids = test.ids.clone();
    Ok((probe, report))
}
