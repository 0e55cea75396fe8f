//! Frozen-feature evaluation: linear probe, retrieval and per-dimension
//! collapse diagnostics, plus image exports.

mod export;

pub use export::{export_attention, export_pairs, ExportSummary};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{Encoder, Mode};
use crate::perturb::dispersion_of_rows;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Features and labels of one split.
#[derive(Debug, Clone)]
pub struct Labeled {
    /// `[N, n]`.
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Labeled {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != labels.len() {
            return Err(Error::shape(
                "labeled features",
                format!("{:?} for {} labels", features.shape(), labels.len()),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Frozen encoder features (evaluation mode) for one split.
pub fn split_features(encoder: &mut Encoder<f32>, ds: &Dataset, split: Split) -> Result<Labeled> {
    let idx = ds.indices(split);
    let x = ds.batch(&idx);
    let f = encoder.encode(&x, Mode::Eval)?;
    Labeled::new(f.cast(), ds.labels(&idx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 30.0,
            momentum: 0.9,
            epochs: 30,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEvalResult {
    /// Percent.
    pub top1: f64,
    pub label_fraction: f64,
    pub seed: u64,
    pub labeled_examples: usize,
}

/// Class-stratified subset holding `round(fraction * n_c)` items of each
/// class. A class left with no item is an error.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut out = Vec::new();
    for (class, mut items) in by_class {
        let take = (fraction * items.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::Config(format!(
                "label fraction {fraction} leaves class {class} with no labeled example ({} available)",
                items.len()
            )));
        }
        items.shuffle(&mut stream(seed, Stream::Probe, &[class as u64]));
        out.extend_from_slice(&items[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Per-dimension mean and standard deviation of the rows in `idx`.
fn standardizer(x: &Tensor<f64>, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = x.dim(1);
    let mut mean = vec![0.0; n];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
    let mut std = vec![0.0; n];
    for &i in idx {
        for ((s, v), m) in std.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / idx.len() as f64).sqrt().max(1e-8));
    (mean, std)
}

/// Softmax-regression probe trained with heavy-ball SGD and a cosine
/// schedule on standardized features.
pub fn linear_probe(
    train: &Labeled,
    test: &Labeled,
    num_classes: usize,
    label_fraction: f64,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<LinearEvalResult> {
    let n = train.features.dim(1);
    if test.features.dim(1) != n {
        return Err(Error::shape("linear probe", "train and test feature widths differ"));
    }
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&y| y >= num_classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
    }
    if test.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let subset = stratified_subset(&train.labels, label_fraction, seed)?;
    let (mean, std) = standardizer(&train.features, &subset);
    let prep = |row: &[f64]| -> Vec<f64> { row.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = subset.iter().map(|&i| prep(train.features.row(i))).collect();
    let ys: Vec<usize> = subset.iter().map(|&i| train.labels[i]).collect();

    let c = num_classes;
    let mut w = vec![0.0f64; c * n];
    let mut b = vec![0.0f64; c];
    let (mut vw, mut vb) = (vec![0.0f64; c * n], vec![0.0f64; c]);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut logits = vec![0.0f64; c];
    for epoch in 0..cfg.epochs {
        let lr = crate::optim::cosine_lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut stream(seed, Stream::Probe, &[u64::MAX, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0f64; c * n];
            let mut gb = vec![0.0f64; c];
            for &i in chunk {
                let x = &xs[i];
                for k in 0..c {
                    logits[k] = b[k] + w[k * n..(k + 1) * n].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for k in 0..c {
                    let p = (logits[k] - mx).exp() / z - if k == ys[i] { 1.0 } else { 0.0 };
                    gb[k] += p;
                    for (g, v) in gw[k * n..(k + 1) * n].iter_mut().zip(x) {
                        *g += p * v;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((p, v), g) in w.iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *v = cfg.momentum * *v + g * scale;
                *p -= lr * *v;
            }
            for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = cfg.momentum * *v + g * scale;
                *p -= lr * *v;
            }
        }
    }
    if !w.iter().chain(&b).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("linear probe weights".into()));
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = prep(test.features.row(i));
            let score = |k: usize| b[k] + w[k * n..(k + 1) * n].iter().zip(&x).map(|(a, v)| a * v).sum::<f64>();
            // First maximum wins.
            let pred = (0..c).fold(0, |best, k| if score(k) > score(best) { k } else { best });
            pred == test.labels[i]
        })
        .count();
    Ok(LinearEvalResult {
        top1: 100.0 * correct as f64 / test.len() as f64,
        label_fraction,
        seed,
        labeled_examples: subset.len(),
    })
}

/// Linear evaluation of a frozen encoder. The encoder is only read.
pub fn linear_eval(
    encoder: &Encoder<f32>,
    ds: &Dataset,
    label_fraction: f64,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<LinearEvalResult> {
    let mut enc = encoder.clone();
    let train = split_features(&mut enc, ds, Split::Train)?;
    let test = split_features(&mut enc, ds, Split::Test)?;
    linear_probe(&train, &test, ds.num_classes, label_fraction, seed, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub rank5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub queries: usize,
    /// Queries skipped because their class has no other member.
    pub excluded: usize,
}

/// Leave-one-out retrieval over `set` by cosine similarity. Ties keep the
/// gallery in index order.
pub fn retrieval_metrics(set: &Labeled) -> Result<RetrievalResult> {
    let n = set.len();
    let width = set.features.dim(1);
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = set.features.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in &set.labels {
        *counts.entry(y).or_default() += 1;
    }
    for (&class, &c) in &counts {
        if c == 1 {
            log::warn!("class {class} has a single member; its query is excluded from retrieval");
        } else if c < 6 {
            log::warn!("class {class} has only {c} members; rank-5 is loosely defined");
        }
    }
    let (mut hit1, mut hit5, mut ap_sum, mut queries, mut excluded) = (0usize, 0usize, 0.0f64, 0usize, 0usize);
    for q in 0..n {
        let yq = set.labels[q];
        if counts[&yq] < 2 {
            excluded += 1;
            continue;
        }
        let mut gallery: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (j, (0..width).map(|d| unit[q][d] * unit[j][d]).sum()))
            .collect();
        gallery.sort_by(|a, b| b.1.total_cmp(&a.1));
        let relevant: Vec<bool> = gallery.iter().map(|&(j, _)| set.labels[j] == yq).collect();
        if relevant[0] {
            hit1 += 1;
        }
        if relevant.iter().take(5).any(|&r| r) {
            hit5 += 1;
        }
        let (mut found, mut prec_sum) = (0usize, 0.0f64);
        for (pos, &r) in relevant.iter().enumerate() {
            if r {
                found += 1;
                prec_sum += found as f64 / (pos + 1) as f64;
            }
        }
        ap_sum += prec_sum / found as f64;
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::Data("no class has two or more members; retrieval undefined".into()));
    }
    let pct = |v: f64| 100.0 * v / queries as f64;
    Ok(RetrievalResult {
        rank1: pct(hit1 as f64),
        rank5: pct(hit5 as f64),
        map: pct(ap_sum),
        queries,
        excluded,
    })
}

/// Retrieval over the test split with frozen encoder features.
pub fn retrieval_eval(encoder: &Encoder<f32>, ds: &Dataset) -> Result<RetrievalResult> {
    let mut enc = encoder.clone();
    retrieval_metrics(&split_features(&mut enc, ds, Split::Test)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionStats {
    pub dim: usize,
    pub dispersion: f64,
    /// Between-class over within-class variance.
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub dims: Vec<DimensionStats>,
    pub argmin_dispersion: usize,
    pub argmax_dispersion: usize,
    pub argmax_separation: usize,
}

fn first_extreme(values: impl Iterator<Item = f64>, better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| better(v, b)) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Variance ratio along one dimension; zero when both variances vanish and
/// infinite when only the within-class variance does.
fn separation(values: &[f64], labels: &[usize]) -> f64 {
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let mut groups: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (&v, &y) in values.iter().zip(labels) {
        let g = groups.entry(y).or_default();
        g.0 += v;
        g.2 += 1;
    }
    for g in groups.values_mut() {
        g.0 /= g.2 as f64;
    }
    for (&v, &y) in values.iter().zip(labels) {
        let g = groups.get_mut(&y).expect("group exists");
        g.1 += (v - g.0).powi(2);
    }
    let between: f64 = groups.values().map(|g| g.2 as f64 / n * (g.0 - mean).powi(2)).sum();
    let within: f64 = groups.values().map(|g| g.1 / n).sum();
    if within <= 0.0 {
        if between <= 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        between / within
    }
}

pub fn collapse_stats(set: &Labeled) -> Result<CollapseReport> {
    if set.len() < 2 {
        return Err(Error::Data("collapse report needs at least two samples".into()));
    }
    let dispersion = dispersion_of_rows(&set.features)?;
    let width = set.features.dim(1);
    let mut column = vec![0.0; set.len()];
    let dims: Vec<DimensionStats> = (0..width)
        .map(|d| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = set.features.row(i)[d];
            }
            DimensionStats {
                dim: d,
                dispersion: dispersion[d],
                separation: separation(&column, &set.labels),
            }
        })
        .collect();
    Ok(CollapseReport {
        argmin_dispersion: first_extreme(dims.iter().map(|d| d.dispersion), |a, b| a < b),
        argmax_dispersion: first_extreme(dims.iter().map(|d| d.dispersion), |a, b| a > b),
        argmax_separation: first_extreme(dims.iter().map(|d| d.separation), |a, b| a > b),
        dims,
    })
}

/// Collapse diagnostics over the test split.
pub fn collapse_report(encoder: &Encoder<f32>, ds: &Dataset) -> Result<CollapseReport> {
    let mut enc = encoder.clone();
    collapse_stats(&split_features(&mut enc, ds, Split::Test)?)
}

impl CollapseReport {
    /// CSV with header `dim,dispersion,separation`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        for d in &self.dims {
            w.serialize(d).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<DimensionStats>> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
            .collect()
    }

    /// Mean dispersion over the given dimensions.
    pub fn mean_dispersion(&self, dims: &[usize]) -> Option<f64> {
        if dims.is_empty() {
            return None;
        }
        Some(dims.iter().map(|&d| self.dims[d].dispersion).sum::<f64>() / dims.len() as f64)
    }

    /// Dimensions whose dispersion falls below `kappa`.
    pub fn below(&self, kappa: f64) -> Vec<usize> {
        self.dims.iter().filter(|d| d.dispersion < kappa).map(|d| d.dim).collect()
    }
}

/// Pretty JSON document at `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
