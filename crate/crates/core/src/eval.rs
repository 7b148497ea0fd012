//! Downstream evaluation: probes, aggregation across runs, batch-size slopes,
//! toy geometry statistics and reconstruction scores.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::NORM_EPS;
use crate::data::BatchSampler;
use crate::distributions::bernoulli_log_prob;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numcore::{adam_step, derived_rng, glorot_uniform, AdamState, Param, Scalar, Tape, Tensor};

/// Which representation a probe sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Encoder mean, dimension D.
    Mean,
    /// Decoder penultimate activations at the encoder mean, dimension H.
    Informative,
}

impl EmbeddingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Informative => "informative",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Frozen embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub x: Tensor<f64>,
    pub labels: Vec<u8>,
    pub kind: EmbeddingKind,
}

impl EmbeddingSet {
    pub fn new(x: Tensor<f64>, labels: Vec<u8>, kind: EmbeddingKind) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != labels.len() {
            return Err(Error::contract(format!("{n} embeddings but {} labels", labels.len())));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{kind} embeddings")));
        }
        Ok(Self { x, labels, kind })
    }

    /// Embed `images` (rows in `[0, 1]`) with `bundle`.
    pub fn from_bundle<T: Scalar>(
        bundle: &ModelBundle<T>,
        images: &Tensor<f64>,
        labels: Vec<u8>,
        kind: EmbeddingKind,
    ) -> Result<Self> {
        let x = images.cast::<T>();
        let e = match kind {
            EmbeddingKind::Mean => bundle.mean_embedding(&x)?,
            EmbeddingKind::Informative => bundle.informative_embedding(&x)?,
        };
        Self::new(e.cast(), labels, kind)
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }
}

/// One probe result. `value` is an accuracy for classification probes and a
/// per-sample log-likelihood for `probe == "reconstruction"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: String,
    pub objective: String,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    pub probe: String,
    pub embedding: String,
    pub value: f64,
}

/// Column order of the records file.
pub const RECORD_HEADER: [&str; 8] =
    ["model", "objective", "batch_size", "seed", "dataset", "probe", "embedding", "value"];

pub fn write_records(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(Error::Format { offset: 0, msg: format!("unexpected records header {header:?}") });
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

// ---------------------------------------------------------------------------
// KNN.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::Cosine => "cosine",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::contract(format!("unknown metric '{s}'"))),
        }
    }
}

const KNN_CHUNK: usize = 256;

fn row_norms(x: &Tensor<f64>) -> Vec<f64> {
    let (n, _) = (x.shape()[0], x.shape()[1]);
    (0..n).map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Pairwise distances `test × train` under `metric`.
///
/// Cosine distance is `1 − cos` with norms floored at the contrastive
/// epsilon; Euclidean distance is expanded through a matrix product.
pub fn pairwise_distances(test: &Tensor<f64>, train: &Tensor<f64>, metric: Metric) -> Result<Tensor<f64>> {
    let (_, d) = test.dims2()?;
    let (m, d2) = train.dims2()?;
    if d != d2 {
        return Err(Error::Shape { op: "pairwise_distances", lhs: test.shape().to_vec(), rhs: train.shape().to_vec() });
    }
    let dots = test.matmul(&train.transpose()?)?;
    let (tn, rn) = (row_norms(test), row_norms(train));
    let mut out = dots.into_data();
    for (i, row) in out.chunks_mut(m).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = match metric {
                Metric::Cosine => 1.0 - *v / (tn[i].max(NORM_EPS) * rn[j].max(NORM_EPS)),
                Metric::Euclidean => (tn[i] * tn[i] + rn[j] * rn[j] - 2.0 * *v).max(0.0).sqrt(),
            };
        }
    }
    Tensor::new(vec![tn.len(), m], out)
}

/// Majority label among the `k` nearest neighbours of each row of `test`.
///
/// Vote ties go to the label with the smallest summed distance, then the
/// smallest label. Neighbours at equal distance are taken in index order.
pub fn knn_predict(train: &EmbeddingSet, test: &Tensor<f64>, k: usize, metric: Metric) -> Result<Vec<u8>> {
    let n_train = train.labels.len();
    if k == 0 || k > n_train {
        return Err(Error::contract(format!("k = {k} with {n_train} training points")));
    }
    let (n_test, _) = test.dims2()?;
    let mut preds = Vec::with_capacity(n_test);
    let mut order: Vec<usize> = Vec::with_capacity(n_train);
    for start in (0..n_test).step_by(KNN_CHUNK) {
        let idx: Vec<usize> = (start..(start + KNN_CHUNK).min(n_test)).collect();
        let dist = pairwise_distances(&test.select_rows(&idx)?, &train.x, metric)?;
        for r in 0..idx.len() {
            let row = dist.row(r);
            order.clear();
            order.extend(0..n_train);
            let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
            if k < n_train {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let mut votes: BTreeMap<u8, (usize, f64)> = BTreeMap::new();
            for &j in &order[..k] {
                let e = votes.entry(train.labels[j]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += row[j];
            }
            let best = votes
                .iter()
                .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(b.0)))
                .map(|(l, _)| *l)
                .expect("k ≥ 1");
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// KNN classification accuracy of `test` against `train`.
pub fn knn_probe(train: &EmbeddingSet, test: &EmbeddingSet, k: usize, metric: Metric) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::Shape { op: "knn_probe", lhs: vec![train.dim()], rhs: vec![test.dim()] });
    }
    Ok(accuracy(&knn_predict(train, &test.x, k, metric)?, &test.labels))
}

// ---------------------------------------------------------------------------
// MLP probe.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpProbeConfig {
    fn default() -> Self {
        Self { hidden: 400, steps: 1000, lr: 1e-3, batch_size: 200, seed: 0 }
    }
}

/// Per-feature mean and standard deviation (1 where a feature is constant).
fn standardizer(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    (mean, std)
}

fn standardize(x: &Tensor<f64>, mean: &[f64], std: &[f64]) -> Tensor<f32> {
    let d = mean.len();
    let data = x.data().iter().enumerate().map(|(i, v)| ((v - mean[i % d]) / std[i % d]) as f32).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// One-hidden-layer ReLU classifier trained with Adam on standardized
/// features (train statistics), returning test accuracy.
pub fn mlp_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &MlpProbeConfig) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::Shape { op: "mlp_probe", lhs: vec![train.dim()], rhs: vec![test.dim()] });
    }
    if cfg.hidden == 0 || cfg.steps == 0 || cfg.batch_size == 0 || train.labels.is_empty() {
        return Err(Error::contract("mlp_probe needs hidden, steps, batch size and data > 0"));
    }
    let d = train.dim();
    let classes = train.labels.iter().chain(&test.labels).map(|&l| l as usize + 1).max().unwrap_or(1);
    let (mean, std) = standardizer(&train.x);
    let xtr = standardize(&train.x, &mean, &std);
    let xte = standardize(&test.x, &mean, &std);

    let mut rng = derived_rng(cfg.seed, 0x9b0be);
    let mut params: Vec<Param<f32>> = vec![
        Param::new("probe.0.w", glorot_uniform(d, cfg.hidden, &mut rng)),
        Param::new("probe.0.b", Tensor::zeros(vec![1, cfg.hidden])),
        Param::new("probe.1.w", glorot_uniform(cfg.hidden, classes, &mut rng)),
        Param::new("probe.1.b", Tensor::zeros(vec![1, classes])),
    ];
    let mut adam = AdamState::new(&params, cfg.lr);
    let b = cfg.batch_size.min(train.labels.len());
    let mut sampler = BatchSampler::new(train.labels.len(), b, cfg.seed, false)?;
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch();
        let mut onehot = vec![0f32; idx.len() * classes];
        for (r, &i) in idx.iter().enumerate() {
            onehot[r * classes + train.labels[i] as usize] = 1.0;
        }
        let tape = Tape::<f32>::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param_named(p.value.clone(), &p.name)).collect();
        let x = tape.constant(xtr.select_rows(&idx)?);
        let y = tape.constant(Tensor::from_parts(vec![idx.len(), classes], onehot));
        let h = x.matmul(&vars[0])?.add(&vars[1])?.relu();
        let logits = h.matmul(&vars[2])?.add(&vars[3])?;
        let nll = logits.log_softmax(1)?.mul(&y)?.sum().mul_scalar(-1.0 / idx.len() as f32);
        tape.backward(nll)?;
        let grads: Vec<_> = vars.iter().map(|v| v.grad().expect("param")).collect();
        adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
    }

    let tape = Tape::<f32>::new();
    let w: Vec<_> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
    let h = tape.constant(xte).matmul(&w[0])?.add(&w[1])?.relu();
    let logits = h.matmul(&w[2])?.add(&w[3])?.value().clone();
    let pred: Vec<u8> = (0..test.labels.len())
        .map(|i| {
            let row = logits.row(i);
            (0..classes).fold(0, |best, c| if row[c] > row[best] { c } else { best }) as u8
        })
        .collect();
    Ok(accuracy(&pred, &test.labels))
}

// ---------------------------------------------------------------------------
// Aggregation.

/// Identifies a cell: records in the same cell are directly comparable.
pub fn cell_key(r: &MetricsRecord) -> (String, String, String) {
    (r.dataset.clone(), r.probe.clone(), r.embedding.clone())
}

/// Mean and standard error of a group's scores across cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub mean: f64,
    /// Standard error across cells (0 with a single cell).
    pub stderr: f64,
    pub cells: usize,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-record z-score within its cell, using the population standard
/// deviation over every record in the cell. Constant cells give 0.
pub fn zscores(records: &[MetricsRecord]) -> Vec<f64> {
    let mut cells: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        cells.entry(cell_key(r)).or_default().push(i);
    }
    let mut z = vec![0.0; records.len()];
    for idx in cells.values() {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| records[i].value).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (records[i].value - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for &i in idx {
            z[i] = if std > 0.0 { (records[i].value - mean) / std } else { 0.0 };
        }
    }
    z
}

fn per_cell_group_means(
    records: &[MetricsRecord],
    values: &[f64],
    group: &dyn Fn(&MetricsRecord) -> String,
) -> BTreeMap<(String, String, String), BTreeMap<String, f64>> {
    let mut acc: BTreeMap<_, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for (r, v) in records.iter().zip(values) {
        let e = acc.entry(cell_key(r)).or_default().entry(group(r)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(cell, g)| (cell, g.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
        .collect()
}

fn summarize(per_cell: BTreeMap<(String, String, String), BTreeMap<String, f64>>) -> Vec<GroupScore> {
    let mut by_group: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for g in per_cell.into_values() {
        for (k, v) in g {
            by_group.entry(k).or_default().push(v);
        }
    }
    by_group
        .into_iter()
        .map(|(group, v)| {
            let (mean, stderr) = mean_stderr(&v);
            GroupScore { group, mean, stderr, cells: v.len() }
        })
        .collect()
}

/// Average z-score per group (default: the record's `model`).
pub fn zscore_aggregate_by(records: &[MetricsRecord], group: &dyn Fn(&MetricsRecord) -> String) -> Vec<GroupScore> {
    let z = zscores(records);
    summarize(per_cell_group_means(records, &z, group))
}

pub fn zscore_aggregate(records: &[MetricsRecord]) -> Vec<GroupScore> {
    zscore_aggregate_by(records, &|r| r.model.clone())
}

/// Ranks with ties sharing the mean of their positions; rank 1 is the largest.
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Average rank per group; within each cell groups are ranked by their mean
/// value over records.
pub fn rank_aggregate_by(records: &[MetricsRecord], group: &dyn Fn(&MetricsRecord) -> String) -> Vec<GroupScore> {
    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
    let per_cell = per_cell_group_means(records, &values, group)
        .into_iter()
        .map(|(cell, g)| {
            let (keys, vals): (Vec<String>, Vec<f64>) = g.into_iter().unzip();
            (cell, keys.into_iter().zip(descending_ranks(&vals)).collect())
        })
        .collect();
    summarize(per_cell)
}

pub fn rank_aggregate(records: &[MetricsRecord]) -> Vec<GroupScore> {
    rank_aggregate_by(records, &|r| r.model.clone())
}

/// Ordinary least squares fit `y = intercept + slope · x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// `sqrt(SSR / (n − 2))`; NaN when `n ≤ 2`.
    pub residual_stderr: f64,
    /// Standard error of the slope; NaN when `n ≤ 2`.
    pub slope_stderr: f64,
    pub n: usize,
}

pub fn ols(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::contract(format!("slope needs ≥ 2 points, got {n}")));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("slope needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let (residual_stderr, slope_stderr) = if n > 2 {
        let s = (ssr / (nf - 2.0)).sqrt();
        (s, s / sxx.sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SlopeFit { slope, intercept, residual_stderr, slope_stderr, n })
}

/// Per-model OLS slope of mean z-score against batch size.
///
/// z-scores are computed over all `records`; each model's points are the
/// mean z at each batch size.
pub fn batch_slope(records: &[MetricsRecord]) -> Result<BTreeMap<String, SlopeFit>> {
    let z = zscores(records);
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for (r, zi) in records.iter().zip(&z) {
        let e = acc.entry(r.model.clone()).or_default().entry(r.batch_size).or_insert((0.0, 0));
        e.0 += zi;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(model, by_b)| {
            let pts: Vec<(f64, f64)> = by_b.into_iter().map(|(b, (s, n))| (b as f64, s / n as f64)).collect();
            ols(&pts).map(|fit| (model, fit))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Toy geometry.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRadiusStats {
    /// Counts over equal-width bins of `[0, 2π)`.
    pub angle_hist: Vec<usize>,
    /// Counts over equal-width bins of `[0, max radius]`.
    pub radius_hist: Vec<usize>,
    pub radius_max: f64,
    /// Kolmogorov–Smirnov distance of the angles from Uniform[0, 2π).
    pub angle_ks: f64,
    /// Sample variance of the radii.
    pub radius_variance: f64,
}

pub const ANGLE_BINS: usize = 36;
pub const RADIUS_BINS: usize = 20;

pub fn angles(points: &Tensor<f64>) -> Result<Vec<f64>> {
    let (n, d) = points.dims2()?;
    if d != 2 {
        return Err(Error::Shape { op: "angles", lhs: vec![n, d], rhs: vec![n, 2] });
    }
    let tau = std::f64::consts::TAU;
    Ok((0..n)
        .map(|i| {
            let r = points.row(i);
            let a = r[1].atan2(r[0]);
            let a = if a < 0.0 { a + tau } else { a };
            if a >= tau {
                0.0
            } else {
                a
            }
        })
        .collect())
}

/// KS statistic of samples in `[0, 1)` against Uniform[0, 1).
pub fn ks_uniform(u: &[f64]) -> f64 {
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

pub fn angle_radius_stats(points: &Tensor<f64>, angle_bins: usize, radius_bins: usize) -> Result<AngleRadiusStats> {
    if angle_bins == 0 || radius_bins == 0 {
        return Err(Error::contract("histograms need at least one bin"));
    }
    let ang = angles(points)?;
    if ang.len() < 2 {
        return Err(Error::contract("angle statistics need at least 2 points"));
    }
    let tau = std::f64::consts::TAU;
    let mut angle_hist = vec![0; angle_bins];
    for a in &ang {
        angle_hist[((a / tau * angle_bins as f64) as usize).min(angle_bins - 1)] += 1;
    }
    let radii: Vec<f64> = (0..ang.len()).map(|i| points.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let radius_max = radii.iter().cloned().fold(0.0, f64::max);
    let mut radius_hist = vec![0; radius_bins];
    for r in &radii {
        let b = if radius_max > 0.0 { (r / radius_max * radius_bins as f64) as usize } else { 0 };
        radius_hist[b.min(radius_bins - 1)] += 1;
    }
    let n = radii.len() as f64;
    let mr = radii.iter().sum::<f64>() / n;
    let radius_variance = radii.iter().map(|r| (r - mr) * (r - mr)).sum::<f64>() / (n - 1.0);
    let u: Vec<f64> = ang.iter().map(|a| a / tau).collect();
    Ok(AngleRadiusStats { angle_hist, radius_hist, radius_max, angle_ks: ks_uniform(&u), radius_variance })
}

// ---------------------------------------------------------------------------
// Reconstruction.

/// Mean Bernoulli log-likelihood per sample of binary `x`, decoding the
/// encoder mean.
pub fn reconstruction_score<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<f64>) -> Result<f64> {
    if !bundle.has_decoder() {
        return Err(Error::Unsupported(format!("{} bundles have no decoder", bundle.objective)));
    }
    let (n, _) = x.dims2()?;
    let mut total = 0.0;
    for start in (0..n).step_by(500) {
        let idx: Vec<usize> = (start..(start + 500).min(n)).collect();
        let tape = Tape::<T>::new();
        let m = bundle.bind_frozen(&tape);
        let xb = tape.constant(x.select_rows(&idx)?.cast());
        let (mean, _) = m.encode_params(&xb)?;
        let out = m.decode(&mean)?;
        let lp = bernoulli_log_prob(&out.logits, &xb)?;
        total += lp.value().data().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok(total / n as f64)
}
