//! Experiment drivers shared by the CLI, the acceptance suite and benches.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{cosine_sim_matrix, p_k1, TAU_TOY};
use crate::data::{make_toy2d, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    angle_radius_stats, batch_slope, knn_probe, mlp_probe, rank_aggregate, reconstruction_score, read_records,
    write_records, zscore_aggregate, AngleRadiusStats, EmbeddingKind, EmbeddingSet, GroupScore, Metric,
    MetricsRecord, MlpProbeConfig, ANGLE_BINS, RADIUS_BINS,
};
use crate::models::{ModelBundle, Objective};
use crate::numcore::{adam_step, AdamState, Param, Scalar, Tape, Tensor};
use crate::objectives::{train, StepRecord, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------------------
// 2D toy.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy2dConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub snapshots: Vec<usize>,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 4200, lr: 0.01, tau: TAU_TOY, snapshots: vec![0, 200, 400, 4200] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy2dSnapshot {
    pub step: usize,
    pub loss: f64,
    pub stats: AngleRadiusStats,
    #[serde(skip)]
    pub points: Option<Tensor<f64>>,
}

/// Optimize the coordinates of the first-quadrant toy set directly under
/// `−log p(k=1)` with Adam at a constant learning rate, in single precision.
pub fn toy2d(cfg: &Toy2dConfig) -> Result<Vec<Toy2dSnapshot>> {
    if cfg.steps == 0 || cfg.snapshots.iter().any(|&s| s > cfg.steps) {
        return Err(Error::contract(format!("snapshots {:?} must lie in 0..={}", cfg.snapshots, cfg.steps)));
    }
    let mut params = vec![Param::new("points", make_toy2d(cfg.seed).points.cast::<f32>())];
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut out = Vec::new();
    for step in 0..=cfg.steps {
        let tape = Tape::<f32>::new();
        let p = tape.param_named(params[0].value.clone(), "points");
        let loss = p_k1(&cosine_sim_matrix(&p, cfg.tau)?)?.log_p.mean().neg();
        let value = loss.item()? as f64;
        if cfg.snapshots.contains(&step) {
            let points = params[0].value.cast::<f64>();
            let stats = angle_radius_stats(&points, ANGLE_BINS, RADIUS_BINS)?;
            log::info!("toy2d step {step}: loss {value:.5} angle KS {:.4}", stats.angle_ks);
            out.push(Toy2dSnapshot { step, loss: value, stats, points: Some(points) });
        }
        if step == cfg.steps {
            break;
        }
        tape.backward(loss)?;
        let g = p.grad().expect("param");
        adam_step(&mut params, &[g], &mut adam, cfg.lr)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training and evaluation.

/// Identity of one training run inside a study.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub objective: Objective,
    pub batch_size: usize,
    pub seed: u64,
}

impl RunKey {
    pub fn dir_name(&self) -> String {
        format!("{}-b{}-s{}", self.objective, self.batch_size, self.seed)
    }
}

/// Probe settings applied to every trained bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub mlp: MlpProbeConfig,
    pub informative: bool,
    pub reconstruction: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { knn_k: 5, mlp: MlpProbeConfig::default(), informative: true, reconstruction: true }
    }
}

/// Train on binarized `train_ds` and persist checkpoint and history in `out`.
pub fn run_train(cfg: &TrainConfig, train_ds: &Dataset, out: Option<&Path>) -> Result<TrainOutcome<f32>> {
    let x = train_ds.binarized().images;
    let outcome = train::<f32>(cfg, &x)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        outcome.bundle.save(dir.join("checkpoint.cmim"))?;
        write_history(dir.join("history.jsonl"), &outcome.history)?;
    }
    Ok(outcome)
}

pub fn write_history(path: impl AsRef<Path>, history: &[StepRecord]) -> Result<()> {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Every probe on every available embedding kind, plus the reconstruction
/// score when the bundle has a decoder.
pub fn evaluate_bundle<T: Scalar>(
    bundle: &ModelBundle<T>,
    key: &RunKey,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRecord>> {
    let (xtr, xte) = (train_ds.binarized().images, test_ds.binarized().images);
    let record = |probe: &str, embedding: &str, value: f64| MetricsRecord {
        model: key.objective.to_string(),
        objective: key.objective.to_string(),
        batch_size: key.batch_size,
        seed: key.seed,
        dataset: test_ds.name.clone(),
        probe: probe.into(),
        embedding: embedding.into(),
        value,
    };
    let mut kinds = vec![EmbeddingKind::Mean];
    if cfg.informative && bundle.has_decoder() {
        kinds.push(EmbeddingKind::Informative);
    }
    let mut out = Vec::new();
    for kind in kinds {
        let tr = EmbeddingSet::from_bundle(bundle, &xtr, train_ds.labels.clone(), kind)?;
        let te = EmbeddingSet::from_bundle(bundle, &xte, test_ds.labels.clone(), kind)?;
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let acc = knn_probe(&tr, &te, cfg.knn_k, metric)?;
            out.push(record(&format!("knn{}-{}", cfg.knn_k, metric.as_str()), kind.as_str(), acc));
        }
        let mlp = MlpProbeConfig { seed: key.seed, ..cfg.mlp.clone() };
        out.push(record("mlp", kind.as_str(), mlp_probe(&tr, &te, &mlp)?));
    }
    if cfg.reconstruction && bundle.has_decoder() {
        out.push(record("reconstruction", "mean", reconstruction_score(bundle, &xte)?));
    }
    Ok(out)
}

/// A grid of runs sharing one base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub base: TrainConfig,
    pub objectives: Vec<Objective>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

impl SweepPlan {
    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &objective in &self.objectives {
            for &batch_size in &self.batch_sizes {
                for &seed in &self.seeds {
                    keys.push(RunKey { objective, batch_size, seed });
                }
            }
        }
        keys
    }

    pub fn config_for(&self, key: &RunKey) -> TrainConfig {
        TrainConfig { objective: key.objective, batch_size: key.batch_size, seed: key.seed, ..self.base.clone() }
    }
}

/// Everything one run needs to be reproduced and reused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    train: TrainConfig,
    eval: EvalConfig,
    train_rows: usize,
    test_rows: usize,
}

/// Train and evaluate one run, reusing `out/records.csv` when it was
/// produced by an identical manifest.
pub fn run_and_evaluate(
    key: &RunKey,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out: &Path,
) -> Result<Vec<MetricsRecord>> {
    let manifest = RunManifest { train: cfg.clone(), eval: eval.clone(), train_rows: train_ds.len(), test_rows: test_ds.len() };
    let manifest_path = out.join("run.json");
    let records_path = out.join("records.csv");
    if records_path.exists() && manifest_path.exists() {
        let old: Option<RunManifest> = serde_json::from_slice(&fs::read(&manifest_path)?).ok();
        if old.as_ref() == Some(&manifest) {
            log::info!("reusing {}", records_path.display());
            return read_records(&records_path);
        }
    }
    log::info!("training {}", key.dir_name());
    let start = Instant::now();
    let outcome = run_train(cfg, train_ds, Some(out))?;
    let train_seconds = start.elapsed().as_secs_f64();
    let records = evaluate_bundle(&outcome.bundle, key, train_ds, test_ds, eval)?;
    let timing = RunTiming { train_seconds, eval_seconds: start.elapsed().as_secs_f64() - train_seconds };
    write_records(&records_path, &records)?;
    fs::write(out.join("timing.json"), serde_json::to_vec_pretty(&timing)?)?;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(records)
}

/// Wall-clock cost of one run, written next to its records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

pub fn read_timing(run_dir: &Path) -> Result<RunTiming> {
    Ok(serde_json::from_slice(&fs::read(run_dir.join("timing.json"))?)?)
}

/// Run every cell of `plan` with up to `jobs` runs in parallel. Each run
/// owns `out/<objective>-b<B>-s<seed>/`; results come back in plan order.
pub fn sweep(plan: &SweepPlan, train_ds: &Dataset, test_ds: &Dataset, out: &Path, jobs: usize) -> Result<Vec<MetricsRecord>> {
    let keys = plan.keys();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<Vec<MetricsRecord>>>>> = Mutex::new((0..keys.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(keys.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(key) = keys.get(i) else { break };
                let dir = out.join(key.dir_name());
                let r = run_and_evaluate(key, &plan.config_for(key), &plan.eval, train_ds, test_ds, &dir);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut all = Vec::new();
    for r in results.into_inner().expect("results lock") {
        all.extend(r.expect("every job ran")?);
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// Reports.

/// Plot-ready tables derived from persisted records only.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub zscores: Vec<GroupScore>,
    pub ranks: Vec<GroupScore>,
    pub slopes: Vec<(String, crate::eval::SlopeFit)>,
    /// `(model, batch size, mean log-likelihood per sample, stderr over seeds)`.
    pub reconstruction: Vec<(String, usize, f64, f64)>,
}

pub fn build_report(records: &[MetricsRecord]) -> Result<Report> {
    let (recon, probes): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.probe == "reconstruction");
    let mut batches: Vec<usize> = probes.iter().map(|r| r.batch_size).collect();
    batches.sort_unstable();
    batches.dedup();
    let slopes = if batches.len() >= 2 { batch_slope(&probes)?.into_iter().collect() } else { Vec::new() };
    let mut cells: std::collections::BTreeMap<(String, usize), Vec<f64>> = Default::default();
    for r in &recon {
        cells.entry((r.model.clone(), r.batch_size)).or_default().push(r.value);
    }
    let reconstruction = cells
        .into_iter()
        .map(|((m, b), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let se = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            (m, b, mean, se)
        })
        .collect();
    Ok(Report { zscores: zscore_aggregate(&probes), ranks: rank_aggregate(&probes), slopes, reconstruction })
}

impl Report {
    pub fn zscore_tsv(&self) -> String {
        group_tsv("mean_z", &self.zscores)
    }

    pub fn rank_tsv(&self) -> String {
        group_tsv("mean_rank", &self.ranks)
    }

    pub fn slope_tsv(&self) -> String {
        let mut s = String::from("model\tslope\tintercept\tresidual_stderr\tslope_stderr\tpoints\n");
        for (m, f) in &self.slopes {
            let _ = writeln!(s, "{m}\t{}\t{}\t{}\t{}\t{}", f.slope, f.intercept, f.residual_stderr, f.slope_stderr, f.n);
        }
        s
    }

    pub fn reconstruction_tsv(&self) -> String {
        let mut s = String::from("model\tbatch_size\tlog_likelihood\tstderr_over_seeds\n");
        for (m, b, v, se) in &self.reconstruction {
            let _ = writeln!(s, "{m}\t{b}\t{v}\t{se}");
        }
        s
    }

    /// Write the four tables into `dir`, returning their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let files = [
            ("zscores.tsv", self.zscore_tsv()),
            ("ranks.tsv", self.rank_tsv()),
            ("slopes.tsv", self.slope_tsv()),
            ("reconstruction.tsv", self.reconstruction_tsv()),
        ];
        let mut paths = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn group_tsv(col: &str, rows: &[GroupScore]) -> String {
    let mut s = format!("model\t{col}\tstderr_over_cells\tcells\n");
    for g in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", g.group, g.mean, g.stderr, g.cells);
    }
    s
}

/// Collect every `records.csv` below `dir`, in path order.
pub fn collect_records(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "records.csv") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(read_records(&f)?);
    }
    Ok(all)
}
