//! Training objectives and the training loop.
//!
//! Every objective samples `z ~ q(z|x)` once per input through the
//! reparameterization and reports its terms as batch means:
//!
//! | objective | total |
//! |-----------|-------|
//! | MIM       | `recon − ½(log q(z|x) + log P(z))` |
//! | cMIM      | MIM `+ (−log p(k=1))` |
//! | VAE       | `recon + KL(q ‖ P)` |
//! | cVAE      | VAE `+ (−log p(k=1))` |
//! | InfoNCE   | InfoNCE over two independent samples of each input |
//!
//! `recon` is the Bernoulli negative log-likelihood. The contrastive term is
//! always added last, so `cmim.total == mim.total + cmim.contrastive` holds
//! bit-for-bit on shared seeds (same for cVAE/VAE).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{cosine_cross, cosine_sim_matrix, p_k1};
use crate::data::BatchSampler;
use crate::distributions::{bernoulli_log_prob, kl_to_standard_normal, prior_log_prob, PriorSpec};
use crate::error::{Error, Result};
use crate::models::{BoundModel, ModelBundle, ModelConfig, Objective};
use crate::numcore::{adam_step, derived_rng, AdamState, Param, Scalar, Tape, Tensor, Var, WsdSchedule};

/// Batch-mean value of every loss term; inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `−mean log p(x|z)`.
    pub reconstruction: f64,
    /// `−mean log p(k=1)`.
    pub contrastive: f64,
    /// `mean log q(z|x)`.
    pub encoder_log_prob: f64,
    /// `mean log P(z)`.
    pub prior_log_prob: f64,
    /// `mean KL(q(z|x) ‖ P(z))`.
    pub kl: f64,
}

/// Differentiable total plus its decomposition.
pub struct LossEval<'t, T: Scalar = f64> {
    pub total: Var<'t, T>,
    /// Per-sample contributions whose mean is `total`.
    pub per_sample: Var<'t, T>,
    pub breakdown: LossBreakdown,
}

fn mean_f64<T: Scalar>(v: &Var<'_, T>) -> f64 {
    let val = v.value();
    val.data().iter().map(|x| x.as_f64()).sum::<f64>() / val.len() as f64
}

/// Evaluate `objective` on one batch.
pub fn objective_loss<'t, T: Scalar>(
    objective: Objective,
    model: &BoundModel<'_, 't, T>,
    x: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<LossEval<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::contract(format!("batch must be B×P, got {shape:?}")));
    }
    let b = shape[0];
    let min_b = if objective.is_contrastive() { 2 } else { 1 };
    if b < min_b {
        return Err(Error::contract(format!(
            "{objective} needs batches of at least {min_b}, got {b}"
        )));
    }
    let tau = model.bundle.tau;
    let code = model.encode(x, rng)?;
    let mut bd = LossBreakdown::default();

    if objective == Objective::InfoNce {
        let positive = code.resample(rng)?;
        let cross = cosine_cross(&code.z, &positive.z)?;
        let pos = cross.diag()?;
        let inv = T::lit(1.0 / tau);
        let per_sample = cross.mul_scalar(inv).logsumexp(1, false)?.sub(&pos.mul_scalar(inv))?;
        let total = crate::contrastive::infonce_loss(&pos, &cross, tau)?;
        bd.contrastive = mean_f64(&per_sample);
        bd.total = total.item()?.as_f64();
        return Ok(LossEval { total, per_sample, breakdown: bd });
    }

    let dec = model.decode(&code.z)?;
    let recon = bernoulli_log_prob(&dec.logits, x)?.neg();
    bd.reconstruction = mean_f64(&recon);

    let base = match objective {
        Objective::Mim | Objective::Cmim => {
            let enc = code.log_prob(&code.z)?;
            let prior = prior_log_prob(PriorSpec { dim: code.z.shape()[1] }, &code.z)?;
            bd.encoder_log_prob = mean_f64(&enc);
            bd.prior_log_prob = mean_f64(&prior);
            recon.sub(&enc.add(&prior)?.mul_scalar(T::lit(0.5)))?
        }
        Objective::Vae | Objective::Cvae => {
            let kl = kl_to_standard_normal(&code.mean, &code.log_var)?;
            bd.kl = mean_f64(&kl);
            recon.add(&kl)?
        }
        Objective::InfoNce => unreachable!(),
    };
    let base_total = base.mean();

    let (total, per_sample) = if matches!(objective, Objective::Cmim | Objective::Cvae) {
        let sim = cosine_sim_matrix(&code.z, tau)?;
        let contrastive = p_k1(&sim)?.log_p.neg();
        bd.contrastive = mean_f64(&contrastive);
        (base_total.add(&contrastive.mean())?, base.add(&contrastive)?)
    } else {
        (base_total, base)
    };
    bd.total = total.item()?.as_f64();
    Ok(LossEval { total, per_sample, breakdown: bd })
}

pub fn mim_loss<'t, T: Scalar>(
    model: &BoundModel<'_, 't, T>,
    x: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<LossEval<'t, T>> {
    objective_loss(Objective::Mim, model, x, rng)
}

pub fn cmim_loss<'t, T: Scalar>(
    model: &BoundModel<'_, 't, T>,
    x: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<LossEval<'t, T>> {
    objective_loss(Objective::Cmim, model, x, rng)
}

pub fn vae_loss<'t, T: Scalar>(
    model: &BoundModel<'_, 't, T>,
    x: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<LossEval<'t, T>> {
    objective_loss(Objective::Vae, model, x, rng)
}

pub fn cvae_loss<'t, T: Scalar>(
    model: &BoundModel<'_, 't, T>,
    x: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<LossEval<'t, T>> {
    objective_loss(Objective::Cvae, model, x, rng)
}

pub fn infonce_objective<'t, T: Scalar>(
    model: &BoundModel<'_, 't, T>,
    x: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<LossEval<'t, T>> {
    objective_loss(Objective::InfoNce, model, x, rng)
}

// ---------------------------------------------------------------------------
// Training loop.

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
    pub val_interval: usize,
    pub log_interval: usize,
    /// Fraction of the (shuffled) training rows held out for validation.
    /// With 0, validation runs on the training rows themselves.
    pub val_fraction: f64,
    pub dataset: String,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(objective: Objective, batch_size: usize, total_steps: usize) -> Self {
        Self {
            objective,
            batch_size,
            total_steps,
            lr: 1e-3,
            tau: crate::contrastive::TAU_IMAGES,
            seed: 0,
            val_interval: 500,
            log_interval: 100,
            val_fraction: 0.1,
            dataset: "mnist".into(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_b = if self.objective.is_contrastive() { 2 } else { 1 };
        if self.batch_size < min_b {
            return Err(Error::contract(format!(
                "{} needs batch size ≥ {min_b}, got {}",
                self.objective, self.batch_size
            )));
        }
        if self.total_steps == 0 || self.val_interval == 0 || self.log_interval == 0 {
            return Err(Error::contract("steps and intervals must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::contract(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if !(self.lr >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::contract("lr must be ≥ 0 and tau > 0"));
        }
        Ok(())
    }
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub val_loss: Option<f64>,
}

/// Trained bundle (the lowest-validation-loss checkpoint) and its history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub bundle: ModelBundle<T>,
    pub history: Vec<StepRecord>,
    /// `(step, validation loss)` at every validation point.
    pub validation: Vec<(usize, f64)>,
}

const STREAM_SPLIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_VAL: u64 = 4;

/// Index of the minimum validation loss; ties go to the earliest step.
pub fn select_checkpoint(validation: &[(usize, f64)]) -> Option<usize> {
    validation
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| v.is_finite())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
}

/// Split row indices into (train, validation) using a seeded shuffle.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, STREAM_SPLIT));
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 {
        return (idx.clone(), idx);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Mean total loss over `rows` in fixed-order batches with a fixed noise stream.
pub fn validation_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &Tensor<f64>,
    rows: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let objective = bundle.objective;
    let b = if objective.is_contrastive() { batch_size.min(rows.len()) } else { batch_size };
    if b < if objective.is_contrastive() { 2 } else { 1 } {
        return Err(Error::contract("validation set too small for a contrastive batch"));
    }
    let mut rng = derived_rng(seed, STREAM_VAL);
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in rows.chunks(b) {
        if objective.is_contrastive() && chunk.len() < b {
            break;
        }
        let tape = Tape::<T>::new();
        let m = bundle.bind_frozen(&tape);
        let xb = tape.constant(x.select_rows(chunk)?.cast());
        let eval = objective_loss(objective, &m, &xb, &mut rng)?;
        sum += eval.breakdown.total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(sum / count as f64)
}

/// Optimize a fresh bundle on the rows of `x` (pixels already in {0, 1}).
///
/// Adam with the WSD schedule; the returned bundle holds the parameters with
/// the lowest recorded validation loss.
pub fn train<T: Scalar>(config: &TrainConfig, x: &Tensor<f64>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (n, p) = x.dims2()?;
    if p != config.model.input_dim {
        return Err(Error::Shape { op: "train", lhs: vec![n, p], rhs: vec![config.model.input_dim] });
    }
    let mut bundle = ModelBundle::<T>::new(config.objective, config.model.clone(), config.tau, config.seed)?;
    let (train_rows, val_rows) = train_val_split(n, config.val_fraction, config.seed);
    let drop_last = config.objective.is_contrastive();
    if drop_last && train_rows.len() < config.batch_size {
        return Err(Error::contract(format!(
            "{} training rows cannot fill a batch of {}",
            train_rows.len(),
            config.batch_size
        )));
    }
    let mut sampler = BatchSampler::new(train_rows.len(), config.batch_size, config.seed ^ STREAM_BATCHES, drop_last)?;
    let mut noise = derived_rng(config.seed, STREAM_NOISE);
    let sched = WsdSchedule::new(config.total_steps, config.lr);
    let mut adam = AdamState::new(&bundle.params, config.lr);

    let mut history = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(usize, f64, Vec<Param<T>>)> = None;
    let mut last_finite = None;

    for step in 0..config.total_steps {
        let batch: Vec<usize> = sampler.next_batch().iter().map(|&i| train_rows[i]).collect();
        let lr = sched.lr(step)?;
        let (grads, bd) = {
            let tape = Tape::<T>::new();
            let m = bundle.bind(&tape);
            let xb = tape.constant(x.select_rows(&batch)?.cast());
            let eval = objective_loss(config.objective, &m, &xb, &mut noise)
                .map_err(|e| diverged(e, step, last_finite))?;
            if !eval.breakdown.total.is_finite() {
                return Err(Error::Diverged { step, last_finite });
            }
            tape.backward(eval.total).map_err(|e| diverged(e, step, last_finite))?;
            (m.grads(), eval.breakdown)
        };
        adam_step(&mut bundle.params, &grads, &mut adam, lr).map_err(|e| diverged(e, step, last_finite))?;
        last_finite = Some(step);

        let done = step + 1;
        let val_now = done % config.val_interval == 0 || done == config.total_steps;
        let val_loss = if val_now {
            let v = validation_loss(&bundle, x, &val_rows, config.batch_size, config.seed)?;
            validation.push((done, v));
            if v.is_finite() && best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((done, v, bundle.params.clone()));
            }
            log::debug!("{} step {done}: train {:.4} val {v:.4}", config.objective, bd.total);
            Some(v)
        } else {
            None
        };
        if val_now || done % config.log_interval == 0 || step == 0 {
            history.push(StepRecord { step: done, lr, loss: bd, val_loss });
        }
    }

    let (best_step, best_val, params) =
        best.ok_or(Error::Diverged { step: config.total_steps, last_finite })?;
    bundle.params = params;
    bundle.step = best_step as u64;
    bundle.val_loss = Some(best_val);
    Ok(TrainOutcome { bundle, history, validation })
}

fn diverged(e: Error, step: usize, last_finite: Option<usize>) -> Error {
    match e {
        Error::NonFinite(what) => {
            log::error!("non-finite value at step {step}: {what}");
            Error::Diverged { step, last_finite }
        }
        other => other,
    }
}
