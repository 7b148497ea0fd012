//! Cosine similarities, the mean-denominator discriminator `p(k=1)`,
//! InfoNCE, and the concentration bound for the in-batch negative mean.
//!
//! Negatives are always the other `B - 1` latent codes of the same batch.

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor, Var};

/// Floor on row norms before normalizing.
pub const NORM_EPS: f64 = 1e-12;

/// Default temperature for image experiments.
pub const TAU_IMAGES: f64 = 0.1;
/// Default temperature for the 2-D toy experiment.
pub const TAU_TOY: f64 = 1.0;

/// Pairwise cosine similarities of one batch of codes, plus the temperature.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityMatrix<'t, T: Scalar = f64> {
    pub cos: Var<'t, T>,
    pub tau: f64,
}

impl<'t, T: Scalar> SimilarityMatrix<'t, T> {
    pub fn batch_size(&self) -> usize {
        self.cos.shape()[0]
    }

    /// Temperature-scaled logits `s_ij = cos_ij / τ`.
    pub fn logits(&self) -> Var<'t, T> {
        if self.tau == 1.0 {
            return self.cos;
        }
        self.cos.mul_scalar(T::lit(1.0 / self.tau))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("temperature must be positive, got {tau}")))
    }
}

/// Rows scaled to unit length; rows with norm below [`NORM_EPS`] are divided by the floor.
pub fn normalize_rows<'t, T: Scalar>(z: &Var<'t, T>) -> Result<Var<'t, T>> {
    let norms = z.square().sum_axis(1, true)?.sqrt();
    let tiny = norms.value().data().iter().filter(|n| n.as_f64() < NORM_EPS).count();
    if tiny > 0 {
        log::warn!("{tiny} latent row(s) with norm < {NORM_EPS:e}; regularizing");
    }
    z.div(&norms.max_scalar(T::lit(NORM_EPS)))
}

/// `S[i][j] = cos(z_i, z_j)` for a `B×D` batch.
pub fn cosine_sim_matrix<'t, T: Scalar>(z: &Var<'t, T>, tau: f64) -> Result<SimilarityMatrix<'t, T>> {
    check_tau(tau)?;
    let shape = z.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::contract(format!(
            "cosine similarity needs a B×D batch with B ≥ 2, got {shape:?}"
        )));
    }
    let u = normalize_rows(z)?;
    let cos = u.matmul(&u.transpose()?)?;
    Ok(SimilarityMatrix { cos, tau })
}

/// `C[i][j] = cos(a_i, b_j)` for two equally sized batches.
pub fn cosine_cross<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape { op: "cosine_cross", lhs: sa, rhs: sb });
    }
    let ua = normalize_rows(a)?;
    let ub = normalize_rows(b)?;
    ua.matmul(&ub.transpose()?)
}

/// Per-sample discriminator terms.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput<'t, T: Scalar = f64> {
    /// `log p(k=1)` per row.
    pub log_p: Var<'t, T>,
    /// `log( mean_{j≠i} exp(s_ij) )` per row.
    pub log_negative_mean: Var<'t, T>,
}

impl<T: Scalar> DiscriminatorOutput<'_, T> {
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_p.value().data().iter().map(|v| v.as_f64().exp()).collect()
    }
}

/// `p_i = e^{s_ii} / (e^{s_ii} + mean_{j≠i} e^{s_ij})`, evaluated in log space.
pub fn p_k1<'t, T: Scalar>(sim: &SimilarityMatrix<'t, T>) -> Result<DiscriminatorOutput<'t, T>> {
    let b = sim.batch_size();
    if b < 2 {
        return Err(Error::contract("p_k1: need at least one negative (B ≥ 2)"));
    }
    let s = sim.logits();
    let log_negative_mean = s
        .offdiag_logsumexp()?
        .add_scalar(T::lit(-((b - 1) as f64).ln()));
    let pos = s.diag()?;
    let pair = Var::concat(
        &[pos.reshape(vec![b, 1])?, log_negative_mean.reshape(vec![b, 1])?],
        1,
    )?;
    let log_p = pos.sub(&pair.logsumexp(1, false)?)?;
    Ok(DiscriminatorOutput { log_p, log_negative_mean })
}

/// Mean over the batch of `-log softmax_j(s_ij)[positive]`.
///
/// `sim_pos[i]` is the cosine similarity of sample `i` with its positive and
/// must also appear in row `i` of `sim_all`, which holds all `B` candidates.
pub fn infonce_loss<'t, T: Scalar>(
    sim_pos: &Var<'t, T>,
    sim_all: &Var<'t, T>,
    tau: f64,
) -> Result<Var<'t, T>> {
    check_tau(tau)?;
    let (ps, als) = (sim_pos.shape(), sim_all.shape());
    if als.len() != 2 || als[0] != als[1] || ps != [als[0]] {
        return Err(Error::Shape { op: "infonce_loss", lhs: ps, rhs: als });
    }
    if als[0] < 2 {
        return Err(Error::contract("infonce_loss: need B ≥ 2"));
    }
    let inv = T::lit(1.0 / tau);
    let lse = sim_all.mul_scalar(inv).logsumexp(1, false)?;
    Ok(lse.sub(&sim_pos.mul_scalar(inv))?.mean())
}

/// Largest per-row gap between `-log p(k=1)` and the cross-entropy of a
/// softmax whose positive logit is shifted by `log(B-1)`.
///
/// The second side is evaluated directly from the similarity values without
/// touching the tape.
pub fn offset_equivalence_check<T: Scalar>(sim: &SimilarityMatrix<'_, T>) -> Result<f64> {
    let b = sim.batch_size();
    let disc = p_k1(sim)?;
    let lhs: Vec<f64> = disc.log_p.value().data().iter().map(|v| -v.as_f64()).collect();
    let cos = sim.cos.value();
    let offset = ((b - 1) as f64).ln();
    let mut worst = 0.0f64;
    for (i, lhs_i) in lhs.iter().enumerate() {
        let logits: Vec<f64> = (0..b)
            .map(|j| {
                let s = cos.data()[i * b + j].as_f64() / sim.tau;
                if i == j {
                    s + offset
                } else {
                    s
                }
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        worst = worst.max((lhs_i - (lse - logits[i])).abs());
    }
    Ok(worst)
}

/// Two-sided concentration bound on the in-batch negative mean:
/// `2 exp(-2 (B-1) ε² / (e^{1/τ} - e^{-1/τ})²)`.
pub fn hoeffding_bound(tau: f64, batch: usize, epsilon: f64) -> Result<f64> {
    check_tau(tau)?;
    if batch < 2 || !(epsilon > 0.0) {
        return Err(Error::contract(format!(
            "hoeffding_bound needs B ≥ 2 and ε > 0 (B={batch}, ε={epsilon})"
        )));
    }
    let range = (1.0 / tau).exp() - (-1.0 / tau).exp();
    Ok(2.0 * (-2.0 * (batch - 1) as f64 * epsilon * epsilon / (range * range)).exp())
}

/// `mean_j exp(cos(anchor, n_j) / τ)` over the rows of `negatives`.
pub fn negative_mean(anchor: &[f64], negatives: &Tensor<f64>, tau: f64) -> Result<f64> {
    let (n, d) = negatives.dims2()?;
    if d != anchor.len() || n == 0 {
        return Err(Error::Shape {
            op: "negative_mean",
            lhs: vec![anchor.len()],
            rhs: negatives.shape().to_vec(),
        });
    }
    let na = anchor.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    let total: f64 = (0..n)
        .map(|j| {
            let row = negatives.row(j);
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            let dot: f64 = anchor.iter().zip(row).map(|(a, b)| a * b).sum();
            (dot / (na * nr) / tau).exp()
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gaussian, seeded_rng, Tape};

    fn batch<'t>(tape: &'t Tape, rows: &[&[f64]]) -> Var<'t> {
        tape.param(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn orthonormal_rows() {
        let tape = Tape::<f64>::new();
        let s = cosine_sim_matrix(&batch(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]), 1.0).unwrap();
        assert_eq!(s.cos.value().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn scale_invariance() {
        let tape = Tape::<f64>::new();
        let s = cosine_sim_matrix(&batch(&tape, &[&[0.3, -1.0, 2.0], &[0.9, -3.0, 6.0]]), 1.0).unwrap();
        for v in s.cos.value().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_matches_pairwise_oracle() {
        let tape = Tape::<f64>::new();
        let z: Tensor<f64> = gaussian(vec![5, 8], 0.0, 1.0, &mut seeded_rng(4));
        let s = cosine_sim_matrix(&tape.param(z.clone()), 0.5).unwrap();
        let c = s.cos.value();
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (z.row(i), z.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((c.data()[i * 5 + j] - dot / (na * nb)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_row_is_regularized() {
        let tape = Tape::<f64>::new();
        let s = cosine_sim_matrix(&batch(&tape, &[&[0.0, 0.0], &[1.0, 0.0]]), 1.0).unwrap();
        assert!(s.cos.value().is_finite());
        assert_eq!(s.cos.value().data()[0], 0.0);
    }

    #[test]
    fn single_row_rejected() {
        let tape = Tape::<f64>::new();
        assert!(cosine_sim_matrix(&batch(&tape, &[&[1.0, 0.0]]), 1.0).is_err());
    }

    #[test]
    fn two_sample_direct_value() {
        // cos = ±1 along a line, τ = 1: p = e / (e + e^-1).
        let tape = Tape::<f64>::new();
        let s = cosine_sim_matrix(&batch(&tape, &[&[1.0, 0.0], &[-2.0, 0.0]]), 1.0).unwrap();
        let p = p_k1(&s).unwrap().probabilities();
        let e = 1f64.exp();
        for v in p {
            assert!((v - e / (e + 1.0 / e)).abs() < 1e-12);
            assert!((v - 0.8808).abs() < 1e-4);
        }
    }

    #[test]
    fn p_k1_invariant_under_row_rescaling() {
        let z: Tensor<f64> = gaussian(vec![6, 4], 0.0, 1.0, &mut seeded_rng(2));
        let mut scaled = z.clone();
        for i in 0..6 {
            let f = 0.1 + i as f64 * 1.7;
            for v in &mut scaled.data_mut()[i * 4..(i + 1) * 4] {
                *v *= f;
            }
        }
        let tape = Tape::<f64>::new();
        let a = p_k1(&cosine_sim_matrix(&tape.param(z), 0.3).unwrap()).unwrap().probabilities();
        let b = p_k1(&cosine_sim_matrix(&tape.param(scaled), 0.3).unwrap()).unwrap().probabilities();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_saturates_on_dominant_positive() {
        let tape = Tape::<f64>::new();
        let all = Tensor::from_rows(&[[41.0, 1.0, 0.5], [0.0, 40.7, 0.7], [0.2, -0.3, 40.0]]).unwrap();
        let all = tape.constant(all);
        let pos = all.diag().unwrap();
        let loss = infonce_loss(&pos, &all, 1.0).unwrap();
        assert!(loss.item().unwrap() < 1e-10);
    }

    #[test]
    fn offset_identity_for_two_samples() {
        let tape = Tape::<f64>::new();
        let s = cosine_sim_matrix(&batch(&tape, &[&[1.0, 0.2], &[-0.4, 1.0]]), 0.7).unwrap();
        assert!(offset_equivalence_check(&s).unwrap() < 1e-15);
    }

    #[test]
    fn bound_is_vacuous_as_epsilon_vanishes() {
        let b = hoeffding_bound(1.0, 50, 1e-9).unwrap();
        assert!((b - 2.0).abs() < 1e-12);
        assert!(hoeffding_bound(1.0, 1, 0.1).is_err());
        assert!(hoeffding_bound(0.0, 5, 0.1).is_err());
    }

    #[test]
    fn bound_depends_on_b_minus_one_times_eps_squared() {
        let a = hoeffding_bound(0.5, 101, 0.05).unwrap();
        let b = hoeffding_bound(0.5, 26, 2.0 * 0.05 * (25.0f64 / 100.0).sqrt() * 2.0).unwrap();
        assert!((a - b).abs() < 1e-15 * a.max(1e-300));
    }
}
