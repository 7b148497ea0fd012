//! Encoder, decoder and prior distributions.
//!
//! All log-densities return one value per batch row (summed over features).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{gaussian, Scalar, Tensor, Var};

/// Log-variance clamp applied to every encoder output.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-Gaussian latent code with its reparameterized sample.
///
/// `z == mean + exp(0.5 * log_var) * noise`, with `log_var` already clamped.
#[derive(Debug, Clone)]
pub struct GaussianCode<'t, T: Scalar = f64> {
    pub mean: Var<'t, T>,
    pub log_var: Var<'t, T>,
    pub z: Var<'t, T>,
    pub noise: Tensor<T>,
}

impl<'t, T: Scalar> GaussianCode<'t, T> {
    /// Log-density of `z` under this code's distribution.
    pub fn log_prob(&self, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        gaussian_log_prob(&self.mean, &self.log_var, z)
    }

    /// Another sample from the same distribution, with fresh noise.
    pub fn resample(&self, rng: &mut impl Rng) -> Result<GaussianCode<'t, T>> {
        let noise = gaussian(self.mean.shape(), 0.0, 1.0, rng);
        sample_with_noise(&self.mean, &self.log_var, noise)
    }
}

/// Draw `z = mean + σ ⊙ ε` with `ε ~ N(0, I)`; `z` stays differentiable
/// with respect to `mean` and `log_var`.
pub fn reparameterized_sample<'t, T: Scalar>(
    mean: &Var<'t, T>,
    log_var: &Var<'t, T>,
    rng: &mut impl Rng,
) -> Result<GaussianCode<'t, T>> {
    let noise = gaussian(mean.shape(), 0.0, 1.0, rng);
    sample_with_noise(mean, log_var, noise)
}

/// Reparameterized sample with caller-supplied noise.
pub fn sample_with_noise<'t, T: Scalar>(
    mean: &Var<'t, T>,
    log_var: &Var<'t, T>,
    noise: Tensor<T>,
) -> Result<GaussianCode<'t, T>> {
    let (ms, ls) = (mean.shape(), log_var.shape());
    if ms != ls || ms != noise.shape() {
        return Err(Error::Shape { op: "reparameterized_sample", lhs: ms, rhs: ls });
    }
    let log_var = log_var.clamp(T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
    let std = log_var.mul_scalar(T::lit(0.5)).exp();
    let eps = mean.tape().constant(noise.clone());
    let z = mean.add(&std.mul(&eps)?)?;
    Ok(GaussianCode { mean: *mean, log_var, z, noise })
}

fn require_finite<T: Scalar>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} contains non-finite values")))
    }
}

/// `Σ_d log N(z_d | mean_d, exp(log_var_d))` per row.
pub fn gaussian_log_prob<'t, T: Scalar>(
    mean: &Var<'t, T>,
    log_var: &Var<'t, T>,
    z: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    require_finite(mean, "gaussian mean")?;
    require_finite(log_var, "gaussian log-variance")?;
    require_finite(z, "gaussian sample")?;
    let (ms, zs) = (mean.shape(), z.shape());
    if ms != zs || ms != log_var.shape() || ms.len() != 2 {
        return Err(Error::Shape { op: "gaussian_log_prob", lhs: ms, rhs: zs });
    }
    let sq = z.sub(mean)?.square();
    let scaled = sq.mul(&log_var.neg().exp())?;
    let per_dim = scaled.add(log_var)?.add_scalar(T::lit(LN_2PI));
    Ok(per_dim.sum_axis(1, false)?.mul_scalar(T::lit(-0.5)))
}

/// Standard-normal prior over `dim`-dimensional codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSpec {
    pub dim: usize,
}

/// Prior log-density; the same computation as [`gaussian_log_prob`] with a zero code.
pub fn prior_log_prob<'t, T: Scalar>(spec: PriorSpec, z: &Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != spec.dim {
        return Err(Error::Shape { op: "prior_log_prob", lhs: vec![spec.dim], rhs: shape });
    }
    let tape = z.tape();
    let zero = tape.constant(Tensor::zeros(shape.clone()));
    let zero_lv = tape.constant(Tensor::zeros(shape));
    gaussian_log_prob(&zero, &zero_lv, z)
}

/// `Σ_p [x log σ(l) + (1-x) log(1-σ(l))]` per row, as `x·l - softplus(l)`.
pub fn bernoulli_log_prob<'t, T: Scalar>(logits: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (ls, xs) = (logits.shape(), x.shape());
    if ls != xs || ls.len() != 2 {
        return Err(Error::Shape { op: "bernoulli_log_prob", lhs: ls, rhs: xs });
    }
    if let Some(bad) = x.value().data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::contract(format!(
            "bernoulli target must be 0 or 1, found {bad}"
        )));
    }
    x.mul(logits)?.sub(&logits.softplus())?.sum_axis(1, false)
}

/// Closed-form `KL(N(mean, exp(log_var)) || N(0, I))` per row.
pub fn kl_to_standard_normal<'t, T: Scalar>(
    mean: &Var<'t, T>,
    log_var: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let per_dim = mean
        .square()
        .add(&log_var.exp())?
        .sub(log_var)?
        .add_scalar(T::lit(-1.0));
    Ok(per_dim.sum_axis(1, false)?.mul_scalar(T::lit(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{seeded_rng, Tape};

    fn mat<'t>(tape: &'t Tape, rows: &[&[f64]]) -> Var<'t> {
        tape.param(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn standard_normal_at_origin() {
        let tape = Tape::<f64>::new();
        let lp = gaussian_log_prob(&mat(&tape, &[&[0.0]]), &mat(&tape, &[&[0.0]]), &mat(&tape, &[&[0.0]]))
            .unwrap();
        assert!((lp.value().data()[0] + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn two_dims_at_mean() {
        let tape = Tape::<f64>::new();
        let m = mat(&tape, &[&[1.0, 1.0]]);
        let lv = mat(&tape, &[&[0.0, 0.0]]);
        let lp = gaussian_log_prob(&m, &lv, &m).unwrap();
        assert!((lp.value().data()[0] + LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_rejected() {
        let tape = Tape::<f64>::new();
        let m = mat(&tape, &[&[f64::NAN]]);
        let lv = mat(&tape, &[&[0.0]]);
        assert!(matches!(gaussian_log_prob(&m, &lv, &lv), Err(Error::Contract(_))));
    }

    #[test]
    fn prior_examples() {
        let tape = Tape::<f64>::new();
        let z = mat(&tape, &[&[1.0, 1.0, 1.0, 1.0]]);
        let lp = prior_log_prob(PriorSpec { dim: 4 }, &z).unwrap();
        let expected = -4.0 * 0.5 * LN_2PI - 2.0;
        assert!((lp.value().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn vanishing_noise_sample_sits_on_mean() {
        let tape = Tape::<f64>::new();
        let m = mat(&tape, &[&[0.3, -1.2, 5.0]]);
        let lv = mat(&tape, &[&[-1e6, -1e6, -1e6]]);
        let code = reparameterized_sample(&m, &lv, &mut seeded_rng(0)).unwrap();
        assert_eq!(code.log_var.value().data(), &[LOG_VAR_MIN; 3]);
        // σ = e^-5 ≈ 0.0067, so |z - mean| < 0.01 whenever |ε| < 1.48.
        for ((z, mu), e) in code.z.value().data().iter().zip(m.value().data()).zip(code.noise.data()) {
            if e.abs() <= 1.48 {
                assert!((z - mu).abs() < 0.01);
            }
        }
    }

    #[test]
    fn sample_reconstructs_from_noise() {
        let tape = Tape::<f64>::new();
        let m = mat(&tape, &[&[0.5, -0.5], &[1.0, 2.0]]);
        let lv = mat(&tape, &[&[0.2, -0.3], &[11.0, 0.0]]);
        let code = reparameterized_sample(&m, &lv, &mut seeded_rng(9)).unwrap();
        let lvc = code.log_var.value().clone();
        assert_eq!(lvc.data()[2], LOG_VAR_MAX);
        for i in 0..4 {
            let expected = m.value().data()[i] + (0.5 * lvc.data()[i]).exp() * code.noise.data()[i];
            assert_eq!(code.z.value().data()[i], expected);
        }
    }

    #[test]
    fn grad_of_sample_sum_wrt_mean_is_ones() {
        let tape = Tape::<f64>::new();
        let m = mat(&tape, &[&[0.5, -0.5], &[1.0, 2.0]]);
        let lv = mat(&tape, &[&[0.2, -0.3], &[0.1, 0.0]]);
        let code = reparameterized_sample(&m, &lv, &mut seeded_rng(1)).unwrap();
        tape.backward(code.z.sum()).unwrap();
        assert_eq!(m.grad().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn bernoulli_zero_logits() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(vec![2, 5]));
        let x = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 1.0, 1.0, 0.0], [0.0; 5]]).unwrap());
        let lp = bernoulli_log_prob(&l, &x).unwrap();
        for v in lp.value().data() {
            assert!((v - 5.0 * 0.5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn bernoulli_saturation() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::full(vec![1, 3], 20.0));
        let x = tape.constant(Tensor::ones(vec![1, 3]));
        let lp = bernoulli_log_prob(&l, &x).unwrap();
        assert!(lp.value().data()[0].abs() / 3.0 < 1e-8);
    }

    #[test]
    fn bernoulli_rejects_non_binary_targets() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(vec![1, 2]));
        let x = tape.constant(Tensor::from_rows(&[[0.5, 1.0]]).unwrap());
        assert!(matches!(bernoulli_log_prob(&l, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn bernoulli_stable_over_wide_logits() {
        let tape = Tape::<f64>::new();
        let logits: Vec<f64> = (0..161).map(|i| -80.0 + i as f64).collect();
        let l = tape.param(Tensor::new(vec![2, 161], [logits.clone(), logits].concat()).unwrap());
        let x = tape.constant(Tensor::new(vec![2, 161], [vec![0.0; 161], vec![1.0; 161]].concat()).unwrap());
        let lp = bernoulli_log_prob(&l, &x).unwrap();
        assert!(lp.value().is_finite());
        tape.backward(lp.sum()).unwrap();
        assert!(l.grad().unwrap().is_finite());
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::zeros(vec![3, 4]));
        let lv = tape.constant(Tensor::zeros(vec![3, 4]));
        let kl = kl_to_standard_normal(&m, &lv).unwrap();
        assert_eq!(kl.value().data(), &[0.0; 3]);
    }
}
