//! Noise calibration and samplers for the Laplace and Gaussian mechanisms.

use rand::RngCore;
use thiserror::Error;

use crate::scalar::DpFloat;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MechanismError {
    #[error("invalid privacy parameters: {0}")]
    InvalidPrivacyParams(String),
}

/// Noise mechanism fixed at validation time: Laplace iff delta is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Laplace,
    Gaussian,
}

/// Laplace scale `b = sensitivity / epsilon`.
pub fn laplace_scale<F: DpFloat>(sensitivity: F, epsilon: F) -> Result<F, MechanismError> {
    if !epsilon.is_finite() || epsilon <= F::zero() {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    check_sensitivity(sensitivity)?;
    Ok(sensitivity / epsilon)
}

/// Classical Gaussian-mechanism standard deviation,
/// `sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`, valid for `0 < epsilon <= 1`.
pub fn gaussian_sigma<F: DpFloat>(sensitivity: F, epsilon: F, delta: F) -> Result<F, MechanismError> {
    if epsilon > F::one() {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "the Gaussian mechanism requires epsilon <= 1, got {epsilon}"
        )));
    }
    classical_gaussian_sigma(sensitivity, epsilon, delta)
}

/// Same closed form as [`gaussian_sigma`] without the `epsilon <= 1` range check.
///
/// Only meaningful where no privacy guarantee is at stake (dummy data): above
/// epsilon = 1 the formula no longer certifies (epsilon, delta)-DP.
pub fn classical_gaussian_sigma<F: DpFloat>(sensitivity: F, epsilon: F, delta: F) -> Result<F, MechanismError> {
    if !epsilon.is_finite() || epsilon <= F::zero() {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if delta.is_nan() || delta <= F::zero() || delta >= F::one() {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "the Gaussian mechanism requires 0 < delta < 1, got {delta}"
        )));
    }
    check_sensitivity(sensitivity)?;
    let ratio = F::from_f64_lossy(1.25) / delta;
    Ok(sensitivity * (F::two() * ratio.ln()).sqrt() / epsilon)
}

fn check_sensitivity<F: DpFloat>(sensitivity: F) -> Result<(), MechanismError> {
    if !sensitivity.is_finite() || sensitivity < F::zero() {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "sensitivity must be non-negative and finite, got {sensitivity}"
        )));
    }
    Ok(())
}

/// Uniform draw in the open interval (0, 1) with 53 bits of resolution.
fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Draws from Laplace(0, scale) by inverting the CDF of one uniform draw.
pub fn sample_laplace<F: DpFloat, R: RngCore + ?Sized>(rng: &mut R, scale: F) -> F {
    if scale == F::zero() {
        return F::zero();
    }
    let v = open_unit(rng) - 0.5;
    let standard = -v.signum() * (1.0 - 2.0 * v.abs()).ln();
    F::from_f64_lossy(standard) * scale
}

/// Draws from Normal(0, sigma^2) with the Box-Muller transform.
pub fn sample_gaussian<F: DpFloat, R: RngCore + ?Sized>(rng: &mut R, sigma: F) -> F {
    if sigma == F::zero() {
        return F::zero();
    }
    let u1 = open_unit(rng);
    let u2 = open_unit(rng);
    let standard = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    F::from_f64_lossy(standard) * sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn laplace_scale_examples() {
        assert_eq!(laplace_scale(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(laplace_scale(65.0, 0.1).unwrap(), 650.0);
        assert_eq!(laplace_scale(0.0, 5.0).unwrap(), 0.0);
        assert!(laplace_scale(1.0, 0.0).is_err());
        assert!(laplace_scale(1.0, -1.0).is_err());
        assert!(laplace_scale(-1.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_sigma_examples() {
        // sqrt(2 ln(125000)) evaluated independently with Python's math module.
        let expected = 4.844_805_262_605_389_f64;
        let s = gaussian_sigma(1.0, 1.0, 1e-5).unwrap();
        assert!((s - expected).abs() < 1e-9, "{s}");
        let s = gaussian_sigma(1.0, 0.5, 1e-5).unwrap();
        assert!((s - 2.0 * expected).abs() < 1e-9, "{s}");
        assert!(gaussian_sigma(1.0, 1.0, 0.0).is_err());
        assert!(gaussian_sigma(1.0, 1.5, 1e-5).is_err());
        assert!(gaussian_sigma(1.0, 1.0, 1.0).is_err());
        assert!(classical_gaussian_sigma(1.0, 100.0, 0.99).is_ok());
    }

    #[test]
    fn works_in_single_precision() {
        let s: f32 = gaussian_sigma(1.0f32, 1.0, 1e-5).unwrap();
        assert!((s - 4.844_805).abs() < 1e-4);
        assert_eq!(laplace_scale(65.0f32, 0.5).unwrap(), 130.0);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x: f32 = sample_laplace(&mut rng, 2.0f32);
        assert!(x.is_finite());
    }

    #[test]
    fn zero_scale_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(sample_laplace(&mut rng, 0.0f64), 0.0);
        assert_eq!(sample_gaussian(&mut rng, 0.0f64), 0.0);
    }

    #[test]
    fn laplace_empirical_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_laplace(&mut rng, 2.0)).collect();
        let v = variance(&xs);
        assert!((v - 8.0).abs() / 8.0 < 0.05, "variance {v}");
    }

    #[test]
    fn gaussian_empirical_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_gaussian(&mut rng, 3.0)).collect();
        let v = variance(&xs);
        assert!((v - 9.0).abs() / 9.0 < 0.05, "variance {v}");
    }

    #[test]
    fn scales_are_monotone() {
        let eps = [0.01, 0.1, 0.3, 0.5, 0.9, 1.0];
        for w in eps.windows(2) {
            assert!(laplace_scale(2.0, w[0]).unwrap() > laplace_scale(2.0, w[1]).unwrap());
            assert!(gaussian_sigma(2.0, w[0], 1e-5).unwrap() > gaussian_sigma(2.0, w[1], 1e-5).unwrap());
        }
        for s in [0.0, 0.5, 1.0, 65.0] {
            assert!(laplace_scale(s, 0.5).unwrap() <= laplace_scale(s + 1.0, 0.5).unwrap());
            assert!(gaussian_sigma(s, 0.5, 1e-3).unwrap() <= gaussian_sigma(s + 1.0, 0.5, 1e-3).unwrap());
        }
    }
}
