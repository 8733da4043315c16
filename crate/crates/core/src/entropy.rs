//! Bernoulli bit-cost estimator for ±1 features, its closed-form partials, and
//! the rate term of the training objective.

use crate::error::{Error, Result};

/// Probability clamp applied before any probability is used for coding.
pub const PROB_EPS: f64 = 1e-6;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check(p: f64, theta: i8) -> Result<()> {
    // small slack so values clamped in single precision still pass
    if !(PROB_EPS * (1.0 - 1e-6)..=1.0 - PROB_EPS * (1.0 - 1e-6)).contains(&p) {
        return Err(Error::ProbabilityRange(p));
    }
    if theta != 1 && theta != -1 {
        return Err(Error::Corrupt(format!("feature value {theta} is not ±1")));
    }
    Ok(())
}

/// Bits needed for `theta` when `p = P(theta = +1)`.
#[inline]
pub fn bits(p: f64, theta: i8) -> f64 {
    let t = theta as f64;
    -(0.5 * (1.0 + t) * p.log2() + 0.5 * (1.0 - t) * (1.0 - p).log2())
}

pub fn bit_estimate(p: f64, theta: i8) -> Result<f64> {
    check(p, theta)?;
    Ok(bits(p, theta))
}

/// `(∂bit/∂θ, ∂bit/∂p)` of [`bits`].
#[inline]
pub fn gradients(p: f64, theta: i8) -> (f64, f64) {
    let d_theta = 0.5 * (1.0 / p - 1.0).log2();
    let d_p = if theta > 0 {
        -1.0 / (p * std::f64::consts::LN_2)
    } else {
        -1.0 / ((p - 1.0) * std::f64::consts::LN_2)
    };
    (d_theta, d_p)
}

pub fn bit_gradients(p: f64, theta: i8) -> Result<(f64, f64)> {
    check(p, theta)?;
    Ok(gradients(p, theta))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyLossReport {
    /// Estimated bits over all valid features (rescaled when subsampled).
    pub total_bits: f64,
    pub valid_count: usize,
    /// Total feature count including invalid slots.
    pub total_count: usize,
    /// `total_bits / total_count`.
    pub loss_value: f64,
}

/// Pairwise summation; fixed order regardless of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Rate term over a (possibly subsampled) set of valid features.
///
/// `probs` and `signs` hold the sampled features; `valid_total` is the number
/// of valid features the sample stands for, and `total_count` the full
/// feature count used for normalization.
pub fn entropy_loss(probs: &[f64], signs: &[i8], valid_total: usize, total_count: usize) -> Result<EntropyLossReport> {
    if probs.len() != signs.len() {
        return Err(Error::WidthMismatch {
            expected: probs.len(),
            got: signs.len(),
        });
    }
    if probs.is_empty() || total_count == 0 {
        return Ok(EntropyLossReport {
            total_bits: 0.0,
            valid_count: 0,
            total_count,
            loss_value: 0.0,
        });
    }
    let per: Vec<f64> = probs
        .iter()
        .zip(signs)
        .map(|(&p, &s)| bit_estimate(p, s))
        .collect::<Result<_>>()?;
    let scale = valid_total as f64 / probs.len() as f64;
    let total_bits = pairwise_sum(&per) * scale;
    Ok(EntropyLossReport {
        total_bits,
        valid_count: valid_total,
        total_count,
        loss_value: total_bits / total_count as f64,
    })
}

/// `mse + λ · bits / M`.
pub fn total_loss(mse: f64, report: &EntropyLossReport, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    if report.total_count == 0 {
        return Ok(mse);
    }
    Ok(mse + lambda * report.total_bits / report.total_count as f64)
}
