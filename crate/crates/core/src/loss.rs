//! Value-level softmax, losses and divergences.
//!
//! These evaluate the same tape ops used during training, so the value and
//! gradient paths cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1]` before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0)
}

pub(crate) fn check_distribution_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < -1e-12) {
            bail!(Validation, "{what}: row {i} is not a probability vector (sum {sum})");
        }
    }
    Ok(())
}

/// `Σ_j p_j log(p̄_j / q̄_j)` with `p̄, q̄` clamped; zero-mass terms vanish.
pub(crate) fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| if pj == 0.0 { 0.0 } else { pj * (clamp_prob(pj) / clamp_prob(qj)).ln() })
        .sum()
}

/// `softmax(z / T)` over the last axis, max-subtracted.
pub fn softmax_temperature(z: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(z.clone());
    let y = tape.softmax(x, temperature)?;
    Ok(tape.value(y).clone())
}

/// Cross-entropy averaged over last-axis slices; accepts probabilities or logits.
pub fn cross_entropy(input: &Tensor, target: &Target, from_logits: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let l = tape.cross_entropy(x, target.clone(), from_logits)?;
    Ok(tape.value(l).item())
}

/// `KL(p ‖ q)`; both operands must be probability vectors.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(p.clone()), tape.constant(q.clone()));
    let l = tape.kl_div(a, b)?;
    Ok(tape.value(l).item())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = tape.mse(x, y)?;
    Ok(tape.value(l).item())
}

/// Binary cross-entropy of a positive-class probability.
pub fn binary_cross_entropy(p: f64, positive: bool) -> f64 {
    if positive {
        -clamp_prob(p).ln()
    } else {
        -clamp_prob(1.0 - p).ln()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalVariant {
    /// `-α(1-p)^γ log p` for positives, `-p^γ log(1-p)` for negatives.
    #[default]
    Standard,
    /// `-(1-p)^γ log p` for positives, `-(1+p)^γ log(1-p)` for negatives, no α.
    OnePlusP,
}

/// Binary focal loss of positive-class probability `p` (standard variant).
pub fn focal_loss(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    focal_loss_with(p, positive, gamma, alpha, FocalVariant::Standard)
}

pub fn focal_loss_with(p: f64, positive: bool, gamma: f64, alpha: f64, variant: FocalVariant) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if positive {
        let weight = match variant {
            FocalVariant::Standard => alpha,
            FocalVariant::OnePlusP => 1.0,
        };
        -weight * (1.0 - p).powf(gamma) * clamp_prob(p).ln()
    } else {
        let modulator = match variant {
            FocalVariant::Standard => p.powf(gamma),
            FocalVariant::OnePlusP => (1.0 + p).powf(gamma),
        };
        -modulator * clamp_prob(1.0 - p).ln()
    }
}

/// `d/dx x^γ`, taken as zero when γ = 0.
fn pow_slope(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

/// Derivative of [`focal_loss_with`] with respect to `p` (zero where `p` is clamped).
pub(crate) fn focal_grad(p: f64, positive: bool, gamma: f64, alpha: f64, variant: FocalVariant) -> f64 {
    let q = 1.0 - p;
    if positive {
        if !(PROB_EPS..=1.0).contains(&p) {
            return 0.0;
        }
        let weight = match variant {
            FocalVariant::Standard => alpha,
            FocalVariant::OnePlusP => 1.0,
        };
        weight * (pow_slope(q, gamma) * p.ln() - q.powf(gamma) / p)
    } else {
        if !(PROB_EPS..=1.0).contains(&q) {
            return 0.0;
        }
        let base = match variant {
            FocalVariant::Standard => p,
            FocalVariant::OnePlusP => 1.0 + p,
        };
        -pow_slope(base, gamma) * q.ln() + base.powf(gamma) / q
    }
}
