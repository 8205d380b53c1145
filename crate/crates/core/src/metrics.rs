//! Classification and correlation metrics.

use crate::error::{bail, Result};

/// Binary confusion counts with class 1 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_binary(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        check_lengths(predictions.len(), labels.len())?;
        let mut c = Self::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(Validation, "{a} predictions for {b} labels");
    }
    if a == 0 {
        bail!(Validation, "metrics need at least one sample");
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Micro-averaged F1 over all classes from pooled per-class counts.
pub fn f1_micro<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    // Single-label: each miss is one false positive (predicted class) and
    // one false negative (true class).
    let tp = predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64;
    let miss = labels.len() as f64 - tp;
    let (fp, fn_) = (miss, miss);
    let denom = 2.0 * tp + fp + fn_;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn matthews_corr(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    let c = ConfusionCounts::from_binary(predictions, labels)?;
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    Ok(if denom == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / denom })
}

/// Fractional ranks starting at 1; ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `None` when either argument is constant (correlation undefined).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        bail!(Validation, "correlation needs two equal-length series of at least 2, got {} and {}", x.len(), y.len());
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        bail!(Validation, "correlation needs two equal-length series of at least 2, got {} and {}", x.len(), y.len());
    }
    pearson(&average_ranks(x), &average_ranks(y))
}
