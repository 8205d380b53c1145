//! Machine-paraphrase detection: averaged word vectors, linear and Bayes
//! classifiers, grid search, transformer fine-tuning and a synonym-swap
//! paraphrase generator.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target};
use crate::data::{derive_seed, pad_sequences};
use crate::error::{bail, Error, Result};
use crate::metrics::f1_micro;
use crate::mlm::{accumulate, apply_update};
use crate::optim::{AdamW, AdamWState};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, CLS, SEP};
use crate::transformer::{encode, head_logits, EncoderInput, HeadKind, ModelConfig, ModelParams};

/// Measured share of replaced words for three paraphrasing tools.
pub const SPINNERCHIEF_DF_RATIO: f64 = 0.1258;
pub const SPINNERCHIEF_IF_RATIO: f64 = 0.1937;
pub const SPINBOT_RATIO: f64 = 0.2038;

/// Lowercased whitespace tokens.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut table = HashMap::new();
        for (w, v) in entries {
            if v.len() != dim {
                bail!(Dimension, "vector for {w} has {} components, expected {dim}", v.len());
            }
            if table.insert(w.clone(), v).is_some() {
                log::warn!("duplicate word vector for {w}; keeping the last one");
            }
        }
        if table.is_empty() || dim == 0 {
            bail!(Validation, "word vector table is empty");
        }
        Ok(Self { dim, table })
    }

    /// Text format: `word f1 … fD` per line; `D` is taken from the first line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Format { line: i + 1, message: e.to_string() })?;
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(Error::Format { line: i + 1, message: format!("{} components, expected {d}", values.len()) });
            }
            entries.push((word.to_string(), values));
        }
        Self::new(dim.unwrap_or(0), entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes in sorted word order.
    pub fn to_text(&self) -> String {
        let mut words: Vec<&String> = self.table.keys().collect();
        words.sort();
        let mut s = String::new();
        for w in words {
            s.push_str(w);
            for v in &self.table[w] {
                s.push_str(&format!(" {v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.table.get(word).map(Vec::as_slice)
    }
}

/// Mean vector of the in-vocabulary tokens; the flag is set (and the vector
/// zero) when no token has a vector.
pub fn embed_average(tokens: &[String], table: &WordVectors) -> (Vec<f64>, bool) {
    let mut sum = vec![0.0; table.dim()];
    let mut n = 0usize;
    for t in tokens {
        if let Some(v) = table.get(t) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    if n == 0 {
        return (sum, true);
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    (sum, false)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub text: String,
    /// 0 for original, 1 for machine-paraphrased.
    pub label: u8,
    #[serde(default)]
    pub source: String,
}

pub fn parse_paragraphs(text: &str) -> Result<Vec<Paragraph>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Paragraph =
            serde_json::from_str(line).map_err(|e| Error::Format { line: i + 1, message: e.to_string() })?;
        if p.label > 1 {
            return Err(Error::Format { line: i + 1, message: format!("label {} is not 0 or 1", p.label) });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn paragraphs_jsonl(paragraphs: &[Paragraph]) -> String {
    paragraphs.iter().map(|p| serde_json::to_string(p).expect("plain struct") + "\n").collect()
}

/// Rows of features with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<u8>) -> Result<Self> {
        if x.len() != y.len() {
            bail!(Dimension, "{} rows for {} labels", x.len(), y.len());
        }
        if let Some(first) = x.first() {
            if x.iter().any(|r| r.len() != first.len()) {
                bail!(Dimension, "feature rows differ in length");
            }
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            bail!(Validation, "feature matrix contains non-finite values");
        }
        if y.iter().any(|&l| l > 1) {
            bail!(Validation, "labels must be 0 or 1");
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn check_trainable(&self) -> Result<()> {
        if self.len() < 2 || !self.y.contains(&0) || !self.y.contains(&1) {
            bail!(Validation, "training needs at least one example of each class");
        }
        Ok(())
    }

    fn signs(&self) -> Vec<f64> {
        self.y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
    }

    /// Labels swapped.
    pub fn flipped(&self) -> Self {
        Self { x: self.x.clone(), y: self.y.iter().map(|&l| 1 - l).collect() }
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s: String = (0..d).map(|j| format!("f{j},")).collect();
        s.push_str("label\n");
        for (row, y) in self.x.iter().zip(&self.y) {
            for v in row {
                s.push_str(&format!("{v},"));
            }
            s.push_str(&format!("{y}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        lines.next();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Format { line: i + 1, message: e.to_string() })?;
            let Some((&label, feats)) = vals.split_last() else { continue };
            if label != 0.0 && label != 1.0 {
                return Err(Error::Format { line: i + 1, message: format!("label {label} is not 0 or 1") });
            }
            x.push(feats.to_vec());
            y.push(label as u8);
        }
        Self::new(x, y)
    }
}

/// Averaged-embedding features; returns the dataset and the number of
/// paragraphs without any in-vocabulary token.
pub fn paragraph_features(paragraphs: &[Paragraph], table: &WordVectors) -> Result<(Dataset, usize)> {
    let mut oov = 0;
    let mut x = Vec::with_capacity(paragraphs.len());
    for p in paragraphs {
        let (v, all_oov) = embed_average(&tokenize_text(&p.text), table);
        oov += all_oov as usize;
        x.push(v);
    }
    Ok((Dataset::new(x, paragraphs.iter().map(|p| p.label).collect())?, oov))
}

/// Per-feature z-scoring fitted on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            bail!(Validation, "cannot standardize an empty dataset");
        }
        let n = data.len() as f64;
        let d = data.dim();
        let mut mean = vec![0.0; d];
        for r in &data.x {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in &data.x {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        let std = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let x = data
            .x
            .iter()
            .map(|r| r.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect();
        Dataset::new(x, data.y.clone())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    /// `σ(w·x + b)`.
    Logistic { w: Vec<f64>, b: f64 },
    /// Two-class softmax with one weight vector per class.
    Softmax { w: [Vec<f64>; 2], b: [f64; 2] },
    GaussianNb { mean: [Vec<f64>; 2], var: [Vec<f64>; 2], log_prior: [f64; 2] },
    /// `w·[x, 1]`; the last weight is the bias.
    LinearSvm { w: Vec<f64> },
}

impl Classifier {
    /// Positive values predict class 1.
    pub fn decision(&self, x: &[f64]) -> f64 {
        match self {
            Classifier::Logistic { w, b } => dot(w, x) + b,
            Classifier::Softmax { w, b } => (dot(&w[1], x) + b[1]) - (dot(&w[0], x) + b[0]),
            Classifier::GaussianNb { .. } => {
                let ll = self.nb_log_joint(x);
                ll[1] - ll[0]
            }
            Classifier::LinearSvm { w } => dot(&w[..x.len()], x) + w[x.len()],
        }
    }

    fn nb_log_joint(&self, x: &[f64]) -> [f64; 2] {
        let Classifier::GaussianNb { mean, var, log_prior } = self else { unreachable!() };
        let mut out = *log_prior;
        for c in 0..2 {
            for j in 0..x.len() {
                let d = x[j] - mean[c][j];
                out[c] -= 0.5 * ((2.0 * std::f64::consts::PI * var[c][j]).ln() + d * d / var[c][j]);
            }
        }
        out
    }

    /// `P(class 1 | x)` for the probabilistic models, `None` for the SVM.
    pub fn probability(&self, x: &[f64]) -> Option<f64> {
        match self {
            Classifier::LinearSvm { .. } => None,
            _ => Some(sigmoid(self.decision(x))),
        }
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        (self.decision(x) > 0.0) as u8
    }

    pub fn predict_all(&self, data: &Dataset) -> Vec<u8> {
        data.x.iter().map(|r| self.predict(r)).collect()
    }

    pub fn f1(&self, data: &Dataset) -> Result<f64> {
        f1_micro(&self.predict_all(data), &data.y)
    }
}

/// Optimizer variants standing in for the four solver names of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Gd,
    Momentum,
    Backtracking,
    MomentumBacktracking,
}

impl Solver {
    pub const ALL: [Solver; 4] = [Solver::Gd, Solver::Momentum, Solver::Backtracking, Solver::MomentumBacktracking];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Gd => "gd",
            Solver::Momentum => "momentum",
            Solver::Backtracking => "backtracking",
            Solver::MomentumBacktracking => "momentum_backtracking",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown solver {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiClass {
    Ovr,
    Softmax,
}

impl MultiClass {
    pub fn name(self) -> &'static str {
        match self {
            MultiClass::Ovr => "ovr",
            MultiClass::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ovr" => Ok(MultiClass::Ovr),
            "softmax" => Ok(MultiClass::Softmax),
            _ => bail!(Config, "unknown multi-class mode {s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub solver: Solver,
    pub multi_class: MultiClass,
    pub max_iter: usize,
    pub tolerance: f64,
    pub l2: f64,
    pub step: f64,
    pub momentum: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Backtracking,
            multi_class: MultiClass::Ovr,
            max_iter: 1000,
            tolerance: 1e-4,
            l2: 1e-4,
            step: 0.5,
            momentum: 0.9,
        }
    }
}

/// Flat parameter vector and the objective the solvers minimize.
trait Objective {
    fn loss(&self, theta: &[f64]) -> f64;
    fn grad(&self, theta: &[f64]) -> Vec<f64>;
}

/// Mean log-loss with `±1` labels plus `l2/2 ‖w‖²`; `theta = [w, b]`.
struct BinaryLogLoss<'a> {
    data: &'a Dataset,
    signs: Vec<f64>,
    l2: f64,
}

impl Objective for BinaryLogLoss<'_> {
    fn loss(&self, theta: &[f64]) -> f64 {
        let d = self.data.dim();
        let n = self.data.len() as f64;
        let data_term: f64 =
            self.data.x.iter().zip(&self.signs).map(|(x, s)| softplus(-s * (dot(&theta[..d], x) + theta[d]))).sum();
        data_term / n + 0.5 * self.l2 * dot(&theta[..d], &theta[..d])
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.data.dim();
        let n = self.data.len() as f64;
        let mut g = vec![0.0; d + 1];
        for (x, s) in self.data.x.iter().zip(&self.signs) {
            let coef = -s * sigmoid(-s * (dot(&theta[..d], x) + theta[d])) / n;
            g[..d].iter_mut().zip(x).for_each(|(gi, xi)| *gi += coef * xi);
            g[d] += coef;
        }
        g[..d].iter_mut().zip(&theta[..d]).for_each(|(gi, t)| *gi += self.l2 * t);
        g
    }
}

/// Two-class softmax cross-entropy; `theta = [w0, b0, w1, b1]`. Each class
/// is handled by the same code path so swapping labels mirrors the weights.
struct SoftmaxLoss<'a> {
    data: &'a Dataset,
    l2: f64,
}

impl SoftmaxLoss<'_> {
    fn scores(&self, theta: &[f64], x: &[f64]) -> [f64; 2] {
        let d = x.len();
        [dot(&theta[..d], x) + theta[d], dot(&theta[d + 1..2 * d + 1], x) + theta[2 * d + 1]]
    }
}

impl Objective for SoftmaxLoss<'_> {
    fn loss(&self, theta: &[f64]) -> f64 {
        let d = self.data.dim();
        let n = self.data.len() as f64;
        let mut total = 0.0;
        for (x, &y) in self.data.x.iter().zip(&self.data.y) {
            let z = self.scores(theta, x);
            let (own, other) = (z[y as usize], z[1 - y as usize]);
            total += softplus(other - own);
        }
        let reg = dot(&theta[..d], &theta[..d]) + dot(&theta[d + 1..2 * d + 1], &theta[d + 1..2 * d + 1]);
        total / n + 0.5 * self.l2 * reg
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.data.dim();
        let n = self.data.len() as f64;
        let mut g = vec![0.0; 2 * d + 2];
        for (x, &y) in self.data.x.iter().zip(&self.data.y) {
            let z = self.scores(theta, x);
            for c in 0..2 {
                let p = sigmoid(z[c] - z[1 - c]);
                let coef = (p - (c == y as usize) as u8 as f64) / n;
                let off = c * (d + 1);
                g[off..off + d].iter_mut().zip(x).for_each(|(gi, xi)| *gi += coef * xi);
                g[off + d] += coef;
            }
        }
        for c in 0..2 {
            let off = c * (d + 1);
            for j in 0..d {
                g[off + j] += self.l2 * theta[off + j];
            }
        }
        g
    }
}

/// Runs `solver` from zero and returns the parameters and loss history.
fn minimize(obj: &dyn Objective, dim: usize, cfg: &LogRegConfig) -> (Vec<f64>, Vec<f64>) {
    let mut theta = vec![0.0; dim];
    let mut velocity = vec![0.0; dim];
    let mut loss = obj.loss(&theta);
    let mut history = vec![loss];
    let mut step = cfg.step;
    for _ in 0..cfg.max_iter {
        let g = obj.grad(&theta);
        let next = match cfg.solver {
            Solver::Gd => theta.iter().zip(&g).map(|(t, gi)| t - cfg.step * gi).collect::<Vec<_>>(),
            Solver::Momentum => {
                velocity.iter_mut().zip(&g).for_each(|(v, gi)| *v = cfg.momentum * *v - cfg.step * gi);
                theta.iter().zip(&velocity).map(|(t, v)| t + v).collect()
            }
            Solver::Backtracking | Solver::MomentumBacktracking => {
                let mut dir: Vec<f64> = g.iter().map(|x| -x).collect();
                if cfg.solver == Solver::MomentumBacktracking {
                    let cand: Vec<f64> = velocity.iter().zip(&dir).map(|(v, d)| cfg.momentum * v + d).collect();
                    if dot(&cand, &g) < 0.0 {
                        dir = cand;
                    }
                }
                let slope = dot(&dir, &g);
                step = (step * 2.0).min(1e3);
                let mut accepted = None;
                while step > 1e-12 {
                    let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
                    let l = obj.loss(&cand);
                    if l <= loss + 1e-4 * step * slope {
                        accepted = Some(cand);
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some(c) => {
                        velocity = dir.iter().map(|d| step * d).collect();
                        c
                    }
                    None => theta.clone(),
                }
            }
        };
        let new_loss = obj.loss(&next);
        if !new_loss.is_finite() {
            break;
        }
        let improvement = loss - new_loss;
        theta = next;
        loss = new_loss;
        history.push(loss);
        if improvement.abs() < cfg.tolerance {
            break;
        }
    }
    (theta, history)
}

/// Logistic regression by full-batch first-order descent; also returns the
/// loss after every iteration.
pub fn train_logreg_with_history(data: &Dataset, cfg: &LogRegConfig) -> Result<(Classifier, Vec<f64>)> {
    data.check_trainable()?;
    if !(cfg.step > 0.0) || !(cfg.l2 >= 0.0) || !(cfg.tolerance >= 0.0) {
        bail!(Config, "logistic regression needs a positive step and non-negative l2 and tolerance");
    }
    let d = data.dim();
    match cfg.multi_class {
        MultiClass::Ovr => {
            let obj = BinaryLogLoss { data, signs: data.signs(), l2: cfg.l2 };
            let (theta, h) = minimize(&obj, d + 1, cfg);
            Ok((Classifier::Logistic { w: theta[..d].to_vec(), b: theta[d] }, h))
        }
        MultiClass::Softmax => {
            let obj = SoftmaxLoss { data, l2: cfg.l2 };
            let (theta, h) = minimize(&obj, 2 * d + 2, cfg);
            let w = [theta[..d].to_vec(), theta[d + 1..2 * d + 1].to_vec()];
            Ok((Classifier::Softmax { w, b: [theta[d], theta[2 * d + 1]] }, h))
        }
    }
}

pub fn train_logreg(data: &Dataset, cfg: &LogRegConfig) -> Result<Classifier> {
    Ok(train_logreg_with_history(data, cfg)?.0)
}

pub const NB_VAR_FLOOR: f64 = 1e-9;

/// Gaussian naive Bayes with per-class, per-feature maximum-likelihood
/// means and variances (floored) and empirical priors.
pub fn train_nb(data: &Dataset) -> Result<Classifier> {
    data.check_trainable()?;
    let d = data.dim();
    let mut count = [0.0f64; 2];
    let mut sum = [vec![0.0; d], vec![0.0; d]];
    for (x, &y) in data.x.iter().zip(&data.y) {
        let c = y as usize;
        count[c] += 1.0;
        sum[c].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    let mean = [0, 1].map(|c| sum[c].iter().map(|s| s / count[c]).collect::<Vec<_>>());
    let mut sq = [vec![0.0; d], vec![0.0; d]];
    for (x, &y) in data.x.iter().zip(&data.y) {
        let c = y as usize;
        sq[c].iter_mut().zip(x.iter().zip(&mean[c])).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let var = [0, 1].map(|c| sq[c].iter().map(|s| (s / count[c]).max(NB_VAR_FLOOR)).collect::<Vec<_>>());
    let n = data.len() as f64;
    Ok(Classifier::GaussianNb { mean, var, log_prior: [(count[0] / n).ln(), (count[1] / n).ln()] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Initial subgradient step; iteration `t` uses `step / √t`.
    pub step: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 10.0, tolerance: 1e-6, max_iter: 2000, step: 1.0 }
    }
}

/// `‖w‖² / (2·C·N) + mean hinge` over the bias-augmented features.
pub fn svm_objective(data: &Dataset, w: &[f64], c: f64) -> f64 {
    let n = data.len() as f64;
    let d = data.dim();
    let hinge: f64 =
        data.x.iter().zip(data.signs()).map(|(x, s)| (1.0 - s * (dot(&w[..d], x) + w[d])).max(0.0)).sum();
    dot(w, w) / (2.0 * c * n) + hinge / n
}

/// Linear SVM by full-batch subgradient descent on the hinge term with the
/// penalty handled by a proximal step; returns the average of the iterates.
pub fn train_linear_svm(data: &Dataset, cfg: &SvmConfig) -> Result<Classifier> {
    data.check_trainable()?;
    if !(cfg.c > 0.0) || !(cfg.step > 0.0) {
        bail!(Config, "SVM needs positive C and step");
    }
    let d = data.dim();
    let n = data.len() as f64;
    let signs = data.signs();
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let mut last_check = svm_objective(data, &avg, cfg.c);
    for t in 1..=cfg.max_iter {
        let mut g = vec![0.0; d + 1];
        for (x, s) in data.x.iter().zip(&signs) {
            if s * (dot(&w[..d], x) + w[d]) < 1.0 {
                g[..d].iter_mut().zip(x).for_each(|(gi, xi)| *gi -= s * xi / n);
                g[d] -= s / n;
            }
        }
        // Hinge subgradient step, then the penalty applied implicitly so that
        // tiny C cannot overshoot.
        let eta = cfg.step / (t as f64).sqrt();
        let shrink = 1.0 + eta / (cfg.c * n);
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi = (*wi - eta * gi) / shrink);
        let k = t as f64;
        avg.iter_mut().zip(&w).for_each(|(a, wi)| *a += (wi - *a) / k);
        if t % 10 == 0 {
            let obj = svm_objective(data, &avg, cfg.c);
            if (last_check - obj).abs() < cfg.tolerance {
                break;
            }
            last_check = obj;
        }
    }
    Ok(Classifier::LinearSvm { w: avg })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Int(i64),
    Num(f64),
    Text(String),
}

impl AxisValue {
    pub fn as_f64(&self) -> Result<f64> {
        match self {
            AxisValue::Int(i) => Ok(*i as f64),
            AxisValue::Num(x) => Ok(*x),
            AxisValue::Text(s) => bail!(Config, "expected a number, got {s}"),
        }
    }

    pub fn as_str(&self) -> Result<&str> {
        match self {
            AxisValue::Text(s) => Ok(s),
            other => bail!(Config, "expected text, got {other}"),
        }
    }
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Int(i) => write!(f, "{i}"),
            AxisValue::Num(x) => write!(f, "{x}"),
            AxisValue::Text(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<AxisValue>)>,
}

pub type Cell = Vec<(String, AxisValue)>;

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.1.is_empty()) {
            bail!(Config, "grid needs at least one axis and no empty axis");
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(|a| a.1.len()).product()
    }

    /// The `i`-th cell in row-major order (last axis varies fastest).
    pub fn cell(&self, mut i: usize) -> Cell {
        let mut out = vec![(String::new(), AxisValue::Int(0)); self.axes.len()];
        for (k, (name, values)) in self.axes.iter().enumerate().rev() {
            out[k] = (name.clone(), values[i % values.len()].clone());
            i /= values.len();
        }
        out
    }

    /// Solver × max iterations × multi-class mode × tolerance for logistic regression.
    pub fn logreg_default() -> Self {
        let text = |v: &[&str]| v.iter().map(|s| AxisValue::Text(s.to_string())).collect();
        Self {
            axes: vec![
                ("solver".into(), text(&Solver::ALL.map(Solver::name))),
                ("max_iter".into(), [500, 1000, 1500].map(AxisValue::Int).to_vec()),
                ("multi_class".into(), text(&["ovr", "softmax"])),
                ("tolerance".into(), [0.01, 0.001, 0.0001, 0.00001].map(AxisValue::Num).to_vec()),
            ],
        }
    }
}

/// Overrides `base` with any of `solver`, `max_iter`, `multi_class`,
/// `tolerance`, `l2`, `step` present in `cell`.
pub fn logreg_config_from_cell(base: &LogRegConfig, cell: &Cell) -> Result<LogRegConfig> {
    let mut c = base.clone();
    for (name, v) in cell {
        match name.as_str() {
            "solver" => c.solver = Solver::parse(v.as_str()?)?,
            "max_iter" => c.max_iter = v.as_f64()? as usize,
            "multi_class" => c.multi_class = MultiClass::parse(v.as_str()?)?,
            "tolerance" => c.tolerance = v.as_f64()?,
            "l2" => c.l2 = v.as_f64()?,
            "step" => c.step = v.as_f64()?,
            other => bail!(Config, "unknown logistic regression axis {other}"),
        }
    }
    Ok(c)
}

pub fn svm_config_from_cell(base: &SvmConfig, cell: &Cell) -> Result<SvmConfig> {
    let mut c = base.clone();
    for (name, v) in cell {
        match name.as_str() {
            "c" | "C" => c.c = v.as_f64()?,
            "tolerance" => c.tolerance = v.as_f64()?,
            "max_iter" => c.max_iter = v.as_f64()? as usize,
            "step" => c.step = v.as_f64()?,
            other => bail!(Config, "unknown SVM axis {other}"),
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub rows: Vec<(Cell, f64)>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &Cell {
        &self.rows[self.best].0
    }

    pub fn best_metric(&self) -> f64 {
        self.rows[self.best].1
    }

    pub fn to_csv(&self, metric: &str) -> String {
        let mut s = String::new();
        if let Some((cell, _)) = self.rows.first() {
            for (name, _) in cell {
                s.push_str(name);
                s.push(',');
            }
        }
        s.push_str(metric);
        s.push('\n');
        for (cell, m) in &self.rows {
            for (_, v) in cell {
                s.push_str(&format!("{v},"));
            }
            s.push_str(&format!("{m}\n"));
        }
        s
    }
}

/// Evaluates every cell (possibly concurrently) and keeps results in grid
/// order; the best is the first cell with the highest metric.
pub fn grid_search(spec: &GridSpec, evaluate: impl Fn(&Cell) -> Result<f64> + Sync) -> Result<GridResult> {
    spec.validate()?;
    let rows: Vec<(Cell, f64)> = (0..spec.size())
        .into_par_iter()
        .map(|i| {
            let cell = spec.cell(i);
            let m = evaluate(&cell)?;
            Ok((cell, m))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, m)) in rows.iter().enumerate() {
        if *m > rows[best].1 || (rows[best].1.is_nan() && !m.is_nan()) {
            best = i;
        }
    }
    Ok(GridResult { rows, best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub optimizer: AdamW,
    /// Train only the classification head.
    pub freeze_encoder: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 8, max_len: 128, optimizer: AdamW { lr: 5e-4, ..AdamW::default() }, freeze_encoder: false, seed: 0 }
    }
}

/// `[CLS] tokens [SEP]`, truncated to `max_len`.
pub fn paragraph_ids(tok: &Tokenizer, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vec![CLS];
    ids.extend(tok.encode(text).into_iter().take(max_len.saturating_sub(2)));
    ids.push(SEP);
    ids
}

fn paragraph_batch(tok: &Tokenizer, items: &[&Paragraph], max_len: usize) -> Result<(Vec<u32>, Vec<bool>, usize)> {
    let seqs: Vec<Vec<u32>> = items.iter().map(|p| paragraph_ids(tok, &p.text, max_len)).collect();
    let seq = seqs.iter().map(Vec::len).max().unwrap_or(2);
    let (ids, pad) = pad_sequences(&seqs, seq)?;
    Ok((ids, pad, seq))
}

/// Predicted labels from the aggregate token's two-class head.
pub fn classify_paragraphs(
    params: &ModelParams<Tensor>,
    config: &ModelConfig,
    tok: &Tokenizer,
    paragraphs: &[Paragraph],
    max_len: usize,
) -> Result<Vec<u8>> {
    let chunks: Vec<&[Paragraph]> = paragraphs.chunks(16).collect();
    let preds: Vec<Vec<u8>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Paragraph> = chunk.iter().collect();
            let (ids, pad, seq) = paragraph_batch(tok, &refs, max_len)?;
            let mut tape = Tape::new();
            let p = params.register_frozen(&mut tape);
            let out = encode(&mut tape, &p, config, EncoderInput { ids: &ids, pad: &pad, batch: refs.len(), seq }, None)?;
            let logits = head_logits(&mut tape, &p, out.aggregate)?;
            Ok(tape.value(logits).argmax_rows().into_iter().map(|c| c as u8).collect())
        })
        .collect::<Result<_>>()?;
    Ok(preds.concat())
}

/// Cross-entropy fine-tuning of a two-class head on the aggregate token;
/// returns the model and its F1-micro on `test`.
pub fn finetune_classifier(
    mut params: ModelParams<Tensor>,
    config: &ModelConfig,
    tok: &Tokenizer,
    train: &[Paragraph],
    test: &[Paragraph],
    fc: &FinetuneConfig,
) -> Result<(ModelParams<Tensor>, f64)> {
    if train.is_empty() || test.is_empty() {
        bail!(Validation, "fine-tuning needs non-empty training and test sets");
    }
    match &config.head {
        Some(h) if h.kind == HeadKind::Classify && h.outputs == 2 => {}
        _ => bail!(Config, "fine-tuning needs a two-class head"),
    }
    if fc.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let mut state = AdamWState::new(params.iter());
    let mut head_state = params.head.as_ref().map(|h| AdamWState::new([&h.w, &h.b]));
    for epoch in 0..fc.epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(fc.seed, &[20, epoch])));
        for (bi, chunk) in order.chunks(fc.batch_size).enumerate() {
            let items: Vec<&Paragraph> = chunk.iter().map(|&i| &train[i]).collect();
            let (ids, pad, seq) = paragraph_batch(tok, &items, fc.max_len.min(config.max_seq))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fc.seed, &[21, epoch, bi as u64]));
            let mut tape = Tape::new();
            let p = if fc.freeze_encoder {
                let mut p = params.register_frozen(&mut tape);
                let h = params.head.as_ref().expect("checked above");
                p.head = Some(crate::transformer::HeadParams { w: tape.param(h.w.clone()), b: tape.param(h.b.clone()) });
                p
            } else {
                params.register(&mut tape)
            };
            let out = encode(
                &mut tape,
                &p,
                config,
                EncoderInput { ids: &ids, pad: &pad, batch: items.len(), seq },
                if fc.freeze_encoder { None } else { Some(&mut rng) },
            )?;
            let logits = head_logits(&mut tape, &p, out.aggregate)?;
            let labels: Vec<usize> = items.iter().map(|it| it.label as usize).collect();
            let loss = tape.cross_entropy_logits(logits, Target::Classes(labels), 1.0)?;
            tape.backward(loss)?;
            if fc.freeze_encoder {
                let hv = p.head.as_ref().expect("checked above");
                let (gw, gb) = (tape.grad(hv.w).cloned(), tape.grad(hv.b).cloned());
                let h = params.head.as_mut().expect("checked above");
                let st = head_state.as_mut().expect("checked above");
                fc.optimizer.step(&mut [&mut h.w, &mut h.b], &[gw.as_ref(), gb.as_ref()], st)?;
            } else {
                let mut acc = params.map(|t| Tensor::zeros(t.shape()));
                accumulate(&mut acc, &p.grads(&tape), 1.0);
                apply_update(&fc.optimizer, &mut params, &acc, &mut state)?;
            }
        }
    }
    let preds = classify_paragraphs(&params, config, tok, test, fc.max_len.min(config.max_seq))?;
    let gold: Vec<u8> = test.iter().map(|p| p.label).collect();
    let f1 = f1_micro(&preds, &gold)?;
    Ok((params, f1))
}

/// Replaceable word → candidate substitutes.
pub type SynonymTable = BTreeMap<String, Vec<String>>;

pub fn parse_synonyms(text: &str) -> Result<SynonymTable> {
    let mut table = SynonymTable::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let subs: Vec<String> = parts.map(str::to_string).collect();
        if subs.is_empty() {
            return Err(Error::Format { line: i + 1, message: format!("{word} has no synonyms") });
        }
        table.insert(word.to_lowercase(), subs);
    }
    Ok(table)
}

pub fn synonyms_text(table: &SynonymTable) -> String {
    table.iter().map(|(w, s)| format!("{w} {}\n", s.join(" "))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    /// For each input paragraph: the original (label 0), then its paraphrase (label 1).
    pub paragraphs: Vec<Paragraph>,
    pub replaceable: usize,
    pub replaced: usize,
}

impl SynthOutput {
    pub fn realized_ratio(&self) -> f64 {
        if self.replaceable == 0 {
            0.0
        } else {
            self.replaced as f64 / self.replaceable as f64
        }
    }
}

/// Replaces each word that has synonyms with probability `ratio`, drawing
/// the substitute uniformly.
pub fn synth_paraphrase(texts: &[String], synonyms: &SynonymTable, ratio: f64, seed: u64) -> Result<SynthOutput> {
    if synonyms.is_empty() {
        bail!(Validation, "synonym table is empty");
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Parameter, "replace ratio {ratio} outside (0, 1)");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut replaceable, mut replaced) = (0, 0);
    let mut out = Vec::with_capacity(2 * texts.len());
    for (i, text) in texts.iter().enumerate() {
        let words = tokenize_text(text);
        let mut para = Vec::with_capacity(words.len());
        for w in &words {
            match synonyms.get(w) {
                Some(subs) if !subs.is_empty() => {
                    replaceable += 1;
                    if rng.random::<f64>() < ratio {
                        replaced += 1;
                        para.push(subs.choose(&mut rng).expect("non-empty").clone());
                    } else {
                        para.push(w.clone());
                    }
                }
                _ => para.push(w.clone()),
            }
        }
        let source = format!("doc{i}");
        out.push(Paragraph { text: words.join(" "), label: 0, source: source.clone() });
        out.push(Paragraph { text: para.join(" "), label: 1, source });
    }
    Ok(SynthOutput { paragraphs: out, replaceable, replaced })
}

/// Splits paragraphs by `source` so an original and its paraphrase land on
/// the same side; roughly `test_share` of the sources go to the test side.
pub fn split_by_source(paragraphs: &[Paragraph], test_share: f64, seed: u64) -> (Vec<Paragraph>, Vec<Paragraph>) {
    let mut sources: Vec<&str> = paragraphs.iter().map(|p| p.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((sources.len() as f64) * test_share).round() as usize;
    let test: std::collections::BTreeSet<&str> = sources[..n_test].iter().copied().collect();
    paragraphs.iter().cloned().partition(|p| !test.contains(p.source.as_str()))
}

/// A word-vector space in which synonyms are displaced from their base word
/// along a shared direction, with paragraphs drawn from the base words.
pub mod synthetic {
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct SyntheticMppConfig {
        pub dim: usize,
        pub base_words: usize,
        /// Share of base words that have synonyms.
        pub replaceable_share: f64,
        pub synonyms_per_word: (usize, usize),
        pub shift: f64,
        pub synonym_noise: f64,
        pub paragraphs: usize,
        pub paragraph_len: (usize, usize),
        #[serde(default)]
        pub seed: u64,
    }

    impl Default for SyntheticMppConfig {
        fn default() -> Self {
            Self {
                dim: 50,
                base_words: 400,
                replaceable_share: 0.7,
                synonyms_per_word: (1, 3),
                shift: 2.0,
                synonym_noise: 0.3,
                paragraphs: 600,
                paragraph_len: (100, 160),
                seed: 0,
            }
        }
    }

    #[derive(Clone, Debug)]
    pub struct SyntheticMpp {
        pub vectors: WordVectors,
        pub synonyms: SynonymTable,
        pub texts: Vec<String>,
    }

    pub fn generate(cfg: &SyntheticMppConfig) -> Result<SyntheticMpp> {
        if cfg.dim == 0 || cfg.base_words == 0 || cfg.paragraphs == 0 || cfg.paragraph_len.0 == 0 {
            bail!(Config, "synthetic paraphrase data needs positive sizes");
        }
        if cfg.synonyms_per_word.0 == 0 || cfg.synonyms_per_word.1 < cfg.synonyms_per_word.0 {
            bail!(Config, "synonym count range must be at least 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid");
        let mut direction: Vec<f64> = (0..cfg.dim).map(|_| unit.sample(&mut rng)).collect();
        let norm = dot(&direction, &direction).sqrt();
        direction.iter_mut().for_each(|d| *d *= cfg.shift / norm);
        let mut entries = Vec::new();
        let mut synonyms = SynonymTable::new();
        let mut base = Vec::with_capacity(cfg.base_words);
        for i in 0..cfg.base_words {
            let word = format!("w{i}");
            let v: Vec<f64> = (0..cfg.dim).map(|_| unit.sample(&mut rng)).collect();
            if rng.random::<f64>() < cfg.replaceable_share {
                let k = rng.random_range(cfg.synonyms_per_word.0..=cfg.synonyms_per_word.1);
                let mut subs = Vec::with_capacity(k);
                for j in 0..k {
                    let s = format!("w{i}s{j}");
                    let sv: Vec<f64> = v
                        .iter()
                        .zip(&direction)
                        .map(|(b, d)| b + d + cfg.synonym_noise * unit.sample(&mut rng))
                        .collect();
                    entries.push((s.clone(), sv));
                    subs.push(s);
                }
                synonyms.insert(word.clone(), subs);
            }
            entries.push((word.clone(), v));
            base.push(word);
        }
        let texts = (0..cfg.paragraphs)
            .map(|_| {
                let len = rng.random_range(cfg.paragraph_len.0..=cfg.paragraph_len.1.max(cfg.paragraph_len.0));
                (0..len).map(|_| base.choose(&mut rng).expect("non-empty").as_str()).collect::<Vec<_>>().join(" ")
            })
            .collect();
        Ok(SyntheticMpp { vectors: WordVectors::new(cfg.dim, entries)?, synonyms, texts })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::transformer::HeadConfig;

    fn ds(rows: &[(&[f64], u8)]) -> Dataset {
        Dataset::new(rows.iter().map(|r| r.0.to_vec()).collect(), rows.iter().map(|r| r.1).collect()).unwrap()
    }

    fn blobs(n: usize, d: usize, gap: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        use rand_distr::Distribution;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let shift = if label == 1 { gap / 2.0 } else { -gap / 2.0 };
            x.push((0..d).map(|j| normal.sample(&mut rng) + if j == 0 { shift } else { 0.0 }).collect());
            y.push(label);
        }
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn vectors_format() {
        let t = WordVectors::parse("a 1 0 0\nb 0 1 0\n").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        let dup = WordVectors::parse("a 1 0\na 0 2\n").unwrap();
        assert_eq!(dup.get("a").unwrap(), &[0.0, 2.0]);
        assert!(WordVectors::parse("").is_err());
        assert!(matches!(WordVectors::parse("a 1 2\nb 1\n"), Err(Error::Format { line: 2, .. })));
        assert!(matches!(WordVectors::parse("a 1 x\n"), Err(Error::Format { line: 1, .. })));
        assert_eq!(WordVectors::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn averaging() {
        let t = WordVectors::parse("a 1 0\nb 0 1\n").unwrap();
        let w = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(embed_average(&w(&["a", "b"]), &t), (vec![0.5, 0.5], false));
        assert_eq!(embed_average(&w(&["a", "zzz"]), &t), (vec![1.0, 0.0], false));
        assert_eq!(embed_average(&w(&["x", "y"]), &t), (vec![0.0, 0.0], true));
    }

    #[test]
    fn logreg_examples() {
        let two = ds(&[(&[1.0], 1), (&[-1.0], 0)]);
        for solver in Solver::ALL {
            for mc in [MultiClass::Ovr, MultiClass::Softmax] {
                let cfg = LogRegConfig { solver, multi_class: mc, step: 0.5, ..Default::default() };
                assert_eq!(train_logreg(&two, &cfg).unwrap().f1(&two).unwrap(), 1.0, "{solver:?} {mc:?}");
            }
        }
        let data = blobs(40, 3, 1.0, 1);
        let heavy = train_logreg(&data, &LogRegConfig { l2: 1e6, ..Default::default() }).unwrap();
        let Classifier::Logistic { w, .. } = &heavy else { panic!() };
        assert!(w.iter().all(|v| v.abs() < 1e-5));
        assert!((heavy.probability(&data.x[0]).unwrap() - 0.5).abs() < 1e-3);
        assert!(train_logreg(&ds(&[(&[1.0], 1), (&[2.0], 1)]), &LogRegConfig::default()).is_err());
    }

    #[test]
    fn nb_matches_bayes_rule() {
        let data = ds(&[(&[-2.0], 0), (&[-1.0], 0), (&[-3.0], 0), (&[2.0], 1), (&[4.0], 1)]);
        let nb = train_nb(&data).unwrap();
        let gauss = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let (m0, v0, m1, v1) = (-2.0, 2.0 / 3.0, 3.0, 1.0);
        for x in [-2.5, 0.0, 0.4, 1.0, 3.0] {
            let a = 0.6 * gauss(x, m0, v0);
            let b = 0.4 * gauss(x, m1, v1);
            assert!((nb.probability(&[x]).unwrap() - b / (a + b)).abs() < 1e-9, "x={x}");
        }
        let same = ds(&[(&[1.0], 0), (&[2.0], 0), (&[1.0], 1), (&[2.0], 1), (&[1.0], 1), (&[2.0], 1)]);
        let nb = train_nb(&same).unwrap();
        assert!((nb.probability(&[1.7]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let constant = ds(&[(&[1.0], 0), (&[1.0], 0), (&[5.0], 1), (&[5.0], 1)]);
        let Classifier::GaussianNb { var, .. } = train_nb(&constant).unwrap() else { panic!() };
        assert_eq!(var[0][0], NB_VAR_FLOOR);
    }

    #[test]
    fn svm_examples() {
        let sep = ds(&[(&[2.0, 1.0], 1), (&[1.5, 2.0], 1), (&[-1.0, -2.0], 0), (&[-2.0, -0.5], 0)]);
        let svm = train_linear_svm(&sep, &SvmConfig { c: 100.0, max_iter: 5000, tolerance: 0.0, step: 1.0 }).unwrap();
        assert_eq!(svm.f1(&sep).unwrap(), 1.0);
        let Classifier::LinearSvm { w } = &svm else { panic!() };
        assert!(sep.x.iter().zip(sep.signs()).all(|(x, s)| s * svm.decision(x) > 0.0), "{w:?}");
        let tiny = train_linear_svm(&sep, &SvmConfig { c: 1e-9, ..Default::default() }).unwrap();
        let Classifier::LinearSvm { w } = &tiny else { panic!() };
        assert!(w.iter().all(|v| v.abs() < 1e-6));

        // Duplicating the data while halving C leaves the objective unchanged.
        let data = blobs(30, 2, 2.0, 4);
        let mut doubled = data.clone();
        doubled.x.extend(data.x.clone());
        doubled.y.extend(data.y.clone());
        let cfg = SvmConfig { c: 4.0, max_iter: 500, tolerance: 0.0, step: 1.0 };
        let a = train_linear_svm(&data, &cfg).unwrap();
        let b = train_linear_svm(&doubled, &SvmConfig { c: 2.0, ..cfg }).unwrap();
        let probe = blobs(200, 2, 2.0, 5);
        assert_eq!(a.predict_all(&probe), b.predict_all(&probe));
        let w = |c: &Classifier| match c {
            Classifier::LinearSvm { w } => w.clone(),
            _ => unreachable!(),
        };
        assert!(w(&a).iter().zip(w(&b)).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn grid_examples() {
        let spec = GridSpec::logreg_default();
        assert_eq!(spec.size(), 96);
        let r = grid_search(&spec, |c| Ok(c.len() as f64)).unwrap();
        assert_eq!(r.rows.len(), 96);
        assert_eq!(r.best, 0);
        assert_eq!(r.rows[1].0[3].1, AxisValue::Num(0.001));
        assert_eq!(r.rows[4].0[2].1, AxisValue::Text("softmax".into()));
        let single = GridSpec { axes: vec![("c".into(), vec![AxisValue::Num(3.0)])] };
        let r = grid_search(&single, |c| c[0].1.as_f64()).unwrap();
        assert_eq!(r.best_cell()[0].1, AxisValue::Num(3.0));
        let peaks = grid_search(&spec, |c| Ok(if c[1].1 == AxisValue::Int(1000) { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(peaks.best, 8);
        assert!(peaks.to_csv("f1").starts_with("solver,max_iter,multi_class,tolerance,f1\ngd,500,ovr,0.01,0\n"));
        assert!(grid_search(&GridSpec { axes: vec![] }, |_| Ok(0.0)).is_err());

        let base = LogRegConfig::default();
        let cfg = logreg_config_from_cell(&base, &spec.cell(95)).unwrap();
        assert_eq!(cfg.solver, Solver::MomentumBacktracking);
        assert_eq!(cfg.max_iter, 1500);
        assert_eq!(cfg.multi_class, MultiClass::Softmax);
        assert_eq!(cfg.tolerance, 0.00001);
    }

    #[test]
    fn grid_is_independent_of_threads() {
        let data = blobs(60, 3, 1.5, 9);
        let spec = GridSpec::logreg_default();
        let eval = |c: &Cell| train_logreg(&data, &logreg_config_from_cell(&LogRegConfig::default(), c)?)?.f1(&data);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| grid_search(&spec, eval)).unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| grid_search(&spec, eval)).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn synthesis() {
        let mut syn = SynonymTable::new();
        syn.insert("big".into(), vec!["large".into(), "huge".into()]);
        let texts: Vec<String> = (0..2000).map(|_| "the big dog saw a big big cat".to_string()).collect();
        let out = synth_paraphrase(&texts, &syn, 0.2, 1).unwrap();
        assert_eq!(out.replaceable, 6000);
        let sigma = (6000.0 * 0.2 * 0.8f64).sqrt();
        assert!(((out.replaced as f64) - 1200.0).abs() < 3.0 * sigma);
        assert_eq!(out.paragraphs.len(), 4000);
        assert_eq!(out.paragraphs[0].label, 0);
        assert_eq!(out.paragraphs[1].label, 1);
        assert_eq!(out, synth_paraphrase(&texts, &syn, 0.2, 1).unwrap());
        assert!(synth_paraphrase(&texts, &SynonymTable::new(), 0.2, 1).is_err());
        assert!(synth_paraphrase(&texts, &syn, 1.0, 1).is_err());
        assert!((SPINNERCHIEF_DF_RATIO, SPINNERCHIEF_IF_RATIO, SPINBOT_RATIO) == (0.1258, 0.1937, 0.2038));

        let (train, test) = split_by_source(&out.paragraphs, 0.25, 3);
        assert_eq!(train.len() + test.len(), 4000);
        assert!(test.len() == 1000);
        let train_src: std::collections::BTreeSet<_> = train.iter().map(|p| &p.source).collect();
        assert!(test.iter().all(|p| !train_src.contains(&p.source)));
        assert_eq!(parse_paragraphs(&paragraphs_jsonl(&test)).unwrap(), test);
        assert_eq!(parse_synonyms(&synonyms_text(&syn)).unwrap(), syn);
    }

    fn finetune_setup() -> (ModelParams<Tensor>, ModelConfig, Tokenizer, Vec<Paragraph>) {
        let words = ["alpha", "beta", "gamma", "delta", "red", "blue"];
        let tok = Tokenizer::train(words.iter().copied(), 40, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let paras: Vec<Paragraph> = (0..64)
            .map(|i| {
                let label = (i % 2) as u8;
                let pool = if label == 1 { &words[..3] } else { &words[3..] };
                let w: Vec<&str> = (0..rng.random_range(4..8)).map(|_| *pool.choose(&mut rng).unwrap()).collect();
                Paragraph { text: w.join(" "), label, source: format!("p{i}") }
            })
            .collect();
        let mut cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, ffn: 32, vocab_size: tok.vocab_size(), max_seq: 32, dropout: 0.0, ..Default::default() };
        let p = ModelParams::init(&cfg, 3).unwrap().with_head(&mut cfg, HeadConfig { kind: HeadKind::Classify, outputs: 2 }, 4).unwrap();
        (p, cfg, tok, paras)
    }

    #[test]
    fn finetuning() {
        let (p, cfg, tok, paras) = finetune_setup();
        let (train, test) = paras.split_at(48);
        let zero = FinetuneConfig { epochs: 0, ..Default::default() };
        assert_eq!(finetune_classifier(p.clone(), &cfg, &tok, train, test, &zero).unwrap().0, p);
        let head_only = FinetuneConfig { epochs: 2, freeze_encoder: true, ..Default::default() };
        let (q, _) = finetune_classifier(p.clone(), &cfg, &tok, train, test, &head_only).unwrap();
        assert!(q.token_embedding.bit_eq(&p.token_embedding));
        assert_ne!(q.head, p.head);
        let learn = FinetuneConfig { epochs: 6, optimizer: AdamW { lr: 3e-3, ..AdamW::default() }, ..Default::default() };
        let (_, f1) = finetune_classifier(p.clone(), &cfg, &tok, train, test, &learn).unwrap();
        assert!(f1 > 0.8, "{f1}");
        let full = FinetuneConfig { epochs: 2, ..Default::default() };
        let a = finetune_classifier(p.clone(), &cfg, &tok, train, test, &full).unwrap();
        let b = finetune_classifier(p.clone(), &cfg, &tok, train, test, &full).unwrap();
        assert_eq!(a, b);
        assert!(finetune_classifier(p, &cfg, &tok, &[], test, &full).is_err());
    }

    #[test]
    fn synthetic_world() {
        let cfg = synthetic::SyntheticMppConfig { paragraphs: 10, ..Default::default() };
        let a = synthetic::generate(&cfg).unwrap();
        let b = synthetic::generate(&cfg).unwrap();
        assert_eq!(a.texts, b.texts);
        assert_eq!(a.vectors, b.vectors);
        assert!(a.synonyms.values().flatten().all(|s| a.vectors.get(s).is_some()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn average_ignores_order(idx in prop::collection::vec(0usize..4, 1..12), seed in any::<u64>()) {
            let t = WordVectors::parse("a 1 2\nb -1 0.5\nc 3 3\nd 0.25 -4\n").unwrap();
            let words: Vec<String> = idx.iter().map(|&i| ["a", "b", "c", "d"][i].to_string()).collect();
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (x, _) = embed_average(&words, &t);
            let (y, _) = embed_average(&shuffled, &t);
            prop_assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
        }

        #[test]
        fn backtracking_is_monotone(seed in any::<u64>(), momentum in any::<bool>(), softmax in any::<bool>()) {
            let data = blobs(30, 3, 0.5, seed);
            let cfg = LogRegConfig {
                solver: if momentum { Solver::MomentumBacktracking } else { Solver::Backtracking },
                multi_class: if softmax { MultiClass::Softmax } else { MultiClass::Ovr },
                max_iter: 200,
                tolerance: 0.0,
                step: 5.0,
                ..Default::default()
            };
            let (_, h) = train_logreg_with_history(&data, &cfg).unwrap();
            prop_assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn label_swap_flips_decisions(seed in any::<u64>()) {
            let data = blobs(24, 3, 1.0, seed);
            let flipped = data.flipped();
            let probe = blobs(10, 3, 1.0, seed ^ 1);
            let mut models = Vec::new();
            for solver in Solver::ALL {
                for mc in [MultiClass::Ovr, MultiClass::Softmax] {
                    let cfg = LogRegConfig { solver, multi_class: mc, max_iter: 100, ..Default::default() };
                    models.push((train_logreg(&data, &cfg).unwrap(), train_logreg(&flipped, &cfg).unwrap()));
                }
            }
            models.push((train_nb(&data).unwrap(), train_nb(&flipped).unwrap()));
            let svm = SvmConfig { max_iter: 100, ..Default::default() };
            models.push((train_linear_svm(&data, &svm).unwrap(), train_linear_svm(&flipped, &svm).unwrap()));
            for (a, b) in &models {
                for x in &probe.x {
                    prop_assert_eq!(a.decision(x), -b.decision(x));
                }
            }
        }

        #[test]
        fn nb_ignores_sample_order(seed in any::<u64>()) {
            let data = blobs(20, 2, 1.0, seed);
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled = Dataset::new(idx.iter().map(|&i| data.x[i].clone()).collect(), idx.iter().map(|&i| data.y[i]).collect()).unwrap();
            let (a, b) = (train_nb(&data).unwrap(), train_nb(&shuffled).unwrap());
            for x in &data.x {
                prop_assert!((a.decision(x) - b.decision(x)).abs() < 1e-9);
            }
        }
    }
}
