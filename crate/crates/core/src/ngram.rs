//! Count-based n-gram language model with add-k smoothing.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Target;
use crate::error::{bail, Result};
use crate::loss;
use crate::tensor::Tensor;

/// A corpus token or one of the sentence boundary markers.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sym<T> {
    Bos,
    Tok(T),
    Eos,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextCounts<T: Ord> {
    pub next: BTreeMap<Sym<T>, u64>,
    pub total: u64,
}

impl<T: Ord> Default for ContextCounts<T> {
    fn default() -> Self {
        Self { next: BTreeMap::new(), total: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramCounts<T: Ord> {
    order: usize,
    contexts: BTreeMap<Vec<Sym<T>>, ContextCounts<T>>,
    /// Every symbol that appeared in a predicted position.
    vocab: BTreeSet<Sym<T>>,
    vocab_size: Option<usize>,
}

/// Log-probability of a sentence including its end marker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceScore {
    /// `-inf` when some factor is zero.
    pub log_prob: f64,
    /// Predicted positions: tokens plus the end marker.
    pub predictions: usize,
    pub zero_probability: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    /// `+inf` when `infinite` is set.
    pub value: f64,
    pub infinite: bool,
}

fn pad<T: Clone>(order: usize, sentence: &[T]) -> Vec<Sym<T>> {
    let mut s = vec![Sym::Bos; order - 1];
    s.extend(sentence.iter().cloned().map(Sym::Tok));
    s.push(Sym::Eos);
    s
}

impl<T: Ord + Clone> NgramCounts<T> {
    /// Counts every n-gram of each sentence padded with `n-1` begin markers and one end marker.
    pub fn count<S: AsRef<[T]>>(corpus: &[S], n: usize) -> Result<Self> {
        if n < 1 {
            bail!(Parameter, "n-gram order must be at least 1");
        }
        let mut counts = Self { order: n, contexts: BTreeMap::new(), vocab: BTreeSet::new(), vocab_size: None };
        for sentence in corpus {
            let padded = pad(n, sentence.as_ref());
            for gram in padded.windows(n) {
                let (ctx, word) = gram.split_at(n - 1);
                let entry = counts.contexts.entry(ctx.to_vec()).or_default();
                *entry.next.entry(word[0].clone()).or_default() += 1;
                entry.total += 1;
                counts.vocab.insert(word[0].clone());
            }
        }
        Ok(counts)
    }

    /// Fixes `|V|` for smoothing instead of using the observed symbol count.
    pub fn with_vocab_size(mut self, size: usize) -> Result<Self> {
        if size < self.vocab.len() {
            bail!(Parameter, "vocabulary size {size} below {} observed symbols", self.vocab.len());
        }
        self.vocab_size = Some(size);
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size.unwrap_or(self.vocab.len())
    }

    pub fn observed_symbols(&self) -> &BTreeSet<Sym<T>> {
        &self.vocab
    }

    pub fn context(&self, ctx: &[Sym<T>]) -> Option<&ContextCounts<T>> {
        self.contexts.get(ctx)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Vec<Sym<T>>, &ContextCounts<T>)> {
        self.contexts.iter()
    }

    /// `C(context, word)`, zero when absent.
    pub fn count_of(&self, ctx: &[Sym<T>], word: &Sym<T>) -> u64 {
        self.contexts.get(ctx).and_then(|c| c.next.get(word)).copied().unwrap_or(0)
    }

    /// `(C(ctx, word) + k) / (C(ctx) + k|V|)`; an unseen context with `k = 0` gives 0.
    pub fn conditional_prob(&self, ctx: &[Sym<T>], word: &Sym<T>, add_k: f64) -> Result<f64> {
        if ctx.len() != self.order - 1 {
            bail!(Parameter, "context of length {} for an order-{} model", ctx.len(), self.order);
        }
        if !(add_k >= 0.0) {
            bail!(Parameter, "add-k constant must be non-negative, got {add_k}");
        }
        let (c, total) = match self.contexts.get(ctx) {
            Some(cc) => (cc.next.get(word).copied().unwrap_or(0), cc.total),
            None => (0, 0),
        };
        let denom = total as f64 + add_k * self.vocab_size() as f64;
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((c as f64 + add_k) / denom)
    }

    /// Chain-rule log-probability of `sentence` followed by the end marker.
    pub fn sequence_log_prob(&self, sentence: &[T], add_k: f64) -> Result<SequenceScore> {
        let padded = pad(self.order, sentence);
        let mut log_prob = 0.0;
        let mut zero = false;
        for gram in padded.windows(self.order) {
            let (ctx, word) = gram.split_at(self.order - 1);
            let p = self.conditional_prob(ctx, &word[0], add_k)?;
            if p == 0.0 {
                zero = true;
            } else {
                log_prob += p.ln();
            }
        }
        if zero {
            log_prob = f64::NEG_INFINITY;
        }
        Ok(SequenceScore { log_prob, predictions: sentence.len() + 1, zero_probability: zero })
    }

    /// `exp(-(1/N) Σ log P)` over sentences, with `N` counting tokens and end markers.
    pub fn perplexity<S: AsRef<[T]>>(&self, sentences: &[S], add_k: f64) -> Result<Perplexity> {
        if sentences.is_empty() {
            bail!(Validation, "perplexity needs at least one sentence");
        }
        let (mut log_prob, mut n) = (0.0, 0usize);
        for s in sentences {
            let score = self.sequence_log_prob(s.as_ref(), add_k)?;
            if score.zero_probability {
                return Ok(Perplexity { value: f64::INFINITY, infinite: true });
            }
            log_prob += score.log_prob;
            n += score.predictions;
        }
        Ok(Perplexity { value: (-log_prob / n as f64).exp(), infinite: false })
    }

    /// Perplexity as `exp` of the mean cross-entropy between the model's
    /// predictive rows and the observed symbols.
    pub fn perplexity_via_cross_entropy<S: AsRef<[T]>>(&self, sentences: &[S], add_k: f64) -> Result<Perplexity> {
        if sentences.is_empty() {
            bail!(Validation, "perplexity needs at least one sentence");
        }
        // Columns: observed symbols, then slots for never-observed types.
        let mut columns: Vec<Sym<T>> = self.vocab.iter().cloned().collect();
        let mut targets = Vec::new();
        let mut grams = Vec::new();
        for s in sentences {
            let padded = pad(self.order, s.as_ref());
            for gram in padded.windows(self.order) {
                let word = &gram[self.order - 1];
                let col = match columns.iter().position(|c| c == word) {
                    Some(i) => i,
                    None => {
                        columns.push(word.clone());
                        columns.len() - 1
                    }
                };
                targets.push(col);
                grams.push(gram.to_vec());
            }
        }
        if add_k > 0.0 && columns.len() > self.vocab_size() {
            bail!(Validation, "scored text has more unseen types than the vocabulary size allows");
        }
        let width = self.vocab_size().max(columns.len());
        let mut rows = Vec::with_capacity(grams.len() * width);
        for (gram, &target) in grams.iter().zip(&targets) {
            let ctx = &gram[..self.order - 1];
            for j in 0..width {
                let p = match columns.get(j) {
                    Some(sym) => self.conditional_prob(ctx, sym, add_k)?,
                    None => self.unseen_prob(ctx, add_k),
                };
                if p == 0.0 && j == target {
                    return Ok(Perplexity { value: f64::INFINITY, infinite: true });
                }
                rows.push(p);
            }
        }
        let probs = Tensor::new(vec![grams.len(), width], rows)?;
        let ce = loss::cross_entropy(&probs, &Target::Classes(targets), false)?;
        Ok(Perplexity { value: ce.exp(), infinite: false })
    }

    fn unseen_prob(&self, ctx: &[Sym<T>], add_k: f64) -> f64 {
        if add_k == 0.0 {
            return 0.0;
        }
        let total = self.contexts.get(ctx).map_or(0, |c| c.total) as f64;
        add_k / (total + add_k * self.vocab_size() as f64)
    }
}
