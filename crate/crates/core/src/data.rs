//! Corpus loading, sequence packing and dynamic masking for masked-LM training.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::tokenizer::{is_special, Tokenizer, CLS, MASK, NUM_SPECIAL, PAD, SEP};

/// Default masking probability.
pub const MASK_PROB: f64 = 0.15;
/// Shares of selected positions replaced by MASK, a random token, or kept.
pub const MASK_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Mixes `parts` into `base` (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Documents as lists of sentence lines.
pub fn parse_corpus(text: &str) -> Vec<Vec<String>> {
    let text = text.replace("\r\n", "\n");
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.split('\n') {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Reads a corpus: one sentence per line, blank lines between documents.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Utf8 { offset: e.utf8_error().valid_up_to() })?;
    Ok(parse_corpus(&text))
}

/// A document as token-id sentences; empty sentences are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<Vec<u32>>,
}

pub fn tokenize_documents(tokenizer: &Tokenizer, docs: &[Vec<String>]) -> Vec<Document> {
    docs.iter()
        .map(|d| Document { sentences: d.iter().map(|s| tokenizer.encode(s)).filter(|s| !s.is_empty()).collect() })
        .filter(|d| !d.sentences.is_empty())
        .collect()
}

/// Greedily packs consecutive sentences of each document into
/// `[CLS] … [SEP]` sequences of at most `seq_len` tokens. Over-long sentences
/// are truncated; sequences never span two documents.
pub fn pack_documents(docs: &[Document], seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 3 {
        bail!(Parameter, "sequence length {seq_len} leaves no room between CLS and SEP");
    }
    let room = seq_len - 2;
    let mut out = Vec::new();
    for doc in docs {
        let mut body: Vec<u32> = Vec::new();
        for sent in &doc.sentences {
            let sent = &sent[..sent.len().min(room)];
            if !body.is_empty() && body.len() + sent.len() > room {
                out.push(frame(&body));
                body.clear();
            }
            body.extend_from_slice(sent);
        }
        if !body.is_empty() {
            out.push(frame(&body));
        }
    }
    Ok(out)
}

fn frame(body: &[u32]) -> Vec<u32> {
    let mut s = Vec::with_capacity(body.len() + 2);
    s.push(CLS);
    s.extend_from_slice(body);
    s.push(SEP);
    s
}

/// Corrupted inputs and reconstruction targets, laid out `batch × seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<u32>,
    /// Original id at corrupted positions, `None` elsewhere.
    pub targets: Vec<Option<u32>>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub seed: u64,
    /// Set when no position was eligible for masking.
    pub all_special: bool,
}

impl MaskedBatch {
    /// Flat positions with a target, in order.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.targets.iter().enumerate().filter_map(|(i, t)| t.map(|_| i)).collect()
    }

    pub fn masked_targets(&self) -> Vec<usize> {
        self.targets.iter().filter_map(|t| t.map(|v| v as usize)).collect()
    }

    /// Original sequence: inputs where untouched, targets where corrupted.
    pub fn reconstruct(&self) -> Vec<u32> {
        self.input_ids.iter().zip(&self.targets).map(|(&i, t)| t.unwrap_or(i)).collect()
    }
}

/// Pads each sequence to `seq` and stacks them.
pub fn pad_sequences(seqs: &[Vec<u32>], seq: usize) -> Result<(Vec<u32>, Vec<bool>)> {
    let mut ids = Vec::with_capacity(seqs.len() * seq);
    let mut pad = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        if s.len() > seq {
            bail!(Dimension, "sequence of {} tokens exceeds length {seq}", s.len());
        }
        ids.extend_from_slice(s);
        pad.extend(std::iter::repeat_n(false, s.len()));
        ids.extend(std::iter::repeat_n(PAD, seq - s.len()));
        pad.extend(std::iter::repeat_n(true, seq - s.len()));
    }
    Ok((ids, pad))
}

/// Selects each non-special token with probability `p_mask`; selected tokens
/// become MASK (80%), a uniformly drawn non-special token (10%) or stay (10%).
pub fn dynamic_mask(
    ids: &[u32],
    pad: &[bool],
    batch: usize,
    vocab_size: usize,
    p_mask: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    if !(p_mask > 0.0 && p_mask < 1.0) {
        bail!(Parameter, "mask probability {p_mask} outside (0, 1)");
    }
    if batch == 0 || !ids.len().is_multiple_of(batch) || pad.len() != ids.len() {
        bail!(Dimension, "{} ids / {} pad flags do not form {batch} rows", ids.len(), pad.len());
    }
    if vocab_size <= NUM_SPECIAL as usize {
        bail!(Parameter, "vocabulary of {vocab_size} has no ordinary tokens");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    let mut eligible = 0usize;
    for i in 0..ids.len() {
        if pad[i] || is_special(ids[i]) {
            continue;
        }
        eligible += 1;
        if rng.random::<f64>() >= p_mask {
            continue;
        }
        targets[i] = Some(ids[i]);
        let u: f64 = rng.random();
        if u < MASK_SPLIT.0 {
            input_ids[i] = MASK;
        } else if u < MASK_SPLIT.0 + MASK_SPLIT.1 {
            input_ids[i] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    if eligible == 0 {
        log::warn!("batch contains only special tokens; returned unmasked");
    }
    Ok(MaskedBatch {
        input_ids,
        targets,
        pad: pad.to_vec(),
        batch,
        seq: ids.len() / batch,
        seed,
        all_special: eligible == 0,
    })
}

/// Seed-deterministic epochs of masked batches over packed sequences.
#[derive(Clone, Debug)]
pub struct BatchStream {
    sequences: Vec<Vec<u32>>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub p_mask: f64,
    pub seed: u64,
}

impl BatchStream {
    pub fn new(
        sequences: Vec<Vec<u32>>,
        batch_size: usize,
        seq_len: usize,
        vocab_size: usize,
        p_mask: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            bail!(Parameter, "batch size must be at least 1");
        }
        if sequences.is_empty() {
            bail!(Validation, "no sequences to batch");
        }
        if let Some(s) = sequences.iter().find(|s| s.len() > seq_len) {
            bail!(Dimension, "sequence of {} tokens exceeds length {seq_len}", s.len());
        }
        Ok(Self { sequences, batch_size, seq_len, vocab_size, p_mask, seed })
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sequences.len().div_ceil(self.batch_size)
    }

    /// Sequence order for `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[1, epoch])));
        order
    }

    /// The `index`-th batch of `epoch`, masked with fresh per-epoch randomness.
    pub fn batch(&self, epoch: u64, index: usize, order: &[usize]) -> Result<MaskedBatch> {
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        if start >= end {
            bail!(Index, "batch {index} past the end of epoch {epoch}");
        }
        let seqs: Vec<Vec<u32>> = order[start..end].iter().map(|&i| self.sequences[i].clone()).collect();
        let (ids, pad) = pad_sequences(&seqs, self.seq_len)?;
        let seed = derive_seed(self.seed, &[2, epoch, index as u64]);
        dynamic_mask(&ids, &pad, seqs.len(), self.vocab_size, self.p_mask, seed)
    }

    pub fn epoch(&self, epoch: u64) -> Result<Vec<MaskedBatch>> {
        let order = self.epoch_order(epoch);
        (0..self.batches_per_epoch()).map(|i| self.batch(epoch, i, &order)).collect()
    }

    /// Endless stream across epochs.
    pub fn iter(&self) -> impl Iterator<Item = Result<MaskedBatch>> + '_ {
        let per = self.batches_per_epoch();
        let mut order = Vec::new();
        (0u64..).map(move |n| {
            let (epoch, index) = (n / per as u64, (n % per as u64) as usize);
            if index == 0 {
                order = self.epoch_order(epoch);
            }
            self.batch(epoch, index, &order)
        })
    }

    /// Produces the first `count` batches of [`BatchStream::iter`] on a
    /// background thread through a bounded queue.
    pub fn prefetch(self, count: usize, capacity: usize) -> Prefetcher {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for b in self.iter().take(count) {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        Prefetcher { rx, handle: Some(handle) }
    }
}

pub struct Prefetcher {
    rx: Receiver<Result<MaskedBatch>>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for Prefetcher {
    type Item = Result<MaskedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dummy) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Sparse first-order Markov corpora for distillation experiments.
pub mod synthetic {
    use rand::distr::{weighted::WeightedIndex, Distribution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::{Deserialize, Serialize};

    use crate::error::{bail, Result};

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct MarkovCorpusConfig {
        pub words: usize,
        /// Distinct successors of every word, weighted 1/rank.
        pub successors: usize,
        pub documents: usize,
        pub sentences_per_document: (usize, usize),
        pub sentence_len: (usize, usize),
        #[serde(default)]
        pub seed: u64,
    }

    impl Default for MarkovCorpusConfig {
        fn default() -> Self {
            Self {
                words: 300,
                successors: 4,
                documents: 4000,
                sentences_per_document: (3, 7),
                sentence_len: (6, 14),
                seed: 0,
            }
        }
    }

    /// Documents of sentence lines, in the corpus file layout.
    pub fn generate(cfg: &MarkovCorpusConfig) -> Result<Vec<Vec<String>>> {
        if cfg.words < 2 || cfg.successors == 0 || cfg.successors > cfg.words {
            bail!(Config, "need at least 2 words and 1..=words successors");
        }
        let (smin, smax) = cfg.sentences_per_document;
        let (lmin, lmax) = cfg.sentence_len;
        if smin == 0 || smax < smin || lmin == 0 || lmax < lmin {
            bail!(Config, "sentence count and length ranges must be non-empty and positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let vocab = crate::wsd::synthetic::words(cfg.words, &mut rng, &mut Default::default());
        let weights: Vec<f64> = (0..cfg.successors).map(|r| 1.0 / (r + 1) as f64).collect();
        let pick = WeightedIndex::new(&weights).expect("positive weights");
        let table: Vec<Vec<usize>> = (0..cfg.words)
            .map(|_| rand::seq::index::sample(&mut rng, cfg.words, cfg.successors).into_vec())
            .collect();
        let docs = (0..cfg.documents)
            .map(|_| {
                (0..rng.random_range(smin..=smax))
                    .map(|_| {
                        let mut w = rng.random_range(0..cfg.words);
                        let mut line = vec![vocab[w].as_str()];
                        for _ in 1..rng.random_range(lmin..=lmax) {
                            w = table[w][pick.sample(&mut rng)];
                            line.push(&vocab[w]);
                        }
                        line.join(" ")
                    })
                    .collect()
            })
            .collect();
        Ok(docs)
    }

    pub fn corpus_text(docs: &[Vec<String>]) -> String {
        docs.iter().map(|d| d.join("\n") + "\n").collect::<Vec<_>>().join("\n")
    }
}
