//! Word sense disambiguation as context-gloss pair classification.
//!
//! Each candidate sense of a target word becomes one sequence
//! `[CLS] left [TGT] target [/TGT] right [SEP] lemma : gloss [SEP]` scored by a
//! two-class head. LMGC trains the head with focal loss; LMGC-M adds the
//! masked-LM loss of a corrupted copy of the same pairs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{derive_seed, dynamic_mask, pad_sequences, MaskedBatch};
use crate::error::{bail, Error, Result};
use crate::loss::FocalVariant;
use crate::mlm::{accumulate, apply_update, mlm_loss, CurvePoint};
use crate::optim::{AdamW, AdamWState};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, CLS, SEP, TGT_CLOSE, TGT_OPEN};
use crate::transformer::{encode, head_logits, EncoderInput, HeadKind, ModelConfig, ModelParams};

pub const DEFAULT_CANDIDATES: usize = 8;
pub const DEFAULT_MAX_LEN: usize = 160;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sense {
    pub lemma: String,
    pub pos: String,
    pub sense_id: String,
    pub gloss: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenseInventory {
    senses: Vec<Sense>,
    by_key: BTreeMap<(String, String), Vec<usize>>,
    by_lemma: BTreeMap<String, Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl SenseInventory {
    pub fn new(senses: Vec<Sense>) -> Result<Self> {
        if senses.is_empty() {
            bail!(Validation, "sense inventory is empty");
        }
        let mut by_key: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        let mut by_lemma: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_id = HashMap::new();
        for (i, s) in senses.iter().enumerate() {
            if s.gloss.trim().is_empty() {
                bail!(Validation, "sense {} has an empty gloss", s.sense_id);
            }
            if by_id.insert(s.sense_id.clone(), i).is_some() {
                bail!(Validation, "duplicate sense id {}", s.sense_id);
            }
            by_key.entry((s.lemma.clone(), s.pos.clone())).or_default().push(i);
            by_lemma.entry(s.lemma.clone()).or_default().push(i);
        }
        Ok(Self { senses, by_key, by_lemma, by_id })
    }

    /// One JSON object per line: `{"lemma","pos","sense_id","gloss"}`.
    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut senses = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Raw {
                lemma: Option<String>,
                pos: Option<String>,
                sense_id: Option<String>,
                gloss: Option<String>,
            }
            let raw: Raw = serde_json::from_str(line)
                .map_err(|e| Error::Format { line: line_no, message: e.to_string() })?;
            let field = |v: Option<String>, name: &str| match v {
                Some(s) if !s.trim().is_empty() => Ok(s),
                _ => Err(Error::Format { line: line_no, message: format!("missing {name}") }),
            };
            let sense = Sense {
                lemma: field(raw.lemma, "lemma")?,
                pos: raw.pos.unwrap_or_default(),
                sense_id: field(raw.sense_id, "sense_id")?,
                gloss: field(raw.gloss, "gloss")?,
            };
            if let Some(prev) = seen.insert(sense.sense_id.clone(), line_no) {
                return Err(Error::Format {
                    line: line_no,
                    message: format!("sense id {} already defined on line {prev}", sense.sense_id),
                });
            }
            senses.push(sense);
        }
        Self::new(senses)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        self.senses.iter().map(|s| serde_json::to_string(s).expect("plain struct") + "\n").collect()
    }

    pub fn len(&self) -> usize {
        self.senses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senses.is_empty()
    }

    pub fn senses(&self) -> &[Sense] {
        &self.senses
    }

    pub fn sense(&self, sense_id: &str) -> Option<&Sense> {
        self.by_id.get(sense_id).map(|&i| &self.senses[i])
    }

    /// Candidate senses in file order. An empty or unknown `pos` falls back to
    /// the union over every part of speech of the lemma.
    pub fn lookup(&self, lemma: &str, pos: Option<&str>) -> Option<Vec<&Sense>> {
        let idx = pos
            .filter(|p| !p.is_empty())
            .and_then(|p| self.by_key.get(&(lemma.to_string(), p.to_string())))
            .or_else(|| self.by_lemma.get(lemma))?;
        Some(idx.iter().map(|&i| &self.senses[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsdInstance {
    pub tokens: Vec<String>,
    pub target_index: usize,
    pub lemma: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<String>,
    pub gold: Vec<String>,
}

pub fn parse_instances(text: &str) -> Result<Vec<WsdInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: WsdInstance =
            serde_json::from_str(line).map_err(|e| Error::Format { line: i + 1, message: e.to_string() })?;
        if inst.target_index >= inst.tokens.len() {
            return Err(Error::Format {
                line: i + 1,
                message: format!("target index {} outside {} tokens", inst.target_index, inst.tokens.len()),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_instances(path: &Path) -> Result<Vec<WsdInstance>> {
    parse_instances(&std::fs::read_to_string(path)?)
}

pub fn instances_jsonl(instances: &[WsdInstance]) -> String {
    instances.iter().map(|s| serde_json::to_string(s).expect("plain struct") + "\n").collect()
}

/// Token ids of one context-gloss pair, at most `max_len` long. The context
/// is trimmed first (from whichever side is longer), then the gloss tail.
pub fn encode_pair(tok: &Tokenizer, inst: &WsdInstance, sense: &Sense, max_len: usize) -> Result<Vec<u32>> {
    if inst.target_index >= inst.tokens.len() {
        bail!(Index, "target index {} outside {} tokens", inst.target_index, inst.tokens.len());
    }
    let words = tok.encode_words(&inst.tokens);
    let mut left: Vec<u32> = words[..inst.target_index].concat();
    let target = &words[inst.target_index];
    let mut right: Vec<u32> = words[inst.target_index + 1..].concat();
    let mut head = tok.encode(&sense.lemma);
    head.extend(tok.encode(":"));
    let mut gloss = tok.encode(&sense.gloss);
    let fixed = 5 + target.len() + head.len();
    if fixed > max_len {
        bail!(Dimension, "target and lemma need {fixed} tokens, above the limit of {max_len}");
    }
    let budget = max_len - fixed;
    while left.len() + right.len() + gloss.len() > budget && !(left.is_empty() && right.is_empty()) {
        if left.len() >= right.len() {
            left.remove(0);
        } else {
            right.pop();
        }
    }
    gloss.truncate(budget - left.len() - right.len());
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(left);
    ids.push(TGT_OPEN);
    ids.extend(target);
    ids.push(TGT_CLOSE);
    ids.extend(right);
    ids.push(SEP);
    ids.extend(head);
    ids.extend(gloss);
    ids.push(SEP);
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextGlossPair {
    pub sense_id: String,
    pub ids: Vec<u32>,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Real(ContextGlossPair),
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub slots: Vec<Slot>,
}

impl CandidateSet {
    pub fn real(&self) -> Vec<&ContextGlossPair> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Real(p) => Some(p),
                Slot::Pad => None,
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.real().iter().map(|p| p.positive).collect()
    }

    /// Real pairs stacked into one padded batch.
    pub fn batch(&self) -> Result<(Vec<u32>, Vec<bool>, usize, usize)> {
        let seqs: Vec<Vec<u32>> = self.real().iter().map(|p| p.ids.clone()).collect();
        if seqs.is_empty() {
            bail!(Validation, "candidate set has no real slots");
        }
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let (ids, pad) = pad_sequences(&seqs, seq)?;
        Ok((ids, pad, seqs.len(), seq))
    }
}

/// Candidate pairs for `inst`. With `k = Some(K)` the set has exactly `K`
/// slots: all senses plus pads when there are at most `K`, otherwise `K`
/// sampled senses that always include the gold ones (a random subset of them
/// if there are more than `K`). With `k = None` every sense is used.
pub fn build_candidate_set(
    inst: &WsdInstance,
    inventory: &SenseInventory,
    tok: &Tokenizer,
    k: Option<usize>,
    seed: u64,
    max_len: usize,
) -> Result<CandidateSet> {
    let Some(senses) = inventory.lookup(&inst.lemma, inst.pos.as_deref()) else {
        bail!(Data, "lemma {} is not in the sense inventory", inst.lemma);
    };
    if let Some(g) = inst.gold.iter().find(|g| !senses.iter().any(|s| &s.sense_id == *g)) {
        bail!(Data, "gold sense {g} is not a sense of {}", inst.lemma);
    }
    let is_gold = |s: &Sense| inst.gold.contains(&s.sense_id);
    let chosen: Vec<usize> = match k {
        Some(0) => bail!(Parameter, "candidate count must be positive"),
        Some(k) if senses.len() > k => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gold: Vec<usize> = (0..senses.len()).filter(|&i| is_gold(senses[i])).collect();
            let other: Vec<usize> = (0..senses.len()).filter(|&i| !is_gold(senses[i])).collect();
            let mut pick: Vec<usize> = gold.choose_multiple(&mut rng, k.min(gold.len())).copied().collect();
            let rest = k - pick.len();
            pick.extend(other.choose_multiple(&mut rng, rest).copied());
            pick.sort_unstable();
            pick
        }
        _ => (0..senses.len()).collect(),
    };
    let mut slots = Vec::with_capacity(k.unwrap_or(chosen.len()));
    for &i in &chosen {
        let s = senses[i];
        slots.push(Slot::Real(ContextGlossPair {
            sense_id: s.sense_id.clone(),
            ids: encode_pair(tok, inst, s, max_len)?,
            positive: is_gold(s),
        }));
    }
    if let Some(k) = k {
        slots.resize(k, Slot::Pad);
    }
    Ok(CandidateSet { slots })
}

fn check_head(config: &ModelConfig) -> Result<()> {
    match &config.head {
        Some(h) if h.kind == HeadKind::Classify && h.outputs == 2 => Ok(()),
        _ => bail!(Config, "gloss classification needs a two-class head"),
    }
}

/// Positive-class probabilities `[R, 1]` for the `R` real slots, in slot order.
pub fn lmgc_forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    set: &CandidateSet,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    check_head(config)?;
    let (ids, pad, batch, seq) = set.batch()?;
    let out = encode(tape, params, config, EncoderInput { ids: &ids, pad: &pad, batch, seq }, rng)?;
    let logits = head_logits(tape, params, out.aggregate)?;
    let probs = tape.softmax(logits, 1.0)?;
    tape.select_cols(probs, &[1])
}

/// Slot-aligned scores without dropout; pads get `None`.
pub fn lmgc_scores(params: &ModelParams<Tensor>, config: &ModelConfig, set: &CandidateSet) -> Result<Vec<Option<f64>>> {
    let mut tape = Tape::new();
    let p = params.register_frozen(&mut tape);
    let probs = lmgc_forward(&mut tape, &p, config, set, None)?;
    let mut it = tape.value(probs).data().iter();
    Ok(set
        .slots
        .iter()
        .map(|s| match s {
            Slot::Real(_) => it.next().copied(),
            Slot::Pad => None,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
    #[serde(default)]
    pub variant: FocalVariant,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25, variant: FocalVariant::Standard }
    }
}

/// Mean focal loss over the real slots.
pub fn lmgc_loss(tape: &mut Tape, probs: Var, labels: &[bool], focal: &FocalConfig) -> Result<Var> {
    tape.focal_loss(probs, labels, focal.gamma, focal.alpha, focal.variant)
}

/// Masked copy of the set's real pairs.
pub fn corrupt_pairs(set: &CandidateSet, vocab_size: usize, p_mask: f64, seed: u64) -> Result<MaskedBatch> {
    let (ids, pad, batch, _) = set.batch()?;
    dynamic_mask(&ids, &pad, batch, vocab_size, p_mask, seed)
}

/// How the masked-token cross-entropies enter the LMGC-M objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmReduction {
    /// Summed over the masked tokens.
    #[default]
    Sum,
    /// Averaged over the masked tokens.
    Mean,
}

/// Focal loss on the clean pairs plus the masked-LM cross-entropy on
/// `corrupted`. Both passes share parameters but draw dropout independently.
#[allow(clippy::too_many_arguments)]
pub fn lmgcm_loss(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    set: &CandidateSet,
    corrupted: &MaskedBatch,
    focal: &FocalConfig,
    reduction: MlmReduction,
    rng_clean: Option<&mut ChaCha8Rng>,
    rng_masked: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let probs = lmgc_forward(tape, params, config, set, rng_clean)?;
    let fl = lmgc_loss(tape, probs, &set.labels(), focal)?;
    match mlm_loss(tape, params, config, corrupted, rng_masked)? {
        Some(mean) => {
            let mlm = match reduction {
                MlmReduction::Sum => tape.scale(mean, corrupted.masked_positions().len() as f64)?,
                MlmReduction::Mean => mean,
            };
            tape.add(fl, mlm)
        }
        None => Ok(fl),
    }
}

/// Index of the highest-scoring real slot after a softmax over real slots;
/// ties go to the lowest index.
pub fn predict_index(scores: &[Option<f64>]) -> Result<usize> {
    let real: Vec<(usize, f64)> = scores.iter().enumerate().filter_map(|(i, s)| s.map(|v| (i, v))).collect();
    if real.is_empty() {
        bail!(Validation, "no real candidates to choose from");
    }
    let max = real.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = real.iter().map(|r| (r.1 - max).exp()).sum();
    let mut best = (real[0].0, f64::NEG_INFINITY);
    for &(i, v) in &real {
        let p = (v - max).exp() / z;
        if p > best.1 {
            best = (i, p);
        }
    }
    Ok(best.0)
}

pub fn predict_sense<'a>(scores: &[Option<f64>], set: &'a CandidateSet) -> Result<&'a str> {
    if scores.len() != set.slots.len() {
        bail!(Dimension, "{} scores for {} slots", scores.len(), set.slots.len());
    }
    match &set.slots[predict_index(scores)?] {
        Slot::Real(p) => Ok(&p.sense_id),
        Slot::Pad => bail!(State, "a pad slot received a score"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WsdReport {
    pub dataset: String,
    pub instances: usize,
    pub correct: usize,
    pub f1: f64,
}

impl WsdReport {
    /// With one prediction per instance, precision, recall and F1 all equal accuracy.
    pub fn from_counts(dataset: &str, instances: usize, correct: usize) -> Result<Self> {
        if instances == 0 {
            bail!(Validation, "no instances to score");
        }
        Ok(Self { dataset: dataset.into(), instances, correct, f1: correct as f64 / instances as f64 })
    }
}

pub fn report_csv(reports: &[WsdReport]) -> String {
    let mut s = String::from("dataset,instances,correct,F1\n");
    for r in reports {
        s.push_str(&format!("{},{},{},{}\n", r.dataset, r.instances, r.correct, r.f1));
    }
    s
}

/// Scores every instance with all of its candidate senses. Instances whose
/// lemma is unknown count as wrong.
pub fn evaluate_wsd(
    params: &ModelParams<Tensor>,
    config: &ModelConfig,
    tok: &Tokenizer,
    inventory: &SenseInventory,
    instances: &[WsdInstance],
    dataset: &str,
    max_len: usize,
) -> Result<WsdReport> {
    if instances.is_empty() {
        bail!(Validation, "no instances to score");
    }
    let hits: Vec<bool> = instances
        .par_iter()
        .map(|inst| {
            if inventory.lookup(&inst.lemma, inst.pos.as_deref()).is_none() {
                log::warn!("lemma {} missing from the inventory; counted as wrong", inst.lemma);
                return Ok(false);
            }
            let set = build_candidate_set(inst, inventory, tok, None, 0, max_len)?;
            let scores = lmgc_scores(params, config, &set)?;
            Ok(inst.gold.iter().any(|g| g == predict_sense(&scores, &set).unwrap_or("")))
        })
        .collect::<Result<_>>()?;
    WsdReport::from_counts(dataset, instances.len(), hits.iter().filter(|&&h| h).count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Lmgc,
    LmgcM,
}

impl Objective {
    pub fn label(self) -> &'static str {
        match self {
            Objective::Lmgc => "lmgc",
            Objective::LmgcM => "lmgc-m",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdTrainConfig {
    pub objective: Objective,
    pub candidates: usize,
    pub focal: FocalConfig,
    #[serde(default)]
    pub mlm_reduction: MlmReduction,
    pub max_len: usize,
    pub mask_prob: f64,
    pub epochs: usize,
    /// Instances whose gradients are averaged per optimizer step.
    pub instances_per_step: usize,
    pub optimizer: AdamW,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WsdTrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Lmgc,
            candidates: DEFAULT_CANDIDATES,
            focal: FocalConfig::default(),
            mlm_reduction: MlmReduction::Sum,
            max_len: DEFAULT_MAX_LEN,
            mask_prob: 0.15,
            epochs: 3,
            instances_per_step: 4,
            optimizer: AdamW { lr: 5e-4, ..AdamW::default() },
            seed: 0,
        }
    }
}

impl WsdTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.instances_per_step == 0 {
            bail!(Config, "candidate count and instances per step must be positive");
        }
        if !(self.focal.gamma >= 0.0) || !(self.focal.alpha > 0.0 && self.focal.alpha <= 1.0) {
            bail!(Config, "focal loss needs gamma >= 0 and alpha in (0, 1]");
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            bail!(Config, "mask probability must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Fine-tunes a model with a two-class head on `instances`.
pub fn train_wsd(
    mut params: ModelParams<Tensor>,
    config: &ModelConfig,
    tok: &Tokenizer,
    inventory: &SenseInventory,
    instances: &[WsdInstance],
    wc: &WsdTrainConfig,
) -> Result<(ModelParams<Tensor>, Vec<CurvePoint>)> {
    wc.validate()?;
    check_head(config)?;
    let mut state = AdamWState::new(params.iter());
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..wc.epochs as u64 {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(wc.seed, &[10, epoch])));
        for group in order.chunks(wc.instances_per_step) {
            step += 1;
            let mut acc = params.map(|t| Tensor::zeros(t.shape()));
            let mut loss_sum = 0.0;
            for &idx in group {
                let s = |tag: u64| derive_seed(wc.seed, &[tag, epoch, idx as u64]);
                let set = build_candidate_set(&instances[idx], inventory, tok, Some(wc.candidates), s(11), wc.max_len)?;
                let mut tape = Tape::new();
                let p = params.register(&mut tape);
                let mut rng_clean = ChaCha8Rng::seed_from_u64(s(12));
                let loss = match wc.objective {
                    Objective::Lmgc => {
                        let probs = lmgc_forward(&mut tape, &p, config, &set, Some(&mut rng_clean))?;
                        lmgc_loss(&mut tape, probs, &set.labels(), &wc.focal)?
                    }
                    Objective::LmgcM => {
                        let corrupted = corrupt_pairs(&set, config.vocab_size, wc.mask_prob, s(14))?;
                        let mut rng_masked = ChaCha8Rng::seed_from_u64(s(13));
                        lmgcm_loss(
                            &mut tape,
                            &p,
                            config,
                            &set,
                            &corrupted,
                            &wc.focal,
                            wc.mlm_reduction,
                            Some(&mut rng_clean),
                            Some(&mut rng_masked),
                        )?
                    }
                };
                loss_sum += tape.value(loss).item();
                tape.backward(loss)?;
                accumulate(&mut acc, &p.grads(&tape), 1.0 / group.len() as f64);
            }
            apply_update(&wc.optimizer, &mut params, &acc, &mut state)?;
            curve.push(CurvePoint {
                step,
                train_loss: loss_sum / group.len() as f64,
                branch: wc.objective.label().into(),
                val_ce: None,
                val_ppl: None,
            });
        }
    }
    Ok((params, curve))
}

/// Positive (gold-sense) pairs of `instances`, for masked-LM training or validation.
pub fn gold_pair_sequences(
    tok: &Tokenizer,
    inventory: &SenseInventory,
    instances: &[WsdInstance],
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for inst in instances {
        for g in &inst.gold {
            let Some(sense) = inventory.sense(g) else {
                bail!(Data, "gold sense {g} is not in the inventory");
            };
            out.push(encode_pair(tok, inst, sense, max_len)?);
        }
    }
    Ok(out)
}

/// Synthetic sense inventories. Every sense of a lemma is tied to a
/// different topic; its gloss and its contexts both draw words from that
/// topic's word list, the rest being shared filler words.
pub mod synthetic {
    use rand::Rng;

    use super::*;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct SyntheticWsdConfig {
        pub lemmas: usize,
        pub min_senses: usize,
        pub max_senses: usize,
        pub topics: usize,
        pub words_per_topic: usize,
        /// Topic words placed in each context and in each gloss.
        pub cues_per_context: usize,
        pub cues_per_gloss: usize,
        pub filler_words: usize,
        /// Filler words per context, inclusive range.
        pub context_fillers: (usize, usize),
        pub gloss_fillers: usize,
        pub train_per_sense: usize,
        pub test_per_sense: usize,
        #[serde(default)]
        pub seed: u64,
    }

    impl Default for SyntheticWsdConfig {
        fn default() -> Self {
            Self {
                lemmas: 50,
                min_senses: 2,
                max_senses: 12,
                topics: 16,
                words_per_topic: 8,
                cues_per_context: 2,
                cues_per_gloss: 2,
                filler_words: 60,
                context_fillers: (4, 10),
                gloss_fillers: 2,
                train_per_sense: 4,
                test_per_sense: 1,
                seed: 0,
            }
        }
    }

    #[derive(Clone, Debug)]
    pub struct SyntheticWsd {
        pub inventory: SenseInventory,
        pub train: Vec<WsdInstance>,
        pub test: Vec<WsdInstance>,
        pub topic_words: Vec<Vec<String>>,
        /// Topic index of every sense id.
        pub sense_topic: BTreeMap<String, usize>,
        /// Plain-text lines (contexts and glosses) for tokenizer training.
        pub text: Vec<String>,
    }

    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

    /// `n` distinct pseudo-words of two or three syllables.
    pub(crate) fn words(n: usize, rng: &mut ChaCha8Rng, taken: &mut std::collections::BTreeSet<String>) -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let syl = rng.random_range(2..=3);
            let w: String = (0..syl)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            if taken.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }

    fn insert_randomly(tokens: &mut Vec<String>, word: String, rng: &mut ChaCha8Rng) {
        let at = rng.random_range(0..=tokens.len());
        tokens.insert(at, word);
    }

    pub fn generate(cfg: &SyntheticWsdConfig) -> Result<SyntheticWsd> {
        if cfg.lemmas == 0 || cfg.min_senses < 2 || cfg.max_senses < cfg.min_senses {
            bail!(Config, "synthetic WSD needs lemmas with at least 2 senses each");
        }
        if cfg.topics < cfg.max_senses {
            bail!(Config, "{} topics cannot separate {} senses", cfg.topics, cfg.max_senses);
        }
        if cfg.words_per_topic < cfg.cues_per_context.max(cfg.cues_per_gloss) || cfg.cues_per_context == 0 {
            bail!(Config, "each topic needs at least as many words as cues drawn from it");
        }
        if cfg.filler_words == 0 || cfg.context_fillers.1 < cfg.context_fillers.0 {
            bail!(Config, "filler vocabulary and context range must be non-empty");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut taken = std::collections::BTreeSet::new();
        let lemmas = words(cfg.lemmas, &mut rng, &mut taken);
        let fillers = words(cfg.filler_words, &mut rng, &mut taken);
        let topic_words: Vec<Vec<String>> =
            (0..cfg.topics).map(|_| words(cfg.words_per_topic, &mut rng, &mut taken)).collect();
        let mut senses = Vec::new();
        let mut sense_topic = BTreeMap::new();
        let mut all_topics: Vec<usize> = (0..cfg.topics).collect();
        for lemma in &lemmas {
            let m = rng.random_range(cfg.min_senses..=cfg.max_senses);
            all_topics.shuffle(&mut rng);
            for (j, &topic) in all_topics[..m].iter().enumerate() {
                let mut gloss: Vec<String> =
                    (0..cfg.gloss_fillers).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
                for w in topic_words[topic].choose_multiple(&mut rng, cfg.cues_per_gloss) {
                    insert_randomly(&mut gloss, w.clone(), &mut rng);
                }
                let sense_id = format!("{lemma}.n.{:02}", j + 1);
                sense_topic.insert(sense_id.clone(), topic);
                senses.push(Sense { lemma: lemma.clone(), pos: "n".into(), sense_id, gloss: gloss.join(" ") });
            }
        }
        let mut make = |sense: &Sense| {
            let topic = sense_topic[&sense.sense_id];
            let n = rng.random_range(cfg.context_fillers.0..=cfg.context_fillers.1);
            let mut tokens: Vec<String> = (0..n).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
            for w in topic_words[topic].choose_multiple(&mut rng, cfg.cues_per_context) {
                insert_randomly(&mut tokens, w.clone(), &mut rng);
            }
            let target_index = rng.random_range(0..=tokens.len());
            tokens.insert(target_index, sense.lemma.clone());
            WsdInstance {
                tokens,
                target_index,
                lemma: sense.lemma.clone(),
                pos: Some("n".into()),
                gold: vec![sense.sense_id.clone()],
            }
        };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for sense in &senses {
            for _ in 0..cfg.train_per_sense {
                train.push(make(sense));
            }
            for _ in 0..cfg.test_per_sense {
                test.push(make(sense));
            }
        }
        train.shuffle(&mut rng);
        let mut text: Vec<String> = train.iter().map(|i| i.tokens.join(" ")).collect();
        text.extend(senses.iter().map(|s| format!("{} : {}", s.lemma, s.gloss)));
        Ok(SyntheticWsd { inventory: SenseInventory::new(senses)?, train, test, topic_words, sense_topic, text })
    }
}
