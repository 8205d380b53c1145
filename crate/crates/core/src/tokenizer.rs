//! Byte-pair-encoding tokenizer with a fixed block of special tokens.
//!
//! Words are split on Unicode whitespace and spelled as characters followed by
//! an end-of-word sentinel symbol. Training repeatedly merges the most frequent
//! adjacent symbol pair; equal counts go to the lexicographically smallest pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const TGT_OPEN: u32 = 5;
pub const TGT_CLOSE: u32 = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[TGT]", "[/TGT]"];
pub const NUM_SPECIAL: u32 = SPECIAL_TOKENS.len() as u32;

/// Appended to every word before merging; rendered as a space when decoding.
pub const END_OF_WORD: &str = "</w>";

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

/// Dense bidirectional token ↔ id map. Ids `0..7` are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Self { tokens: Vec::new(), ids: HashMap::new() };
        for s in SPECIAL_TOKENS {
            v.insert(s.to_string());
        }
        v
    }

    /// Adds `token` if absent and returns its id.
    fn insert(&mut self, token: String) -> u32 {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Ordered merge list learned during training.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeRules {
    pairs: Vec<(String, String)>,
}

impl MergeRules {
    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeRules,
    ranks: HashMap<(String, String), usize>,
    lowercase: bool,
}

fn split_words(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
        .collect()
}

fn spell(word: &str) -> Vec<String> {
    word.chars().map(String::from).chain(std::iter::once(END_OF_WORD.to_string())).collect()
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

impl Tokenizer {
    /// Learns merges until the vocabulary reaches `target_vocab_size` or no pair is left.
    pub fn train<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        target_vocab_size: usize,
        lowercase: bool,
    ) -> Result<Self> {
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in split_words(line, lowercase) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            bail!(Validation, "cannot train a tokenizer on an empty corpus");
        }
        let base: BTreeSet<String> = word_counts.keys().flat_map(|w| spell(w)).collect();
        if target_vocab_size <= base.len() + NUM_SPECIAL as usize {
            bail!(
                Parameter,
                "target vocabulary {target_vocab_size} must exceed {} base symbols + {NUM_SPECIAL} specials",
                base.len()
            );
        }
        let mut vocab = Vocabulary::with_specials();
        for sym in &base {
            vocab.insert(sym.clone());
        }
        let mut words: Vec<(Vec<String>, u64)> = word_counts.iter().map(|(w, &c)| (spell(w), c)).collect();
        let mut merges = MergeRules::default();
        while vocab.len() < target_vocab_size {
            let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (syms, c) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
                }
            }
            // BTreeMap iterates pairs in lexicographic order, so the first
            // maximum is the tie-break winner.
            let Some(((l, r), _)) = counts.iter().fold(None, |best: Option<(&(&str, &str), u64)>, (k, &c)| {
                match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((k, c)),
                }
            }) else {
                break;
            };
            let (left, right) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                merge_pair(syms, &left, &right);
            }
            vocab.insert(format!("{left}{right}"));
            merges.pairs.push((left, right));
        }
        Ok(Self::from_parts(vocab, merges, lowercase))
    }

    fn from_parts(vocab: Vocabulary, merges: MergeRules, lowercase: bool) -> Self {
        let ranks = merges.pairs.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { vocab, merges, ranks, lowercase }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeRules {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = spell(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, l, r)) = best else { break };
            merge_pair(&mut syms, &l, &r);
        }
        out.extend(syms.iter().map(|s| self.vocab.id(s).unwrap_or(UNK)));
    }

    /// Token ids for `text`; symbols never seen in training become `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in split_words(text, self.lowercase) {
            self.encode_word(&w, &mut out);
        }
        out
    }

    /// Ids of each whitespace-separated word, one group per word.
    pub fn encode_words(&self, words: &[String]) -> Vec<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                let mut out = Vec::new();
                for piece in split_words(w, self.lowercase) {
                    self.encode_word(&piece, &mut out);
                }
                out
            })
            .collect()
    }

    /// Surface text for `ids`; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let Some(tok) = self.vocab.token(id) else {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {}", self.vocab.len())));
            };
            if !is_special(id) {
                text.push_str(tok);
            }
        }
        Ok(text.replace(END_OF_WORD, " ").trim_end().to_string())
    }

    /// Stable digest of vocabulary and merges.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.vocab.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for (l, r) in &self.merges.pairs {
            h.update(l.as_bytes());
            h.update([0u8]);
            h.update(r.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `vocab.txt` (line number = id) and `merges.txt` (`left right` per line).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut vocab = self.vocab.tokens.join("\n");
        vocab.push('\n');
        fs::write(dir.join("vocab.txt"), vocab)?;
        let merges: String = self.merges.pairs.iter().map(|(l, r)| format!("{l} {r}\n")).collect();
        fs::write(dir.join("merges.txt"), merges)?;
        Ok(())
    }

    pub fn load(dir: &Path, lowercase: bool) -> Result<Self> {
        let vocab_text = fs::read_to_string(dir.join("vocab.txt"))?;
        let mut vocab = Vocabulary { tokens: Vec::new(), ids: HashMap::new() };
        for (n, line) in vocab_text.lines().enumerate() {
            if vocab.ids.contains_key(line) {
                return Err(Error::Format { line: n + 1, message: format!("duplicate token {line:?}") });
            }
            vocab.insert(line.to_string());
        }
        for (id, s) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.token(id as u32) != Some(*s) {
                return Err(Error::Format { line: id + 1, message: format!("expected special token {s}") });
            }
        }
        let merges_text = fs::read_to_string(dir.join("merges.txt"))?;
        let mut merges = MergeRules::default();
        for (n, line) in merges_text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.pairs.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::Format { line: n + 1, message: format!("bad merge line {line:?}") }),
            }
        }
        Ok(Self::from_parts(vocab, merges, lowercase))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn base_count(corpus: &[&str]) -> usize {
        corpus
            .iter()
            .flat_map(|l| l.split_whitespace())
            .flat_map(|w| spell(&w.to_lowercase()))
            .collect::<BTreeSet<_>>()
            .len()
    }

    fn one_merge(corpus: &[&str]) -> Tokenizer {
        let budget = base_count(corpus) + NUM_SPECIAL as usize + 1;
        Tokenizer::train(corpus.iter().copied(), budget, true).unwrap()
    }

    #[test]
    fn first_merge_examples() {
        assert_eq!(one_merge(&["ab ab ab"]).merges().pairs()[0], ("a".into(), "b".into()));
        assert_eq!(one_merge(&["aaab"]).merges().pairs()[0], ("a".into(), "a".into()));
    }

    #[test]
    fn single_word_becomes_one_token() {
        let corpus = ["hello hello"];
        let tok = Tokenizer::train(corpus, 100, true).unwrap();
        assert_eq!(tok.encode("hello").len(), 1);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let tok = one_merge(&["ab ab"]);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(tok.vocab().id(s), Some(i as u32));
        }
        assert_eq!(tok.merges().len(), tok.vocab_size() - base_count(&["ab ab"]) - 7);
    }

    #[test]
    fn encode_decode_edge_cases() {
        let tok = Tokenizer::train(["the cat sat on the mat"], 30, true).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert_eq!(tok.decode(&[PAD, CLS, SEP, PAD]).unwrap(), "");
        assert!(tok.encode("zebra").contains(&UNK));
        assert!(tok.decode(&[10_000]).is_err());
        assert_eq!(tok.decode(&tok.encode("The  cat\tsat")).unwrap(), "the cat sat");
    }

    #[test]
    fn errors_on_empty_corpus_and_tiny_budget() {
        assert!(Tokenizer::train(std::iter::empty(), 100, true).is_err());
        assert!(Tokenizer::train(["abc"], 11, true).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("kdlab-tok-{}", std::process::id()));
        let tok = Tokenizer::train(["low lower lowest newer wider"], 40, true).unwrap();
        tok.save(&dir).unwrap();
        let back = Tokenizer::load(&dir, true).unwrap();
        assert_eq!(back.vocab(), tok.vocab());
        assert_eq!(back.merges(), tok.merges());
        assert_eq!(back.fingerprint(), tok.fingerprint());
        std::fs::remove_dir_all(&dir).ok();
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-e]{1,6}"
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn roundtrip_and_bounds(lines in prop::collection::vec(prop::collection::vec(word(), 1..6), 1..8), budget in 20usize..60) {
            let text: Vec<String> = lines.iter().map(|l| l.join(" ")).collect();
            let Ok(tok) = Tokenizer::train(text.iter().map(String::as_str), budget, true) else {
                return Ok(());
            };
            let again = Tokenizer::train(text.iter().map(String::as_str), budget, true).unwrap();
            prop_assert_eq!(tok.merges(), again.merges());
            for line in &text {
                let ids = tok.encode(line);
                prop_assert_eq!(&tok.decode(&ids).unwrap(), line);
                prop_assert!(ids.iter().all(|&i| !is_special(i)));
                let base: usize = line.split_whitespace().map(|w| w.chars().count() + 1).sum();
                prop_assert!(ids.len() <= base);
            }
        }
    }
}
