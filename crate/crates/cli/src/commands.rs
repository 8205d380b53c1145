//! One configuration type and one entry point per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kdlab_core::data::{self, derive_seed, load_corpus, pack_documents, tokenize_documents, BatchStream, Document};
use kdlab_core::distill::{train_distill, DistillConfig, Student, Teacher, TeacherSet};
use kdlab_core::gradcheck::{op_catalog, transformer_directional, transformer_elementwise, CATALOG_STEP};
use kdlab_core::mlm::{curve_csv, train_mlm, validate_ce, validation_batches, TrainConfig};
use kdlab_core::paraphrase::{
    self, finetune_classifier, grid_search, logreg_config_from_cell, paragraph_features, paragraphs_jsonl,
    parse_paragraphs, parse_synonyms, split_by_source, svm_config_from_cell, synth_paraphrase, synonyms_text, train_linear_svm,
    train_logreg, train_nb, AxisValue, Classifier, Dataset, FinetuneConfig, GridSpec, LogRegConfig, Paragraph,
    Standardizer, SvmConfig, WordVectors,
};
use kdlab_core::tokenizer::Tokenizer;
use kdlab_core::transformer::{init_student_from, HeadConfig, HeadKind, ModelConfig, ModelParams};
use kdlab_core::wsd::{
    self, evaluate_wsd, instances_jsonl, load_instances, report_csv, train_wsd, SenseInventory, WsdTrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunSettings;
use crate::outdir::OutDir;

/// Sub-seed tags derived from the top-level seed.
mod tag {
    pub const INIT: u64 = 1001;
    pub const STREAM: u64 = 1002;
    pub const VALIDATION: u64 = 1003;
    pub const TRAIN: u64 = 1004;
    pub const HEAD: u64 = 1005;
    pub const PROJECTION: u64 = 1006;
    pub const SYNTH: u64 = 1007;
    pub const TOY: u64 = 1008;
    pub const SPLIT: u64 = 1009;
}

pub const TOKENIZER_SETTINGS: &str = "tokenizer.json";

#[derive(Serialize, Deserialize)]
struct TokenizerSettings {
    lowercase: bool,
}

fn required<'a>(p: &'a Path, what: &str) -> Result<&'a Path> {
    ensure!(!p.as_os_str().is_empty(), "{what} path is required");
    Ok(p)
}

pub fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let dir = required(dir, "tokenizer")?;
    let settings: TokenizerSettings = match std::fs::read_to_string(dir.join(TOKENIZER_SETTINGS)) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => TokenizerSettings { lowercase: true },
    };
    Tokenizer::load(dir, settings.lowercase).with_context(|| format!("loading tokenizer from {}", dir.display()))
}

fn check_tokenizer(ck: &Checkpoint, tok: &Tokenizer, path: &Path) -> Result<()> {
    if let Some(h) = &ck.tokenizer {
        ensure!(*h == tok.fingerprint(), "{} was trained with a different tokenizer", path.display());
    }
    ensure!(
        ck.config.vocab_size == tok.vocab_size(),
        "{} expects {} vocabulary entries, tokenizer has {}",
        path.display(),
        ck.config.vocab_size,
        tok.vocab_size()
    );
    Ok(())
}

/// Masked-LM data settings shared by training and evaluation commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmData {
    pub corpus: PathBuf,
    pub tokenizer: PathBuf,
    pub seq_len: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    /// Share of documents (taken from the end of the corpus) held out for validation.
    pub validation_share: f64,
}

impl Default for MlmData {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            tokenizer: PathBuf::new(),
            seq_len: 32,
            batch_size: 8,
            mask_prob: data::MASK_PROB,
            validation_share: 0.05,
        }
    }
}

pub struct PreparedMlm {
    pub tokenizer: Tokenizer,
    pub stream: BatchStream,
    pub validation: Vec<data::MaskedBatch>,
}

impl MlmData {
    pub fn prepare(&self, seed: u64) -> Result<PreparedMlm> {
        let p_mask = self.mask_prob;
        let tokenizer = load_tokenizer(&self.tokenizer)?;
        let docs = load_corpus(required(&self.corpus, "corpus")?)
            .with_context(|| format!("loading corpus {}", self.corpus.display()))?;
        let docs = tokenize_documents(&tokenizer, &docs);
        ensure!(docs.len() >= 2, "corpus needs at least two non-empty documents");
        ensure!((0.0..1.0).contains(&self.validation_share), "validation share must lie in [0, 1)");
        let n_val = ((docs.len() as f64 * self.validation_share).round() as usize).clamp(1, docs.len() - 1);
        let (train, val): (&[Document], &[Document]) = docs.split_at(docs.len() - n_val);
        let v = tokenizer.vocab_size();
        let stream = BatchStream::new(
            pack_documents(train, self.seq_len)?,
            self.batch_size,
            self.seq_len,
            v,
            p_mask,
            derive_seed(seed, &[tag::STREAM]),
        )?;
        let validation = validation_batches(
            pack_documents(val, self.seq_len)?,
            self.batch_size,
            self.seq_len,
            v,
            p_mask,
            derive_seed(seed, &[tag::VALIDATION]),
        )?;
        Ok(PreparedMlm { tokenizer, stream, validation })
    }
}

// ---------------------------------------------------------------- tokenizer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    pub corpus: PathBuf,
    pub vocab_size: usize,
    pub lowercase: bool,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self { run: RunSettings::default(), corpus: PathBuf::new(), vocab_size: 512, lowercase: true }
    }
}

pub fn tokenizer_train(c: &TokenizerTrainConfig, out: &mut OutDir) -> Result<i32> {
    let docs = load_corpus(required(&c.corpus, "corpus")?)?;
    let tok = Tokenizer::train(docs.iter().flatten().map(String::as_str), c.vocab_size, c.lowercase)?;
    let dir = out.path("tokenizer");
    tok.save(&dir)?;
    std::fs::write(dir.join(TOKENIZER_SETTINGS), serde_json::to_string(&TokenizerSettings { lowercase: c.lowercase })?)?;
    out.log(&format!("tokenizer: {} entries, {} merges", tok.vocab_size(), tok.merges().len()));
    println!("vocabulary {} fingerprint {}", tok.vocab_size(), tok.fingerprint());
    Ok(0)
}

// ---------------------------------------------------------------- pretrain

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    #[serde(flatten)]
    pub data: MlmData,
    /// Start from this checkpoint instead of a fresh initialization.
    pub init: Option<PathBuf>,
    /// Architecture for fresh models; `vocab_size` follows the tokenizer.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            run: RunSettings::default(),
            data: MlmData::default(),
            init: None,
            model: ModelConfig { max_seq: 64, ..ModelConfig::default() },
            train: TrainConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub const HIDDEN: &'static [&'static str] = &["train.seed"];
}

pub fn pretrain_mlm(c: &PretrainConfig, out: &mut OutDir) -> Result<i32> {
    let seed = c.run.seed;
    let prep = c.data.prepare(seed)?;
    let (config, params, step0) = match &c.init {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_tokenizer(&ck, &prep.tokenizer, path)?;
            (ck.config, ck.params, ck.step)
        }
        None => {
            let cfg = ModelConfig { vocab_size: prep.tokenizer.vocab_size(), ..c.model.clone() };
            let p = ModelParams::init(&cfg, derive_seed(seed, &[tag::INIT]))?;
            (cfg, p, 0)
        }
    };
    let tc = TrainConfig { seed: derive_seed(seed, &[tag::TRAIN]), ..c.train.clone() };
    out.log(&format!("pretraining {} parameters for {} steps", params.num_parameters(), tc.max_steps));
    let (params, curve) = train_mlm(params, &config, &prep.stream, &prep.validation, &tc)?;
    let v = validate_ce(&params, &config, &prep.validation)?;
    let ck = Checkpoint::new(config, params, Some(prep.tokenizer.fingerprint()), step0 + tc.max_steps as u64);
    ck.save(&out.path("model.tdlm"))?;
    out.write("curve.csv", curve_csv(&curve))?;
    out.log(&format!("validation ce {:.6} ppl {:.4}", v.ce, v.ppl));
    println!("validation ce {:.6} ppl {:.4}", v.ce, v.ppl);
    Ok(0)
}

// ---------------------------------------------------------------- distill

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct DistillRunConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    #[serde(flatten)]
    pub data: MlmData,
    pub teachers: Vec<PathBuf>,
    /// Initial student; when absent, layers are removed from the first teacher.
    pub student: Option<PathBuf>,
    pub distill: DistillConfig,
}


impl DistillRunConfig {
    /// The masking rate comes from the data section.
    pub const HIDDEN: &'static [&'static str] = &["distill.train.seed", "distill.mask_prob"];
}

pub fn distill(c: &DistillRunConfig, out: &mut OutDir) -> Result<i32> {
    ensure!(!c.teachers.is_empty(), "at least one teacher checkpoint is required");
    let seed = c.run.seed;
    let prep = c.data.prepare(seed)?;
    let hash = prep.tokenizer.fingerprint();
    let mut teachers = Vec::new();
    for path in &c.teachers {
        let ck = Checkpoint::load(path)?;
        check_tokenizer(&ck, &prep.tokenizer, path)?;
        teachers.push(Teacher { params: ck.params, config: ck.config, vocab_hash: hash.clone() });
    }
    let (config, params, step0) = match &c.student {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_tokenizer(&ck, &prep.tokenizer, path)?;
            (ck.config, ck.params, ck.step)
        }
        None => {
            let (p, cfg) = init_student_from(&teachers[0].params, &teachers[0].config)?;
            (cfg, p, 0)
        }
    };
    let set = TeacherSet::new(teachers)?;
    let student = Student::new(params, &config, set.hidden(), derive_seed(seed, &[tag::PROJECTION]));
    let mut dc = c.distill.clone();
    dc.mask_prob = c.data.mask_prob;
    dc.train.seed = derive_seed(seed, &[tag::TRAIN]);
    out.log(&format!("distilling from {} teachers for {} steps", set.len(), dc.train.max_steps));
    let (student, curve) = train_distill(student, &config, &hash, &set, &prep.stream, &prep.validation, &dc)?;
    let ck = Checkpoint::new(config, student.params, Some(hash), step0 + dc.train.max_steps as u64);
    ck.save(&out.path("model.tdlm"))?;
    out.write("curve.csv", curve_csv(&curve))?;
    if let Some(last) = curve.iter().rev().find_map(|p| p.val_ce) {
        println!("validation ce {last:.6}");
    }
    Ok(0)
}

// ---------------------------------------------------------------- eval-ppl

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPplConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    #[serde(flatten)]
    pub data: MlmData,
    pub checkpoint: PathBuf,
}

pub fn eval_ppl(c: &EvalPplConfig, out: &mut OutDir) -> Result<i32> {
    let ck = Checkpoint::load(required(&c.checkpoint, "checkpoint")?)?;
    let tok = load_tokenizer(&c.data.tokenizer)?;
    check_tokenizer(&ck, &tok, &c.checkpoint)?;
    let docs = tokenize_documents(&tok, &load_corpus(required(&c.data.corpus, "corpus")?)?);
    let batches = validation_batches(
        pack_documents(&docs, c.data.seq_len)?,
        c.data.batch_size,
        c.data.seq_len,
        tok.vocab_size(),
        c.data.mask_prob,
        derive_seed(c.run.seed, &[tag::VALIDATION]),
    )?;
    let v = validate_ce(&ck.params, &ck.config, &batches)?;
    out.write("eval.csv", format!("tokens,ce,ppl\n{},{},{}\n", v.tokens, v.ce, v.ppl))?;
    println!("tokens {} ce {:.6} ppl {:.6}", v.tokens, v.ce, v.ppl);
    Ok(0)
}

// ---------------------------------------------------------------- wsd

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WsdData {
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub inventory: PathBuf,
    pub instances: PathBuf,
}

impl WsdData {
    fn load(&self) -> Result<(Checkpoint, Tokenizer, SenseInventory, Vec<wsd::WsdInstance>)> {
        let ck = Checkpoint::load(required(&self.checkpoint, "checkpoint")?)?;
        let tok = load_tokenizer(&self.tokenizer)?;
        check_tokenizer(&ck, &tok, &self.checkpoint)?;
        let inv = SenseInventory::load(required(&self.inventory, "inventory")?)?;
        let inst = load_instances(required(&self.instances, "instances")?)?;
        Ok((ck, tok, inv, inst))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WsdTrainRunConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    #[serde(flatten)]
    pub data: WsdData,
    pub wsd: WsdTrainConfig,
}

impl WsdTrainRunConfig {
    pub const HIDDEN: &'static [&'static str] = &["wsd.seed"];
}

pub fn wsd_train(c: &WsdTrainRunConfig, out: &mut OutDir) -> Result<i32> {
    let (ck, tok, inv, instances) = c.data.load()?;
    let mut config = ck.config;
    let params = match config.head {
        Some(HeadConfig { kind: HeadKind::Classify, outputs: 2 }) => ck.params,
        _ => ck.params.with_head(
            &mut config,
            HeadConfig { kind: HeadKind::Classify, outputs: 2 },
            derive_seed(c.run.seed, &[tag::HEAD]),
        )?,
    };
    let wc = WsdTrainConfig {
        seed: derive_seed(c.run.seed, &[tag::TRAIN]),
        max_len: c.wsd.max_len.min(config.max_seq),
        ..c.wsd.clone()
    };
    out.log(&format!("{} on {} instances for {} epochs", wc.objective.label(), instances.len(), wc.epochs));
    let (params, curve) = train_wsd(params, &config, &tok, &inv, &instances, &wc)?;
    let steps = curve.len() as u64;
    Checkpoint::new(config, params, Some(tok.fingerprint()), ck.step + steps).save(&out.path("model.tdlm"))?;
    out.write("curve.csv", curve_csv(&curve))?;
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdEvalConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    #[serde(flatten)]
    pub data: WsdData,
    pub dataset: String,
    pub max_len: usize,
}

impl Default for WsdEvalConfig {
    fn default() -> Self {
        Self {
            run: RunSettings::default(),
            data: WsdData::default(),
            dataset: "test".into(),
            max_len: wsd::DEFAULT_MAX_LEN,
        }
    }
}

pub fn wsd_eval(c: &WsdEvalConfig, out: &mut OutDir) -> Result<i32> {
    let (ck, tok, inv, instances) = c.data.load()?;
    let r = evaluate_wsd(&ck.params, &ck.config, &tok, &inv, &instances, &c.dataset, c.max_len.min(ck.config.max_seq))?;
    out.write("report.csv", report_csv(std::slice::from_ref(&r)))?;
    println!("{} instances {} correct {} F1 {:.4}", r.dataset, r.instances, r.correct, r.f1);
    Ok(0)
}

// ---------------------------------------------------------------- mpp

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MppFeaturesConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    pub vectors: PathBuf,
    pub paragraphs: PathBuf,
}

pub fn mpp_features(c: &MppFeaturesConfig, out: &mut OutDir) -> Result<i32> {
    let table = WordVectors::load(required(&c.vectors, "vectors")?)?;
    let paras = read_paragraphs(&c.paragraphs)?;
    let (data, oov) = paragraph_features(&paras, &table)?;
    out.write("features.csv", data.to_csv())?;
    out.log(&format!("{} paragraphs, {oov} entirely out of vocabulary", paras.len()));
    println!("paragraphs {} dim {} all-oov {oov}", data.len(), data.dim());
    Ok(0)
}

fn read_paragraphs(path: &Path) -> Result<Vec<Paragraph>> {
    let text = std::fs::read_to_string(required(path, "paragraphs")?)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_paragraphs(&text)?)
}

fn read_dataset(path: &Path, what: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(required(path, what)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset::from_csv(&text)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Lr,
    Nb,
    Svm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppTrainConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    pub train: PathBuf,
    pub test: PathBuf,
    pub classifier: ClassifierKind,
    /// Rescale features with training-set mean and deviation.
    pub standardize: bool,
    pub logreg: LogRegConfig,
    pub svm: SvmConfig,
}

impl Default for MppTrainConfig {
    fn default() -> Self {
        Self {
            run: RunSettings::default(),
            train: PathBuf::new(),
            test: PathBuf::new(),
            classifier: ClassifierKind::Lr,
            standardize: true,
            logreg: LogRegConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

fn load_split(train: &Path, test: &Path, standardize: bool) -> Result<(Dataset, Dataset)> {
    let (tr, te) = (read_dataset(train, "train")?, read_dataset(test, "test")?);
    if !standardize {
        return Ok((tr, te));
    }
    let s = Standardizer::fit(&tr)?;
    Ok((s.apply(&tr)?, s.apply(&te)?))
}

pub fn mpp_train(c: &MppTrainConfig, out: &mut OutDir) -> Result<i32> {
    let (train, test) = load_split(&c.train, &c.test, c.standardize)?;
    let model: Classifier = match c.classifier {
        ClassifierKind::Lr => train_logreg(&train, &c.logreg)?,
        ClassifierKind::Nb => train_nb(&train)?,
        ClassifierKind::Svm => train_linear_svm(&train, &c.svm)?,
    };
    let (f_train, f_test) = (model.f1(&train)?, model.f1(&test)?);
    out.write("model.json", serde_json::to_string_pretty(&model)? + "\n")?;
    out.write("metrics.csv", format!("train_f1,test_f1\n{f_train},{f_test}\n"))?;
    println!("train F1 {f_train:.4} test F1 {f_test:.4}");
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppGridConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    pub train: PathBuf,
    pub test: PathBuf,
    /// `lr` or `svm`.
    pub classifier: ClassifierKind,
    pub standardize: bool,
    /// Axes to sweep; `null` picks the default grid for the classifier.
    pub grid: Option<GridSpec>,
    pub logreg: LogRegConfig,
    pub svm: SvmConfig,
}

impl Default for MppGridConfig {
    fn default() -> Self {
        Self {
            run: RunSettings::default(),
            train: PathBuf::new(),
            test: PathBuf::new(),
            classifier: ClassifierKind::Lr,
            standardize: true,
            grid: None,
            logreg: LogRegConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

pub fn svm_default_grid() -> GridSpec {
    GridSpec {
        axes: vec![
            ("c".into(), [0.1, 1.0, 10.0, 100.0].map(AxisValue::Num).to_vec()),
            ("max_iter".into(), [500, 1000, 2000].map(AxisValue::Int).to_vec()),
        ],
    }
}

pub fn mpp_gridsearch(c: &MppGridConfig, out: &mut OutDir) -> Result<i32> {
    let (train, test) = load_split(&c.train, &c.test, c.standardize)?;
    let result = match c.classifier {
        ClassifierKind::Lr => {
            let spec = c.grid.clone().unwrap_or_else(GridSpec::logreg_default);
            grid_search(&spec, |cell| train_logreg(&train, &logreg_config_from_cell(&c.logreg, cell)?)?.f1(&test))?
        }
        ClassifierKind::Svm => {
            let spec = c.grid.clone().unwrap_or_else(svm_default_grid);
            grid_search(&spec, |cell| train_linear_svm(&train, &svm_config_from_cell(&c.svm, cell)?)?.f1(&test))?
        }
        ClassifierKind::Nb => bail!("naive Bayes has no hyperparameters to search"),
    };
    out.write("grid.csv", result.to_csv("f1"))?;
    let best: Vec<String> = result.best_cell().iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{} cells, best F1 {:.4} at {}", result.rows.len(), result.best_metric(), best.join(" "));
    Ok(0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MppFinetuneConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub finetune: FinetuneConfig,
}

impl MppFinetuneConfig {
    pub const HIDDEN: &'static [&'static str] = &["finetune.seed"];
}

pub fn mpp_finetune(c: &MppFinetuneConfig, out: &mut OutDir) -> Result<i32> {
    let ck = Checkpoint::load(required(&c.checkpoint, "checkpoint")?)?;
    let tok = load_tokenizer(&c.tokenizer)?;
    check_tokenizer(&ck, &tok, &c.checkpoint)?;
    let (train, test) = (read_paragraphs(&c.train)?, read_paragraphs(&c.test)?);
    let mut config = ck.config;
    let head = HeadConfig { kind: HeadKind::Classify, outputs: 2 };
    let params = if config.head == Some(head) {
        ck.params
    } else {
        ck.params.with_head(&mut config, head, derive_seed(c.run.seed, &[tag::HEAD]))?
    };
    let fc = FinetuneConfig { seed: derive_seed(c.run.seed, &[tag::TRAIN]), ..c.finetune.clone() };
    let (params, f1) = finetune_classifier(params, &config, &tok, &train, &test, &fc)?;
    Checkpoint::new(config, params, Some(tok.fingerprint()), ck.step).save(&out.path("model.tdlm"))?;
    out.write("metrics.csv", format!("test_f1\n{f1}\n"))?;
    println!("test F1 {f1:.4}");
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppSynthConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    /// Original paragraphs (JSON Lines); labels are ignored.
    pub paragraphs: PathBuf,
    pub synonyms: PathBuf,
    pub ratio: f64,
    /// Share of sources written to test.jsonl; the rest go to train.jsonl.
    pub test_share: f64,
}

impl Default for MppSynthConfig {
    fn default() -> Self {
        Self {
            run: RunSettings::default(),
            paragraphs: PathBuf::new(),
            synonyms: PathBuf::new(),
            ratio: paraphrase::SPINNERCHIEF_IF_RATIO,
            test_share: 0.3,
        }
    }
}

pub fn mpp_synth(c: &MppSynthConfig, out: &mut OutDir) -> Result<i32> {
    let texts: Vec<String> = read_paragraphs(&c.paragraphs)?.into_iter().map(|p| p.text).collect();
    let syn = parse_synonyms(&std::fs::read_to_string(required(&c.synonyms, "synonyms")?)?)?;
    ensure!((0.0..1.0).contains(&c.test_share), "test share must lie in [0, 1)");
    let o = synth_paraphrase(&texts, &syn, c.ratio, derive_seed(c.run.seed, &[tag::SYNTH]))?;
    out.write("paragraphs.jsonl", paragraphs_jsonl(&o.paragraphs))?;
    let (train, test) = split_by_source(&o.paragraphs, c.test_share, derive_seed(c.run.seed, &[tag::SPLIT]));
    out.write("train.jsonl", paragraphs_jsonl(&train))?;
    out.write("test.jsonl", paragraphs_jsonl(&test))?;
    out.write(
        "synth.csv",
        format!("replaceable,replaced,realized_ratio\n{},{},{}\n", o.replaceable, o.replaced, o.realized_ratio()),
    )?;
    println!("replaced {} of {} replaceable words ({:.4})", o.replaced, o.replaceable, o.realized_ratio());
    Ok(0)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    #[serde(flatten)]
    pub run: RunSettings,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn gradcheck(c: &GradcheckConfig, out: &mut OutDir) -> Result<i32> {
    let seed = c.run.seed;
    let mut rows: Vec<(String, f64, bool)> =
        op_catalog(seed)?.into_iter().map(|(name, r)| (name, r.max_rel_error, true)).collect();
    rows.push(("transformer_directional".into(), transformer_directional(seed, 32)?.max_rel_error, true));
    // Per-element errors of the whole model hit the roundoff floor on
    // near-zero components, so they are reported but not gated on.
    rows.push(("transformer_elementwise".into(), transformer_elementwise(seed)?.max_rel_error, false));
    let mut csv = String::from("check,max_rel_error,gated,pass\n");
    let mut ok = true;
    for (name, err, gated) in &rows {
        let pass = *err < GRADCHECK_TOLERANCE;
        if *gated {
            ok &= pass;
        }
        let verdict = match (gated, pass) {
            (true, true) => "ok",
            (true, false) => "FAIL",
            (false, _) => "diagnostic",
        };
        println!("{name:<28} {err:.3e} {verdict}");
        csv.push_str(&format!("{name},{err:e},{gated},{pass}\n"));
    }
    out.write("gradcheck.csv", csv)?;
    out.log(&format!("gradcheck h={CATALOG_STEP:e}: {}", if ok { "all passed" } else { "failures" }));
    Ok(if ok { 0 } else { 1 })
}

// ---------------------------------------------------------------- toy data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Markov corpus for masked-LM pretraining and distillation.
    Kd,
    /// Sense inventory and train/test instances.
    Wsd,
    /// Word vectors, synonym table and original paragraphs.
    Mpp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataConfig {
    #[serde(flatten)]
    pub run: RunSettings,
    pub kind: ToyKind,
    pub kd: data::synthetic::MarkovCorpusConfig,
    pub wsd: wsd::synthetic::SyntheticWsdConfig,
    pub mpp: paraphrase::synthetic::SyntheticMppConfig,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            run: RunSettings::default(),
            kind: ToyKind::Kd,
            kd: Default::default(),
            wsd: Default::default(),
            mpp: Default::default(),
        }
    }
}

impl ToyDataConfig {
    pub const HIDDEN: &'static [&'static str] = &["kd.seed", "wsd.seed", "mpp.seed"];
}

pub fn toy_data(c: &ToyDataConfig, out: &mut OutDir) -> Result<i32> {
    let seed = derive_seed(c.run.seed, &[tag::TOY]);
    match c.kind {
        ToyKind::Kd => {
            let docs = data::synthetic::generate(&data::synthetic::MarkovCorpusConfig { seed, ..c.kd.clone() })?;
            out.write("corpus.txt", data::synthetic::corpus_text(&docs))?;
            let tokens: usize = docs.iter().flatten().map(|s| s.split(' ').count()).sum();
            println!("documents {} words {tokens}", docs.len());
        }
        ToyKind::Wsd => {
            let d = wsd::synthetic::generate(&wsd::synthetic::SyntheticWsdConfig { seed, ..c.wsd.clone() })?;
            out.write("inventory.jsonl", d.inventory.to_jsonl())?;
            out.write("train.jsonl", instances_jsonl(&d.train))?;
            out.write("test.jsonl", instances_jsonl(&d.test))?;
            out.write("text.txt", d.text.join("\n\n") + "\n")?;
            println!("senses {} train {} test {}", d.inventory.len(), d.train.len(), d.test.len());
        }
        ToyKind::Mpp => {
            let d = paraphrase::synthetic::generate(&paraphrase::synthetic::SyntheticMppConfig { seed, ..c.mpp.clone() })?;
            out.write("vectors.txt", d.vectors.to_text())?;
            out.write("synonyms.txt", synonyms_text(&d.synonyms))?;
            let paras: Vec<Paragraph> = d
                .texts
                .iter()
                .enumerate()
                .map(|(i, t)| Paragraph { text: t.clone(), label: 0, source: format!("doc{i}") })
                .collect();
            out.write("paragraphs.jsonl", paragraphs_jsonl(&paras))?;
            println!("words {} synonyms {} paragraphs {}", d.vectors.len(), d.synonyms.len(), paras.len());
        }
    }
    Ok(0)
}
