//! Command-line driver for kdlab: argument parsing, configuration
//! resolution, checkpoints and the subcommands themselves.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod outdir;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::commands::*;
use crate::config::{echo, flag_value, parse_assignment, resolve};
use crate::outdir::OutDir;

pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "kdlab", version, about = "Distillation, gloss-classification WSD and paraphrase-detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (`seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (`threads`).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Sets any configuration value by dotted path, e.g. `--set train.max_steps=500`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a byte-pair vocabulary from a corpus.
    TokenizerTrain {
        #[command(flatten)]
        common: Common,
        /// `corpus`
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `vocab_size`
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Masked-LM training (teachers and from-scratch students).
    PretrainMlm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// `init`
        #[arg(long)]
        init: Option<PathBuf>,
        /// `train.max_steps`
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Multi-teacher distillation into a student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// `teachers` (repeatable)
        #[arg(long = "teacher")]
        teachers: Vec<PathBuf>,
        /// `student`
        #[arg(long)]
        student: Option<PathBuf>,
        /// `distill.train.max_steps`
        #[arg(long)]
        max_steps: Option<usize>,
        /// `distill.temperature`
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Masked-LM cross-entropy and perplexity of a checkpoint on a corpus.
    EvalPpl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// `checkpoint`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gloss-classification training (lmgc or lmgc-m).
    WsdTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: WsdFlags,
        /// `wsd.objective`
        #[arg(long)]
        objective: Option<String>,
        /// `wsd.epochs`
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sense-prediction F1 on an instance file.
    WsdEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: WsdFlags,
        /// `dataset`
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Averaged word-embedding features for labeled paragraphs.
    MppFeatures {
        #[command(flatten)]
        common: Common,
        /// `vectors`
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// `paragraphs`
        #[arg(long)]
        paragraphs: Option<PathBuf>,
    },
    /// Train one classifier (lr, nb or svm) on feature files.
    MppTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitFlags,
        /// `classifier`
        #[arg(long)]
        classifier: Option<String>,
    },
    /// Grid search over classifier hyperparameters.
    MppGridsearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitFlags,
        /// `classifier`
        #[arg(long)]
        classifier: Option<String>,
    },
    /// Fine-tune a checkpoint with a two-class head on labeled paragraphs.
    MppFinetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitFlags,
        /// `checkpoint`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `tokenizer`
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Synonym-substitution paraphrases of original paragraphs.
    MppSynth {
        #[command(flatten)]
        common: Common,
        /// `paragraphs`
        #[arg(long)]
        paragraphs: Option<PathBuf>,
        /// `synonyms`
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// `ratio`
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Generate synthetic corpora (kd, wsd or mpp).
    ToyData {
        #[command(flatten)]
        common: Common,
        /// `kind`
        #[arg(long)]
        kind: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// `corpus`
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `tokenizer`
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WsdFlags {
    /// `checkpoint`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `tokenizer`
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// `inventory`
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    /// `instances`
    #[arg(long)]
    pub instances: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitFlags {
    /// `train`
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// `test`
    #[arg(long)]
    pub test: Option<PathBuf>,
}

/// Collects `(dotted path, value)` overrides from typed flags.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn add<T: Serialize>(&mut self, path: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((path.to_string(), serde_json::to_value(v).expect("flag values serialize")));
        }
        self
    }

    fn raw(&mut self, path: &str, v: &Option<String>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((path.to_string(), flag_value(v)));
        }
        self
    }

    fn data(&mut self, d: &DataFlags) -> &mut Self {
        self.add("corpus", &d.corpus).add("tokenizer", &d.tokenizer)
    }

    fn wsd(&mut self, d: &WsdFlags) -> &mut Self {
        self.add("checkpoint", &d.checkpoint)
            .add("tokenizer", &d.tokenizer)
            .add("inventory", &d.inventory)
            .add("instances", &d.instances)
    }

    fn split(&mut self, s: &SplitFlags) -> &mut Self {
        self.add("train", &s.train).add("test", &s.test)
    }
}

fn common_overrides(c: &Common) -> Result<Overrides> {
    let mut o = Overrides::default();
    o.add("seed", &c.seed).add("out_dir", &c.out_dir).add("threads", &c.threads.map(Some));
    for s in &c.set {
        o.0.push(parse_assignment(s)?);
    }
    Ok(o)
}

/// Resolves the configuration, records it, and runs the command under a
/// locked output directory.
fn execute<T>(
    common: &Common,
    specific: Overrides,
    hidden: &[&str],
    run: impl FnOnce(&T, &mut OutDir) -> Result<i32>,
    settings: impl Fn(&T) -> &config::RunSettings,
) -> Result<i32>
where
    T: Serialize + DeserializeOwned + Default,
{
    // Explicit flags win over generic `--set` assignments.
    let mut all = common_overrides(common)?;
    all.0.extend(specific.0);
    let cfg: T = resolve(common.config.as_deref(), &all.0, hidden)?;
    let s = settings(&cfg);
    if let Some(n) = s.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let mut out = OutDir::open(&s.out_dir)?;
    out.write(RESOLVED_CONFIG, echo(&cfg, hidden)?)?;
    out.log(&format!("start seed={}", s.seed));
    let code = run(&cfg, &mut out)?;
    out.log(&format!("done exit={code}"));
    Ok(code)
}

pub fn run(cli: Cli) -> Result<i32> {
    let mut o = Overrides::default();
    match &cli.command {
        Command::TokenizerTrain { common, corpus, vocab_size } => {
            o.add("corpus", corpus).add("vocab_size", vocab_size);
            execute::<TokenizerTrainConfig>(common, o, &[], tokenizer_train, |c| &c.run)
        }
        Command::PretrainMlm { common, data, init, max_steps } => {
            o.data(data).add("init", init).add("train.max_steps", max_steps);
            execute::<PretrainConfig>(common, o, PretrainConfig::HIDDEN, pretrain_mlm, |c| &c.run)
        }
        Command::Distill { common, data, teachers, student, max_steps, temperature } => {
            o.data(data)
                .add("teachers", &(!teachers.is_empty()).then_some(teachers))
                .add("student", student)
                .add("distill.train.max_steps", max_steps)
                .add("distill.temperature", temperature);
            execute::<DistillRunConfig>(common, o, DistillRunConfig::HIDDEN, distill, |c| &c.run)
        }
        Command::EvalPpl { common, data, checkpoint } => {
            o.data(data).add("checkpoint", checkpoint);
            execute::<EvalPplConfig>(common, o, &[], eval_ppl, |c| &c.run)
        }
        Command::WsdTrain { common, data, objective, epochs } => {
            o.wsd(data).add("wsd.objective", objective).add("wsd.epochs", epochs);
            execute::<WsdTrainRunConfig>(common, o, WsdTrainRunConfig::HIDDEN, wsd_train, |c| &c.run)
        }
        Command::WsdEval { common, data, dataset } => {
            o.wsd(data).add("dataset", dataset);
            execute::<WsdEvalConfig>(common, o, &[], wsd_eval, |c| &c.run)
        }
        Command::MppFeatures { common, vectors, paragraphs } => {
            o.add("vectors", vectors).add("paragraphs", paragraphs);
            execute::<MppFeaturesConfig>(common, o, &[], mpp_features, |c| &c.run)
        }
        Command::MppTrain { common, split, classifier } => {
            o.split(split).raw("classifier", classifier);
            execute::<MppTrainConfig>(common, o, &[], mpp_train, |c| &c.run)
        }
        Command::MppGridsearch { common, split, classifier } => {
            o.split(split).raw("classifier", classifier);
            execute::<MppGridConfig>(common, o, &[], mpp_gridsearch, |c| &c.run)
        }
        Command::MppFinetune { common, split, checkpoint, tokenizer } => {
            o.split(split).add("checkpoint", checkpoint).add("tokenizer", tokenizer);
            execute::<MppFinetuneConfig>(common, o, MppFinetuneConfig::HIDDEN, mpp_finetune, |c| &c.run)
        }
        Command::MppSynth { common, paragraphs, synonyms, ratio } => {
            o.add("paragraphs", paragraphs).add("synonyms", synonyms).add("ratio", ratio);
            execute::<MppSynthConfig>(common, o, &[], mpp_synth, |c| &c.run)
        }
        Command::Gradcheck { common } => execute::<GradcheckConfig>(common, o, &[], gradcheck, |c| &c.run),
        Command::ToyData { common, kind } => {
            o.raw("kind", kind);
            execute::<ToyDataConfig>(common, o, ToyDataConfig::HIDDEN, toy_data, |c| &c.run)
        }
    }
}
