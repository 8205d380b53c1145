//! Encoder-only transformer with pre-norm blocks, sinusoidal positions, a
//! tied masked-LM projection and an optional classification/regression head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classify,
    Regress,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub dropout: f64,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub head: Option<HeadConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab_size: 512,
            max_seq: 128,
            dropout: 0.1,
            attention: AttentionMode::Full,
            head: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            bail!(Config, "hidden size {} must be a positive multiple of {} heads", self.hidden, self.heads);
        }
        if !self.hidden.is_multiple_of(2) {
            bail!(Config, "hidden size {} must be even for sinusoidal positions", self.hidden);
        }
        if self.ffn == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            bail!(Config, "feed-forward, vocabulary and sequence sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        self.attention.validate(self.max_seq)?;
        if let Some(h) = self.head {
            check_head(h)?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

fn check_head(h: HeadConfig) -> Result<()> {
    match h.kind {
        HeadKind::Classify if h.outputs < 2 => bail!(Parameter, "classification head needs at least 2 classes"),
        HeadKind::Regress if h.outputs != 1 => bail!(Parameter, "regression head needs exactly 1 output"),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub b_q: T,
    /// Keys carry no bias: softmax is invariant to it, so its gradient is identically zero.
    pub w_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    /// `K×H`.
    pub w: T,
    /// `K`.
    pub b: T,
}

/// All learnable tensors. The masked-LM projection reuses `token_embedding`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub token_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_ln_gain: T,
    pub final_ln_bias: T,
    pub mlm_bias: T,
    pub head: Option<HeadParams<T>>,
}

impl<T> LayerParams<T> {
    const NAMES: [&'static str; 15] = [
        "ln1_gain", "ln1_bias", "w_q", "b_q", "w_k", "w_v", "b_v", "w_o", "b_o", "ln2_gain", "ln2_bias",
        "w_ff1", "b_ff1", "w_ff2", "b_ff2",
    ];

    fn fields(&self) -> [&T; 15] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.w_q, &self.b_q, &self.w_k, &self.w_v, &self.b_v,
            &self.w_o, &self.b_o, &self.ln2_gain, &self.ln2_bias, &self.w_ff1, &self.b_ff1, &self.w_ff2, &self.b_ff2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 15] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_q, &mut self.b_q, &mut self.w_k,
            &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w_ff1, &mut self.b_ff1, &mut self.w_ff2, &mut self.b_ff2,
        ]
    }

    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<LayerParams<U>, E> {
        Ok(LayerParams {
            ln1_gain: f(&self.ln1_gain)?,
            ln1_bias: f(&self.ln1_bias)?,
            w_q: f(&self.w_q)?,
            b_q: f(&self.b_q)?,
            w_k: f(&self.w_k)?,
            w_v: f(&self.w_v)?,
            b_v: f(&self.b_v)?,
            w_o: f(&self.w_o)?,
            b_o: f(&self.b_o)?,
            ln2_gain: f(&self.ln2_gain)?,
            ln2_bias: f(&self.ln2_bias)?,
            w_ff1: f(&self.w_ff1)?,
            b_ff1: f(&self.b_ff1)?,
            w_ff2: f(&self.w_ff2)?,
            b_ff2: f(&self.b_ff2)?,
        })
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every tensor in [`ModelParams::named`] order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let token_embedding = f(&self.token_embedding)?;
        let layers = self.layers.iter().map(|l| l.try_map(&mut f)).collect::<Result<Vec<_>, E>>()?;
        let final_ln_gain = f(&self.final_ln_gain)?;
        let final_ln_bias = f(&self.final_ln_bias)?;
        let mlm_bias = f(&self.mlm_bias)?;
        let head = match &self.head {
            Some(h) => Some(HeadParams { w: f(&h.w)?, b: f(&h.b)? }),
            None => None,
        };
        Ok(ModelParams { token_embedding, layers, final_ln_gain, final_ln_bias, mlm_bias, head })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        self.try_map(|t| Ok::<U, std::convert::Infallible>(f(t))).unwrap_or_else(|e| match e {})
    }

    /// Tensors with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::<T>::NAMES.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_bias".into(), &self.final_ln_bias));
        out.push(("mlm_bias".into(), &self.mlm_bias));
        if let Some(h) = &self.head {
            out.push(("head.w".into(), &h.w));
            out.push(("head.b".into(), &h.b));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.named().into_iter().map(|(_, t)| t)
    }

    /// Mutable references in [`ModelParams::named`] order.
    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out.push(&mut self.mlm_bias);
        if let Some(h) = &mut self.head {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }
}

impl ModelParams<Tensor> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f, v) = (config.hidden, config.ffn, config.vocab_size);
        let token_embedding = Tensor::randn(&[v, h], INIT_STD, &mut rng);
        let layers = (0..config.layers).map(|_| init_layer(h, f, &mut rng)).collect();
        let head = config.head.map(|hc| HeadParams {
            w: Tensor::randn(&[hc.outputs, h], INIT_STD, &mut rng),
            b: Tensor::zeros(&[hc.outputs]),
        });
        Ok(Self {
            token_embedding,
            layers,
            final_ln_gain: Tensor::ones(&[h]),
            final_ln_bias: Tensor::zeros(&[h]),
            mlm_bias: Tensor::zeros(&[v]),
            head,
        })
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant (frozen model).
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn num_parameters(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|t| t.data().iter().all(|x| x.is_finite()))
    }

    /// Attaches a freshly initialized head, replacing any existing one.
    pub fn with_head(mut self, config: &mut ModelConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        check_head(head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Some(HeadParams {
            w: Tensor::randn(&[head.outputs, config.hidden], INIT_STD, &mut rng),
            b: Tensor::zeros(&[head.outputs]),
        });
        config.head = Some(head);
        Ok(self)
    }
}

impl ModelParams<Var> {
    /// Gradients for each registered tensor (zeros where none flowed).
    pub fn grads(&self, tape: &Tape) -> ModelParams<Tensor> {
        self.map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
    }
}

fn init_layer<R: Rng>(h: usize, f: usize, rng: &mut R) -> LayerParams<Tensor> {
    LayerParams {
        ln1_gain: Tensor::ones(&[h]),
        ln1_bias: Tensor::zeros(&[h]),
        w_q: Tensor::randn(&[h, h], INIT_STD, rng),
        b_q: Tensor::zeros(&[h]),
        w_k: Tensor::randn(&[h, h], INIT_STD, rng),
        w_v: Tensor::randn(&[h, h], INIT_STD, rng),
        b_v: Tensor::zeros(&[h]),
        w_o: Tensor::randn(&[h, h], INIT_STD, rng),
        b_o: Tensor::zeros(&[h]),
        ln2_gain: Tensor::ones(&[h]),
        ln2_bias: Tensor::zeros(&[h]),
        w_ff1: Tensor::randn(&[h, f], INIT_STD, rng),
        b_ff1: Tensor::zeros(&[f]),
        w_ff2: Tensor::randn(&[f, h], INIT_STD, rng),
        b_ff2: Tensor::zeros(&[h]),
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/H))`, `pe[p, 2i+1] = cos(p / 10000^(2i/H))`.
pub fn sinusoidal_positions(s: usize, h: usize) -> Result<Tensor> {
    if h == 0 || !h.is_multiple_of(2) {
        bail!(Parameter, "positional width {h} must be even and positive");
    }
    if s == 0 {
        bail!(Parameter, "sequence length must be positive");
    }
    let mut data = vec![0.0; s * h];
    for p in 0..s {
        for i in 0..h / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / h as f64);
            data[p * h + 2 * i] = angle.sin();
            data[p * h + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(s, h, data)
}

/// Token ids laid out `batch × seq`, with `true` in `pad` at padding positions.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub pad: &'a [bool],
    pub batch: usize,
    pub seq: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Embedding output followed by each block's output: `L+1` entries of `[B·s, H]`.
    pub hidden_states: Vec<Var>,
    /// Last block output after the final layer norm.
    pub final_hidden: Var,
    /// Final hidden state at the first (CLS) position of every sequence: `[B, H]`.
    pub aggregate: Var,
}

/// Supplies dropout randomness; `None` runs deterministically without dropout.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, *r),
        _ => Ok(x),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Runs the encoder stack.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    input: EncoderInput<'_>,
    mut rng: DropoutRng<'_>,
) -> Result<ForwardOutput> {
    let EncoderInput { ids, pad, batch, seq } = input;
    if seq == 0 || batch == 0 || seq > config.max_seq {
        bail!(Dimension, "sequence length {seq} outside 1..={}", config.max_seq);
    }
    if ids.len() != batch * seq || pad.len() != ids.len() {
        bail!(Dimension, "{} ids and {} pad flags for batch {batch} × seq {seq}", ids.len(), pad.len());
    }
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= config.vocab_size) {
        bail!(Index, "token id {bad} outside vocabulary of {}", config.vocab_size);
    }
    let h = config.hidden;
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let emb = tape.gather_rows(params.token_embedding, &rows)?;
    let emb = tape.scale(emb, (h as f64).sqrt())?;
    let pe = sinusoidal_positions(seq, h)?;
    let mut pos = Vec::with_capacity(batch * seq * h);
    for _ in 0..batch {
        pos.extend_from_slice(pe.data());
    }
    let pos = tape.constant(Tensor::matrix(batch * seq, h, pos)?);
    let x = tape.add(emb, pos)?;
    let mut x = dropout(tape, x, config.dropout, &mut rng)?;
    let valid: Vec<bool> = pad.iter().map(|p| !p).collect();
    let mut hidden_states = vec![x];
    for layer in &params.layers {
        let n = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = linear(tape, n, layer.w_q, layer.b_q)?;
        let k = tape.matmul(n, layer.w_k)?;
        let v = linear(tape, n, layer.w_v, layer.b_v)?;
        let a = tape.multi_head_attention(q, k, v, batch, seq, config.heads, &config.attention, Some(&valid))?;
        let a = linear(tape, a, layer.w_o, layer.b_o)?;
        let a = dropout(tape, a, config.dropout, &mut rng)?;
        let x1 = tape.add(x, a)?;
        let n = tape.layer_norm(x1, layer.ln2_gain, layer.ln2_bias)?;
        let f = linear(tape, n, layer.w_ff1, layer.b_ff1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, layer.w_ff2, layer.b_ff2)?;
        let f = dropout(tape, f, config.dropout, &mut rng)?;
        x = tape.add(x1, f)?;
        hidden_states.push(x);
    }
    let final_hidden = tape.layer_norm(x, params.final_ln_gain, params.final_ln_bias)?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let aggregate = tape.gather_rows(final_hidden, &cls_rows)?;
    Ok(ForwardOutput { hidden_states, final_hidden, aggregate })
}

/// Masked-LM logits `[P, |V|]` at flat positions of `final_hidden` via the tied projection.
pub fn mlm_logits(tape: &mut Tape, params: &ModelParams<Var>, final_hidden: Var, positions: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(final_hidden, positions)?;
    let logits = tape.matmul_t(rows, params.token_embedding)?;
    tape.add_bias(logits, params.mlm_bias)
}

/// Head logits `C·Wᵀ + B`, shape `[B, K]`.
pub fn head_logits(tape: &mut Tape, params: &ModelParams<Var>, aggregate: Var) -> Result<Var> {
    let Some(head) = &params.head else {
        bail!(Config, "model has no task head");
    };
    let y = tape.matmul_t(aggregate, head.w)?;
    tape.add_bias(y, head.b)
}

/// Head output for a single aggregate vector: class probabilities or a raw scalar.
pub fn cls_head_forward(c: &Tensor, w: &Tensor, b: &Tensor, kind: HeadKind) -> Result<Tensor> {
    let (k, h) = w.dims2()?;
    check_head(HeadConfig { kind, outputs: k })?;
    if c.len() != h || b.len() != k {
        bail!(Dimension, "head {:?}/{:?} does not fit aggregate {:?}", w.shape(), b.shape(), c.shape());
    }
    let mut tape = Tape::new();
    let cv = tape.constant(Tensor::matrix(1, h, c.data().to_vec())?);
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.matmul_t(cv, wv)?;
    let y = tape.add_bias(y, bv)?;
    let out = match kind {
        HeadKind::Classify => tape.softmax(y, 1.0)?,
        HeadKind::Regress => y,
    };
    Tensor::vector(tape.value(out).data().to_vec())
}

/// Indices of teacher layers kept for a student: the top layer and every
/// second layer below it.
pub fn kept_layers(teacher_layers: usize) -> Vec<usize> {
    (0..teacher_layers).filter(|i| (teacher_layers - 1 - i).is_multiple_of(2)).collect()
}

/// Student with `⌈L/2⌉` layers copied from the teacher; embeddings, final
/// norm, masked-LM bias and head are copied verbatim.
pub fn init_student_from(
    teacher: &ModelParams<Tensor>,
    config: &ModelConfig,
) -> Result<(ModelParams<Tensor>, ModelConfig)> {
    let l = teacher.layers.len();
    if l < 2 {
        bail!(Parameter, "layer removal needs a teacher with at least 2 layers, got {l}");
    }
    let keep = kept_layers(l);
    let mut student = teacher.clone();
    student.layers = keep.iter().map(|&i| teacher.layers[i].clone()).collect();
    let mut cfg = config.clone();
    cfg.layers = keep.len();
    Ok((student, cfg))
}

/// Convenience forward without dropout returning the value tensors.
pub fn forward_values(
    params: &ModelParams<Tensor>,
    config: &ModelConfig,
    input: EncoderInput<'_>,
) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = params.register_frozen(&mut tape);
    let out = encode(&mut tape, &p, config, input, None)?;
    let hidden = out.hidden_states.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((hidden, tape.value(out.final_hidden).clone(), tape.value(out.aggregate).clone()))
}
