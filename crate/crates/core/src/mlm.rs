//! Masked-LM objective, training loop and held-out evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target, Var};
use crate::data::{derive_seed, BatchStream, MaskedBatch};
use crate::error::{bail, Result};
use crate::optim::{AdamW, AdamWState};
use crate::tensor::Tensor;
use crate::transformer::{encode, mlm_logits, EncoderInput, ForwardOutput, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamW,
    pub max_steps: usize,
    /// Micro-batches averaged per optimizer step.
    pub accumulation: usize,
    /// Validation every this many steps (0 disables).
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: AdamW { lr: 1e-3, ..AdamW::default() }, max_steps: 1000, accumulation: 1, eval_every: 100, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 {
            bail!(Config, "gradient accumulation factor must be at least 1");
        }
        if !(self.optimizer.lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        Ok(())
    }
}

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub branch: String,
    pub val_ce: Option<f64>,
    pub val_ppl: Option<f64>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,train_loss,branch,val_ce,val_ppl\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for p in curve {
        s.push_str(&format!("{},{},{},{},{}\n", p.step, p.train_loss, p.branch, opt(p.val_ce), opt(p.val_ppl)));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub ce: f64,
    pub ppl: f64,
    pub tokens: usize,
}

pub fn encoder_input(batch: &MaskedBatch) -> EncoderInput<'_> {
    EncoderInput { ids: &batch.input_ids, pad: &batch.pad, batch: batch.batch, seq: batch.seq }
}

/// Forward pass plus masked-LM logits at the batch's corrupted positions.
pub fn mlm_forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    batch: &MaskedBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(ForwardOutput, Option<Var>)> {
    let out = encode(tape, params, config, encoder_input(batch), rng)?;
    let positions = batch.masked_positions();
    if positions.is_empty() {
        return Ok((out, None));
    }
    let logits = mlm_logits(tape, params, out.final_hidden, &positions)?;
    Ok((out, Some(logits)))
}

/// Mean cross-entropy over the batch's masked tokens; `None` when nothing is masked.
pub fn mlm_loss(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    batch: &MaskedBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<Var>> {
    let (_, logits) = mlm_forward(tape, params, config, batch, rng)?;
    match logits {
        Some(l) => Ok(Some(tape.cross_entropy_logits(l, Target::Classes(batch.masked_targets()), 1.0)?)),
        None => Ok(None),
    }
}

/// Token-weighted mean CE over every masked position of `batches`, without
/// dropout, and `PPL = exp(CE)`.
pub fn validate_ce(params: &ModelParams<Tensor>, config: &ModelConfig, batches: &[MaskedBatch]) -> Result<Validation> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let p = params.register_frozen(&mut tape);
        if let Some(l) = mlm_loss(&mut tape, &p, config, b, None)? {
            let n = b.masked_positions().len();
            total += tape.value(l).item() * n as f64;
            tokens += n;
        }
    }
    if tokens == 0 {
        bail!(Validation, "validation set has no masked tokens");
    }
    let ce = total / tokens as f64;
    Ok(Validation { ce, ppl: ce.exp(), tokens })
}

/// Fixed validation batches: epoch 0 of a stream seeded with `mask_seed`.
pub fn validation_batches(
    sequences: Vec<Vec<u32>>,
    batch_size: usize,
    seq_len: usize,
    vocab_size: usize,
    p_mask: f64,
    mask_seed: u64,
) -> Result<Vec<MaskedBatch>> {
    BatchStream::new(sequences, batch_size, seq_len, vocab_size, p_mask, mask_seed)?.epoch(0)
}

/// Sums `grads` into `acc` scaled by `factor`.
pub fn accumulate(acc: &mut ModelParams<Tensor>, grads: &ModelParams<Tensor>, factor: f64) {
    for (a, g) in acc.iter_mut().into_iter().zip(grads.iter()) {
        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += factor * y);
    }
}

/// Applies one AdamW update to every tensor of `params`.
pub fn apply_update(
    optimizer: &AdamW,
    params: &mut ModelParams<Tensor>,
    grads: &ModelParams<Tensor>,
    state: &mut AdamWState,
) -> Result<()> {
    let g: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
    let mut p = params.iter_mut();
    optimizer.step(&mut p, &g, state)
}

/// Plain masked-LM training (teachers and from-scratch students).
pub fn train_mlm(
    mut params: ModelParams<Tensor>,
    config: &ModelConfig,
    stream: &BatchStream,
    val: &[MaskedBatch],
    tc: &TrainConfig,
) -> Result<(ModelParams<Tensor>, Vec<CurvePoint>)> {
    tc.validate()?;
    let mut state = AdamWState::new(params.iter());
    let mut curve = Vec::new();
    let mut batches = stream.iter();
    for step in 1..=tc.max_steps {
        let mut acc = params.map(|t| Tensor::zeros(t.shape()));
        let mut loss_sum = 0.0;
        for micro in 0..tc.accumulation {
            let batch = batches.next().expect("endless stream")?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[3, step as u64, micro as u64]));
            let mut tape = Tape::new();
            let p = params.register(&mut tape);
            let Some(loss) = mlm_loss(&mut tape, &p, config, &batch, Some(&mut rng))? else { continue };
            loss_sum += tape.value(loss).item();
            tape.backward(loss)?;
            accumulate(&mut acc, &p.grads(&tape), 1.0 / tc.accumulation as f64);
        }
        apply_update(&tc.optimizer, &mut params, &acc, &mut state)?;
        let (val_ce, val_ppl) = if tc.eval_every > 0 && step % tc.eval_every == 0 && !val.is_empty() {
            let v = validate_ce(&params, config, val)?;
            (Some(v.ce), Some(v.ppl))
        } else {
            (None, None)
        };
        curve.push(CurvePoint {
            step,
            train_loss: loss_sum / tc.accumulation as f64,
            branch: "gt".into(),
            val_ce,
            val_ppl,
        });
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pad_sequences;
    use crate::tokenizer::{CLS, SEP};

    fn cfg() -> ModelConfig {
        ModelConfig { layers: 1, hidden: 16, heads: 2, ffn: 32, vocab_size: 24, max_seq: 10, dropout: 0.0, ..Default::default() }
    }

    /// Deterministic successor structure: token t is followed by t+1.
    fn sequences() -> Vec<Vec<u32>> {
        (0..40).map(|i| {
            let start = 7 + (i % 10) as u32;
            let mut s = vec![CLS];
            s.extend((0..6).map(|k| start + k));
            s.push(SEP);
            s
        }).collect()
    }

    #[test]
    fn zero_head_gives_uniform_ce() {
        let c = cfg();
        let mut p = ModelParams::init(&c, 1).unwrap();
        p.final_ln_gain = Tensor::zeros(&[16]);
        let val = validation_batches(sequences(), 8, 10, 24, 0.3, 5).unwrap();
        let v = validate_ce(&p, &c, &val).unwrap();
        assert!((v.ce - 24f64.ln()).abs() < 1e-12);
        assert!((v.ppl - 24.0).abs() < 1e-9);
        assert_eq!(v.ppl, v.ce.exp());
    }

    #[test]
    fn training_reduces_validation_ce() {
        let c = cfg();
        let p = ModelParams::init(&c, 1).unwrap();
        let stream = BatchStream::new(sequences(), 8, 10, 24, 0.3, 2).unwrap();
        let val = validation_batches(sequences(), 8, 10, 24, 0.3, 99).unwrap();
        let before = validate_ce(&p, &c, &val).unwrap().ce;
        let tc = TrainConfig { max_steps: 150, eval_every: 50, seed: 3, ..Default::default() };
        let (trained, curve) = train_mlm(p, &c, &stream, &val, &tc).unwrap();
        let after = validate_ce(&trained, &c, &val).unwrap().ce;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(curve.len(), 150);
        assert!(curve[49].val_ce.is_some() && curve[48].val_ce.is_none());
        let (again, _) = train_mlm(ModelParams::init(&c, 1).unwrap(), &c, &stream, &val, &tc).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn accumulation_averages_micro_batches() {
        let c = cfg();
        let p = ModelParams::init(&c, 4).unwrap();
        let seqs = sequences();
        let (ids, pad) = pad_sequences(&seqs[..4], 10).unwrap();
        let b = crate::data::dynamic_mask(&ids, &pad, 4, 24, 0.3, 1).unwrap();
        let grad_of = |batch: &MaskedBatch| {
            let mut tape = Tape::new();
            let v = p.register(&mut tape);
            let l = mlm_loss(&mut tape, &v, &c, batch, None).unwrap().unwrap();
            tape.backward(l).unwrap();
            v.grads(&tape)
        };
        let g = grad_of(&b);
        let mut acc = p.map(|t| Tensor::zeros(t.shape()));
        accumulate(&mut acc, &g, 0.5);
        accumulate(&mut acc, &g, 0.5);
        for (a, b) in acc.iter().zip(g.iter()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }
}
