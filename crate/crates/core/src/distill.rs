//! Multi-teacher distillation of masked language models.
//!
//! Each step either trains on the gold tokens (every `ground_truth_step`-th
//! step) or on a confidence-weighted mixture of the teachers' softened
//! distributions plus a hidden-feature regression term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target, Var};
use crate::data::{derive_seed, BatchStream, MaskedBatch};
use crate::error::{bail, Result};
use crate::loss::{clamp_prob, kl_terms};
use crate::mlm::{accumulate, apply_update, mlm_forward, validate_ce, CurvePoint, TrainConfig};
use crate::optim::AdamWState;
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_i ∝ exp(-KL(onehot(gold) ‖ ŷ_i)) = ŷ_i[gold]`.
    #[default]
    Confidence,
    /// `w_i ∝ KL(ŷ_i ‖ onehot(gold))` with clamping, renormalized to sum to 1.
    KlDivergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub ground_truth_step: usize,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    pub feature_weight: f64,
    #[serde(default)]
    pub weighting: Weighting,
    pub train: TrainConfig,
}

fn default_mask_prob() -> f64 {
    crate::data::MASK_PROB
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.5,
            ground_truth_step: 100,
            mask_prob: crate::data::MASK_PROB,
            feature_weight: 1.0,
            weighting: Weighting::Confidence,
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            bail!(Config, "temperature must be positive");
        }
        if self.ground_truth_step == 0 {
            bail!(Config, "ground-truth step must be at least 1");
        }
        if !(self.feature_weight >= 0.0) {
            bail!(Config, "feature weight must be non-negative");
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub params: ModelParams<Tensor>,
    pub config: ModelConfig,
    /// Fingerprint of the tokenizer the teacher was trained with.
    pub vocab_hash: String,
}

#[derive(Clone, Debug)]
pub struct TeacherSet {
    teachers: Vec<Teacher>,
}

impl TeacherSet {
    pub fn new(teachers: Vec<Teacher>) -> Result<Self> {
        let Some(first) = teachers.first() else {
            bail!(Config, "at least one teacher is required");
        };
        for t in &teachers {
            if t.vocab_hash != first.vocab_hash || t.config.vocab_size != first.config.vocab_size {
                bail!(Config, "teachers disagree on the vocabulary");
            }
            if t.config.hidden != first.config.hidden {
                bail!(Config, "teachers disagree on hidden size ({} vs {})", t.config.hidden, first.config.hidden);
            }
        }
        Ok(Self { teachers })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn teachers(&self) -> &[Teacher] {
        &self.teachers
    }

    pub fn hidden(&self) -> usize {
        self.teachers[0].config.hidden
    }

    pub fn vocab_hash(&self) -> &str {
        &self.teachers[0].vocab_hash
    }

    pub fn check_student(&self, config: &ModelConfig, vocab_hash: &str) -> Result<()> {
        if vocab_hash != self.vocab_hash() || config.vocab_size != self.teachers[0].config.vocab_size {
            bail!(Config, "student and teachers use different vocabularies");
        }
        Ok(())
    }
}

/// One teacher's view of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// Softened distributions at the masked positions, `[P, |V|]`.
    pub probs: Tensor,
    /// Final hidden states, `[B·s, H_t]`.
    pub hidden: Tensor,
}

/// Runs every teacher on `batch` (concurrently) and returns outputs in teacher order.
pub fn teacher_forward_all(teachers: &TeacherSet, batch: &MaskedBatch, temperature: f64) -> Result<Vec<TeacherOutput>> {
    teachers
        .teachers
        .par_iter()
        .map(|t| {
            let mut tape = Tape::new();
            let p = t.params.register_frozen(&mut tape);
            let (out, logits) = mlm_forward(&mut tape, &p, &t.config, batch, None)?;
            let Some(logits) = logits else {
                bail!(Validation, "batch has no masked positions");
            };
            let probs = tape.softmax(logits, temperature)?;
            Ok(TeacherOutput { probs: tape.value(probs).clone(), hidden: tape.value(out.final_hidden).clone() })
        })
        .collect()
}

/// Per-teacher weights at one masked position; they sum to 1.
pub fn confidence_weights(dists: &[&[f64]], gold: usize, weighting: Weighting) -> Result<Vec<f64>> {
    if dists.is_empty() {
        bail!(Dimension, "no teacher distributions");
    }
    let v = dists[0].len();
    if gold >= v || dists.iter().any(|d| d.len() != v) {
        bail!(Dimension, "gold {gold} or ragged distributions over {v} classes");
    }
    let raw: Vec<f64> = match weighting {
        Weighting::Confidence => dists.iter().map(|d| clamp_prob(d[gold])).collect(),
        Weighting::KlDivergence => {
            let mut onehot = vec![0.0; v];
            onehot[gold] = 1.0;
            dists.iter().map(|d| kl_terms(d, &onehot).max(0.0)).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Ok(vec![1.0 / dists.len() as f64; dists.len()]);
    }
    Ok(raw.iter().map(|r| r / total).collect())
}

/// `Σ_i w_i ŷ_i`.
pub fn weighted_target(dists: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if dists.len() != weights.len() || dists.is_empty() {
        bail!(Dimension, "{} distributions for {} weights", dists.len(), weights.len());
    }
    let v = dists[0].len();
    if dists.iter().any(|d| d.len() != v) {
        bail!(Dimension, "ragged teacher distributions");
    }
    let mut out = vec![0.0; v];
    for (d, &w) in dists.iter().zip(weights) {
        out.iter_mut().zip(d.iter()).for_each(|(o, p)| *o += w * p);
    }
    Ok(out)
}

/// Per-position convex combination of teacher hidden states. `weights[r]`
/// holds the teacher weights for row `r`; `None` means uniform.
pub fn feature_target(hiddens: &[&Tensor], weights: &[Option<Vec<f64>>]) -> Result<Tensor> {
    let Some(first) = hiddens.first() else {
        bail!(Dimension, "no teacher hidden states");
    };
    if hiddens.iter().any(|h| h.shape() != first.shape()) {
        bail!(Config, "teacher hidden states differ in shape");
    }
    let (rows, width) = first.dims2()?;
    if weights.len() != rows {
        bail!(Dimension, "{} weight rows for {rows} positions", weights.len());
    }
    let n = hiddens.len();
    let uniform = vec![1.0 / n as f64; n];
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let w = weights[r].as_deref().unwrap_or(&uniform);
        if w.len() != n {
            bail!(Dimension, "row {r} has {} weights for {n} teachers", w.len());
        }
        let o = &mut out[r * width..(r + 1) * width];
        for (h, &wi) in hiddens.iter().zip(w) {
            o.iter_mut().zip(h.row(r)).for_each(|(a, b)| *a += wi * b);
        }
    }
    Tensor::matrix(rows, width, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    GroundTruth,
    Distill,
}

impl Branch {
    /// Step `k` (1-based) uses the gold tokens when `k mod l == 0`.
    pub fn for_step(k: usize, ground_truth_step: usize) -> Self {
        if k.is_multiple_of(ground_truth_step) {
            Branch::GroundTruth
        } else {
            Branch::Distill
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Branch::GroundTruth => "gt",
            Branch::Distill => "distill",
        }
    }
}

/// Soft targets and feature targets derived from the teachers for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    pub soft: Tensor,
    pub hidden: Tensor,
}

pub fn distill_targets(outputs: &[TeacherOutput], batch: &MaskedBatch, weighting: Weighting) -> Result<DistillTargets> {
    let golds = batch.masked_targets();
    let positions = batch.masked_positions();
    let v = outputs[0].probs.last_dim();
    let mut soft = Vec::with_capacity(golds.len() * v);
    let mut row_weights: Vec<Option<Vec<f64>>> = vec![None; batch.input_ids.len()];
    for (r, (&gold, &pos)) in golds.iter().zip(&positions).enumerate() {
        let dists: Vec<&[f64]> = outputs.iter().map(|o| o.probs.row(r)).collect();
        let w = confidence_weights(&dists, gold, weighting)?;
        soft.extend(weighted_target(&dists, &w)?);
        row_weights[pos] = Some(w);
    }
    let hiddens: Vec<&Tensor> = outputs.iter().map(|o| &o.hidden).collect();
    Ok(DistillTargets { soft: Tensor::matrix(golds.len(), v, soft)?, hidden: feature_target(&hiddens, &row_weights)? })
}

/// Loss of one step. `projection` maps student features to teacher width;
/// `None` means identity (equal widths).
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    tape: &mut Tape,
    student: &ModelParams<Var>,
    config: &ModelConfig,
    projection: Option<Var>,
    batch: &MaskedBatch,
    targets: Option<&DistillTargets>,
    dc: &DistillConfig,
    branch: Branch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<Var>> {
    let (out, logits) = mlm_forward(tape, student, config, batch, rng)?;
    let Some(logits) = logits else { return Ok(None) };
    match branch {
        Branch::GroundTruth => Ok(Some(tape.cross_entropy_logits(logits, Target::Classes(batch.masked_targets()), 1.0)?)),
        Branch::Distill => {
            let Some(targets) = targets else {
                bail!(State, "distillation branch needs teacher targets");
            };
            let t = dc.temperature;
            let soft = tape.cross_entropy_logits(logits, Target::Distribution(targets.soft.clone()), t)?;
            let mut loss = tape.scale(soft, t * t)?;
            if dc.feature_weight > 0.0 {
                let rows: Vec<usize> = (0..batch.pad.len()).filter(|&i| !batch.pad[i]).collect();
                let hs = tape.gather_rows(out.final_hidden, &rows)?;
                let hs = match projection {
                    Some(p) => tape.matmul(hs, p)?,
                    None => hs,
                };
                let ht = tape.constant(targets.hidden.clone());
                let ht = tape.gather_rows(ht, &rows)?;
                let mse = tape.mse(hs, ht)?;
                let mse = tape.scale(mse, dc.feature_weight)?;
                loss = tape.add(loss, mse)?;
            }
            Ok(Some(loss))
        }
    }
}

/// Student state carried through distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub params: ModelParams<Tensor>,
    /// `H_s × H_t`, present only when the widths differ.
    pub projection: Option<Tensor>,
}

impl Student {
    pub fn new(params: ModelParams<Tensor>, config: &ModelConfig, teacher_hidden: usize, seed: u64) -> Self {
        let projection = (config.hidden != teacher_hidden).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::randn(&[config.hidden, teacher_hidden], crate::transformer::INIT_STD, &mut rng)
        });
        Self { params, projection }
    }
}

/// Distills for `dc.train.max_steps` optimizer steps, taking a ground-truth
/// step every `dc.ground_truth_step` steps and a teacher step otherwise.
pub fn train_distill(
    mut student: Student,
    config: &ModelConfig,
    student_vocab_hash: &str,
    teachers: &TeacherSet,
    stream: &BatchStream,
    val: &[MaskedBatch],
    dc: &DistillConfig,
) -> Result<(Student, Vec<CurvePoint>)> {
    dc.validate()?;
    teachers.check_student(config, student_vocab_hash)?;
    if student.projection.is_none() && config.hidden != teachers.hidden() {
        bail!(Config, "student width {} differs from teachers' {} without a projection", config.hidden, teachers.hidden());
    }
    let tc = &dc.train;
    let mut state = AdamWState::new(student.params.iter());
    let mut proj_state = student.projection.as_ref().map(|p| AdamWState::new([p]));
    let mut curve = Vec::new();
    let mut batches = stream.iter();
    for k in 1..=tc.max_steps {
        let branch = Branch::for_step(k, dc.ground_truth_step);
        let mut acc = student.params.map(|t| Tensor::zeros(t.shape()));
        let mut proj_acc = student.projection.as_ref().map(|p| Tensor::zeros(p.shape()));
        let mut loss_sum = 0.0;
        for micro in 0..tc.accumulation {
            let batch = batches.next().expect("endless stream")?;
            if batch.masked_positions().is_empty() {
                continue;
            }
            let targets = match branch {
                Branch::Distill => {
                    Some(distill_targets(&teacher_forward_all(teachers, &batch, dc.temperature)?, &batch, dc.weighting)?)
                }
                Branch::GroundTruth => None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[4, k as u64, micro as u64]));
            let mut tape = Tape::new();
            let p = student.params.register(&mut tape);
            let proj = student.projection.as_ref().map(|t| tape.param(t.clone()));
            let Some(loss) =
                distill_loss(&mut tape, &p, config, proj, &batch, targets.as_ref(), dc, branch, Some(&mut rng))?
            else {
                continue;
            };
            loss_sum += tape.value(loss).item();
            tape.backward(loss)?;
            let scale = 1.0 / tc.accumulation as f64;
            accumulate(&mut acc, &p.grads(&tape), scale);
            if let (Some(pa), Some(pv)) = (proj_acc.as_mut(), proj) {
                if let Some(g) = tape.grad(pv) {
                    pa.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
                }
            }
        }
        apply_update(&tc.optimizer, &mut student.params, &acc, &mut state)?;
        if let (Some(p), Some(g), Some(st)) = (student.projection.as_mut(), proj_acc.as_ref(), proj_state.as_mut()) {
            tc.optimizer.step(&mut [p], &[Some(g)], st)?;
        }
        let (val_ce, val_ppl) = if tc.eval_every > 0 && k % tc.eval_every == 0 && !val.is_empty() {
            let v = validate_ce(&student.params, config, val)?;
            (Some(v.ce), Some(v.ppl))
        } else {
            (None, None)
        };
        curve.push(CurvePoint {
            step: k,
            train_loss: loss_sum / tc.accumulation as f64,
            branch: branch.label().into(),
            val_ce,
            val_ppl,
        });
    }
    Ok((student, curve))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{dynamic_mask, pad_sequences};
    use crate::tokenizer::{CLS, SEP};

    #[test]
    fn confidence_examples() {
        let a = [0.05, 0.9, 0.05];
        let b = [0.4, 0.3, 0.3];
        let w = confidence_weights(&[&a, &b], 1, Weighting::Confidence).unwrap();
        assert_eq!(w, vec![0.9 / 1.2, 0.3 / 1.2]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let w = confidence_weights(&[&a, &a, &a], 0, Weighting::Confidence).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let eps = 1e-9;
        let sure = [1.0 - eps, eps];
        let unsure = [eps, 1.0 - eps];
        let w = confidence_weights(&[&sure, &unsure], 0, Weighting::Confidence).unwrap();
        assert!(w[0] > 1.0 - 1e-8);
        let lit = confidence_weights(&[&a, &b], 1, Weighting::KlDivergence).unwrap();
        assert!((lit.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_examples() {
        let a = [0.2, 0.8];
        let b = [0.6, 0.4];
        assert_eq!(weighted_target(&[&a, &b], &[1.0, 0.0]).unwrap(), a.to_vec());
        let same = weighted_target(&[&a, &a], &[0.3, 0.7]).unwrap();
        assert!(same.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(weighted_target(&[&a], &[0.5, 0.5]).is_err());

        let h1 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let h2 = Tensor::from_rows(&[vec![-1.0, 0.0], vec![5.0, 4.0]]).unwrap();
        assert_eq!(feature_target(&[&h1], &[None, Some(vec![1.0])]).unwrap(), h1);
        let f = feature_target(&[&h1, &h2], &[Some(vec![0.75, 0.25]), None]).unwrap();
        assert_eq!(f.data(), &[0.5, 1.5, 4.0, 4.0]);
        let bad = Tensor::zeros(&[2, 3]);
        assert!(feature_target(&[&h1, &bad], &[None, None]).is_err());
    }

    #[test]
    fn branch_schedule() {
        assert_eq!(Branch::for_step(200, 100), Branch::GroundTruth);
        assert_eq!(Branch::for_step(201, 100), Branch::Distill);
    }

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 2, hidden: 16, heads: 2, ffn: 32, vocab_size: 24, max_seq: 8, dropout: 0.0, ..Default::default() }
    }

    fn batch() -> MaskedBatch {
        let seqs = vec![vec![CLS, 7, 8, 9, 10, 11, SEP], vec![CLS, 12, 13, 14, SEP]];
        let (ids, pad) = pad_sequences(&seqs, 8).unwrap();
        dynamic_mask(&ids, &pad, 2, 24, 0.5, 6).unwrap()
    }

    #[test]
    fn one_hot_teacher_collapses_to_ground_truth() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 2).unwrap();
        let b = batch();
        let golds = b.masked_targets();
        assert!(!golds.is_empty());
        let mut soft = vec![0.0; golds.len() * 24];
        for (r, &g) in golds.iter().enumerate() {
            soft[r * 24 + g] = 1.0;
        }
        let out = TeacherOutput {
            probs: Tensor::matrix(golds.len(), 24, soft).unwrap(),
            hidden: Tensor::zeros(&[16, 16]),
        };
        let targets = distill_targets(&[out], &b, Weighting::Confidence).unwrap();
        let dc = DistillConfig { temperature: 1.0, feature_weight: 0.0, ..Default::default() };
        let eval = |branch| {
            let mut tape = Tape::new();
            let p = params.register(&mut tape);
            let l = distill_loss(&mut tape, &p, &cfg, None, &b, Some(&targets), &dc, branch, None).unwrap().unwrap();
            tape.value(l).item()
        };
        assert!((eval(Branch::Distill) - eval(Branch::GroundTruth)).abs() < 1e-9);
    }

    #[test]
    fn teacher_outputs_and_freezing() {
        let cfg = tiny();
        let t1 = Teacher { params: ModelParams::init(&cfg, 1).unwrap(), config: cfg.clone(), vocab_hash: "v".into() };
        let t2 = Teacher { params: ModelParams::init(&cfg, 2).unwrap(), config: cfg.clone(), vocab_hash: "v".into() };
        let set = TeacherSet::new(vec![t1.clone(), t2]).unwrap();
        let b = batch();
        let outs = teacher_forward_all(&set, &b, 2.5).unwrap();
        assert_eq!(outs.len(), 2);
        let single = teacher_forward_all(&TeacherSet::new(vec![t1.clone()]).unwrap(), &b, 2.5).unwrap();
        assert_eq!(single[0], outs[0]);
        let hot = teacher_forward_all(&set, &b, 1e6).unwrap();
        for r in 0..hot[0].probs.rows() {
            let row = hot[0].probs.row(r);
            let (mx, mn) = row.iter().fold((f64::MIN, f64::MAX), |(a, b), &x| (a.max(x), b.min(x)));
            assert!(mx - mn < 1e-3);
        }
        let mut other = t1.clone();
        other.vocab_hash = "w".into();
        assert!(TeacherSet::new(vec![t1.clone(), other]).is_err());
        let mut wide = t1.clone();
        wide.config.hidden = 32;
        assert!(TeacherSet::new(vec![t1.clone(), wide]).is_err());

        let before = set.teachers()[0].params.clone();
        let seqs: Vec<Vec<u32>> = (0..8).map(|i| vec![CLS, 7 + i, 8 + i, 9 + i, SEP]).collect();
        let stream = BatchStream::new(seqs, 4, 8, 24, 0.3, 1).unwrap();
        let dc = DistillConfig { ground_truth_step: 3, train: TrainConfig { max_steps: 6, eval_every: 0, ..Default::default() }, ..Default::default() };
        let student = Student::new(ModelParams::init(&cfg, 9).unwrap(), &cfg, 16, 0);
        let (s1, curve) = train_distill(student.clone(), &cfg, "v", &set, &stream, &[], &dc).unwrap();
        assert!(before.iter().zip(set.teachers()[0].params.iter()).all(|(a, b)| a.bit_eq(b)));
        assert_eq!(curve.iter().filter(|c| c.branch == "gt").count(), 2);
        let (s2, _) = train_distill(student.clone(), &cfg, "v", &set, &stream, &[], &dc).unwrap();
        assert_eq!(s1, s2);
        assert!(train_distill(student.clone(), &cfg, "x", &set, &stream, &[], &dc).is_err());
        let zero = DistillConfig { train: TrainConfig { max_steps: 0, ..dc.train.clone() }, ..dc.clone() };
        assert_eq!(train_distill(student.clone(), &cfg, "v", &set, &stream, &[], &zero).unwrap().0, student);
    }

    fn dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn weight_laws(raws in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..5), gold in 0usize..6, perm_seed in any::<u64>()) {
            let ds: Vec<Vec<f64>> = raws.iter().map(|r| dist(r)).collect();
            let refs: Vec<&[f64]> = ds.iter().map(Vec::as_slice).collect();
            let w = confidence_weights(&refs, gold, Weighting::Confidence).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let y = weighted_target(&refs, &w).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|&v| v >= 0.0));

            let mut order: Vec<usize> = (0..ds.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted: Vec<&[f64]> = order.iter().map(|&i| refs[i]).collect();
            let wp = confidence_weights(&permuted, gold, Weighting::Confidence).unwrap();
            for (k, &i) in order.iter().enumerate() {
                prop_assert!((wp[k] - w[i]).abs() < 1e-15);
            }
        }

        #[test]
        fn monotone_confidence(raws in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 2..5), gold in 0usize..5, boost in 0.0f64..1.0) {
            let ds: Vec<Vec<f64>> = raws.iter().map(|r| dist(r)).collect();
            let refs: Vec<&[f64]> = ds.iter().map(Vec::as_slice).collect();
            let w = confidence_weights(&refs, gold, Weighting::Confidence).unwrap();
            let mut up = ds[0].clone();
            let new_gold = up[gold] + boost * (1.0 - up[gold]);
            let rest = 1.0 - up[gold];
            for (j, v) in up.iter_mut().enumerate() {
                *v = if j == gold { new_gold } else { *v * (1.0 - new_gold) / rest };
            }
            let mut refs2 = refs.clone();
            refs2[0] = &up;
            let w2 = confidence_weights(&refs2, gold, Weighting::Confidence).unwrap();
            prop_assert!(w2[0] >= w[0] - 1e-15);
        }

        #[test]
        fn feature_target_is_convex(vals in prop::collection::vec(-5.0f64..5.0, 12), wraw in prop::collection::vec(0.01f64..1.0, 3)) {
            let hs: Vec<Tensor> = vals.chunks(4).map(|c| Tensor::matrix(2, 2, c.to_vec()).unwrap()).collect();
            let refs: Vec<&Tensor> = hs.iter().collect();
            let w = dist(&wraw);
            let f = feature_target(&refs, &[Some(w), None]).unwrap();
            for i in 0..4 {
                let lo = hs.iter().map(|h| h.data()[i]).fold(f64::MAX, f64::min);
                let hi = hs.iter().map(|h| h.data()[i]).fold(f64::MIN, f64::max);
                prop_assert!(f.data()[i] >= lo - 1e-12 && f.data()[i] <= hi + 1e-12);
            }
        }
    }
}
