//! Finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMode;
use crate::autodiff::{Tape, Target, Var};
use crate::error::{bail, Result};
use crate::loss::FocalVariant;
use crate::tensor::Tensor;
use crate::transformer::{encode, head_logits, mlm_logits, EncoderInput, HeadConfig, HeadKind, ModelConfig, ModelParams};

/// Finite-difference step used by the catalog.
pub const CATALOG_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat element where the maximum occurred.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients of a scalar function against central differences.
///
/// The error per element is `|a - n| / max(|a|, |n|, 1e-8)`; the report holds
/// the maximum over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        bail!(Parameter, "finite-difference step {h} outside [1e-7, 1e-4]");
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            bail!(Dimension, "grad_check needs a scalar function");
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = work[which].data()[idx];
            // Divide by the step actually representable around `orig`.
            let (hi, lo) = (orig + h, orig - h);
            work[which].data_mut()[idx] = hi;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = lo;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (hi - lo);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > report.max_rel_error {
                report = GradCheckReport { max_rel_error: err, worst_input: which, worst_index: idx, analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued output to a scalar with fixed random weights, so
/// that no output coordinate is privileged and shift-invariant outputs such
/// as softmax still carry a nonzero gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.value(y).shape(), 1.0, &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn case(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> CaseFn {
    Box::new(f)
}

/// One named gradient check per differentiable tape operation.
pub fn op_catalog(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let cases: Vec<(&str, Vec<Tensor>, CaseFn)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 5])], case(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        })),
        ("matmul_t", vec![r(&[3, 4]), r(&[5, 4])], case(|t, v| {
            let y = t.matmul_t(v[0], v[1])?;
            project(t, y, 2)
        })),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], case(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 3)
        })),
        ("sub", vec![r(&[2, 3]), r(&[2, 3])], case(|t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 4)
        })),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], case(|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 5)
        })),
        ("add_bias", vec![r(&[3, 4]), r(&[4])], case(|t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 6)
        })),
        ("scale", vec![r(&[2, 3])], case(|t, v| {
            let y = t.scale(v[0], -1.7)?;
            project(t, y, 7)
        })),
        ("reshape", vec![r(&[2, 6])], case(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y, 8)
        })),
        ("gelu", vec![r(&[3, 4])], case(|t, v| {
            let y = t.gelu(v[0])?;
            project(t, y, 9)
        })),
        ("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], case(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, 10)
        })),
        ("gather_rows", vec![r(&[4, 3])], case(|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(t, y, 11)
        })),
        ("select_cols", vec![r(&[3, 5])], case(|t, v| {
            let y = t.select_cols(v[0], &[4, 1, 1])?;
            project(t, y, 12)
        })),
        ("softmax", vec![r(&[3, 6])], case(|t, v| {
            let y = t.softmax(v[0], 2.5)?;
            project(t, y, 13)
        })),
        ("cross_entropy_logits_classes", vec![r(&[3, 6])], case(|t, v| {
            t.cross_entropy_logits(v[0], Target::Classes(vec![0, 5, 2]), 2.5)
        })),
        ("cross_entropy_logits_soft", vec![r(&[2, 5])], case(|t, v| {
            let y = Tensor::matrix(2, 5, vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.5, 0.25, 0.0, 0.125, 0.125])?;
            t.cross_entropy_logits(v[0], Target::Distribution(y), 2.5)
        })),
        ("cross_entropy_probs", vec![r(&[3, 4])], case(|t, v| {
            let p = t.softmax(v[0], 1.0)?;
            t.cross_entropy_probs(p, Target::Classes(vec![1, 3, 0]))
        })),
        ("kl_div", vec![r(&[2, 5]), r(&[2, 5])], case(|t, v| {
            let p = t.softmax(v[0], 1.0)?;
            let q = t.softmax(v[1], 1.0)?;
            t.kl_div(p, q)
        })),
        ("mse", vec![r(&[3, 3]), r(&[3, 3])], case(|t, v| t.mse(v[0], v[1]))),
        ("sum", vec![r(&[2, 4])], case(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })),
        ("mean", vec![r(&[2, 4])], case(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        })),
        ("dropout", vec![r(&[4, 4])], case(|t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let y = t.dropout(v[0], 0.3, &mut rng)?;
            project(t, y, 15)
        })),
        ("attention_full", vec![r(&[8, 4]), r(&[8, 4]), r(&[8, 4])], case(|t, v| {
            let valid = [true, true, true, false, true, true, true, true];
            let y = t.multi_head_attention(v[0], v[1], v[2], 2, 4, 2, &AttentionMode::Full, Some(&valid))?;
            project(t, y, 16)
        })),
        ("attention_windowed", vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])], case(|t, v| {
            let mode = AttentionMode::Windowed { window: 1, global: vec![0] };
            let y = t.multi_head_attention(v[0], v[1], v[2], 1, 6, 2, &mode, None)?;
            project(t, y, 17)
        })),
        ("focal_standard", vec![r(&[6, 2])], case(|t, v| {
            let p = t.softmax(v[0], 1.0)?;
            let p = t.select_cols(p, &[1])?;
            t.focal_loss(p, &[true, false, true, false, false, true], 2.0, 0.25, FocalVariant::Standard)
        })),
        ("focal_one_plus_p", vec![r(&[6, 2])], case(|t, v| {
            let p = t.softmax(v[0], 1.0)?;
            let p = t.select_cols(p, &[1])?;
            t.focal_loss(p, &[true, false, true, false, false, true], 2.0, 0.25, FocalVariant::OnePlusP)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name.to_string(), grad_check(f, &inputs, CATALOG_STEP)?)))
        .collect()
}

/// Configuration of the end-to-end check: 2 layers, `H = 16`, `A = 2`, `s = 8`.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: 20,
        max_seq: 8,
        dropout: 0.0,
        attention: AttentionMode::Full,
        head: Some(HeadConfig { kind: HeadKind::Classify, outputs: 2 }),
    }
}

/// Parameters for the end-to-end check: the standard initialization plus
/// N(0, 0.3) noise so that activations leave the near-linear regime.
pub fn check_model_params(seed: u64) -> Result<ModelParams<Tensor>> {
    let base = ModelParams::init(&check_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    base.try_map(|t| {
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
    })
}

/// Masked-LM cross-entropy at every non-pad position plus head cross-entropy
/// on a batch of two sequences.
fn model_loss(tape: &mut Tape, params: &ModelParams<Var>) -> Result<Var> {
    const IDS: [u32; 16] = [2, 7, 8, 4, 10, 11, 3, 0, 2, 13, 5, 16, 17, 9, 12, 3];
    let mut pad = [false; 16];
    pad[7] = true;
    let cfg = check_model_config();
    let out = encode(tape, params, &cfg, EncoderInput { ids: &IDS, pad: &pad, batch: 2, seq: 8 }, None)?;
    let positions = [1, 2, 3, 4, 5, 9, 10, 11, 12, 13, 14];
    let logits = mlm_logits(tape, params, out.final_hidden, &positions)?;
    let mlm = tape.cross_entropy_logits(logits, Target::Classes(vec![7, 9, 11, 8, 6, 14, 15, 7, 10, 18, 19]), 1.0)?;
    let cls = head_logits(tape, params, out.aggregate)?;
    let cls = tape.cross_entropy_logits(cls, Target::Classes(vec![1, 0]), 1.0)?;
    tape.add(mlm, cls)
}

/// End-to-end check with every parameter element as a separate input.
pub fn transformer_elementwise(seed: u64) -> Result<GradCheckReport> {
    let params = check_model_params(seed)?;
    let flat: Vec<Tensor> = params.iter().cloned().collect();
    grad_check(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let mp = params.map(|_| it.next().expect("one var per tensor"));
            model_loss(tape, &mp)
        },
        &flat,
        CATALOG_STEP,
    )
}

/// End-to-end check along `directions` random directions in parameter space:
/// the inputs are coefficients `c` and every tensor is `P0 + Σ_j c_j D_j`, so
/// each derivative is an inner product of the full parameter gradient.
pub fn transformer_directional(seed: u64, directions: usize) -> Result<GradCheckReport> {
    let params = check_model_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let dirs: Vec<Tensor> = params.iter().map(|t| Tensor::randn(&[t.len(), directions], 1.0, &mut rng)).collect();
    let coeffs = Tensor::zeros(&[directions, 1]);
    grad_check(
        |tape, vars| {
            let c = vars[0];
            let mut i = 0;
            let mp = params.try_map(|p| {
                let base = tape.constant(p.clone());
                let d = tape.constant(dirs[i].clone());
                i += 1;
                let delta = tape.matmul(d, c)?;
                let delta = tape.reshape(delta, p.shape())?;
                tape.add(base, delta)
            })?;
            model_loss(tape, &mp)
        },
        &[coeffs],
        CATALOG_STEP,
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Target;

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.sum(y)
            },
            &[w, x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy_on_eight_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let p = t.softmax(v[0], 1.0)?;
                t.cross_entropy_probs(p, Target::Classes(vec![3]))
            },
            &[z],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn every_op_passes() {
        for (name, r) in op_catalog(7).unwrap() {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn transformer_directions_pass() {
        let r = transformer_directional(11, 32).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn transformer_elements_are_roundoff_limited() {
        // Per-element checks hit the ulp floor of an O(1) loss on the few
        // components whose gradient happens to be near zero.
        let r = transformer_elementwise(11).unwrap();
        assert!(r.max_rel_error < 1e-2 || r.analytic.abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-2).is_err());
    }
}
