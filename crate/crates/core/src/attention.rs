//! Scaled dot-product attention: full and windowed local-global.
//!
//! Both modes share one kernel. A query attends to key `j` when the mode's
//! pattern allows `(i, j)` and `j` is not padding; disallowed scores are
//! treated as `-inf` and get an attention weight of exactly zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::kernels::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Full,
    /// Token `i` sees `[i - window, i + window]` plus every global position;
    /// global positions see everything.
    Windowed { window: usize, global: Vec<usize> },
}

impl AttentionMode {
    pub fn validate(&self, max_seq: usize) -> Result<()> {
        if let AttentionMode::Windowed { global, .. } = self {
            if let Some(g) = global.iter().find(|&&g| g >= max_seq) {
                bail!(Parameter, "global position {g} outside [0, {max_seq})");
            }
        }
        Ok(())
    }

    /// Row-major `s×s` table of allowed `(query, key)` pairs before padding.
    pub fn pattern(&self, s: usize) -> Vec<bool> {
        match self {
            AttentionMode::Full => vec![true; s * s],
            AttentionMode::Windowed { window, global } => {
                let mut is_global = vec![false; s];
                for &g in global {
                    if g < s {
                        is_global[g] = true;
                    }
                }
                let mut allowed = vec![false; s * s];
                for i in 0..s {
                    for j in 0..s {
                        allowed[i * s + j] = i.abs_diff(j) <= *window || is_global[i] || is_global[j];
                    }
                }
                allowed
            }
        }
    }
}

/// Forward pass of a single head. Returns `(output s×dv, weights s×s)`.
///
/// Rows whose query is marked invalid produce zeros. A valid query with no
/// admissible key is an error.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    dk: usize,
    dv: usize,
    pattern: &[bool],
    valid: Option<&[bool]>,
    skip_invalid_queries: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut scores = vec![0.0; s * s];
    gemm(s, dk, s, q, false, k, true, &mut scores, 0.0);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = vec![0.0; s * s];
    for i in 0..s {
        if skip_invalid_queries && valid.is_some_and(|m| !m[i]) {
            continue;
        }
        let admissible = |j: usize| pattern[i * s + j] && valid.is_none_or(|m| m[j]);
        let row = &scores[i * s..(i + 1) * s];
        let mut max = f64::NEG_INFINITY;
        for (j, &x) in row.iter().enumerate() {
            if admissible(j) && x * scale > max {
                max = x * scale;
            }
        }
        if max == f64::NEG_INFINITY {
            bail!(Validation, "attention row {i} has every key masked");
        }
        let p = &mut probs[i * s..(i + 1) * s];
        let mut sum = 0.0;
        for j in 0..s {
            if admissible(j) {
                p[j] = (row[j] * scale - max).exp();
                sum += p[j];
            }
        }
        for x in p.iter_mut() {
            *x /= sum;
        }
    }
    let mut out = vec![0.0; s * dv];
    gemm(s, s, dv, &probs, false, v, false, &mut out, 0.0);
    Ok((out, probs))
}

/// Gradients of one head with respect to `(q, k, v)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    s: usize,
    dk: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_v = vec![0.0; s * dv];
    gemm(s, s, dv, probs, true, d_out, false, &mut d_v, 0.0);
    let mut d_p = vec![0.0; s * s];
    gemm(s, dv, s, d_out, false, v, true, &mut d_p, 0.0);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut d_s = vec![0.0; s * s];
    for i in 0..s {
        let p = &probs[i * s..(i + 1) * s];
        let g = &d_p[i * s..(i + 1) * s];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..s {
            d_s[i * s + j] = p[j] * (g[j] - dot) * scale;
        }
    }
    let mut d_q = vec![0.0; s * dk];
    gemm(s, s, dk, &d_s, false, k, false, &mut d_q, 0.0);
    let mut d_k = vec![0.0; s * dk];
    gemm(s, s, dk, &d_s, true, q, false, &mut d_k, 0.0);
    (d_q, d_k, d_v)
}

/// Geometry of a batched multi-head attention call over `[batch·seq, hidden]` rows.
#[derive(Clone, Debug)]
pub(crate) struct MultiHeadShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl MultiHeadShape {
    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn gather(&self, x: &[f64], b: usize, h: usize) -> Vec<f64> {
        let (s, d, hid) = (self.seq, self.head_dim(), self.hidden);
        let mut out = Vec::with_capacity(s * d);
        for i in 0..s {
            let row = (b * s + i) * hid + h * d;
            out.extend_from_slice(&x[row..row + d]);
        }
        out
    }

    fn scatter(&self, block: &[f64], b: usize, h: usize, dst: &mut [f64]) {
        let (s, d, hid) = (self.seq, self.head_dim(), self.hidden);
        for i in 0..s {
            let row = (b * s + i) * hid + h * d;
            dst[row..row + d].copy_from_slice(&block[i * d..(i + 1) * d]);
        }
    }
}

/// Batched multi-head forward. `valid` marks non-padding positions (`batch·seq`).
/// Returns the concatenated head outputs and per-(batch, head) weights.
pub(crate) fn multi_head_forward(
    shape: &MultiHeadShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mode: &AttentionMode,
    valid: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (s, d) = (shape.seq, shape.head_dim());
    let pattern = mode.pattern(s);
    let blocks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..shape.batch * shape.heads)
        .into_par_iter()
        .map(|idx| {
            let (b, h) = (idx / shape.heads, idx % shape.heads);
            let qb = shape.gather(q, b, h);
            let kb = shape.gather(k, b, h);
            let vb = shape.gather(v, b, h);
            let vm = valid.map(|m| &m[b * s..(b + 1) * s]);
            head_forward(&qb, &kb, &vb, s, d, d, &pattern, vm, true)
        })
        .collect();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(blocks.len());
    for (idx, block) in blocks.into_iter().enumerate() {
        let (o, p) = block?;
        shape.scatter(&o, idx / shape.heads, idx % shape.heads, &mut out);
        probs.push(p);
    }
    Ok((out, probs))
}

pub(crate) fn multi_head_backward(
    shape: &MultiHeadShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[Vec<f64>],
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (s, d) = (shape.seq, shape.head_dim());
    let blocks: Vec<_> = (0..shape.batch * shape.heads)
        .into_par_iter()
        .map(|idx| {
            let (b, h) = (idx / shape.heads, idx % shape.heads);
            head_backward(
                &shape.gather(q, b, h),
                &shape.gather(k, b, h),
                &shape.gather(v, b, h),
                &probs[idx],
                &shape.gather(d_out, b, h),
                s,
                d,
                d,
            )
        })
        .collect();
    let mut d_q = vec![0.0; q.len()];
    let mut d_k = vec![0.0; k.len()];
    let mut d_v = vec![0.0; v.len()];
    for (idx, (bq, bk, bv)) in blocks.into_iter().enumerate() {
        let (b, h) = (idx / shape.heads, idx % shape.heads);
        shape.scatter(&bq, b, h, &mut d_q);
        shape.scatter(&bk, b, h, &mut d_k);
        shape.scatter(&bv, b, h, &mut d_v);
    }
    (d_q, d_k, d_v)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (s, dk) = q.dims2()?;
    let (sk, dk2) = k.dims2()?;
    let (sv, dv) = v.dims2()?;
    if sk != s || sv != s || dk2 != dk {
        bail!(
            Dimension,
            "attention shapes Q{:?} K{:?} V{:?} are inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    Ok((s, dk, dv))
}

fn single_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mode: &AttentionMode,
    pad_mask: Option<&[bool]>,
) -> Result<(Tensor, Tensor)> {
    let (s, dk, dv) = check_qkv(q, k, v)?;
    let valid: Option<Vec<bool>> = match pad_mask {
        Some(m) if m.len() != s => bail!(Dimension, "pad mask has {} entries for {s} keys", m.len()),
        Some(m) => Some(m.iter().map(|&pad| !pad).collect()),
        None => None,
    };
    let (out, probs) = head_forward(
        q.data(),
        k.data(),
        v.data(),
        s,
        dk,
        dv,
        &mode.pattern(s),
        valid.as_deref(),
        false,
    )?;
    Ok((Tensor::matrix(s, dv, out)?, Tensor::matrix(s, s, probs)?))
}

/// `softmax(QKᵀ/√d_k + mask)·V`. `pad_mask[j] == true` excludes key `j`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, pad_mask: Option<&[bool]>) -> Result<Tensor> {
    Ok(single_head(q, k, v, &AttentionMode::Full, pad_mask)?.0)
}

/// Windowed local-global attention with the same masking rules as [`attention`].
pub fn windowed_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: usize,
    global: &[usize],
    pad_mask: Option<&[bool]>,
) -> Result<Tensor> {
    let mode = AttentionMode::Windowed { window, global: global.to_vec() };
    mode.validate(q.shape()[0])?;
    Ok(single_head(q, k, v, &mode, pad_mask)?.0)
}

/// The `s×s` weight matrix used by [`attention`] / [`windowed_attention`].
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mode: &AttentionMode,
    pad_mask: Option<&[bool]>,
) -> Result<Tensor> {
    Ok(single_head(q, k, v, mode, pad_mask)?.1)
}
