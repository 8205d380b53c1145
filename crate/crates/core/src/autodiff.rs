//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]; a node only
//! ever refers to nodes recorded before it, so reverse tape order is a valid
//! topological order for the backward sweep. Gradient contributions are
//! summed in that fixed order, which makes backward deterministic.

use rand::Rng;

use crate::attention::{multi_head_backward, multi_head_forward, AttentionMode, MultiHeadShape};
use crate::error::{bail, Error, Result};
use crate::kernels::{gelu, gelu_grad, gemm, layer_norm_row, log_softmax_row, softmax_row};
use crate::loss::{check_distribution_rows, clamp_prob, FocalVariant, PROB_EPS};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cross-entropy target: one class index per row or a full distribution.
#[derive(Clone, Debug)]
pub enum Target {
    Classes(Vec<usize>),
    Distribution(Tensor),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Reshape(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, rows: Vec<usize> },
    SelectCols { x: Var, cols: Vec<usize> },
    Softmax { x: Var, temperature: f64 },
    CrossEntropyLogits { x: Var, temperature: f64, target: Target, probs: Vec<f64> },
    CrossEntropyProbs { p: Var, target: Target },
    KlDiv { p: Var, q: Var },
    Mse { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, shape: MultiHeadShape, probs: Vec<Vec<f64>> },
    Focal { p: Var, labels: Vec<bool>, gamma: f64, alpha: f64, variant: FocalVariant },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. One backward pass per tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` before backward or for
    /// values that do not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            bail!(Dimension, "{what}: shapes {sa:?} and {sb:?} differ");
        }
        Ok(())
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            bail!(
                Dimension,
                "matmul inner extents differ: {:?} x {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if b_t { "ᵀ" } else { "" }
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_t, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        self.push(value, Op::MatMul { a, b, m, k, n, b_t }, &[a, b], "matmul")
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, |x, y| x + y, "add")?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, |x, y| x - y, "sub")?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, |x, y| x * y, "mul")?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a length-`n` bias to every last-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).len() != n {
            bail!(
                Dimension,
                "bias {:?} does not match last axis of {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            );
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(&b).for_each(|(o, bb)| *o += bb);
        }
        self.push(v, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale { x, factor }, &[x], "scale")
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x], "gelu")
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            bail!(Dimension, "layer_norm parameters do not match width {n}");
        }
        let tx = self.value(x);
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            inv_std.push(layer_norm_row(tx.row(i), &mut xhat[i * n..(i + 1) * n]));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(idx, &h)| h * g[idx % n] + b[idx % n]).collect();
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias], "layer_norm")
    }

    /// Rows of a matrix picked by index (embedding lookup, position selection).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = t.dims2()?;
        if rows.is_empty() {
            bail!(Dimension, "gather_rows needs at least one row");
        }
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            bail!(Index, "row {bad} out of range for {r} rows");
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(rows.len(), c, out)?;
        self.push(value, Op::GatherRows { table, rows: rows.to_vec() }, &[table], "gather_rows")
    }

    /// Columns of a matrix picked by index.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if cols.is_empty() {
            bail!(Dimension, "select_cols needs at least one column");
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            bail!(Index, "column {bad} out of range for {c} columns");
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = t.row(i);
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let value = Tensor::matrix(r, cols.len(), out)?;
        self.push(value, Op::SelectCols { x, cols: cols.to_vec() }, &[x], "select_cols")
    }

    /// Temperature softmax over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for i in 0..t.rows() {
            softmax_row(t.row(i), temperature, &mut out[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { x, temperature }, &[x], "softmax")
    }

    /// Mean over rows of `-Σ_j y_j log softmax(x/T)_j`.
    pub fn cross_entropy_logits(&mut self, x: Var, target: Target, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let t = self.value(x);
        check_target(t, &target)?;
        let n = t.last_dim();
        let rows = t.rows();
        let mut log_p = vec![0.0; t.len()];
        for i in 0..rows {
            log_softmax_row(t.row(i), temperature, &mut log_p[i * n..(i + 1) * n]);
        }
        let total: f64 = match &target {
            Target::Classes(cls) => cls.iter().enumerate().map(|(i, &c)| -log_p[i * n + c]).sum(),
            Target::Distribution(y) => -y.data().iter().zip(&log_p).map(|(a, b)| a * b).sum::<f64>(),
        };
        let probs = log_p.iter().map(|l| l.exp()).collect();
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::CrossEntropyLogits { x, temperature, target, probs },
            &[x],
            "cross_entropy",
        )
    }

    /// Mean over rows of `-Σ_j y_j log p_j`, with `p` clamped to `[1e-12, 1]`.
    pub fn cross_entropy_probs(&mut self, p: Var, target: Target) -> Result<Var> {
        let t = self.value(p);
        check_target(t, &target)?;
        let n = t.last_dim();
        let rows = t.rows();
        let total: f64 = match &target {
            Target::Classes(cls) => cls.iter().enumerate().map(|(i, &c)| -clamp_prob(t.data()[i * n + c]).ln()).sum(),
            Target::Distribution(y) => -y
                .data()
                .iter()
                .zip(t.data())
                .map(|(yy, &pp)| yy * clamp_prob(pp).ln())
                .sum::<f64>(),
        };
        let value = Tensor::scalar(total / rows as f64);
        self.push(value, Op::CrossEntropyProbs { p, target }, &[p], "cross_entropy")
    }

    /// Dispatches to [`Tape::cross_entropy_logits`] (at T = 1) or [`Tape::cross_entropy_probs`].
    pub fn cross_entropy(&mut self, x: Var, target: Target, from_logits: bool) -> Result<Var> {
        if from_logits {
            self.cross_entropy_logits(x, target, 1.0)
        } else {
            self.cross_entropy_probs(x, target)
        }
    }

    /// `Σ_j p_j log(p_j/q_j)` summed over all rows, operands clamped inside the log.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_div")?;
        check_distribution_rows(self.value(p), "kl_div p")?;
        check_distribution_rows(self.value(q), "kl_div q")?;
        let value = Tensor::scalar(crate::loss::kl_terms(self.value(p).data(), self.value(q).data()));
        self.push(value, Op::KlDiv { p, q }, &[p, q], "kl_div")
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let sq: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sq / ta.len() as f64);
        self.push(value, Op::Mse { a, b }, &[a, b], "mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x], "mean")
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Parameter, "dropout probability {p} outside [0, 1)");
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// Multi-head attention over `[batch·seq, hidden]` projections.
    /// `valid` marks non-padding positions; padded queries produce zero rows.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mode: &AttentionMode,
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, hidden) = self.value(q).dims2()?;
        if rows != batch * seq || heads == 0 || hidden % heads != 0 {
            bail!(
                Dimension,
                "attention input {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                self.value(q).shape()
            );
        }
        if valid.is_some_and(|m| m.len() != rows) {
            bail!(Dimension, "attention validity mask has wrong length");
        }
        let shape = MultiHeadShape { batch, seq, heads, hidden };
        let (out, probs) = multi_head_forward(
            &shape,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mode,
            valid,
        )?;
        let value = Tensor::matrix(rows, hidden, out)?;
        self.push(value, Op::Attention { q, k, v, shape, probs }, &[q, k, v], "attention")
    }

    /// Mean binary focal loss of positive-class probabilities `p` against `labels`.
    pub fn focal_loss(
        &mut self,
        p: Var,
        labels: &[bool],
        gamma: f64,
        alpha: f64,
        variant: FocalVariant,
    ) -> Result<Var> {
        let t = self.value(p);
        if t.len() != labels.len() {
            bail!(Dimension, "focal loss: {} probabilities for {} labels", t.len(), labels.len());
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&pp, &y)| crate::loss::focal_loss_with(pp, y, gamma, alpha, variant))
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        let op = Op::Focal { p, labels: labels.to_vec(), gamma, alpha, variant };
        self.push(value, op, &[p], "focal_loss")
    }

    /// Runs the backward sweep from a scalar `loss` and installs gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            bail!(Dimension, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let installed = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        self.grads = Some(installed);
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n, b_t } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    let buf = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), !b_t, buf, 1.0);
                }
                if wants(*b) {
                    if *b_t {
                        // out = A·Bᵀ, B: n×k  ⇒  dB = Gᵀ·A
                        let buf = grad_buf(grads, *b, n * k);
                        gemm(n, m, k, g, true, val(*a).data(), false, buf, 1.0);
                    } else {
                        let buf = grad_buf(grads, *b, k * n);
                        gemm(k, m, n, val(*a).data(), true, g, false, buf, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(*x) {
                        add_into(grad_buf(grads, *x, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(grad_buf(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let buf = grad_buf(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, gg)| *o -= gg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let buf = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let buf = grad_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(grad_buf(grads, *x, g.len()), g);
                }
                if wants(*bias) {
                    let n = val(*bias).len();
                    let buf = grad_buf(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let buf = grad_buf(grads, *x, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, gg)| *o += gg * factor);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(grad_buf(grads, *x, g.len()), g);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let input = val(*x).data();
                    let buf = grad_buf(grads, *x, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(input[i]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = val(*gain).len();
                if wants(*gain) {
                    let buf = grad_buf(grads, *gain, n);
                    for (i, gg) in g.iter().enumerate() {
                        buf[i % n] += gg * xhat[i];
                    }
                }
                if wants(*bias) {
                    let buf = grad_buf(grads, *bias, n);
                    for (i, gg) in g.iter().enumerate() {
                        buf[i % n] += gg;
                    }
                }
                if wants(*x) {
                    let gain_v = val(*gain).data();
                    let buf = grad_buf(grads, *x, g.len());
                    let nf = n as f64;
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let dxhat: Vec<f64> = (0..n).map(|j| gr[j] * gain_v[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / nf;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            buf[r * n + j] += istd * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                if wants(*table) {
                    let c = val(*table).last_dim();
                    let buf = grad_buf(grads, *table, val(*table).len());
                    for (out_row, &src) in rows.iter().enumerate() {
                        add_into(&mut buf[src * c..(src + 1) * c], &g[out_row * c..(out_row + 1) * c]);
                    }
                }
            }
            Op::SelectCols { x, cols } => {
                if wants(*x) {
                    let c = val(*x).last_dim();
                    let buf = grad_buf(grads, *x, val(*x).len());
                    for (r, chunk) in g.chunks(cols.len()).enumerate() {
                        for (&j, gg) in cols.iter().zip(chunk) {
                            buf[r * c + j] += gg;
                        }
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                if wants(*x) {
                    let y = nodes[id].value.data();
                    let n = nodes[id].value.last_dim();
                    let buf = grad_buf(grads, *x, g.len());
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            buf[r * n + j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::CrossEntropyLogits { x, temperature, target, probs } => {
                if wants(*x) {
                    let n = val(*x).last_dim();
                    let rows = probs.len() / n;
                    let scale = g[0] / (rows as f64 * temperature);
                    let buf = grad_buf(grads, *x, probs.len());
                    for (i, p) in probs.iter().enumerate() {
                        buf[i] += p * scale;
                    }
                    match target {
                        Target::Classes(cls) => {
                            for (r, &c) in cls.iter().enumerate() {
                                buf[r * n + c] -= scale;
                            }
                        }
                        Target::Distribution(y) => {
                            for (o, yy) in buf.iter_mut().zip(y.data()) {
                                *o -= yy * scale;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropyProbs { p, target } => {
                if wants(*p) {
                    let t = val(*p);
                    let n = t.last_dim();
                    let scale = g[0] / t.rows() as f64;
                    let pd = t.data();
                    let buf = grad_buf(grads, *p, t.len());
                    let mut apply = |idx: usize, y: f64| {
                        if pd[idx] > PROB_EPS {
                            buf[idx] -= scale * y / pd[idx];
                        }
                    };
                    match target {
                        Target::Classes(cls) => cls.iter().enumerate().for_each(|(r, &c)| apply(r * n + c, 1.0)),
                        Target::Distribution(y) => y.data().iter().enumerate().for_each(|(i, &yy)| apply(i, yy)),
                    }
                }
            }
            Op::KlDiv { p, q } => {
                let (pd, qd) = (val(*p).data(), val(*q).data());
                if wants(*p) {
                    let buf = grad_buf(grads, *p, pd.len());
                    for i in 0..pd.len() {
                        let (pc, qc) = (clamp_prob(pd[i]), clamp_prob(qd[i]));
                        let inner = if pd[i] > PROB_EPS { 1.0 } else { 0.0 };
                        buf[i] += g[0] * ((pc / qc).ln() + inner);
                    }
                }
                if wants(*q) {
                    let buf = grad_buf(grads, *q, qd.len());
                    for i in 0..qd.len() {
                        if qd[i] > PROB_EPS {
                            buf[i] -= g[0] * pd[i] / qd[i];
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let scale = 2.0 * g[0] / ad.len() as f64;
                if wants(*a) {
                    let buf = grad_buf(grads, *a, ad.len());
                    for i in 0..ad.len() {
                        buf[i] += scale * (ad[i] - bd[i]);
                    }
                }
                if wants(*b) {
                    let buf = grad_buf(grads, *b, bd.len());
                    for i in 0..bd.len() {
                        buf[i] -= scale * (ad[i] - bd[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let buf = grad_buf(grads, *x, val(*x).len());
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    let buf = grad_buf(grads, *x, n);
                    buf.iter_mut().for_each(|o| *o += g[0] / n as f64);
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let buf = grad_buf(grads, *x, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                if wants(*q) || wants(*k) || wants(*v) {
                    let (dq, dk, dv) =
                        multi_head_backward(shape, val(*q).data(), val(*k).data(), val(*v).data(), probs, g);
                    for (x, d) in [(q, dq), (k, dk), (v, dv)] {
                        if wants(*x) {
                            add_into(grad_buf(grads, *x, d.len()), &d);
                        }
                    }
                }
            }
            Op::Focal { p, labels, gamma, alpha, variant } => {
                if wants(*p) {
                    let pd = val(*p).data();
                    let scale = g[0] / labels.len() as f64;
                    let buf = grad_buf(grads, *p, pd.len());
                    for i in 0..pd.len() {
                        buf[i] += scale * crate::loss::focal_grad(pd[i], labels[i], *gamma, *alpha, *variant);
                    }
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        bail!(Parameter, "temperature must be positive, got {t}");
    }
    Ok(())
}

fn check_target(input: &Tensor, target: &Target) -> Result<()> {
    let n = input.last_dim();
    match target {
        Target::Classes(cls) => {
            if cls.len() != input.rows() {
                bail!(Dimension, "{} class targets for {} rows", cls.len(), input.rows());
            }
            if let Some(c) = cls.iter().find(|&&c| c >= n) {
                bail!(Index, "class index {c} out of range for {n} classes");
            }
        }
        Target::Distribution(y) => {
            if y.shape() != input.shape() {
                bail!(Dimension, "target {:?} does not match input {:?}", y.shape(), input.shape());
            }
            check_distribution_rows(y, "cross-entropy target")?;
        }
    }
    Ok(())
}
