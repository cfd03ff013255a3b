//! Decayed-context log-bilinear next-item model.
//!
//! For a window `x_0..x_{n-1}` the context at position `t` is the normalized
//! exponentially decayed average of the item embeddings seen so far,
//!
//! ```text
//! c_t = sum_{j<=t} lambda^(t-j) E[x_j] / sum_{j<=t} lambda^(t-j)
//! ```
//!
//! and the next item `x_{t+1}` is predicted by `softmax(E c_t + b)`. The
//! embedding table `E` is shared between input and output. The decay is
//! `lambda = sigmoid(gamma)`.
//!
//! Model files are `WREC1` followed by `M` and `d` as u64 LE, then `E`
//! row-major, `b`, and `gamma` as f64 LE.

use std::fs;
use std::io;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fastmath::exp_nonpos;
use crate::kernel::{self, Panel};
use crate::seed;

pub const MODEL_MAGIC: &[u8; 5] = b"WREC1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("window of length {0} has no predictable position (need at least 2 items)")]
    WindowTooShort(usize),
    #[error("item id {item} out of range for a catalog of {num_items} items")]
    ItemOutOfRange { item: u32, num_items: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("{targets} targets for {rows} logit rows")]
    TargetCount { rows: usize, targets: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_items: usize,
    pub dim: usize,
    /// Initial decay logit; the starting decay is `sigmoid(decay_init)`.
    pub decay_init: f64,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_items < 2 {
            return Err(ModelError::Config("num_items must be at least 2".into()));
        }
        if self.dim == 0 {
            return Err(ModelError::Config("dim must be at least 1".into()));
        }
        if !self.decay_init.is_finite() || !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config("decay_init and init_scale must be finite, init_scale >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub num_items: usize,
    pub dim: usize,
    /// `num_items x dim`, row-major.
    pub embeddings: Vec<f64>,
    pub bias: Vec<f64>,
    pub decay_logit: f64,
}

/// Same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub num_items: usize,
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub bias: Vec<f64>,
    pub decay_logit: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ModelParams {
    pub fn zeros(num_items: usize, dim: usize) -> Self {
        Self {
            num_items,
            dim,
            embeddings: vec![0.0; num_items * dim],
            bias: vec![0.0; num_items],
            decay_logit: 0.0,
        }
    }

    pub fn decay(&self) -> f64 {
        sigmoid(self.decay_logit)
    }

    pub fn embedding(&self, item: u32) -> &[f64] {
        let i = item as usize * self.dim;
        &self.embeddings[i..i + self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.decay_logit.is_finite()
            && self.embeddings.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
    }

    fn check_items(&self, items: &[u32]) -> Result<(), ModelError> {
        match items.iter().find(|&&i| i as usize >= self.num_items) {
            Some(&item) => Err(ModelError::ItemOutOfRange {
                item,
                num_items: self.num_items,
            }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 16 + 8 * (self.embeddings.len() + self.bias.len() + 1));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.num_items as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in self.embeddings.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.decay_logit.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Format(m.to_string());
        if bytes.len() < 21 || &bytes[..5] != MODEL_MAGIC {
            return Err(bad("missing WREC1 header"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let num_items = u64_at(5) as usize;
        let dim = u64_at(13) as usize;
        let count = num_items
            .checked_mul(dim)
            .and_then(|n| n.checked_add(num_items + 1))
            .ok_or_else(|| bad("dimensions overflow"))?;
        if bytes.len() != 21 + 8 * count {
            return Err(ModelError::Format(format!(
                "expected {} bytes for M={num_items}, d={dim}, found {}",
                21 + 8 * count,
                bytes.len()
            )));
        }
        let mut vals = bytes[21..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let embeddings: Vec<f64> = vals.by_ref().take(num_items * dim).collect();
        let bias: Vec<f64> = vals.by_ref().take(num_items).collect();
        let decay_logit = vals.next().expect("length checked");
        Ok(Self {
            num_items,
            dim,
            embeddings,
            bias,
            decay_logit,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            num_items: params.num_items,
            dim: params.dim,
            embeddings: vec![0.0; params.embeddings.len()],
            bias: vec![0.0; params.bias.len()],
            decay_logit: 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.embeddings.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
        self.decay_logit = 0.0;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        self.decay_logit += other.decay_logit;
    }

    pub fn scale(&mut self, factor: f64) {
        self.embeddings.iter_mut().for_each(|v| *v *= factor);
        self.bias.iter_mut().for_each(|v| *v *= factor);
        self.decay_logit *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.decay_logit.is_finite()
            && self.embeddings.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut params = ModelParams::zeros(config.num_items, config.dim);
    params.decay_logit = config.decay_init;
    if config.init_scale > 0.0 {
        let mut rng = seed::rng(seed, &[]);
        let dist = Uniform::new_inclusive(-config.init_scale, config.init_scale)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        params.embeddings.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    }
    Ok(params)
}

/// Next-item logits for positions `0..n-1` of a window, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub positions: usize,
    pub num_items: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let num_items = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == num_items), "ragged logits");
        Self {
            positions: rows.len(),
            num_items,
            data: rows.concat(),
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.num_items..(t + 1) * self.num_items]
    }

    pub fn softmax_row(&self, t: usize) -> Vec<f64> {
        softmax(self.row(t))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| exp_nonpos(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log sum_i exp(l_i)` with the max shift.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| exp_nonpos(l - max)).sum();
    max + sum.ln()
}

/// Context vectors `c_0..c_{p-1}` (position-major, `p * d`) plus the
/// normalizers `Z_t`.
fn contexts(params: &ModelParams, items: &[u32], out: &mut Vec<f64>, norms: &mut Vec<f64>) {
    let d = params.dim;
    let lambda = params.decay();
    out.clear();
    norms.clear();
    let mut running = vec![0.0; d];
    let mut z = 0.0;
    for &x in items {
        z = lambda * z + 1.0;
        for (s, e) in running.iter_mut().zip(params.embedding(x)) {
            *s = lambda * *s + e;
        }
        out.extend(running.iter().map(|s| s / z));
        norms.push(z);
    }
}

/// Final-position context for a non-empty context sequence.
pub fn context_vector(params: &ModelParams, context: &[u32]) -> Result<Vec<f64>, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    params.check_items(context)?;
    let (mut c, mut z) = (Vec::new(), Vec::new());
    contexts(params, context, &mut c, &mut z);
    Ok(c.split_off((context.len() - 1) * params.dim))
}

/// Logits `E c + b` for a single context vector.
pub fn score_items(params: &ModelParams, context: &[f64]) -> Vec<f64> {
    let d = params.dim;
    params
        .embeddings
        .chunks_exact(d)
        .zip(&params.bias)
        .map(|(row, &b)| {
            let mut acc = b;
            for (e, c) in row.iter().zip(context) {
                acc = e.mul_add(*c, acc);
            }
            acc
        })
        .collect()
}

/// Next-item logits after a context sequence.
pub fn next_item_logits(params: &ModelParams, context: &[u32]) -> Result<Vec<f64>, ModelError> {
    Ok(score_items(params, &context_vector(params, context)?))
}

pub fn forward(params: &ModelParams, window: &[u32]) -> Result<Logits, ModelError> {
    if window.len() < 2 {
        return Err(ModelError::WindowTooShort(window.len()));
    }
    params.check_items(window)?;
    let p = window.len() - 1;
    let (mut c, mut z) = (Vec::new(), Vec::new());
    contexts(params, &window[..p], &mut c, &mut z);
    let mut data = Vec::with_capacity(p * params.num_items);
    for ctx in c.chunks_exact(params.dim) {
        data.extend(score_items(params, ctx));
    }
    Ok(Logits {
        positions: p,
        num_items: params.num_items,
        data,
    })
}

/// Mean negative log-likelihood of `targets[t]` under row `t`.
pub fn nll_loss(logits: &Logits, targets: &[u32]) -> Result<f64, ModelError> {
    if targets.len() != logits.positions {
        return Err(ModelError::TargetCount {
            rows: logits.positions,
            targets: targets.len(),
        });
    }
    if logits.positions == 0 {
        return Err(ModelError::WindowTooShort(1));
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y as usize >= logits.num_items {
            return Err(ModelError::ItemOutOfRange {
                item: y,
                num_items: logits.num_items,
            });
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[y as usize];
    }
    Ok(total / logits.positions as f64)
}

/// Reusable buffers for [`Scorer::accumulate_window`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    ctx: Vec<f64>,
    norms: Vec<f64>,
    // Padded contexts, dim-major (`dp x pp`) and position-major (`pp x dp`).
    ctx_dim: Vec<f64>,
    ctx_pos: Vec<f64>,
    shift: Vec<f64>,
    // Shifted exponentials, item-major: `num_items x pp`.
    u: Vec<f64>,
    sum: Vec<f64>,
    target_logit: Vec<f64>,
    // d(loss)/d(c_t), dim-major: `dp x pp`.
    gc: Vec<f64>,
    w: Vec<f64>,
}

/// Read-only view of the parameters laid out for the batched kernels.
/// Build one per parameter state and share it across windows and threads.
pub struct Scorer<'a> {
    params: &'a ModelParams,
    panel: Panel<'a>,
}

/// Buffers for [`Scorer::scores`].
#[derive(Debug, Default, Clone)]
pub(crate) struct ScoreBuffers {
    pub ctx_dim: Vec<f64>,
    pub shift: Vec<f64>,
    pub u: Vec<f64>,
    pub sum: Vec<f64>,
    /// Raw logits, item-major with stride `pp`.
    pub logits: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            panel: Panel::new(&params.embeddings, &params.bias, params.dim),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Adds the gradient of the *summed* position losses of `window` into
    /// `grads` and returns that sum. The window must hold at least two
    /// in-range items.
    pub fn accumulate_window(&self, window: &[u32], grads: &mut Gradients, s: &mut Scratch) -> f64 {
        self.window_pass(window, Some(grads), s)
    }

    /// Summed position loss of `window`.
    pub fn window_loss(&self, window: &[u32], s: &mut Scratch) -> f64 {
        self.window_pass(window, None, s)
    }

    /// Logits and log-normalizers for `p` position-major contexts. Returns
    /// the padded stride `pp`; `buf.logits[i * pp + t]` is the logit of item
    /// `i` at position `t` and `log Z_t = shift[t] + ln(sum[t])`.
    pub(crate) fn scores(&self, ctx: &[f64], p: usize, buf: &mut ScoreBuffers) -> usize {
        let panel = &self.panel;
        let pp = kernel::pad_contexts(ctx, p, panel.dim, panel.dp, &mut buf.ctx_dim, None);
        panel.shifts(ctx, p, pp, &mut buf.shift);
        for exact in [false, true] {
            kernel::softmax_pass(
                panel,
                &buf.ctx_dim,
                pp,
                &buf.shift,
                kernel::SoftmaxOut {
                    u: &mut buf.u,
                    sum: &mut buf.sum,
                    gc: None,
                    logits: Some(&mut buf.logits),
                },
            );
            if exact || buf.sum[..p].iter().all(|&v| v >= kernel::MIN_SUM) {
                break;
            }
            kernel::exact_max(panel, &buf.ctx_dim, pp, &mut buf.shift);
        }
        pp
    }

    fn window_pass(&self, window: &[u32], grads: Option<&mut Gradients>, s: &mut Scratch) -> f64 {
        let params = self.params;
        let panel = &self.panel;
        let d = params.dim;
        let p = window.len() - 1;
        let inputs = &window[..p];
        let targets = &window[1..];

        contexts(params, inputs, &mut s.ctx, &mut s.norms);
        let pp = kernel::pad_contexts(
            &s.ctx,
            p,
            d,
            panel.dp,
            &mut s.ctx_dim,
            grads.is_some().then_some(&mut s.ctx_pos),
        );
        panel.shifts(&s.ctx, p, pp, &mut s.shift);
        for exact in [false, true] {
            kernel::softmax_pass(
                panel,
                &s.ctx_dim,
                pp,
                &s.shift,
                kernel::SoftmaxOut {
                    u: &mut s.u,
                    sum: &mut s.sum,
                    gc: grads.is_some().then_some(&mut s.gc),
                    logits: None,
                },
            );
            if exact || s.sum[..p].iter().all(|&v| v >= kernel::MIN_SUM) {
                break;
            }
            kernel::exact_max(panel, &s.ctx_dim, pp, &mut s.shift);
        }
        s.target_logit.clear();
        s.target_logit.extend(
            targets
                .iter()
                .enumerate()
                .map(|(t, &y)| panel.logit(&s.ctx_dim, pp, y as usize, t)),
        );
        let loss: f64 = (0..p)
            .map(|t| s.shift[t] + s.sum[t].ln() - s.target_logit[t])
            .sum();

        let Some(grads) = grads else {
            return loss;
        };

        // 1/sum per position; zero on padding so padded columns carry no weight.
        for (t, v) in s.sum.iter_mut().enumerate() {
            *v = if t < p { 1.0 / *v } else { 0.0 };
        }
        kernel::output_grads(
            panel,
            &s.u,
            pp,
            &s.sum,
            &s.ctx_pos,
            p,
            &mut s.w,
            &mut grads.bias,
            &mut grads.embeddings,
        );
        for k in 0..d {
            for (g, inv) in s.gc[k * pp..(k + 1) * pp].iter_mut().zip(&s.sum) {
                *g *= inv;
            }
        }

        // The one-hot part of (softmax - onehot).
        for (t, &y) in targets.iter().enumerate() {
            let y = y as usize;
            grads.bias[y] -= 1.0;
            let c = &s.ctx[t * d..(t + 1) * d];
            for (a, ck) in grads.embeddings[y * d..(y + 1) * d].iter_mut().zip(c) {
                *a -= ck;
            }
            for k in 0..d {
                s.gc[k * pp + t] -= params.embeddings[y * d + k];
            }
        }

        // Back through the decayed average: input embeddings and the decay logit.
        let lambda = params.decay();
        let mut running = vec![0.0; d];
        let mut deriv = vec![0.0; d];
        let (mut z, mut dz) = (0.0, 0.0);
        let mut dlambda = 0.0;
        for (t, &x) in inputs.iter().enumerate() {
            // d S_t / d lambda = S_{t-1} + lambda * d S_{t-1} / d lambda
            for k in 0..d {
                deriv[k] = running[k] + lambda * deriv[k];
            }
            dz = z + lambda * dz;
            z = lambda * z + 1.0;
            let e = params.embedding(x);
            for k in 0..d {
                running[k] = lambda * running[k] + e[k];
            }
            for k in 0..d {
                let c = s.ctx[t * d + k];
                dlambda += s.gc[k * pp + t] * (deriv[k] - c * dz) / z;
            }
        }
        grads.decay_logit += dlambda * lambda * (1.0 - lambda);

        let mut carry = vec![0.0; d];
        for t in (0..p).rev() {
            let inv_z = 1.0 / s.norms[t];
            let x = inputs[t] as usize;
            for k in 0..d {
                carry[k] = s.gc[k * pp + t] * inv_z + lambda * carry[k];
                grads.embeddings[x * d + k] += carry[k];
            }
        }
        loss
    }
}

/// Exact gradient of [`nll_loss`] (mean over positions) and the loss itself.
pub fn backward(params: &ModelParams, window: &[u32]) -> Result<(Gradients, f64), ModelError> {
    if window.len() < 2 {
        return Err(ModelError::WindowTooShort(window.len()));
    }
    params.check_items(window)?;
    let mut grads = Gradients::zeros_like(params);
    let mut scratch = Scratch::default();
    let total = Scorer::new(params).accumulate_window(window, &mut grads, &mut scratch);
    let n = (window.len() - 1) as f64;
    grads.scale(1.0 / n);
    Ok((grads, total / n))
}

/// All items by descending next-item logit, ties by ascending id.
pub fn rank_items(params: &ModelParams, context: &[u32]) -> Result<Vec<u32>, ModelError> {
    let logits = next_item_logits(params, context)?;
    Ok(rank_by_score(&logits))
}

pub fn rank_by_score(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order
}

/// 1-based rank of `target` under the descending-score, ascending-id order.
pub fn rank_of(scores: &[f64], target: u32) -> usize {
    let st = scores[target as usize];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > st || (v == st && (i as u32) < target))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelParams {
        ModelParams {
            num_items: 3,
            dim: 1,
            embeddings: vec![1.0, -1.0, 0.0],
            bias: vec![0.0; 3],
            decay_logit: 0.0, // lambda = 0.5
        }
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let params = ModelParams::zeros(5, 3);
        let logits = forward(&params, &[0, 1, 2, 3]).unwrap();
        for t in 0..3 {
            assert!(logits.softmax_row(t).iter().all(|p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn single_item_context_is_its_embedding() {
        let mut params = toy();
        params.decay_logit = 1.7;
        assert_eq!(context_vector(&params, &[1]).unwrap(), vec![-1.0]);
        let logits = forward(&params, &[1, 0]).unwrap();
        assert_eq!(logits.row(0), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn decayed_context_hand_example() {
        let params = toy();
        let c = context_vector(&params, &[0, 1]).unwrap();
        assert!((c[0] + 1.0 / 3.0).abs() < 1e-15);
        let logits = forward(&params, &[0, 1, 2]).unwrap();
        let row = logits.row(1);
        let want = [-1.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_of_uniform_logits_is_log_m() {
        let logits = Logits::from_rows(vec![vec![0.0; 4]; 3]);
        let loss = nll_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn loss_is_stable_for_huge_logits() {
        let logits = Logits::from_rows(vec![vec![1000.0, 0.0, 0.0]]);
        let loss = nll_loss(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_targets() {
        let logits = Logits::from_rows(vec![vec![0.0; 3]]);
        assert!(matches!(nll_loss(&logits, &[3]), Err(ModelError::ItemOutOfRange { .. })));
        assert!(matches!(nll_loss(&logits, &[0, 1]), Err(ModelError::TargetCount { .. })));
    }

    #[test]
    fn forward_rejects_short_or_out_of_range_windows() {
        let params = toy();
        assert!(matches!(forward(&params, &[0]), Err(ModelError::WindowTooShort(1))));
        assert!(matches!(forward(&params, &[0, 3]), Err(ModelError::ItemOutOfRange { item: 3, .. })));
    }

    #[test]
    fn zero_init_bias_gradient() {
        let params = ModelParams::zeros(4, 2);
        let window = [0, 1, 1, 3];
        let (g, loss) = backward(&params, &window).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // Mean over 3 positions of (1/4 - onehot(target)).
        let counts = [0.0, 2.0, 0.0, 1.0];
        for i in 0..4 {
            let want = 0.25 - counts[i] / 3.0;
            assert!((g.bias[i] - want).abs() < 1e-15, "{i}: {} vs {want}", g.bias[i]);
        }
        assert!(g.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_item_window_has_no_decay_gradient() {
        let params = init_params(
            &ModelConfig {
                num_items: 6,
                dim: 3,
                decay_init: 0.4,
                init_scale: 0.5,
            },
            3,
        )
        .unwrap();
        let (g, _) = backward(&params, &[2, 2, 2, 2, 2]).unwrap();
        assert!(g.decay_logit.abs() < 1e-12, "{}", g.decay_logit);
    }

    #[test]
    fn backward_loss_matches_forward() {
        let params = init_params(
            &ModelConfig {
                num_items: 9,
                dim: 4,
                decay_init: -0.3,
                init_scale: 1.0,
            },
            8,
        )
        .unwrap();
        let window = [3, 1, 4, 1, 5, 8, 2, 6];
        let (_, loss) = backward(&params, &window).unwrap();
        let want = nll_loss(&forward(&params, &window).unwrap(), &window[1..]).unwrap();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn reversing_a_window_changes_contexts() {
        let params = toy();
        let a = forward(&params, &[0, 1, 2, 0]).unwrap();
        let b = forward(&params, &[2, 1, 0, 0]).unwrap();
        assert_ne!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig {
            num_items: 50,
            dim: 8,
            decay_init: 0.0,
            init_scale: 0.1,
        };
        let a = init_params(&cfg, 1).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        assert!(a.embeddings.iter().all(|v| v.abs() <= 0.1));
        assert!(a.bias.iter().all(|&v| v == 0.0));
        let zero = init_params(&ModelConfig { init_scale: 0.0, ..cfg }, 1).unwrap();
        assert!(zero.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ranking_ties_break_by_id() {
        assert_eq!(rank_by_score(&[0.5, 2.0, 0.5]), vec![1, 0, 2]);
        assert_eq!(rank_of(&[0.5, 2.0, 0.5], 2), 3);
        assert_eq!(rank_of(&[0.5, 2.0, 0.5], 0), 2);
        let params = ModelParams::zeros(5, 2);
        assert_eq!(rank_items(&params, &[3]).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(rank_items(&params, &[]), Err(ModelError::EmptyContext)));
    }

    #[test]
    fn model_file_round_trip_and_layout() {
        let params = ModelParams {
            num_items: 2,
            dim: 1,
            embeddings: vec![1.5, -2.0],
            bias: vec![0.25, 0.0],
            decay_logit: -1.0,
        };
        let bytes = params.to_bytes();
        assert_eq!(&bytes[..5], b"WREC1");
        assert_eq!(&bytes[5..13], &2u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 8 * 5);
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), params);
        assert!(ModelParams::from_bytes(&bytes[..30]).is_err());
        assert!(ModelParams::from_bytes(b"WREC2xxxxxxxxxxxxxxxxxxxx").is_err());
    }
}
