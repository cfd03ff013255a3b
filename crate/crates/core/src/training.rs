//! Epoch/batch training engine with Adam.
//!
//! Every epoch the users are shuffled with a stream keyed by `(seed, epoch)`,
//! each user contributes the one window chosen by the epoch plan, and the
//! windows are grouped into batches. A batch gradient is the mean over all
//! in-batch predicted positions. It is reduced through a fixed tree: windows
//! are ordered by user id, summed sequentially inside fixed-size chunks, and
//! the chunk sums are added in order. The result does not depend on how
//! many rayon workers run the chunks.

use std::fmt;
use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserHistory;
use crate::model::{init_params, Gradients, ModelConfig, ModelError, ModelParams, Scorer, Scratch};
use crate::seed;
use crate::windowing::{build_epoch_plan, sample_for_epoch, EpochPlan, Horizon, WindowError, WindowSample};

/// Windows per reduction chunk. Part of the numerical contract: changing it
/// changes the floating-point summation order.
pub const REDUCE_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch} (users {first_user}..={last_user})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        first_user: u32,
        last_user: u32,
    },
    #[error("non-finite gradient passed to the optimizer")]
    NonFiniteGradient,
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }
}

#[inline]
fn adam_update(theta: &mut f64, g: f64, m: &mut f64, v: &mut f64, h: &AdamHyper, bc1: f64, bc2: f64) {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *theta -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
}

/// One bias-corrected Adam step, in place. Rejects non-finite gradients
/// before touching any state.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params
        .embeddings
        .iter_mut()
        .zip(&grads.embeddings)
        .zip(state.m.embeddings.iter_mut())
        .zip(state.v.embeddings.iter_mut())
    {
        adam_update(p, g, m, v, hyper, bc1, bc2);
    }
    for (((p, &g), m), v) in params
        .bias
        .iter_mut()
        .zip(&grads.bias)
        .zip(state.m.bias.iter_mut())
        .zip(state.v.bias.iter_mut())
    {
        adam_update(p, g, m, v, hyper, bc1, bc2);
    }
    adam_update(
        &mut params.decay_logit,
        grads.decay_logit,
        &mut state.m.decay_logit,
        &mut state.v.decay_logit,
        hyper,
        bc1,
        bc2,
    );
    Ok(())
}

fn default_dim() -> usize {
    16
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub fixed_epochs: usize,
    pub horizon: Horizon,
    pub window: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamHyper,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub decay_init: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.fixed_epochs > self.epochs {
            return bad(format!(
                "fixed_epochs ({}) exceeds epochs ({})",
                self.fixed_epochs, self.epochs
            ));
        }
        if self.window < 2 {
            return bad("window must be at least 2".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Horizon::Bounded(h) = self.horizon {
            if h < self.window && self.fixed_epochs < self.epochs {
                return bad(format!("horizon {h} is shorter than the window {}", self.window));
            }
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad("beta1, beta2 must lie in [0, 1) and epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<EpochPlan, TrainError> {
        Ok(build_epoch_plan(self.epochs, self.fixed_epochs, self.horizon)?)
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            num_items,
            dim: self.dim,
            decay_init: self.decay_init,
            init_scale: self.init_scale,
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive_label(self.seed, "init")
    }

    pub fn shuffle_seed(&self) -> u64 {
        seed::derive_label(self.seed, "shuffle")
    }

    pub fn window_seed(&self) -> u64 {
        seed::derive_label(self.seed, "window")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub policy: String,
    pub mean_loss: f64,
    /// Cumulative distinct (user, item) pairs observed through this epoch.
    pub distinct_items: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,policy,mean_loss,distinct_items,seconds")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{:.9},{},{:.3}",
                e.epoch, e.policy, e.mean_loss, e.distinct_items, e.seconds
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:<18} {:>10} {:>14} {:>8}", "epoch", "policy", "loss", "distinct", "secs")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{:>5}  {:<18} {:>10.5} {:>14} {:>8.2}",
                e.epoch, e.policy, e.mean_loss, e.distinct_items, e.seconds
            )?;
        }
        Ok(())
    }
}

/// User visiting order for one epoch: positions into the user-id-sorted list.
pub fn epoch_order(num_users: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_users).collect();
    let mut rng = seed::rng(shuffle_seed, &[epoch as u64]);
    order.shuffle(&mut rng);
    order
}

/// Tracks distinct (user, item) pairs seen in training windows.
struct PairTracker {
    offsets: Vec<usize>,
    local: Vec<u32>,
    seen: Vec<bool>,
    count: usize,
}

impl PairTracker {
    fn new(users: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(users.len() + 1);
        let mut local = Vec::new();
        let mut total = 0;
        for items in users {
            offsets.push(total);
            let mut distinct: Vec<u32> = items.clone();
            distinct.sort_unstable();
            distinct.dedup();
            local.extend(
                items
                    .iter()
                    .map(|i| distinct.binary_search(i).expect("present") as u32),
            );
            total += distinct.len();
        }
        offsets.push(total);
        Self {
            offsets,
            local,
            seen: vec![false; total],
            count: 0,
        }
    }

    fn observe(&mut self, user: usize, event_offset: usize, range: std::ops::Range<usize>) {
        let base = self.offsets[user];
        for pos in range {
            let slot = base + self.local[event_offset + pos] as usize;
            if !self.seen[slot] {
                self.seen[slot] = true;
                self.count += 1;
            }
        }
    }
}

struct ChunkBuf {
    grads: Gradients,
    scratch: Scratch,
    loss: f64,
}

/// Mean-over-positions gradient of a batch through the fixed reduction tree.
/// `windows` must already be in user-id order. Returns the summed loss and
/// the number of predicted positions.
pub fn batch_gradient(
    params: &ModelParams,
    windows: &[&[u32]],
    out: &mut Gradients,
) -> (f64, usize) {
    let mut bufs: Vec<ChunkBuf> = Vec::new();
    batch_gradient_with(params, windows, out, &mut bufs)
}

fn batch_gradient_with(
    params: &ModelParams,
    windows: &[&[u32]],
    out: &mut Gradients,
    bufs: &mut Vec<ChunkBuf>,
) -> (f64, usize) {
    let chunks = windows.len().div_ceil(REDUCE_CHUNK);
    while bufs.len() < chunks {
        bufs.push(ChunkBuf {
            grads: Gradients::zeros_like(params),
            scratch: Scratch::default(),
            loss: 0.0,
        });
    }
    let scorer = Scorer::new(params);
    bufs[..chunks]
        .par_iter_mut()
        .zip(windows.par_chunks(REDUCE_CHUNK))
        .for_each(|(buf, chunk)| {
            buf.grads.clear();
            buf.loss = 0.0;
            for w in chunk {
                buf.loss += scorer.accumulate_window(w, &mut buf.grads, &mut buf.scratch);
            }
        });
    out.clear();
    let mut loss = 0.0;
    for buf in &bufs[..chunks] {
        out.add_assign(&buf.grads);
        loss += buf.loss;
    }
    let positions: usize = windows.iter().map(|w| w.len() - 1).sum();
    if positions > 0 {
        out.scale(1.0 / positions as f64);
    }
    (loss, positions)
}

pub fn train(
    histories: &[UserHistory],
    num_items: usize,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog), TrainError> {
    train_observed(histories, num_items, config, |_, _| {})
}

/// [`train`] with a hook that sees every sampled window (including windows
/// too short to train on) before it is used.
pub fn train_observed<F>(
    histories: &[UserHistory],
    num_items: usize,
    config: &TrainConfig,
    mut observer: F,
) -> Result<(ModelParams, TrainLog), TrainError>
where
    F: FnMut(usize, &WindowSample),
{
    config.validate()?;
    if histories.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let plan = config.plan()?;
    let mut params = init_params(&config.model_config(num_items), config.init_seed())?;
    let mut state = AdamState::new(&params);

    let mut sorted: Vec<&UserHistory> = histories.iter().collect();
    sorted.sort_by_key(|h| h.user_id());
    let users: Vec<Vec<u32>> = sorted.iter().map(|h| h.items()).collect();
    if let Some(&item) = users.iter().flatten().find(|&&i| i as usize >= num_items) {
        return Err(ModelError::ItemOutOfRange { item, num_items }.into());
    }
    let mut event_offsets = Vec::with_capacity(users.len());
    let mut acc = 0;
    for u in &users {
        event_offsets.push(acc);
        acc += u.len();
    }
    let mut tracker = PairTracker::new(&users);
    let mut grads = Gradients::zeros_like(&params);
    let mut bufs = Vec::new();
    let mut log = TrainLog::default();

    for (epoch, policy) in plan.epochs.iter().enumerate() {
        let started = Instant::now();
        let order = epoch_order(users.len(), config.shuffle_seed(), epoch);
        let mut windows: Vec<(usize, WindowSample)> = Vec::with_capacity(users.len());
        for idx in order {
            let user_id = sorted[idx].user_id();
            let w = sample_for_epoch(&plan, epoch, user_id, users[idx].len(), config.window, config.window_seed())?;
            observer(epoch, &w);
            if w.len() >= 2 {
                windows.push((idx, w));
            }
        }
        let (mut epoch_loss, mut epoch_positions) = (0.0, 0usize);
        for (batch_no, batch) in windows.chunks(config.batch_size).enumerate() {
            let mut batch: Vec<&(usize, WindowSample)> = batch.iter().collect();
            batch.sort_by_key(|(idx, _)| *idx);
            let slices: Vec<&[u32]> = batch.iter().map(|(idx, w)| &users[*idx][w.range()]).collect();
            let (loss, positions) = batch_gradient_with(&params, &slices, &mut grads, &mut bufs);
            let non_finite = |what| TrainError::NonFinite {
                what,
                epoch,
                batch: batch_no,
                first_user: batch.first().map_or(0, |(i, _)| sorted[*i].user_id()),
                last_user: batch.last().map_or(0, |(i, _)| sorted[*i].user_id()),
            };
            if !loss.is_finite() {
                return Err(non_finite("loss"));
            }
            optimizer_step(&mut params, &grads, &mut state, &config.adam).map_err(|_| non_finite("gradient"))?;
            epoch_loss += loss;
            epoch_positions += positions;
            for (idx, w) in &batch {
                tracker.observe(*idx, event_offsets[*idx], w.range());
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            policy: policy.label(),
            mean_loss: if epoch_positions > 0 {
                epoch_loss / epoch_positions as f64
            } else {
                0.0
            },
            distinct_items: tracker.count,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch} ({}) loss {:.5} distinct {}",
            policy.label(),
            log.epochs[epoch].mean_loss,
            tracker.count
        );
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CatalogSpec, GeneratorConfig, LengthDistribution};

    fn scalar_params(theta: f64) -> ModelParams {
        ModelParams {
            num_items: 1,
            dim: 0,
            embeddings: vec![],
            bias: vec![theta],
            decay_logit: 0.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = init_params(
            &ModelConfig {
                num_items: 4,
                dim: 2,
                decay_init: 0.3,
                init_scale: 0.5,
            },
            1,
        )
        .unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = Gradients::zeros_like(&p);
        optimizer_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_adam_step_is_minus_lr() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.bias[0] = 1.0;
        let hyper = AdamHyper {
            learning_rate: 0.1,
            ..AdamHyper::default()
        };
        optimizer_step(&mut p, &g, &mut st, &hyper).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.bias[0] - want).abs() < 1e-15, "{}", p.bias[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.bias[0] = f64::NAN;
        assert!(optimizer_step(&mut p, &g, &mut st, &AdamHyper::default()).is_err());
        assert_eq!(st.step, 0);
    }

    fn small_corpus() -> Vec<UserHistory> {
        let cfg = GeneratorConfig {
            catalog: CatalogSpec {
                num_items: 50,
                num_topics: 5,
                zipf_exponent: 1.1,
            },
            num_users: 100,
            history_length: LengthDistribution {
                mean: 40.0,
                std_dev: 15.0,
            },
            pivot_fraction: 0.7,
            dirichlet_alpha: 0.2,
            recent_rank_shift: 0,
            seed: 5,
        };
        generate_corpus(&cfg).unwrap().0
    }

    fn small_train(fixed: usize) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            fixed_epochs: fixed,
            horizon: Horizon::Unbounded,
            window: 10,
            batch_size: 16,
            adam: AdamHyper {
                learning_rate: 0.02,
                ..AdamHyper::default()
            },
            dim: 4,
            decay_init: 0.0,
            init_scale: 0.1,
            seed: 1,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let corpus = small_corpus();
        let mut cfg = small_train(0);
        cfg.epochs = 0;
        let (params, log) = train(&corpus, 50, &cfg).unwrap();
        assert_eq!(params, init_params(&cfg.model_config(50), cfg.init_seed()).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn loss_decreases_on_small_corpus() {
        let corpus = small_corpus();
        let (_, log) = train(&corpus, 50, &small_train(5)).unwrap();
        assert_eq!(log.epochs.len(), 5);
        assert!(log.epochs.iter().all(|e| e.mean_loss.is_finite()));
        assert!(log.epochs[4].mean_loss < log.epochs[0].mean_loss, "{log}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let corpus = small_corpus();
        let cfg = small_train(2);
        let (a, _) = train(&corpus, 50, &cfg).unwrap();
        let (b, _) = train(&corpus, 50, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let corpus = small_corpus();
        let cfg = small_train(1);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&corpus, 50, &cfg).unwrap().0)
        };
        assert_eq!(run(1).to_bytes(), run(3).to_bytes());
    }

    #[test]
    fn observer_sees_plan_windows() {
        let corpus = small_corpus();
        let mut cfg = small_train(2);
        cfg.horizon = Horizon::Bounded(20);
        let plan = cfg.plan().unwrap();
        let lens: std::collections::HashMap<u32, usize> =
            corpus.iter().map(|h| (h.user_id(), h.len())).collect();
        let mut seen = 0;
        train_observed(&corpus, 50, &cfg, |epoch, w| {
            let len = lens[&w.user_id];
            seen += 1;
            match plan.epochs[epoch] {
                crate::windowing::EpochPolicy::FixedLatest => {
                    assert_eq!(*w, crate::windowing::truncate_latest(w.user_id, len, 10));
                }
                crate::windowing::EpochPolicy::Sliding { .. } => {
                    assert!(w.start >= len.saturating_sub(20));
                    assert_eq!(w.len(), len.min(10));
                }
            }
        })
        .unwrap();
        assert_eq!(seen, 5 * corpus.len());
    }

    #[test]
    fn cumulative_pairs_never_decrease_and_sliding_covers_more() {
        let corpus = small_corpus();
        let (_, control) = train(&corpus, 50, &small_train(5)).unwrap();
        let (_, sliding) = train(&corpus, 50, &small_train(0)).unwrap();
        for log in [&control, &sliding] {
            assert!(log.epochs.windows(2).all(|w| w[0].distinct_items <= w[1].distinct_items));
        }
        assert!(sliding.epochs[4].distinct_items >= control.epochs[4].distinct_items);
    }

    #[test]
    fn config_errors() {
        let corpus = small_corpus();
        let mut cfg = small_train(6);
        assert!(matches!(train(&corpus, 50, &cfg), Err(TrainError::Config(_))));
        cfg = small_train(0);
        cfg.window = 1;
        assert!(train(&corpus, 50, &cfg).is_err());
        assert!(matches!(train(&[], 50, &small_train(0)), Err(TrainError::Config(_))));
    }

    #[test]
    fn train_log_csv_header() {
        let corpus = small_corpus();
        let (_, log) = train(&corpus, 50, &small_train(5)).unwrap();
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("epoch,policy,mean_loss,distinct_items,seconds\n0,fixed_latest,"));
        assert_eq!(text.lines().count(), 6);
    }
}
