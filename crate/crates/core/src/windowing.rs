//! Training window samplers and epoch schedules.
//!
//! A window is a contiguous `[start, end)` slice of a user's training history
//! of length `min(K, L)`. The fixed sampler always takes the latest `K`
//! events; the sliding sampler draws a uniform start among the positions
//! whose window lies fully inside the last `H` events.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserHistory;
use crate::seed;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("epoch {epoch} out of range for a {epochs}-epoch plan")]
    EpochOutOfRange { epoch: usize, epochs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSample {
    pub user_id: u32,
    pub start: usize,
    pub end: usize,
}

impl WindowSample {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// How far back (in events from the end of the training history) a sliding
/// window may start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Horizon {
    Bounded(usize),
    Unbounded,
}

impl Horizon {
    fn reach(self, len: usize) -> usize {
        match self {
            Horizon::Bounded(h) => h.min(len),
            Horizon::Unbounded => len,
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Bounded(h) => write!(f, "{h}"),
            Horizon::Unbounded => f.write_str("unbounded"),
        }
    }
}

// JSON: a number, or null for unbounded. Config files may also spell it "unbounded".
impl Serialize for Horizon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Horizon::Bounded(h) => s.serialize_u64(*h as u64),
            Horizon::Unbounded => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(Horizon::Unbounded),
            Some(Raw::Num(h)) => Ok(Horizon::Bounded(h as usize)),
            Some(Raw::Text(t)) if t == "unbounded" => Ok(Horizon::Unbounded),
            Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!(
                "horizon must be a positive integer or \"unbounded\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpochPolicy {
    FixedLatest,
    Sliding { horizon: Horizon },
}

impl EpochPolicy {
    pub fn label(&self) -> String {
        match self {
            EpochPolicy::FixedLatest => "fixed_latest".to_string(),
            EpochPolicy::Sliding { horizon } => format!("sliding:{horizon}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epochs: Vec<EpochPolicy>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn fixed_count(&self) -> usize {
        self.epochs
            .iter()
            .filter(|p| matches!(p, EpochPolicy::FixedLatest))
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// The latest `k` events, or the whole history when it is shorter.
pub fn truncate_latest(user_id: u32, len: usize, k: usize) -> WindowSample {
    debug_assert!(len >= 1 && k >= 1);
    WindowSample {
        user_id,
        start: len.saturating_sub(k),
        end: len,
    }
}

/// A uniformly placed window of `min(k, len)` events inside the reachable
/// suffix of `min(len, horizon)` events.
pub fn slide_window<R: Rng + ?Sized>(
    user_id: u32,
    len: usize,
    k: usize,
    horizon: Horizon,
    rng: &mut R,
) -> WindowSample {
    debug_assert!(len >= 1 && k >= 1);
    if len <= k {
        return WindowSample {
            user_id,
            start: 0,
            end: len,
        };
    }
    let reach = horizon.reach(len);
    // Horizons shorter than K still admit the latest window.
    let first = len - reach.max(k);
    let last = len - k;
    let start = rng.random_range(first..=last);
    WindowSample {
        user_id,
        start,
        end: start + k,
    }
}

/// `n - x` sliding epochs followed by `x` fixed-latest epochs.
pub fn build_epoch_plan(n: usize, x: usize, horizon: Horizon) -> Result<EpochPlan, WindowError> {
    if x > n {
        return Err(WindowError::Plan(format!(
            "fixed epochs X={x} exceed total epochs N={n}"
        )));
    }
    if horizon == Horizon::Bounded(0) && x < n {
        return Err(WindowError::Plan("sliding horizon must be positive".into()));
    }
    let mut epochs = vec![EpochPolicy::Sliding { horizon }; n - x];
    epochs.extend(std::iter::repeat_n(EpochPolicy::FixedLatest, x));
    Ok(EpochPlan { epochs })
}

/// The window a user trains on in a given epoch. Sliding draws come from a
/// stream keyed by `(seed, user_id, epoch)`.
pub fn sample_for_epoch(
    plan: &EpochPlan,
    epoch: usize,
    user_id: u32,
    len: usize,
    k: usize,
    seed: u64,
) -> Result<WindowSample, WindowError> {
    let policy = plan.epochs.get(epoch).ok_or(WindowError::EpochOutOfRange {
        epoch,
        epochs: plan.len(),
    })?;
    Ok(match *policy {
        EpochPolicy::FixedLatest => truncate_latest(user_id, len, k),
        EpochPolicy::Sliding { horizon } => {
            let mut rng = seed::rng(seed, &[user_id as u64, epoch as u64]);
            slide_window(user_id, len, k, horizon, &mut rng)
        }
    })
}

/// Per-user outcome of running a plan: distinct items seen and positions covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserCoverage {
    pub distinct_items: usize,
    pub covered_positions: usize,
}

pub fn user_coverage(
    items: &[u32],
    user_id: u32,
    plan: &EpochPlan,
    k: usize,
    seed: u64,
) -> UserCoverage {
    let len = items.len();
    let mut covered = vec![false; len];
    for epoch in 0..plan.len() {
        let w = sample_for_epoch(plan, epoch, user_id, len, k, seed).expect("epoch in range");
        covered[w.range()].iter_mut().for_each(|c| *c = true);
    }
    let mut seen: Vec<u32> = items
        .iter()
        .zip(&covered)
        .filter_map(|(&item, &c)| c.then_some(item))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    UserCoverage {
        distinct_items: seen.len(),
        covered_positions: covered.iter().filter(|&&c| c).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub policy: String,
    pub mean_distinct_items: f64,
    pub mean_coverage_fraction: f64,
    pub total_pairs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "policy,mean_distinct_items,mean_coverage_fraction,total_pairs")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.3}",
                r.policy, r.mean_distinct_items, r.mean_coverage_fraction, r.total_pairs
            )?;
        }
        Ok(())
    }

    pub fn row(&self, policy: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

/// Monte-Carlo coverage of each named plan over `trials` derived seeds. Users
/// with empty histories are skipped. Values are averaged over trials; per-user
/// means are over users.
pub fn coverage_stats(
    histories: &[UserHistory],
    plans: &BTreeMap<String, EpochPlan>,
    k: usize,
    seed: u64,
    trials: usize,
) -> CoverageReport {
    assert!(trials >= 1, "coverage needs at least one trial");
    let users: Vec<(u32, Vec<u32>)> = histories
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| (h.user_id(), h.items()))
        .collect();
    let rows = plans
        .iter()
        .map(|(name, plan)| {
            let (mut distinct, mut fraction) = (0.0, 0.0);
            for trial in 0..trials {
                let trial_seed = seed::derive(seed, &[trial as u64]);
                for (user_id, items) in &users {
                    let c = user_coverage(items, *user_id, plan, k, trial_seed);
                    distinct += c.distinct_items as f64;
                    fraction += c.covered_positions as f64 / items.len() as f64;
                }
            }
            let runs = trials as f64;
            let n = users.len().max(1) as f64;
            CoverageRow {
                policy: name.clone(),
                mean_distinct_items: distinct / runs / n,
                mean_coverage_fraction: fraction / runs / n,
                total_pairs: distinct / runs,
            }
        })
        .collect();
    CoverageReport { rows }
}
