//! Synthetic long-history interaction corpus.
//!
//! Each user's history has two regimes. Events before the pivot position
//! `floor(pivot_fraction * L)` draw their topic from a long-term affinity;
//! later events draw from an independent recent affinity. Inside a topic,
//! items follow a Zipf law over their within-topic popularity rank. Topic
//! membership doubles as the ground truth for item similarity.
//!
//! Corpus files are line-delimited: `user_id\titem_id\tevent_code\ttimestamp`,
//! sorted by `(user_id, timestamp)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Gamma, LogNormal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error at line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("invalid history for user {user_id}: {msg}")]
    History { user_id: u32, msg: String },
    #[error("invalid similarity sets: {0}")]
    Similarity(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventType {
    Play,
    Like,
    AddToList,
    OpenDetails,
}

impl EventType {
    pub const ALL: [EventType; 4] = [
        EventType::Play,
        EventType::Like,
        EventType::AddToList,
        EventType::OpenDetails,
    ];

    pub fn code(self) -> u8 {
        match self {
            EventType::Play => 0,
            EventType::Like => 1,
            EventType::AddToList => 2,
            EventType::OpenDetails => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user_id: u32,
    pub item_id: u32,
    pub event: EventType,
    pub timestamp: u64,
}

/// A user's chronologically sorted, non-empty event sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    user_id: u32,
    events: Vec<Interaction>,
}

impl UserHistory {
    pub fn new(user_id: u32, events: Vec<Interaction>) -> Result<Self, CorpusError> {
        let bad = |msg: String| CorpusError::History { user_id, msg };
        if events.is_empty() {
            return Err(bad("history is empty".into()));
        }
        if let Some(e) = events.iter().find(|e| e.user_id != user_id) {
            return Err(bad(format!("event belongs to user {}", e.user_id)));
        }
        if let Some(w) = events.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(bad(format!(
                "timestamps not strictly increasing ({} then {})",
                w[0].timestamp, w[1].timestamp
            )));
        }
        Ok(Self { user_id, events })
    }

    pub fn user_id(&self) -> u32 {
        self.user_id
    }

    pub fn events(&self) -> &[Interaction] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.item_id).collect()
    }

    /// The first `len` events as a new history. `len` must be in `1..=self.len()`.
    pub fn prefix(&self, len: usize) -> UserHistory {
        assert!(len >= 1 && len <= self.events.len());
        UserHistory {
            user_id: self.user_id,
            events: self.events[..len].to_vec(),
        }
    }
}

/// Item catalog layout: item `i` belongs to topic `i % num_topics` and has
/// within-topic popularity rank `i / num_topics` (rank 0 is the head item).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub num_items: usize,
    pub num_topics: usize,
    pub zipf_exponent: f64,
}

impl CatalogSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.num_items == 0 {
            return Err(CorpusError::Config("num_items must be positive".into()));
        }
        if self.num_topics == 0 || self.num_topics > self.num_items {
            return Err(CorpusError::Config(format!(
                "num_topics must be in 1..={} (got {})",
                self.num_items, self.num_topics
            )));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(CorpusError::Config("zipf_exponent must be positive".into()));
        }
        if self.num_items > u32::MAX as usize {
            return Err(CorpusError::Config("num_items exceeds u32 range".into()));
        }
        Ok(())
    }

    pub fn topic_of(&self, item: u32) -> u32 {
        item % self.num_topics as u32
    }

    pub fn popularity_rank(&self, item: u32) -> usize {
        item as usize / self.num_topics
    }

    pub fn topic_size(&self, topic: u32) -> usize {
        let t = topic as usize;
        (self.num_items - t).div_ceil(self.num_topics)
    }

    pub fn item_at(&self, topic: u32, rank: usize) -> u32 {
        topic + (rank * self.num_topics) as u32
    }
}

/// Log-normal history length, parametrized by the mean and standard deviation
/// of the length itself (not of its logarithm). `std_dev = 0` fixes every
/// length at `round(mean)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub mean: f64,
    pub std_dev: f64,
}

impl LengthDistribution {
    fn sampler(&self) -> Result<Option<LogNormal<f64>>, CorpusError> {
        if !(self.mean >= 1.0) || !(self.std_dev >= 0.0) {
            return Err(CorpusError::Config(format!(
                "history length needs mean >= 1 and std_dev >= 0 (got {}, {})",
                self.mean, self.std_dev
            )));
        }
        if self.std_dev == 0.0 {
            return Ok(None);
        }
        let var_log = (1.0 + (self.std_dev / self.mean).powi(2)).ln();
        let mu = self.mean.ln() - var_log / 2.0;
        LogNormal::new(mu, var_log.sqrt())
            .map(Some)
            .map_err(|e| CorpusError::Config(format!("history length: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub catalog: CatalogSpec,
    pub num_users: usize,
    pub history_length: LengthDistribution,
    /// Fraction of each history after which interests switch to the recent affinity.
    pub pivot_fraction: f64,
    pub dirichlet_alpha: f64,
    /// Rotation applied to within-topic popularity ranks after the pivot, so
    /// that currently popular items differ from historically popular ones.
    #[serde(default)]
    pub recent_rank_shift: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.catalog.validate()?;
        if self.num_users == 0 {
            return Err(CorpusError::Config("num_users must be positive".into()));
        }
        if self.num_users > u32::MAX as usize {
            return Err(CorpusError::Config("num_users exceeds u32 range".into()));
        }
        if !(0.0..=1.0).contains(&self.pivot_fraction) {
            return Err(CorpusError::Config(format!(
                "pivot_fraction must be in [0, 1] (got {})",
                self.pivot_fraction
            )));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(CorpusError::Config("dirichlet_alpha must be positive".into()));
        }
        self.history_length.sampler()?;
        Ok(())
    }
}

/// Ground-truth similar items per item: same topic, self excluded, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilaritySets {
    sets: Vec<Vec<u32>>,
}

impl SimilaritySets {
    pub fn from_catalog(catalog: &CatalogSpec) -> Self {
        let t = catalog.num_topics as u32;
        let sets = (0..catalog.num_items as u32)
            .map(|item| {
                let topic = item % t;
                (0..catalog.topic_size(topic))
                    .map(|r| catalog.item_at(topic, r))
                    .filter(|&j| j != item)
                    .collect()
            })
            .collect();
        Self { sets }
    }

    /// Builds from explicit sets, checking symmetry and self-exclusion.
    pub fn from_sets(mut sets: Vec<Vec<u32>>) -> Result<Self, CorpusError> {
        let n = sets.len();
        for (item, set) in sets.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.binary_search(&(item as u32)).is_ok() {
                return Err(CorpusError::Similarity(format!("item {item} lists itself")));
            }
            if let Some(&j) = set.iter().find(|&&j| j as usize >= n) {
                return Err(CorpusError::Similarity(format!("item {item} lists unknown item {j}")));
            }
        }
        for (item, set) in sets.iter().enumerate() {
            for &j in set {
                if sets[j as usize].binary_search(&(item as u32)).is_err() {
                    return Err(CorpusError::Similarity(format!(
                        "asymmetric pair: {item} -> {j} without {j} -> {item}"
                    )));
                }
            }
        }
        Ok(Self { sets })
    }

    pub fn num_items(&self) -> usize {
        self.sets.len()
    }

    pub fn similar(&self, item: u32) -> &[u32] {
        &self.sets[item as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.sets.iter().enumerate().map(|(i, s)| (i as u32, s.as_slice()))
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<u32, &Vec<u32>> =
            self.sets.iter().enumerate().map(|(i, s)| (i as u32, s)).collect();
        serde_json::to_string(&map).expect("map of vectors serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let map: BTreeMap<u32, Vec<u32>> = serde_json::from_str(text)?;
        let n = map.len();
        let mut sets = Vec::with_capacity(n);
        for (expected, (item, set)) in map.into_iter().enumerate() {
            if item as usize != expected {
                return Err(CorpusError::Similarity(format!("missing entry for item {expected}")));
            }
            sets.push(set);
        }
        Self::from_sets(sets)
    }
}

/// Generates the corpus. Each user draws from its own stream keyed by
/// `(seed, user_id)`, so the output does not depend on thread scheduling.
pub fn generate_corpus(
    config: &GeneratorConfig,
) -> Result<(Vec<UserHistory>, SimilaritySets), CorpusError> {
    config.validate()?;
    let catalog = &config.catalog;
    let lengths = config.history_length.sampler()?;
    let gamma = Gamma::new(config.dirichlet_alpha, 1.0)
        .map_err(|e| CorpusError::Config(format!("dirichlet_alpha: {e}")))?;
    let zipfs: Vec<Zipf<f64>> = (0..catalog.num_topics as u32)
        .map(|t| Zipf::new(catalog.topic_size(t) as f64, catalog.zipf_exponent))
        .collect::<Result<_, _>>()
        .map_err(|e| CorpusError::Config(format!("zipf: {e}")))?;
    let event_dist = Uniform::new(0u8, 4).expect("non-empty range");

    let histories = (0..config.num_users as u32)
        .into_par_iter()
        .map(|user_id| {
            let mut rng = seed::rng(config.seed, &[user_id as u64]);
            let len = match &lengths {
                Some(d) => d.sample(&mut rng).round().max(1.0) as usize,
                None => config.history_length.mean.round().max(1.0) as usize,
            };
            let long_term = draw_affinity(&gamma, catalog.num_topics, &mut rng);
            let recent = draw_affinity(&gamma, catalog.num_topics, &mut rng);
            let pivot = (config.pivot_fraction * len as f64).floor() as usize;
            let events = (0..len)
                .map(|pos| {
                    let (affinity, shift) = if pos < pivot {
                        (&long_term, 0)
                    } else {
                        (&recent, config.recent_rank_shift)
                    };
                    let topic = affinity.sample(&mut rng) as u32;
                    let size = catalog.topic_size(topic);
                    let rank = zipfs[topic as usize].sample(&mut rng) as usize - 1;
                    let item = catalog.item_at(topic, (rank + shift) % size);
                    let event = EventType::from_code(event_dist.sample(&mut rng)).expect("code < 4");
                    Interaction {
                        user_id,
                        item_id: item,
                        event,
                        timestamp: pos as u64,
                    }
                })
                .collect();
            UserHistory { user_id, events }
        })
        .collect();
    Ok((histories, SimilaritySets::from_catalog(catalog)))
}

fn draw_affinity<R: Rng>(gamma: &Gamma<f64>, topics: usize, rng: &mut R) -> WeightedIndex<f64> {
    let weights: Vec<f64> = (0..topics).map(|_| gamma.sample(rng)).collect();
    match WeightedIndex::new(&weights) {
        Ok(w) => w,
        // Every gamma draw underflowed (tiny alpha): collapse onto one topic.
        Err(_) => {
            let pick = rng.random_range(0..topics);
            let onehot: Vec<f64> = (0..topics).map(|t| if t == pick { 1.0 } else { 0.0 }).collect();
            WeightedIndex::new(&onehot).expect("one positive weight")
        }
    }
}

pub fn write_corpus_to<W: Write>(histories: &[UserHistory], writer: W) -> io::Result<()> {
    let mut w = BufWriter::new(writer);
    let mut order: Vec<&UserHistory> = histories.iter().collect();
    order.sort_by_key(|h| h.user_id);
    for h in order {
        for e in &h.events {
            writeln!(w, "{}\t{}\t{}\t{}", e.user_id, e.item_id, e.event.code(), e.timestamp)?;
        }
    }
    w.flush()
}

pub fn write_corpus(histories: &[UserHistory], path: &Path) -> Result<(), CorpusError> {
    write_corpus_to(histories, File::create(path)?)?;
    Ok(())
}

pub fn read_corpus_from<R: Read>(reader: R) -> Result<Vec<UserHistory>, CorpusError> {
    let mut out: Vec<UserHistory> = Vec::new();
    let mut current: Option<(u32, Vec<Interaction>)> = None;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let e = parse_line(&line, line_no)?;
        match &mut current {
            Some((user, events)) if *user == e.user_id => {
                let last = events.last().expect("non-empty").timestamp;
                if e.timestamp <= last {
                    return Err(CorpusError::Validation {
                        line: line_no,
                        msg: format!(
                            "timestamp {} does not increase past {} for user {}",
                            e.timestamp, last, e.user_id
                        ),
                    });
                }
                events.push(e);
            }
            Some((user, _)) if e.user_id < *user => {
                return Err(CorpusError::Validation {
                    line: line_no,
                    msg: format!("user {} appears after user {}; file must be sorted", e.user_id, user),
                });
            }
            _ => {
                if let Some((user, events)) = current.take() {
                    out.push(UserHistory { user_id: user, events });
                }
                current = Some((e.user_id, vec![e]));
            }
        }
    }
    if let Some((user, events)) = current {
        out.push(UserHistory { user_id: user, events });
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<UserHistory>, CorpusError> {
    read_corpus_from(File::open(path)?)
}

fn parse_line(line: &str, line_no: usize) -> Result<Interaction, CorpusError> {
    let parse_err = |msg: String| CorpusError::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
    }
    let user_id = fields[0]
        .parse::<u32>()
        .map_err(|e| parse_err(format!("user_id {:?}: {e}", fields[0])))?;
    let item_id = fields[1]
        .parse::<u32>()
        .map_err(|e| parse_err(format!("item_id {:?}: {e}", fields[1])))?;
    let code = fields[2]
        .parse::<u8>()
        .map_err(|e| parse_err(format!("event_code {:?}: {e}", fields[2])))?;
    let event = EventType::from_code(code).ok_or_else(|| parse_err(format!("unknown event code {code}")))?;
    let timestamp = fields[3]
        .parse::<u64>()
        .map_err(|e| parse_err(format!("timestamp {:?}: {e}", fields[3])))?;
    Ok(Interaction {
        user_id,
        item_id,
        event,
        timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutConfig {
    pub future_len: usize,
    pub recent_len: usize,
    pub old_len: usize,
    /// Longest context stored with each evaluation sequence.
    pub context_len: usize,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            future_len: 10,
            recent_len: 20,
            old_len: 20,
            context_len: 50,
        }
    }
}

/// One evaluation case. `targets[j]` is predicted from `context ++ targets[..j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSequence {
    pub user_id: u32,
    pub context: Vec<u32>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TestSuite {
    pub recent: Vec<EvalSequence>,
    pub old: Vec<EvalSequence>,
    pub future: Vec<EvalSequence>,
}

impl TestSuite {
    pub fn splits(&self) -> [(&'static str, &[EvalSequence]); 3] {
        [("recent", &self.recent), ("old", &self.old), ("future", &self.future)]
    }
}

/// Splits each history into a training prefix and the three evaluation sets.
///
/// Users with `L <= future_len + recent_len` contribute no recent or future
/// cases and keep their whole history for training. Old spans start at a
/// uniform position in `1..` so their context is never empty, and lie inside
/// both the pre-pivot prefix and the training prefix.
pub fn build_test_suite(
    histories: &[UserHistory],
    holdout: &HoldoutConfig,
    pivot_fraction: f64,
    seed: u64,
) -> Result<(Vec<UserHistory>, TestSuite), CorpusError> {
    if holdout.future_len == 0 {
        return Err(CorpusError::Config(
            "future_len must be at least 1 or the future set would leak into training".into(),
        ));
    }
    if holdout.context_len == 0 {
        return Err(CorpusError::Config("context_len must be positive".into()));
    }
    if !(0.0..=1.0).contains(&pivot_fraction) {
        return Err(CorpusError::Config("pivot_fraction must be in [0, 1]".into()));
    }
    let (f, r, o, c) = (holdout.future_len, holdout.recent_len, holdout.old_len, holdout.context_len);
    let mut train = Vec::with_capacity(histories.len());
    let mut suite = TestSuite::default();

    for h in histories {
        let items = h.items();
        let len = items.len();
        let user_id = h.user_id;
        let case = |start: usize, end: usize| EvalSequence {
            user_id,
            context: items[start.saturating_sub(c)..start].to_vec(),
            targets: items[start..end].to_vec(),
        };
        let train_len = if len > f + r {
            suite.future.push(case(len - f, len));
            if r > 0 {
                suite.recent.push(case(len - f - r, len - f));
            }
            len - f
        } else {
            len
        };
        let limit = ((pivot_fraction * len as f64).floor() as usize).min(train_len);
        if o > 0 && limit > o {
            let mut rng = seed::rng(seed, &[user_id as u64]);
            let start = rng.random_range(1..=limit - o);
            suite.old.push(case(start, start + o));
        }
        train.push(h.prefix(train_len));
    }
    Ok((train, suite))
}
