//! Next-item and item-embedding metrics, and relative comparison tables.
//!
//! Every target `targets[j]` of an [`EvalSequence`] is scored from the
//! latest `window` events of `context ++ targets[..j]`. Ranks are taken over
//! the full catalog with ties broken by ascending item id.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EvalSequence, SimilaritySets, TestSuite};
use crate::model::{self, ModelError, ModelParams, ScoreBuffers, Scorer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set {0:?} has no targets")]
    EmptySet(String),
    #[error("evaluation set {split:?}: {source}")]
    Split {
        split: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("sequence for user {0} has an empty context")]
    EmptyContext(u32),
    #[error("no query item has a non-empty similarity set")]
    NoQueries,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("similarity sets cover {sets} items but the model has {model}")]
    CatalogMismatch { sets: usize, model: usize },
    #[error("cannot compare reports: {0}")]
    Compare(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-target log-likelihood and rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScore {
    pub log_prob: f64,
    pub rank: usize,
}

// Targets scored per kernel call; contexts of consecutive sequences share a
// block so short sequences do not pay for padding.
const SCORE_BLOCK: usize = 64;

/// Scores every target in `seqs`, in order.
pub fn score_targets(
    params: &ModelParams,
    seqs: &[EvalSequence],
    window: usize,
) -> Result<Vec<TargetScore>, EvalError> {
    assert!(window >= 1, "window must be positive");
    let scorer = Scorer::new(params);
    let mut block = Block::default();
    let mut out = Vec::new();
    for seq in seqs {
        if seq.context.is_empty() {
            return Err(EvalError::EmptyContext(seq.user_id));
        }
        for &y in &seq.targets {
            if y as usize >= params.num_items {
                return Err(ModelError::ItemOutOfRange {
                    item: y,
                    num_items: params.num_items,
                }
                .into());
            }
        }
        let full: Vec<u32> = seq.context.iter().chain(&seq.targets).copied().collect();
        let base = seq.context.len();
        for (j, &y) in seq.targets.iter().enumerate() {
            let pos = base + j;
            block.ctx.extend(model::context_vector(params, &full[pos.saturating_sub(window)..pos])?);
            block.targets.push(y);
            if block.targets.len() == SCORE_BLOCK {
                block.flush(&scorer, &mut out);
            }
        }
    }
    block.flush(&scorer, &mut out);
    Ok(out)
}

#[derive(Default)]
struct Block {
    ctx: Vec<f64>,
    targets: Vec<u32>,
    buf: ScoreBuffers,
    ahead: Vec<usize>,
}

impl Block {
    fn flush(&mut self, scorer: &Scorer, out: &mut Vec<TargetScore>) {
        let p = self.targets.len();
        if p == 0 {
            return;
        }
        let pp = scorer.scores(&self.ctx, p, &mut self.buf);
        let z = &self.buf.logits;
        let ys = &self.targets[..];
        let target_logit: Vec<f64> = ys.iter().enumerate().map(|(j, &y)| z[y as usize * pp + j]).collect();
        self.ahead.clear();
        self.ahead.resize(p, 0);
        for (i, row) in z.chunks_exact(pp).enumerate() {
            let i = i as u32;
            for ((a, &v), (&tv, &y)) in self.ahead.iter_mut().zip(row).zip(target_logit.iter().zip(ys)) {
                *a += ((v > tv) | ((v == tv) & (i < y))) as usize;
            }
        }
        for j in 0..p {
            out.push(TargetScore {
                log_prob: target_logit[j] - self.buf.shift[j] - self.buf.sum[j].ln(),
                rank: self.ahead[j] + 1,
            });
        }
        self.ctx.clear();
        self.targets.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub perplexity: f64,
    pub mrr: f64,
    pub targets: usize,
}

fn summarize(scores: &[TargetScore]) -> Option<SplitMetrics> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let nll: f64 = scores.iter().map(|s| -s.log_prob).sum::<f64>() / n;
    let rr: f64 = scores.iter().map(|s| 1.0 / s.rank as f64).sum::<f64>() / n;
    Some(SplitMetrics {
        perplexity: nll.exp(),
        mrr: rr,
        targets: scores.len(),
    })
}

fn split_metrics(
    params: &ModelParams,
    seqs: &[EvalSequence],
    window: usize,
    name: &str,
) -> Result<SplitMetrics, EvalError> {
    let scores = score_targets(params, seqs, window)?;
    summarize(&scores).ok_or_else(|| EvalError::EmptySet(name.to_string()))
}

/// `exp` of the mean negative log-likelihood over all targets.
pub fn perplexity(params: &ModelParams, seqs: &[EvalSequence], window: usize) -> Result<f64, EvalError> {
    Ok(split_metrics(params, seqs, window, "sequences")?.perplexity)
}

/// Mean reciprocal rank of the targets over the full catalog.
pub fn mrr(params: &ModelParams, seqs: &[EvalSequence], window: usize) -> Result<f64, EvalError> {
    Ok(split_metrics(params, seqs, window, "sequences")?.mrr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetrics {
    pub k: usize,
    pub map_at_k: f64,
    pub recall_at_k: f64,
    pub queries: usize,
    /// Items whose embedding row has zero norm; they rank after every other item.
    pub zero_norm_items: Vec<u32>,
}

/// Cosine-neighbour retrieval quality of the embedding table against the
/// similarity sets. AP@k is normalized by `min(|sim(q)|, k)`.
pub fn embedding_metrics(
    params: &ModelParams,
    sims: &SimilaritySets,
    k: usize,
) -> Result<EmbeddingMetrics, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let (m, d) = (params.num_items, params.dim);
    if sims.num_items() != m {
        return Err(EvalError::CatalogMismatch {
            sets: sims.num_items(),
            model: m,
        });
    }
    let norms: Vec<f64> = params
        .embeddings
        .chunks_exact(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_norm_items: Vec<u32> = (0..m as u32).filter(|&i| norms[i as usize] == 0.0).collect();

    let mut ranked = Vec::with_capacity(k);
    let mut candidates: Vec<(u32, Option<f64>)> = Vec::with_capacity(m);
    let (mut ap_sum, mut recall_sum, mut queries) = (0.0, 0.0, 0usize);
    for (q, sim) in sims.iter() {
        if sim.is_empty() {
            continue;
        }
        queries += 1;
        let eq = params.embedding(q);
        let nq = norms[q as usize];
        candidates.clear();
        candidates.extend((0..m as u32).filter(|&i| i != q).map(|i| {
            let ni = norms[i as usize];
            if nq == 0.0 || ni == 0.0 {
                return (i, None);
            }
            let dot: f64 = eq.iter().zip(params.embedding(i)).map(|(a, b)| a * b).sum();
            // + 0.0 folds -0.0 into 0.0 so exact ties compare equal.
            (i, Some(dot / (nq * ni) + 0.0))
        }));
        let top = k.min(candidates.len());
        if top < candidates.len() {
            candidates.select_nth_unstable_by(top - 1, neighbour_order);
        }
        candidates[..top].sort_by(neighbour_order);

        ranked.clear();
        ranked.extend(candidates[..top].iter().map(|c| c.0));
        let (ap, recall) = average_precision_at_k(&ranked, sim, k);
        ap_sum += ap;
        recall_sum += recall;
    }
    if queries == 0 {
        return Err(EvalError::NoQueries);
    }
    Ok(EmbeddingMetrics {
        k,
        map_at_k: ap_sum / queries as f64,
        recall_at_k: recall_sum / queries as f64,
        queries,
        zero_norm_items,
    })
}

/// AP@k (normalized by `min(|relevant|, k)`) and recall@k of a ranking
/// against a sorted, non-empty relevant set. Only the first `k` ranked items count.
pub fn average_precision_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> (f64, f64) {
    let (mut hits, mut precision_sum) = (0usize, 0.0);
    for (r, item) in ranked.iter().take(k).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            precision_sum += hits as f64 / (r + 1) as f64;
        }
    }
    (
        precision_sum / relevant.len().min(k) as f64,
        hits as f64 / relevant.len() as f64,
    )
}

fn neighbour_order(a: &(u32, Option<f64>), b: &(u32, Option<f64>)) -> std::cmp::Ordering {
    match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    }
}

/// Provenance carried by every report; `compare` requires matching
/// `corpus_hash` and `window` across reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub recent: SplitMetrics,
    pub old: SplitMetrics,
    pub future: SplitMetrics,
    /// All three splits pooled target-by-target.
    pub combined: SplitMetrics,
    pub embedding: EmbeddingMetrics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(
    params: &ModelParams,
    suite: &TestSuite,
    sims: &SimilaritySets,
    k: usize,
    meta: ReportMeta,
) -> Result<EvalReport, EvalError> {
    let window = meta.window;
    let mut pooled = Vec::new();
    let mut per_split = Vec::with_capacity(3);
    for (name, seqs) in suite.splits() {
        let scores = score_targets(params, seqs, window).map_err(|e| EvalError::Split {
            split: name.to_string(),
            source: Box::new(e),
        })?;
        let metrics = summarize(&scores).ok_or_else(|| EvalError::EmptySet(name.to_string()))?;
        per_split.push(metrics);
        pooled.extend(scores);
    }
    let combined = summarize(&pooled).expect("non-empty splits");
    let embedding = embedding_metrics(params, sims, k)?;
    Ok(EvalReport {
        meta,
        recent: per_split[0],
        old: per_split[1],
        future: per_split[2],
        combined,
        embedding,
    })
}

pub const TABLE_COLUMNS: [&str; 4] = ["Perplexity", "MRR", "mAP", "Recall"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    /// Relative deltas vs. control in `TABLE_COLUMNS` order; `None` for control.
    pub deltas: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Per-split perplexity and MRR deltas for treatments.
    pub splits: Vec<(String, String, [f64; 2])>,
    pub corpus_hash: String,
}

fn headline(r: &EvalReport) -> [f64; 4] {
    [
        r.combined.perplexity,
        r.combined.mrr,
        r.embedding.map_at_k,
        r.embedding.recall_at_k,
    ]
}

fn relative(treatment: f64, control: f64) -> f64 {
    (treatment - control) / control
}

/// Signed percent with two decimals, e.g. `+8.82%`.
pub fn format_delta(delta: f64) -> String {
    format!("{:+.2}%", delta * 100.0 + 0.0)
}

pub fn compare(control: &EvalReport, treatments: &[EvalReport]) -> Result<ComparisonTable, EvalError> {
    let mut names = vec![control.meta.model.as_str()];
    for t in treatments {
        if t.meta.corpus_hash != control.meta.corpus_hash {
            return Err(EvalError::Compare(format!(
                "{} was evaluated on corpus {} but control on {}",
                t.meta.model, t.meta.corpus_hash, control.meta.corpus_hash
            )));
        }
        if t.meta.window != control.meta.window {
            return Err(EvalError::Compare(format!(
                "{} uses window {} but control uses {}",
                t.meta.model, t.meta.window, control.meta.window
            )));
        }
        if t.embedding.k != control.embedding.k {
            return Err(EvalError::Compare(format!(
                "{} uses k={} but control uses k={}",
                t.meta.model, t.embedding.k, control.embedding.k
            )));
        }
        if names.contains(&t.meta.model.as_str()) {
            return Err(EvalError::Compare(format!("duplicate model name {}", t.meta.model)));
        }
        names.push(&t.meta.model);
    }
    let base = headline(control);
    let mut rows = vec![ComparisonRow {
        model: control.meta.model.clone(),
        deltas: None,
    }];
    let mut splits = Vec::new();
    for t in treatments {
        let vals = headline(t);
        let mut deltas = [0.0; 4];
        for c in 0..4 {
            deltas[c] = relative(vals[c], base[c]);
        }
        rows.push(ComparisonRow {
            model: t.meta.model.clone(),
            deltas: Some(deltas),
        });
        for (name, tc, cc) in [
            ("recent", &t.recent, &control.recent),
            ("old", &t.old, &control.old),
            ("future", &t.future, &control.future),
        ] {
            splits.push((
                t.meta.model.clone(),
                name.to_string(),
                [relative(tc.perplexity, cc.perplexity), relative(tc.mrr, cc.mrr)],
            ));
        }
    }
    Ok(ComparisonTable {
        rows,
        splits,
        corpus_hash: control.meta.corpus_hash.clone(),
    })
}

impl ComparisonTable {
    fn cells(row: &ComparisonRow) -> Vec<String> {
        match row.deltas {
            None => vec!["-".to_string(); 4],
            Some(d) => d.iter().map(|&v| format_delta(v)).collect(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        writeln!(out, "| Model | {} |", TABLE_COLUMNS.join(" | ")).unwrap();
        writeln!(out, "|---|---|---|---|---|").unwrap();
        for row in &self.rows {
            writeln!(out, "| {} | {} |", row.model, Self::cells(row).join(" | ")).unwrap();
        }
        if !self.splits.is_empty() {
            writeln!(out).unwrap();
            writeln!(out, "| Model | Split | Perplexity | MRR |").unwrap();
            writeln!(out, "|---|---|---|---|").unwrap();
            for (model, split, d) in &self.splits {
                writeln!(out, "| {model} | {split} | {} | {} |", format_delta(d[0]), format_delta(d[1])).unwrap();
            }
        }
        writeln!(out).unwrap();
        writeln!(
            out,
            "Deltas are relative changes vs. the first row: (treatment - control) / control. \
             Perplexity and MRR pool the recent, old and future test sets; mAP and Recall \
             score cosine neighbours of item embeddings. Lower perplexity is better."
        )
        .unwrap();
        writeln!(out, "corpus: {}", self.corpus_hash).unwrap();
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "Model,{}", TABLE_COLUMNS.join(","))?;
        for row in &self.rows {
            writeln!(w, "{},{}", row.model, Self::cells(row).join(","))?;
        }
        Ok(())
    }
}
