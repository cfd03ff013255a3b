//! Brute-force reference implementations shared by the integration tests.
//! Everything here follows the definitions directly: explicit powers for the
//! decay weights, full sorts for ranks, no shared code with the library.

#![allow(dead_code)]

use rand::Rng;
use slidewin::corpus::{EvalSequence, SimilaritySets};
use slidewin::model::{backward, ModelParams};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sum_j lambda^(n-1-j) E[x_j] / sum_j lambda^(n-1-j)`.
pub fn context(params: &ModelParams, items: &[u32]) -> Vec<f64> {
    let d = params.dim;
    let lambda = sigmoid(params.decay_logit);
    let n = items.len();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (j, &x) in items.iter().enumerate() {
        let w = lambda.powi((n - 1 - j) as i32);
        den += w;
        for k in 0..d {
            num[k] += w * params.embeddings[x as usize * d + k];
        }
    }
    num.iter().map(|v| v / den).collect()
}

pub fn logits(params: &ModelParams, ctx: &[f64]) -> Vec<f64> {
    let d = params.dim;
    (0..params.num_items)
        .map(|i| {
            let dot: f64 = (0..d).map(|k| params.embeddings[i * d + k] * ctx[k]).sum();
            dot + params.bias[i]
        })
        .collect()
}

pub fn log_prob(logits: &[f64], y: u32) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[y as usize] - max - z.ln()
}

/// 1-based rank of `y` after a full sort by descending score, ties by id.
pub fn rank(scores: &[f64], y: u32) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == y as usize).unwrap() + 1
}

/// `(perplexity, mrr)` over every target of `seqs`.
pub fn sequence_metrics(params: &ModelParams, seqs: &[EvalSequence], window: usize) -> (f64, f64) {
    let (mut nll, mut rr, mut n) = (0.0, 0.0, 0usize);
    for s in seqs {
        for (j, &y) in s.targets.iter().enumerate() {
            let mut full = s.context.clone();
            full.extend_from_slice(&s.targets[..j]);
            let ctx_items = &full[full.len().saturating_sub(window)..];
            let l = logits(params, &context(params, ctx_items));
            nll -= log_prob(&l, y);
            rr += 1.0 / rank(&l, y) as f64;
            n += 1;
        }
    }
    ((nll / n as f64).exp(), rr / n as f64)
}

/// `(mAP@k, recall@k)` from cosine neighbours, zero-norm rows last.
pub fn embedding_metrics(params: &ModelParams, sims: &SimilaritySets, k: usize) -> (f64, f64) {
    let (m, d) = (params.num_items, params.dim);
    let row = |i: usize| &params.embeddings[i * d..(i + 1) * d];
    let norm = |i: usize| row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let (mut ap_sum, mut rec_sum, mut queries) = (0.0, 0.0, 0usize);
    for q in 0..m {
        let sim = sims.similar(q as u32);
        if sim.is_empty() {
            continue;
        }
        queries += 1;
        let mut cands: Vec<(usize, Option<f64>)> = (0..m)
            .filter(|&i| i != q)
            .map(|i| {
                if norm(q) == 0.0 || norm(i) == 0.0 {
                    (i, None)
                } else {
                    let dot: f64 = row(q).iter().zip(row(i)).map(|(a, b)| a * b).sum();
                    (i, Some(dot / (norm(q) * norm(i))))
                }
            })
            .collect();
        cands.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap().then(a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
        let (mut hits, mut prec) = (0usize, 0.0);
        for (r, (item, _)) in cands.iter().take(k).enumerate() {
            if sim.contains(&(*item as u32)) {
                hits += 1;
                prec += hits as f64 / (r + 1) as f64;
            }
        }
        ap_sum += prec / sim.len().min(k) as f64;
        rec_sum += hits as f64 / sim.len() as f64;
    }
    (ap_sum / queries as f64, rec_sum / queries as f64)
}

pub fn random_params<R: Rng>(rng: &mut R, m: usize, d: usize, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(m, d);
    p.embeddings.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p.decay_logit = rng.random_range(-2.0..2.0);
    p
}

/// Random symmetric, self-exclusive similarity sets.
pub fn random_sims<R: Rng>(rng: &mut R, m: usize, density: f64) -> SimilaritySets {
    let mut sets = vec![Vec::new(); m];
    for a in 0..m {
        for b in a + 1..m {
            if rng.random_bool(density) {
                sets[a].push(b as u32);
                sets[b].push(a as u32);
            }
        }
    }
    SimilaritySets::from_sets(sets).expect("symmetric by construction")
}

/// Mean windowed loss evaluated from scratch, as the gradients' target.
pub fn mean_loss(params: &ModelParams, window: &[u32]) -> f64 {
    let n = window.len() - 1;
    (0..n)
        .map(|t| {
            let l = logits(params, &context(params, &window[..=t]));
            -log_prob(&l, window[t + 1])
        })
        .sum::<f64>()
        / n as f64
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between `backward` and central differences of
/// [`mean_loss`] over every coordinate. Magnitudes below `floor` count as `floor`.
pub fn worst_fd_error(params: &ModelParams, window: &[u32], step: f64, floor: f64) -> f64 {
    let (g, _) = backward(params, window).expect("valid window");
    let central = |f: &dyn Fn(&mut ModelParams, f64)| {
        let (mut plus, mut minus) = (params.clone(), params.clone());
        f(&mut plus, step);
        f(&mut minus, -step);
        (mean_loss(&plus, window) - mean_loss(&minus, window)) / (2.0 * step)
    };
    let mut worst: f64 = 0.0;
    for i in 0..params.embeddings.len() {
        let fd = central(&|p: &mut ModelParams, h| p.embeddings[i] += h);
        worst = worst.max(rel_err(g.embeddings[i], fd, floor));
    }
    for i in 0..params.bias.len() {
        let fd = central(&|p: &mut ModelParams, h| p.bias[i] += h);
        worst = worst.max(rel_err(g.bias[i], fd, floor));
    }
    let fd = central(&|p: &mut ModelParams, h| p.decay_logit += h);
    worst.max(rel_err(g.decay_logit, fd, floor))
}

pub fn same_bits(a: &ModelParams, b: &ModelParams) -> bool {
    let eq = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    a.num_items == b.num_items
        && a.dim == b.dim
        && eq(&a.embeddings, &b.embeddings)
        && eq(&a.bias, &b.bias)
        && a.decay_logit.to_bits() == b.decay_logit.to_bits()
}
