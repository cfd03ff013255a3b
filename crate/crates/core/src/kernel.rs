// Blocked dense kernels behind the model's window pass and evaluation.
//
// Positions and embedding dimensions are padded to multiples of `LANES` so
// every inner loop runs over whole vectors. Padding entries are zeros and
// padded positions get a zero softmax weight, so results do not depend on the
// padding. Each logit is `bias + sum_k e_k * c_k` fused-accumulated in
// ascending `k` however items are tiled, matching `model::score_items`.
//
// The softmax is shifted per position by an upper bound on that position's
// logits (max bias plus max row norm times the context norm) instead of the
// exact maximum, so exponentials can be taken while a tile is still in
// registers. If a shifted sum ever gets close to underflow the caller
// recomputes with the exact maximum.

use crate::simd::{LANES, V8};

// Items per register tile.
const GROUP: usize = 8;

/// Shifted sums below this trigger the exact-maximum fallback.
pub(crate) const MIN_SUM: f64 = 1e-200;

pub(crate) fn round_up(n: usize) -> usize {
    n.div_ceil(LANES) * LANES
}

/// Embeddings padded to `dp` columns (item-major) with the bound constants.
pub(crate) struct Panel<'a> {
    pub(crate) num_items: usize,
    pub(crate) dim: usize,
    pub(crate) dp: usize,
    rows: Vec<f64>,
    pub(crate) bias: &'a [f64],
    max_bias: f64,
    max_norm: f64,
}

impl<'a> Panel<'a> {
    pub(crate) fn new(embeddings: &[f64], bias: &'a [f64], dim: usize) -> Self {
        let num_items = bias.len();
        let dp = round_up(dim);
        let mut rows = vec![0.0; num_items * dp];
        let mut max_norm: f64 = 0.0;
        for (dst, src) in rows.chunks_exact_mut(dp).zip(embeddings.chunks_exact(dim)) {
            dst[..dim].copy_from_slice(src);
            max_norm = max_norm.max(src.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let max_bias = bias.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            num_items,
            dim,
            dp,
            rows,
            bias,
            max_bias,
            max_norm,
        }
    }

    #[inline(always)]
    fn e(&self, i: usize, k: usize) -> f64 {
        self.rows[i * self.dp + k]
    }

    /// # Safety
    /// `i < num_items` and `k < dp`.
    #[inline(always)]
    unsafe fn e_unchecked(&self, i: usize, k: usize) -> f64 {
        debug_assert!(i < self.num_items && k < self.dp);
        unsafe { *self.rows.get_unchecked(i * self.dp + k) }
    }

    /// One logit, accumulated exactly as the tiles do.
    pub(crate) fn logit(&self, ctx_dim: &[f64], pp: usize, item: usize, t: usize) -> f64 {
        let mut z = self.bias[item];
        for k in 0..self.dp {
            z = self.e(item, k).mul_add(ctx_dim[k * pp + t], z);
        }
        z
    }

    /// Upper bounds on each position's logits (Cauchy-Schwarz), given
    /// position-major contexts `p x dim`. Padded positions get `max_bias`.
    pub(crate) fn shifts(&self, ctx: &[f64], p: usize, pp: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(ctx.chunks_exact(self.dim).take(p).map(|c| {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            self.max_bias + self.max_norm * norm
        }));
        out.resize(pp, self.max_bias);
    }
}

/// Writes `ctx` (`p x dim`, position-major) into a zero-padded dim-major
/// block `dp x pp`, and optionally a position-major block `pp x dp`.
/// Returns `pp`.
pub(crate) fn pad_contexts(
    ctx: &[f64],
    p: usize,
    dim: usize,
    dp: usize,
    dim_major: &mut Vec<f64>,
    pos_major: Option<&mut Vec<f64>>,
) -> usize {
    let pp = round_up(p);
    dim_major.clear();
    dim_major.resize(dp * pp, 0.0);
    for t in 0..p {
        for k in 0..dim {
            dim_major[k * pp + t] = ctx[t * dim + k];
        }
    }
    if let Some(pm) = pos_major {
        pm.clear();
        pm.resize(pp * dp, 0.0);
        for t in 0..p {
            pm[t * dp..t * dp + dim].copy_from_slice(&ctx[t * dim..(t + 1) * dim]);
        }
    }
    pp
}

fn check_block(panel: &Panel, ctx_dim: &[f64], pp: usize) {
    assert!(pp.is_multiple_of(LANES) && ctx_dim.len() >= panel.dp * pp);
    assert!(panel.rows.len() == panel.num_items * panel.dp && panel.bias.len() == panel.num_items);
}

/// Logits of items `i0..i0+G` at positions `b0..b0 + NB * LANES`.
#[inline(always)]
unsafe fn logit_tile<const G: usize, const NB: usize>(
    panel: &Panel,
    ctx_dim: &[f64],
    pp: usize,
    i0: usize,
    b0: usize,
) -> [[V8; NB]; G] {
    let mut acc = [[V8::splat(0.0); NB]; G];
    for (g, a) in acc.iter_mut().enumerate() {
        *a = [V8::splat(panel.bias[i0 + g]); NB];
    }
    for k in 0..panel.dp {
        let mut c = [V8::splat(0.0); NB];
        for (nb, cv) in c.iter_mut().enumerate() {
            *cv = V8::load_unchecked(ctx_dim, k * pp + b0 + nb * LANES);
        }
        for (g, a) in acc.iter_mut().enumerate() {
            let e = V8::splat(panel.e_unchecked(i0 + g, k));
            for nb in 0..NB {
                a[nb] = e.mul_add(c[nb], a[nb]);
            }
        }
    }
    acc
}

/// Per-position maxima of the logits over all items.
pub(crate) fn exact_max(panel: &Panel, ctx_dim: &[f64], pp: usize, max: &mut Vec<f64>) {
    max.clear();
    max.resize(pp, f64::NEG_INFINITY);
    let m = panel.num_items;
    check_block(panel, ctx_dim, pp);
    let full = m / GROUP * GROUP;
    for b0 in (0..pp).step_by(LANES) {
        let mut mx = V8::load(max, b0);
        for i0 in (0..full).step_by(GROUP) {
            // SAFETY: bounds checked by `check_block`.
            for a in unsafe { logit_tile::<GROUP, 1>(panel, ctx_dim, pp, i0, b0) } {
                mx = a[0].max(mx);
            }
        }
        for i in full..m {
            // SAFETY: as above.
            mx = unsafe { logit_tile::<1, 1>(panel, ctx_dim, pp, i, b0) }[0][0].max(mx);
        }
        mx.store(max, b0);
    }
}

/// Outputs of [`softmax_pass`].
pub(crate) struct SoftmaxOut<'s> {
    /// `exp(z - shift)`, item-major `num_items x pp`.
    pub(crate) u: &'s mut Vec<f64>,
    /// Per-position sums of `u`.
    pub(crate) sum: &'s mut Vec<f64>,
    /// If set, `gc[k * pp + t] = sum_i u[i * pp + t] * e_ik`.
    pub(crate) gc: Option<&'s mut Vec<f64>>,
    /// If set, the raw logits, item-major.
    pub(crate) logits: Option<&'s mut Vec<f64>>,
}

#[inline(always)]
unsafe fn tile_body<const G: usize, const NB: usize>(
    panel: &Panel,
    ctx_dim: &[f64],
    pp: usize,
    shift: &[f64],
    i0: usize,
    b0: usize,
    out: &mut SoftmaxOut,
) {
    let z = logit_tile::<G, NB>(panel, ctx_dim, pp, i0, b0);
    if let Some(l) = out.logits.as_deref_mut() {
        for (g, zg) in z.iter().enumerate() {
            for (nb, v) in zg.iter().enumerate() {
                v.store_unchecked(l, (i0 + g) * pp + b0 + nb * LANES);
            }
        }
    }
    let mut u = z;
    for nb in 0..NB {
        let at = b0 + nb * LANES;
        let sh = V8::load_unchecked(shift, at);
        let mut s = V8::load_unchecked(out.sum, at);
        for g in 0..G {
            u[g][nb] = u[g][nb].sub(sh).exp_nonpos();
            u[g][nb].store_unchecked(out.u, (i0 + g) * pp + at);
            s = s.add(u[g][nb]);
        }
        s.store_unchecked(out.sum, at);
    }
    if let Some(gc) = out.gc.as_deref_mut() {
        for k in 0..panel.dim {
            for nb in 0..NB {
                let at = k * pp + b0 + nb * LANES;
                let mut acc = V8::load_unchecked(gc, at);
                for (g, ug) in u.iter().enumerate() {
                    acc = V8::splat(panel.e_unchecked(i0 + g, k)).mul_add(ug[nb], acc);
                }
                acc.store_unchecked(gc, at);
            }
        }
    }
}

/// Shifted exponentials of all logits with their per-position sums and,
/// optionally, the unnormalized context gradient and the raw logits.
pub(crate) fn softmax_pass(panel: &Panel, ctx_dim: &[f64], pp: usize, shift: &[f64], mut out: SoftmaxOut) {
    let m = panel.num_items;
    // Every entry of `u` and `logits` is overwritten by the tiles below.
    out.u.resize(m * pp, 0.0);
    out.sum.clear();
    out.sum.resize(pp, 0.0);
    if let Some(gc) = out.gc.as_deref_mut() {
        gc.clear();
        gc.resize(panel.dp * pp, 0.0);
    }
    if let Some(l) = out.logits.as_deref_mut() {
        l.resize(m * pp, 0.0);
    }
    check_block(panel, ctx_dim, pp);
    assert!(shift.len() >= pp);
    let full = m / GROUP * GROUP;
    let pairs = pp / (2 * LANES) * (2 * LANES);
    // SAFETY: `check_block` and the resizes above cover every tile access.
    unsafe {
        for i0 in (0..full).step_by(GROUP) {
            for b0 in (0..pairs).step_by(2 * LANES) {
                tile_body::<GROUP, 2>(panel, ctx_dim, pp, shift, i0, b0, &mut out);
            }
            if pairs < pp {
                tile_body::<GROUP, 1>(panel, ctx_dim, pp, shift, i0, pairs, &mut out);
            }
        }
        for i in full..m {
            for b0 in (0..pp).step_by(LANES) {
                tile_body::<1, 1>(panel, ctx_dim, pp, shift, i, b0, &mut out);
            }
        }
    }
}

#[inline(always)]
unsafe fn output_tile<const G: usize, const NC: usize>(
    panel: &Panel,
    w: &[f64],
    pp: usize,
    ctx_pos: &[f64],
    p: usize,
    i0: usize,
    c0: usize,
    d_emb: &mut [f64],
) {
    let dp = panel.dp;
    let mut acc = [[V8::splat(0.0); NC]; G];
    for t in 0..p {
        let mut c = [V8::splat(0.0); NC];
        for (nc, cv) in c.iter_mut().enumerate() {
            *cv = V8::load_unchecked(ctx_pos, t * dp + c0 + nc * LANES);
        }
        for (g, a) in acc.iter_mut().enumerate() {
            let wg = V8::splat(unsafe { *w.get_unchecked(g * pp + t) });
            for nc in 0..NC {
                a[nc] = wg.mul_add(c[nc], a[nc]);
            }
        }
    }
    let dim = panel.dim;
    for (g, a) in acc.iter().enumerate() {
        let row = &mut d_emb[(i0 + g) * dim..(i0 + g + 1) * dim];
        for (nc, v) in a.iter().enumerate() {
            let lo = c0 + nc * LANES;
            if lo >= dim {
                break;
            }
            let vals = v.to_array();
            for (dst, src) in row[lo..dim.min(lo + LANES)].iter_mut().zip(vals) {
                *dst += src;
            }
        }
    }
}

unsafe fn output_group<const G: usize>(
    panel: &Panel,
    u: &[f64],
    pp: usize,
    inv: &[f64],
    ctx_pos: &[f64],
    p: usize,
    i0: usize,
    w: &mut Vec<f64>,
    d_bias: &mut [f64],
    d_emb: &mut [f64],
) {
    w.clear();
    w.resize(G * pp, 0.0);
    for g in 0..G {
        let mut db = V8::splat(0.0);
        for b in (0..pp).step_by(LANES) {
            let v = V8::load_unchecked(u, (i0 + g) * pp + b).mul(V8::load_unchecked(inv, b));
            v.store_unchecked(w, g * pp + b);
            db = db.add(v);
        }
        d_bias[i0 + g] += db.to_array().iter().sum::<f64>();
    }
    let dp = panel.dp;
    let pairs = dp / (2 * LANES) * (2 * LANES);
    for c0 in (0..pairs).step_by(2 * LANES) {
        output_tile::<G, 2>(panel, w, pp, ctx_pos, p, i0, c0, d_emb);
    }
    if pairs < dp {
        output_tile::<G, 1>(panel, w, pp, ctx_pos, p, i0, pairs, d_emb);
    }
}

/// Adds the softmax parts of the bias and output-embedding gradients:
/// `d_bias_i += sum_t w_it` and `d_emb_i += sum_t w_it c_t` with
/// `w = u * inv`. `inv` must be zero on padded positions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn output_grads(
    panel: &Panel,
    u: &[f64],
    pp: usize,
    inv: &[f64],
    ctx_pos: &[f64],
    p: usize,
    w: &mut Vec<f64>,
    d_bias: &mut [f64],
    d_emb: &mut [f64],
) {
    let m = panel.num_items;
    assert!(pp.is_multiple_of(LANES) && p <= pp);
    assert!(u.len() >= m * pp && inv.len() >= pp && ctx_pos.len() >= pp * panel.dp);
    assert!(d_bias.len() >= m && d_emb.len() >= m * panel.dim);
    let full = m / GROUP * GROUP;
    // SAFETY: the asserts above bound every access; `w` is sized inside.
    unsafe {
        for i0 in (0..full).step_by(GROUP) {
            output_group::<GROUP>(panel, u, pp, inv, ctx_pos, p, i0, w, d_bias, d_emb);
        }
        for i in full..m {
            output_group::<1>(panel, u, pp, inv, ctx_pos, p, i, w, d_bias, d_emb);
        }
    }
}
