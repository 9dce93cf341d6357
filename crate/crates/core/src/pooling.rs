//! Temporal pooling: statistics pooling, attention pooling and multi-head
//! attention pooling.
//!
//! All three reduce to one weighted-statistics kernel. Each head `i` owns a
//! weight distribution `α_i` over the frames of an utterance and a
//! contiguous block of `d_v / h` value columns; the pooled vector is
//! `[m̂; σ̂]` with
//!
//! ```text
//! m̂_j = Σ_t α_{i(j),t} v_tj
//! σ̂_j = sqrt(Σ_t α_{i(j),t} (v_tj − m̂_j)² + VAR_FLOOR)
//! ```
//!
//! Statistics pooling is the `h = 1`, `α_t = 1/T` case. Attention weights
//! are `α_i = softmax_t(q^(i) · G^(i)(k_t))` where `G` is the compatibility
//! network, run once over the full keys and split into `h` blocks along
//! with the query. Multi-head output is laid out means-first:
//! `[m̂^(1) … m̂^(h), σ̂^(1) … σ̂^(h)]`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::{self, DenseBlock, DenseBlockCache, DenseBlockGrad, Matrix, Mode, Segments};
use crate::par;

/// Floor added to the weighted variance before the square root.
pub const VAR_FLOOR: f64 = 1e-10;

/// Concatenated weighted mean and standard deviation, length `2·d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingOutput {
    values: Vec<f64>,
}

impl PoolingOutput {
    pub fn from_vec(values: Vec<f64>) -> Self {
        debug_assert!(values.len() % 2 == 0);
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> &[f64] {
        &self.values[..self.values.len() / 2]
    }

    pub fn std(&self) -> &[f64] {
        &self.values[self.values.len() / 2..]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Attention weights, one row per head, one column per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Matrix,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.weights.rows()
    }

    pub fn frames(&self) -> usize {
        self.weights.cols()
    }

    /// Largest weight over heads at every frame.
    pub fn max_trace(&self) -> Vec<f64> {
        (0..self.frames())
            .map(|t| {
                (0..self.heads())
                    .map(|i| self.weights.get(i, t))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

/// Stack of dense blocks mapping keys into the query space (`θ_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityNet {
    pub blocks: Vec<DenseBlock>,
}

impl CompatibilityNet {
    pub fn new(blocks: Vec<DenseBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("compatibility net needs at least one layer".into()));
        }
        for w in blocks.windows(2) {
            if w[0].dout() != w[1].din() {
                return Err(Error::Config(format!(
                    "compatibility layer widths do not chain: {} -> {}",
                    w[0].dout(),
                    w[1].din()
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].din()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].dout()
    }

    pub fn forward(&self, keys: &Matrix, mode: Mode) -> Result<(Matrix, Vec<DenseBlockCache>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = keys.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&x, mode)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(
        &self,
        caches: &[DenseBlockCache],
        grad: &Matrix,
    ) -> (Matrix, Vec<DenseBlockGrad>) {
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut g = grad.clone();
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            let (dx, bg) = b.backward(c, &g);
            grads.push(bg);
            g = dx;
        }
        grads.reverse();
        (g, grads)
    }
}

/// The `(values, keys, query)` triple consumed by attention pooling.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub values: Matrix,
    pub keys: Matrix,
    pub query: Vec<f64>,
}

/// Per-utterance forward state of the weighted-statistics kernel.
#[derive(Clone, Debug)]
pub struct SegmentStats {
    /// h × T
    pub weights: Matrix,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn check_heads(dv: usize, dq: Option<usize>, heads: usize) -> Result<()> {
    if heads == 0 {
        return Err(Error::Config("heads must be at least 1".into()));
    }
    if dv % heads != 0 {
        return Err(Error::Config(format!(
            "heads={heads} does not divide value dimension {dv}"
        )));
    }
    if let Some(dq) = dq {
        if dq % heads != 0 {
            return Err(Error::Config(format!(
                "heads={heads} does not divide query dimension {dq}"
            )));
        }
    }
    Ok(())
}

/// Weighted mean and floored standard deviation of rows `seg` of `values`.
fn weighted_stats(values: &Matrix, seg: Range<usize>, weights: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let dv = values.cols();
    let per = dv / weights.rows();
    let mut mean = vec![0.0; dv];
    for (local, t) in seg.clone().enumerate() {
        let v = values.row(t);
        for j in 0..dv {
            mean[j] += weights.get(j / per, local) * v[j];
        }
    }
    let mut var = vec![0.0; dv];
    for (local, t) in seg.enumerate() {
        let v = values.row(t);
        for j in 0..dv {
            let c = v[j] - mean[j];
            var[j] += weights.get(j / per, local) * c * c;
        }
    }
    let std = var.iter().map(|s| (s + VAR_FLOOR).sqrt()).collect();
    (mean, std)
}

/// Gradients of [`weighted_stats`] w.r.t. the segment's values (T × d_v)
/// and weights (h × T), given upstream gradients of mean and std.
fn weighted_stats_backward(
    values: &Matrix,
    seg: Range<usize>,
    st: &SegmentStats,
    grad_mean: &[f64],
    grad_std: &[f64],
) -> (Matrix, Matrix) {
    let dv = values.cols();
    let heads = st.weights.rows();
    let per = dv / heads;
    let len = seg.len();
    let mut dvals = Matrix::zeros(len, dv);
    let mut dw = Matrix::zeros(heads, len);
    for (local, t) in seg.enumerate() {
        let v = values.row(t);
        let out = dvals.row_mut(local);
        for j in 0..dv {
            let i = j / per;
            let c = v[j] - st.mean[j];
            let a = st.weights.get(i, local);
            out[j] = a * (grad_mean[j] + grad_std[j] * c / st.std[j]);
            let prev = dw.get(i, local);
            dw.set(
                i,
                local,
                prev + grad_mean[j] * v[j] + grad_std[j] * c * c / (2.0 * st.std[j]),
            );
        }
    }
    (dvals, dw)
}

fn uniform_weights(len: usize) -> Matrix {
    Matrix::from_parts(1, len, vec![1.0 / len as f64; len])
}

/// Softmax over time of each head's logits within one segment.
fn time_softmax(logits: &Matrix, seg: Range<usize>) -> Matrix {
    let heads = logits.cols();
    let mut w = Matrix::zeros(heads, seg.len());
    for i in 0..heads {
        let row = w.row_mut(i);
        for (local, t) in seg.clone().enumerate() {
            row[local] = logits.get(t, i);
        }
        nn::softmax_in_place(row);
    }
    w
}

/// Gradient through [`time_softmax`]; returns T × h logits gradient.
fn time_softmax_backward(weights: &Matrix, dw: &Matrix) -> Matrix {
    let (heads, len) = (weights.rows(), weights.cols());
    let mut dl = Matrix::zeros(len, heads);
    for i in 0..heads {
        let (a, g) = (weights.row(i), dw.row(i));
        let inner = nn::dot(a, g);
        for t in 0..len {
            dl.set(t, i, a[t] * (g[t] - inner));
        }
    }
    dl
}

/// Per-frame, per-head logits `q^(i) · G^(i)_t` (N × h).
pub fn head_logits(g: &Matrix, query: &[f64], heads: usize) -> Matrix {
    let per = query.len() / heads;
    let mut out = Matrix::zeros(g.rows(), heads);
    for t in 0..g.rows() {
        let gr = g.row(t);
        for i in 0..heads {
            let span = i * per..(i + 1) * per;
            out.set(t, i, nn::dot(&query[span.clone()], &gr[span]));
        }
    }
    out
}

fn head_logits_backward(g: &Matrix, query: &[f64], heads: usize, dl: &Matrix) -> (Matrix, Vec<f64>) {
    let per = query.len() / heads;
    let mut dg = Matrix::zeros(g.rows(), g.cols());
    let mut dq = vec![0.0; query.len()];
    for t in 0..g.rows() {
        let gr = g.row(t);
        for c in 0..query.len() {
            let d = dl.get(t, c / per);
            dq[c] += d * gr[c];
            dg.set(t, c, d * query[c]);
        }
    }
    (dg, dq)
}

/// Pools every segment with the given per-frame logits (N × h), or with
/// uniform weights when `logits` is `None`.
pub(crate) fn pool_segments(
    values: &Matrix,
    segs: &Segments,
    logits: Option<&Matrix>,
) -> (Matrix, Vec<SegmentStats>) {
    let dv = values.cols();
    let stats: Vec<SegmentStats> = par::map(segs.len(), |b| {
        let seg = segs[b].clone();
        let weights = match logits {
            Some(l) => time_softmax(l, seg.clone()),
            None => uniform_weights(seg.len()),
        };
        let (mean, std) = weighted_stats(values, seg, &weights);
        SegmentStats { weights, mean, std }
    });
    let mut out = Matrix::zeros(segs.len(), 2 * dv);
    for (b, st) in stats.iter().enumerate() {
        let row = out.row_mut(b);
        row[..dv].copy_from_slice(&st.mean);
        row[dv..].copy_from_slice(&st.std);
    }
    (out, stats)
}

/// Backward of [`pool_segments`]: values gradient (N × d_v) and, when the
/// forward used logits, the logits gradient (N × h).
pub(crate) fn pool_segments_backward(
    values: &Matrix,
    segs: &Segments,
    stats: &[SegmentStats],
    grad: &Matrix,
    with_logits: bool,
) -> (Matrix, Option<Matrix>) {
    let dv = values.cols();
    let per_seg: Vec<(Matrix, Matrix)> = par::map(segs.len(), |b| {
        let g = grad.row(b);
        let (dvals, dw) =
            weighted_stats_backward(values, segs[b].clone(), &stats[b], &g[..dv], &g[dv..]);
        (dvals, if with_logits { time_softmax_backward(&stats[b].weights, &dw) } else { dw })
    });
    let mut dvalues = Matrix::zeros(values.rows(), dv);
    let heads = stats.first().map_or(1, |s| s.weights.rows());
    let mut dlogits = with_logits.then(|| Matrix::zeros(values.rows(), heads));
    for (seg, (dvals, dl)) in segs.iter().zip(per_seg) {
        dvalues.as_mut_slice()[seg.start * dv..seg.end * dv].copy_from_slice(dvals.as_slice());
        if let Some(out) = dlogits.as_mut() {
            out.as_mut_slice()[seg.start * heads..seg.end * heads].copy_from_slice(dl.as_slice());
        }
    }
    (dvalues, dlogits)
}

/// Statistics pooling: uniform weights over time.
pub fn stats_pool(values: &Matrix) -> PoolingOutput {
    let (out, _) = pool_segments(values, &[0..values.rows()], None);
    PoolingOutput::from_vec(out.into_vec())
}

/// Gradient of [`stats_pool`] w.r.t. the values.
pub fn stats_pool_backward(values: &Matrix, grad: &[f64]) -> Matrix {
    let segs = [0..values.rows()];
    let (_, stats) = pool_segments(values, &segs, None);
    let g = Matrix::from_parts(1, grad.len(), grad.to_vec());
    pool_segments_backward(values, &segs, &stats, &g, false).0
}

fn check_query(net: &CompatibilityNet, query: &[f64]) -> Result<()> {
    if net.out_dim() != query.len() {
        return Err(Error::Config(format!(
            "query has {} dimensions but the compatibility net outputs {}",
            query.len(),
            net.out_dim()
        )));
    }
    Ok(())
}

/// Single-head logits `q · G(k_t)` for one utterance. No scaling is applied.
pub fn attention_logits(
    keys: &Matrix,
    net: &CompatibilityNet,
    query: &[f64],
    mode: Mode,
) -> Result<Vec<f64>> {
    check_query(net, query)?;
    let (g, _) = net.forward(keys, mode)?;
    Ok(head_logits(&g, query, 1).into_vec())
}

/// Single-head attention pooling from precomputed logits.
pub fn attention_pool(values: &Matrix, logits: &[f64]) -> Result<(PoolingOutput, AttentionRecord)> {
    if logits.len() != values.rows() {
        return Err(Error::Data(format!(
            "{} logits for {} frames",
            logits.len(),
            values.rows()
        )));
    }
    let l = Matrix::from_parts(logits.len(), 1, logits.to_vec());
    let (out, mut stats) = pool_segments(values, &[0..values.rows()], Some(&l));
    let weights = stats.remove(0).weights;
    Ok((PoolingOutput::from_vec(out.into_vec()), AttentionRecord { weights }))
}

/// Compatibility net, query and head count of an attention pooling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPooling {
    pub net: CompatibilityNet,
    pub query: Vec<f64>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    values: Matrix,
    segs: Vec<Range<usize>>,
    net: Vec<DenseBlockCache>,
    g: Matrix,
    pub stats: Vec<SegmentStats>,
}

impl AttentionCache {
    pub fn records(&self) -> Vec<AttentionRecord> {
        self.stats
            .iter()
            .map(|s| AttentionRecord {
                weights: s.weights.clone(),
            })
            .collect()
    }

    pub fn net_caches(&self) -> &[DenseBlockCache] {
        &self.net
    }
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub values: Matrix,
    pub keys: Matrix,
    pub query: Vec<f64>,
    pub net: Vec<DenseBlockGrad>,
}

impl AttentionPooling {
    pub fn new(net: CompatibilityNet, query: Vec<f64>, heads: usize) -> Result<Self> {
        check_query(&net, &query)?;
        check_heads(query.len(), Some(query.len()), heads)?;
        Ok(Self { net, query, heads })
    }

    /// Pools every segment of the packed `values`/`keys` (rows aligned).
    pub fn forward(
        &self,
        values: &Matrix,
        keys: &Matrix,
        segs: &Segments,
        mode: Mode,
    ) -> Result<(Matrix, AttentionCache)> {
        if values.rows() != keys.rows() {
            return Err(Error::Data(format!(
                "{} value frames but {} key frames",
                values.rows(),
                keys.rows()
            )));
        }
        if keys.cols() != self.net.in_dim() {
            return Err(Error::Config(format!(
                "keys have {} dimensions, compatibility net expects {}",
                keys.cols(),
                self.net.in_dim()
            )));
        }
        check_heads(values.cols(), Some(self.query.len()), self.heads)?;
        let (g, net) = self.net.forward(keys, mode)?;
        let logits = head_logits(&g, &self.query, self.heads);
        let (out, stats) = pool_segments(values, segs, Some(&logits));
        Ok((
            out,
            AttentionCache {
                values: values.clone(),
                segs: segs.to_vec(),
                net,
                g,
                stats,
            },
        ))
    }

    pub fn backward(&self, cache: &AttentionCache, grad: &Matrix) -> AttentionGrads {
        let (dvalues, dlogits) =
            pool_segments_backward(&cache.values, &cache.segs, &cache.stats, grad, true);
        let dlogits = dlogits.expect("attention backward always yields logit gradients");
        let (dg, dquery) = head_logits_backward(&cache.g, &self.query, self.heads, &dlogits);
        let (dkeys, dnet) = self.net.backward(&cache.net, &dg);
        AttentionGrads {
            values: dvalues,
            keys: dkeys,
            query: dquery,
            net: dnet,
        }
    }
}

/// Multi-head attention pooling of one utterance.
pub fn multihead_pool(
    inputs: &AttentionInputs,
    net: &CompatibilityNet,
    heads: usize,
    mode: Mode,
) -> Result<(PoolingOutput, AttentionRecord)> {
    check_query(net, &inputs.query)?;
    check_heads(inputs.values.cols(), Some(inputs.query.len()), heads)?;
    let layer = AttentionPooling {
        net: net.clone(),
        query: inputs.query.clone(),
        heads,
    };
    let (out, cache) = layer.forward(&inputs.values, &inputs.keys, &[0..inputs.values.rows()], mode)?;
    let record = cache.records().remove(0);
    Ok((PoolingOutput::from_vec(out.into_vec()), record))
}
