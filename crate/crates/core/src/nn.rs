//! Dense layer primitives with exact forward and backward passes.
//!
//! Activations are stored as a packed [`Matrix`]: rows are frames, columns
//! are features. A training batch packs several chunks one after another
//! and carries their row ranges alongside (see [`Segments`]); splicing
//! never crosses a segment boundary and batch normalization pools its
//! statistics over every row of the batch.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Row ranges of the chunks packed into one matrix.
pub type Segments = [Range<usize>];

/// Row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Data(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Data(format!(
                    "ragged rows: row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds from raw parts without validation. Used for internal buffers
    /// whose shape is known to be consistent.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Copy of rows `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix::from_parts(range.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts; returns the packed matrix
    /// and the row range of every input.
    pub fn stack(parts: &[&Matrix]) -> Result<(Matrix, Vec<Range<usize>>)> {
        let cols = parts
            .first()
            .map(|m| m.cols)
            .ok_or_else(|| Error::Data("cannot stack zero matrices".into()))?;
        let mut data = Vec::new();
        let mut segs = Vec::with_capacity(parts.len());
        let mut start = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Data(format!(
                    "cannot stack {} columns onto {cols}",
                    m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            segs.push(start..start + m.rows);
            start += m.rows;
        }
        Ok((Matrix::from_parts(start, cols, data), segs))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Values of `x` per tile in [`Affine::backward`], sized for L2.
const TILE_VALUES: usize = 16 * 1024;

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Training or inference behaviour of batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// `out[t] = weight · x[t] + bias`, weight stored `dout × din`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Config(format!(
                "affine bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            weight: Matrix::zeros(dout, din),
            bias: vec![0.0; dout],
        }
    }

    pub fn din(&self) -> usize {
        self.weight.cols()
    }

    pub fn dout(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.din() {
            return Err(Error::Config(format!(
                "affine expects {} input columns, got {}",
                self.din(),
                x.cols()
            )));
        }
        let dout = self.dout();
        let mut out = Matrix::zeros(x.rows(), dout);
        par::for_each_row(out.as_mut_slice(), dout, 16, |t, row| {
            let xt = x.row(t);
            for (j, o) in row.iter_mut().enumerate() {
                *o = self.bias[j] + dot(self.weight.row(j), xt);
            }
        });
        Ok(out)
    }

    /// Gradients given the forward input `x` and upstream `grad` (T × dout).
    pub fn backward(&self, x: &Matrix, grad: &Matrix) -> (Matrix, AffineGrad) {
        let (din, dout) = (self.din(), self.dout());
        debug_assert_eq!(grad.cols(), dout);
        let mut dx = Matrix::zeros(x.rows(), din);
        par::for_each_row(dx.as_mut_slice(), din, 16, |t, row| {
            for (j, &g) in grad.row(t).iter().enumerate() {
                if g != 0.0 {
                    axpy(g, self.weight.row(j), row);
                }
            }
        });
        // One weight row plus its bias per output unit. Frames are visited
        // in tiles so a tile of `x` stays cached across output units; each
        // unit still accumulates in frame order.
        let mut packed = vec![0.0; dout * (din + 1)];
        let tile = (TILE_VALUES / din.max(1)).max(1);
        for start in (0..x.rows()).step_by(tile) {
            let end = (start + tile).min(x.rows());
            par::for_each_row(&mut packed, din + 1, 4, |j, row| {
                let (w, b) = row.split_at_mut(din);
                for t in start..end {
                    let g = grad.get(t, j);
                    b[0] += g;
                    if g != 0.0 {
                        axpy(g, x.row(t), w);
                    }
                }
            });
        }
        let mut dw = Vec::with_capacity(dout * din);
        let mut db = Vec::with_capacity(dout);
        for row in packed.chunks_exact(din + 1) {
            dw.extend_from_slice(&row[..din]);
            db.push(row[din]);
        }
        (
            dx,
            AffineGrad {
                weight: Matrix::from_parts(dout, din, dw),
                bias: db,
            },
        )
    }
}

pub fn affine_forward(x: &Matrix, p: &Affine) -> Result<Matrix> {
    p.forward(x)
}

pub fn leaky_relu(x: &Matrix, slope: f64) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Matrix::from_parts(x.rows(), x.cols(), data)
}

/// Gradient of [`leaky_relu`] given the forward input.
pub fn leaky_relu_backward(x: &Matrix, grad: &Matrix, slope: f64) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect();
    Matrix::from_parts(x.rows(), x.cols(), data)
}

/// Learned per-column scale and shift plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Forward state kept for [`BatchNorm::backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    xhat: Matrix,
    inv_std: Vec<f64>,
    /// Batch statistics (train mode only), used to update running stats.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Pure forward. In train mode the batch statistics are returned in the
    /// cache; call [`BatchNorm::absorb`] to fold them into the running stats.
    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, BatchNormCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::Config(format!(
                "batch norm over {d} columns got {}",
                x.cols()
            )));
        }
        let n = x.rows();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Training(format!(
                        "batch norm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                column_moments(x)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        for t in 0..n {
            let xr = x.row(t);
            let hr = xhat.row_mut(t);
            let or = out.row_mut(t);
            for j in 0..d {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
                or[j] = self.gamma[j] * hr[j] + self.beta[j];
            }
        }
        let (batch_mean, batch_var) = match mode {
            Mode::Train => (mean, var),
            Mode::Infer => (Vec::new(), Vec::new()),
        };
        Ok((
            out,
            BatchNormCache {
                mode,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
            },
        ))
    }

    /// Running-stat update from a train-mode forward.
    pub fn absorb(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * cache.batch_mean[j];
            self.running_var[j] = m * self.running_var[j] + (1.0 - m) * cache.batch_var[j];
        }
    }

    pub fn backward(&self, cache: &BatchNormCache, grad: &Matrix) -> (Matrix, BatchNormGrad) {
        let d = self.dim();
        let n = grad.rows();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for t in 0..n {
            let g = grad.row(t);
            let h = cache.xhat.row(t);
            for j in 0..d {
                dgamma[j] += g[j] * h[j];
                dbeta[j] += g[j];
            }
        }
        let mut dx = Matrix::zeros(n, d);
        match cache.mode {
            Mode::Train => {
                // dx = gamma·inv_std/N · (N·g − Σg − xhat·Σ(g·xhat))
                let nf = n as f64;
                for t in 0..n {
                    let g = grad.row(t);
                    let h = cache.xhat.row(t);
                    let out = dx.row_mut(t);
                    for j in 0..d {
                        out[j] = self.gamma[j] * cache.inv_std[j] / nf
                            * (nf * g[j] - dbeta[j] - h[j] * dgamma[j]);
                    }
                }
            }
            Mode::Infer => {
                for t in 0..n {
                    let g = grad.row(t);
                    let out = dx.row_mut(t);
                    for j in 0..d {
                        out[j] = self.gamma[j] * cache.inv_std[j] * g[j];
                    }
                }
            }
        }
        (
            dx,
            BatchNormGrad {
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

/// Column means and biased variances.
pub(crate) fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = x.rows() as f64;
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in x.row_iter() {
        for j in 0..d {
            let c = r[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Forward with the running-stat update applied in place.
pub fn batchnorm_forward(x: &Matrix, state: &mut BatchNorm, mode: Mode) -> Result<Matrix> {
    let (out, cache) = state.forward(x, mode)?;
    state.absorb(&cache);
    Ok(out)
}

/// Ordered frame offsets fed to one TDNN layer, e.g. `{-2,-1,0,1,2}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i32>", into = "Vec<i32>")]
pub struct SpliceContext(Vec<i32>);

impl SpliceContext {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config("splice context is empty".into()));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "splice offsets must be strictly increasing: {offsets:?}"
            )));
        }
        if !offsets.contains(&0) {
            return Err(Error::Config(format!(
                "splice offsets must contain 0: {offsets:?}"
            )));
        }
        Ok(Self(offsets))
    }

    pub fn offsets(&self) -> &[i32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<i32>> for SpliceContext {
    type Error = Error;

    fn try_from(v: Vec<i32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpliceContext> for Vec<i32> {
    fn from(c: SpliceContext) -> Self {
        c.0
    }
}

#[inline]
fn clamped(t: usize, offset: i32, len: usize) -> usize {
    (t as i64 + offset as i64).clamp(0, len as i64 - 1) as usize
}

/// Splices every segment independently, replicating edge frames.
pub fn splice_segments(x: &Matrix, segs: &Segments, ctx: &SpliceContext) -> Matrix {
    let d = x.cols();
    let width = d * ctx.len();
    let mut out = Matrix::zeros(x.rows(), width);
    // Row -> segment lookup keeps the parallel closure independent per row.
    let owner = segment_owner(x.rows(), segs);
    par::for_each_row(out.as_mut_slice(), width, 32, |r, row| {
        let seg = &segs[owner[r]];
        let local = r - seg.start;
        for (k, &o) in ctx.offsets().iter().enumerate() {
            let src = seg.start + clamped(local, o, seg.len());
            row[k * d..(k + 1) * d].copy_from_slice(x.row(src));
        }
    });
    out
}

pub fn splice(x: &Matrix, ctx: &SpliceContext) -> Matrix {
    splice_segments(x, &[0..x.rows()], ctx)
}

/// Scatter-adds spliced gradients back onto their source frames.
pub fn splice_backward(grad: &Matrix, segs: &Segments, ctx: &SpliceContext, d: usize) -> Matrix {
    let mut dx = Matrix::zeros(grad.rows(), d);
    for seg in segs {
        for local in 0..seg.len() {
            let g = grad.row(seg.start + local);
            for (k, &o) in ctx.offsets().iter().enumerate() {
                let src = seg.start + clamped(local, o, seg.len());
                let dst = dx.row_mut(src);
                for (a, b) in dst.iter_mut().zip(&g[k * d..(k + 1) * d]) {
                    *a += b;
                }
            }
        }
    }
    dx
}

pub(crate) fn segment_owner(rows: usize, segs: &Segments) -> Vec<usize> {
    let mut owner = vec![0; rows];
    for (i, s) in segs.iter().enumerate() {
        owner[s.clone()].iter_mut().for_each(|o| *o = i);
    }
    owner
}

/// In-place softmax of one vector, max-subtracted.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), grad.row(r));
        let inner = dot(yr, gr);
        for (o, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - inner);
        }
    }
    dx
}

pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(posteriors: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != posteriors.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} posterior rows",
            labels.len(),
            posteriors.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= posteriors.cols()) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            posteriors.cols()
        )));
    }
    Ok(())
}

/// Mean negative log posterior of the labelled class.
pub fn cross_entropy(posteriors: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(posteriors, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -posteriors.get(r, l).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn cross_entropy_backward(posteriors: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(posteriors, labels)?;
    let n = labels.len() as f64;
    let mut g = Matrix::zeros(posteriors.rows(), posteriors.cols());
    for (r, &l) in labels.iter().enumerate() {
        let p = posteriors.get(r, l);
        if p > PROB_FLOOR {
            g.set(r, l, -1.0 / (n * p));
        }
    }
    Ok(g)
}

/// Affine → leaky ReLU → batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub affine: Affine,
    pub bn: BatchNorm,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlockGrad {
    pub affine: AffineGrad,
    pub bn: BatchNormGrad,
}

#[derive(Clone, Debug)]
pub struct DenseBlockCache {
    input: Matrix,
    pre: Matrix,
    pub bn: BatchNormCache,
}

impl DenseBlockCache {
    /// Affine output before the nonlinearity.
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre
    }
}

impl DenseBlock {
    pub fn new(affine: Affine) -> Self {
        let dout = affine.dout();
        Self {
            affine,
            bn: BatchNorm::new(dout),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn din(&self) -> usize {
        self.affine.din()
    }

    pub fn dout(&self) -> usize {
        self.affine.dout()
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, DenseBlockCache)> {
        let pre = self.affine.forward(x)?;
        let act = leaky_relu(&pre, self.slope);
        let (out, bn) = self.bn.forward(&act, mode)?;
        Ok((
            out,
            DenseBlockCache {
                input: x.clone(),
                pre,
                bn,
            },
        ))
    }

    pub fn backward(&self, cache: &DenseBlockCache, grad: &Matrix) -> (Matrix, DenseBlockGrad) {
        let (dact, bn) = self.bn.backward(&cache.bn, grad);
        let dpre = leaky_relu_backward(&cache.pre, &dact, self.slope);
        let (dx, affine) = self.affine.backward(&cache.input, &dpre);
        (dx, DenseBlockGrad { affine, bn })
    }
}
