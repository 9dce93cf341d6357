//! The x-vector network: TDNN frame layers, a pooling layer and
//! utterance-level dense layers ending in a speaker softmax.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, Affine, AffineGrad, DenseBlock, DenseBlockCache, DenseBlockGrad, Matrix, Mode,
    SpliceContext,
};
use crate::par;
use crate::pooling::{
    self, AttentionCache, AttentionPooling, AttentionRecord, CompatibilityNet, SegmentStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Stats,
    #[serde(alias = "att")]
    Attention,
    Multihead,
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stats" => Ok(Self::Stats),
            "att" | "attention" => Ok(Self::Attention),
            "multihead" => Ok(Self::Multihead),
            other => Err(Error::Config(format!("unknown pooling kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameLayerConfig {
    pub context: SpliceContext,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub frame_layers: Vec<FrameLayerConfig>,
    pub pooling: PoolingKind,
    /// 1-based frame layer whose output feeds the compatibility net.
    pub key_layer: usize,
    /// Compatibility net widths; the last entry is the query dimension.
    pub compat_hidden: Vec<usize>,
    pub heads: usize,
    pub utterance_layers: Vec<usize>,
    pub num_speakers: usize,
    /// 0-based utterance layer whose affine output is the embedding.
    pub embedding_tap: usize,
}

fn frame_stack(widths: &[usize]) -> Vec<FrameLayerConfig> {
    let contexts: [&[i32]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];
    contexts
        .iter()
        .zip(widths)
        .map(|(c, &width)| FrameLayerConfig {
            context: SpliceContext::new(c.to_vec()).expect("static contexts are valid"),
            width,
        })
        .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(32, PoolingKind::Stats)
    }
}

impl ModelConfig {
    /// Full-size recipe: 512×4 + 1500 frame widths, two 512 utterance layers.
    pub fn paper_scale(input_dim: usize, num_speakers: usize, pooling: PoolingKind) -> Self {
        Self {
            input_dim,
            frame_layers: frame_stack(&[512, 512, 512, 512, 1500]),
            pooling,
            key_layer: 4,
            compat_hidden: vec![500],
            heads: if pooling == PoolingKind::Multihead { 50 } else { 1 },
            utterance_layers: vec![512, 512],
            num_speakers,
            embedding_tap: 0,
        }
    }

    /// Desk-scale variant with the same layer structure.
    pub fn desk(num_speakers: usize, pooling: PoolingKind) -> Self {
        Self {
            input_dim: 20,
            frame_layers: frame_stack(&[64, 64, 64, 64, 192]),
            pooling,
            key_layer: 4,
            compat_hidden: vec![100],
            heads: if pooling == PoolingKind::Multihead { 4 } else { 1 },
            utterance_layers: vec![64, 64],
            num_speakers,
            embedding_tap: 0,
        }
    }

    /// Five small frame layers for finite-difference checks.
    pub fn tiny(num_speakers: usize, pooling: PoolingKind) -> Self {
        Self {
            input_dim: 3,
            frame_layers: frame_stack(&[5, 5, 5, 5, 10]),
            pooling,
            key_layer: 4,
            compat_hidden: vec![6, 10],
            heads: if pooling == PoolingKind::Multihead { 2 } else { 1 },
            utterance_layers: vec![6, 5],
            num_speakers,
            embedding_tap: 0,
        }
    }

    pub fn num_frame_layers(&self) -> usize {
        self.frame_layers.len()
    }

    pub fn value_dim(&self) -> usize {
        self.frame_layers.last().map_or(0, |l| l.width)
    }

    pub fn query_dim(&self) -> usize {
        self.compat_hidden.last().copied().unwrap_or(0)
    }

    pub fn effective_heads(&self) -> usize {
        match self.pooling {
            PoolingKind::Multihead => self.heads,
            _ => 1,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.utterance_layers[self.embedding_tap]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.input_dim == 0 {
            return bad("input_dim", "must be positive".into());
        }
        if self.frame_layers.is_empty() {
            return bad("frame_layers", "need at least one layer".into());
        }
        if let Some(i) = self.frame_layers.iter().position(|l| l.width == 0) {
            return bad("frame_layers", format!("layer {} has zero width", i + 1));
        }
        if self.utterance_layers.is_empty() || self.utterance_layers.contains(&0) {
            return bad("utterance_layers", "need at least one positive width".into());
        }
        if self.embedding_tap >= self.utterance_layers.len() {
            return bad(
                "embedding_tap",
                format!("{} >= {} utterance layers", self.embedding_tap, self.utterance_layers.len()),
            );
        }
        if self.num_speakers < 2 {
            return bad("num_speakers", "need at least 2 speakers".into());
        }
        if self.pooling == PoolingKind::Stats {
            return Ok(());
        }
        let l = self.num_frame_layers();
        if self.key_layer < 1 || self.key_layer > l {
            return bad("key_layer", format!("{} outside 1..={l}", self.key_layer));
        }
        if self.compat_hidden.is_empty() || self.compat_hidden.contains(&0) {
            return bad("compat_hidden", "need at least one positive width".into());
        }
        if self.heads == 0 {
            return bad("heads", "must be at least 1".into());
        }
        let h = self.effective_heads();
        if self.value_dim() % h != 0 {
            return bad(
                "heads",
                format!("{h} does not divide the last frame width {}", self.value_dim()),
            );
        }
        if self.query_dim() % h != 0 {
            return bad(
                "heads",
                format!("{h} does not divide the query dimension {}", self.query_dim()),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLayer {
    pub context: SpliceContext,
    pub block: DenseBlock,
}

/// Parameter groups: frame network, utterance network (including the
/// speaker classifier), compatibility net and query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Frame,
    Utterance,
    Compat,
    Query,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Frame => "theta_f",
            ParamGroup::Utterance => "theta_u",
            ParamGroup::Compat => "theta_k",
            ParamGroup::Query => "q",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub frame: Vec<FrameLayer>,
    pub attention: Option<AttentionPooling>,
    pub utterance: Vec<DenseBlock>,
    pub output: Affine,
}

/// Gradients laid out like [`Model`]'s trainable parameters.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub frame: Vec<DenseBlockGrad>,
    pub compat: Vec<DenseBlockGrad>,
    pub query: Vec<f64>,
    pub utterance: Vec<DenseBlockGrad>,
    pub output: AffineGrad,
}

#[derive(Clone, Debug)]
enum PoolState {
    Stats(Vec<SegmentStats>),
    Attention(AttentionCache),
}

/// Everything a forward pass computed, kept for inspection and backward.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub segments: Vec<Range<usize>>,
    /// Outputs of frame layers 1..=L, packed over the batch.
    pub frame_outputs: Vec<Matrix>,
    frame_caches: Vec<DenseBlockCache>,
    /// B × 2·d_v pooled statistics.
    pub pooled: Matrix,
    pool: PoolState,
    pub utterance_outputs: Vec<Matrix>,
    utterance_caches: Vec<DenseBlockCache>,
    pub posteriors: Matrix,
}

impl ForwardTrace {
    /// Attention weights of every utterance, absent for statistics pooling.
    pub fn attention(&self) -> Option<Vec<AttentionRecord>> {
        match &self.pool {
            PoolState::Stats(_) => None,
            PoolState::Attention(c) => Some(c.records()),
        }
    }

    /// Which side of the leaky-ReLU kink every pre-activation in the
    /// network falls on, in a fixed layer order.
    pub fn activation_signs(&self) -> Vec<bool> {
        let compat: &[DenseBlockCache] = match &self.pool {
            PoolState::Attention(c) => c.net_caches(),
            PoolState::Stats(_) => &[],
        };
        self.frame_caches
            .iter()
            .chain(compat)
            .chain(&self.utterance_caches)
            .flat_map(|c| c.pre_activation().as_slice().iter().map(|&v| v >= 0.0))
            .collect()
    }

    /// Pre-activation output of utterance layer `tap` (B × width).
    pub fn utterance_pre_activation(&self, tap: usize) -> &Matrix {
        self.utterance_caches[tap].pre_activation()
    }
}

/// A speaker embedding tagged with its utterance id.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Affine {
    let limit = (6.0 / (din + dout) as f64).sqrt();
    let data = (0..din * dout).map(|_| rng.random_range(-limit..limit)).collect();
    Affine {
        weight: Matrix::from_parts(dout, din, data),
        bias: vec![0.0; dout],
    }
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frame = Vec::with_capacity(config.frame_layers.len());
        let mut din = config.input_dim;
        for layer in &config.frame_layers {
            let fan_in = din * layer.context.len();
            frame.push(FrameLayer {
                context: layer.context.clone(),
                block: DenseBlock::new(glorot(&mut rng, fan_in, layer.width)),
            });
            din = layer.width;
        }
        let attention = match config.pooling {
            PoolingKind::Stats => None,
            _ => {
                let mut din = config.frame_layers[config.key_layer - 1].width;
                let mut blocks = Vec::new();
                for &w in &config.compat_hidden {
                    blocks.push(DenseBlock::new(glorot(&mut rng, din, w)));
                    din = w;
                }
                let dq = config.query_dim();
                let normal = Normal::new(0.0, 1.0 / (dq as f64).sqrt())
                    .expect("finite positive std");
                let query = (0..dq).map(|_| normal.sample(&mut rng)).collect();
                Some(AttentionPooling::new(
                    CompatibilityNet::new(blocks)?,
                    query,
                    config.effective_heads(),
                )?)
            }
        };
        let mut din = 2 * config.value_dim();
        let mut utterance = Vec::new();
        for &w in &config.utterance_layers {
            utterance.push(DenseBlock::new(glorot(&mut rng, din, w)));
            din = w;
        }
        let output = glorot(&mut rng, din, config.num_speakers);
        Ok(Self {
            config,
            frame,
            attention,
            utterance,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Forward over a packed batch whose utterances occupy `segs`.
    pub fn forward_packed(&self, x: &Matrix, segs: &[Range<usize>], mode: Mode) -> Result<ForwardTrace> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Data(format!(
                "features have {} dimensions, model expects {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        if segs.is_empty() || segs.iter().any(|s| s.is_empty()) {
            return Err(Error::Data("every utterance needs at least one frame".into()));
        }
        let mut frame_outputs = Vec::with_capacity(self.frame.len());
        let mut frame_caches = Vec::with_capacity(self.frame.len());
        let mut h = x.clone();
        for layer in &self.frame {
            let spliced = nn::splice_segments(&h, segs, &layer.context);
            let (y, cache) = layer.block.forward(&spliced, mode)?;
            frame_caches.push(cache);
            frame_outputs.push(y.clone());
            h = y;
        }
        let values = &frame_outputs[frame_outputs.len() - 1];
        let (pooled, pool) = match &self.attention {
            None => {
                let (out, stats) = pooling::pool_segments(values, segs, None);
                (out, PoolState::Stats(stats))
            }
            Some(att) => {
                let keys = &frame_outputs[self.config.key_layer - 1];
                let (out, cache) = att.forward(values, keys, segs, mode)?;
                (out, PoolState::Attention(cache))
            }
        };
        let mut utterance_outputs = Vec::with_capacity(self.utterance.len());
        let mut utterance_caches = Vec::with_capacity(self.utterance.len());
        let mut u = pooled.clone();
        for block in &self.utterance {
            let (y, cache) = block.forward(&u, mode)?;
            utterance_caches.push(cache);
            utterance_outputs.push(y.clone());
            u = y;
        }
        let logits = self.output.forward(&u)?;
        let posteriors = nn::softmax_rows(&logits);
        Ok(ForwardTrace {
            mode,
            segments: segs.to_vec(),
            frame_outputs,
            frame_caches,
            pooled,
            pool,
            utterance_outputs,
            utterance_caches,
            posteriors,
        })
    }

    pub fn forward_batch(&self, utterances: &[&Matrix], mode: Mode) -> Result<ForwardTrace> {
        let (x, segs) = Matrix::stack(utterances)?;
        self.forward_packed(&x, &segs, mode)
    }

    pub fn forward(&self, features: &Matrix, mode: Mode) -> Result<ForwardTrace> {
        self.forward_packed(features, &[0..features.rows()], mode)
    }

    /// Backward from the gradient of the loss w.r.t. the output logits.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> ModelGrads {
        let last_hidden = trace
            .utterance_outputs
            .last()
            .expect("at least one utterance layer");
        let (mut g, output) = self.output.backward(last_hidden, dlogits);
        let mut utterance = Vec::with_capacity(self.utterance.len());
        for (block, cache) in self.utterance.iter().zip(&trace.utterance_caches).rev() {
            let (dx, bg) = block.backward(cache, &g);
            utterance.push(bg);
            g = dx;
        }
        utterance.reverse();

        let l = self.frame.len();
        let values = &trace.frame_outputs[l - 1];
        let mut incoming: Vec<Option<Matrix>> = vec![None; l];
        let (compat, query) = match (&trace.pool, &self.attention) {
            (PoolState::Stats(stats), _) => {
                let (dv, _) =
                    pooling::pool_segments_backward(values, &trace.segments, stats, &g, false);
                incoming[l - 1] = Some(dv);
                (Vec::new(), Vec::new())
            }
            (PoolState::Attention(cache), Some(att)) => {
                let ag = att.backward(cache, &g);
                incoming[l - 1] = Some(ag.values);
                let k = self.config.key_layer - 1;
                incoming[k] = Some(match incoming[k].take() {
                    Some(mut acc) => {
                        add_assign(&mut acc, &ag.keys);
                        acc
                    }
                    None => ag.keys,
                });
                (ag.net, ag.query)
            }
            (PoolState::Attention(_), None) => unreachable!("attention trace from a stats model"),
        };

        let mut frame = Vec::with_capacity(l);
        let mut carry: Option<Matrix> = None;
        for i in (0..l).rev() {
            let mut grad = incoming[i].take().unwrap_or_else(|| {
                Matrix::zeros(trace.frame_outputs[i].rows(), trace.frame_outputs[i].cols())
            });
            if let Some(c) = carry.take() {
                add_assign(&mut grad, &c);
            }
            let layer = &self.frame[i];
            let (dspliced, bg) = layer.block.backward(&trace.frame_caches[i], &grad);
            frame.push(bg);
            if i > 0 {
                let d = trace.frame_outputs[i - 1].cols();
                carry = Some(nn::splice_backward(&dspliced, &trace.segments, &layer.context, d));
            }
        }
        frame.reverse();
        ModelGrads {
            frame,
            compat,
            query,
            utterance,
            output,
        }
    }

    /// Mean cross entropy over the batch with full parameter gradients.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        segs: &[Range<usize>],
        labels: &[usize],
        mode: Mode,
    ) -> Result<(f64, ModelGrads, ForwardTrace)> {
        let trace = self.forward_packed(x, segs, mode)?;
        let loss = nn::cross_entropy(&trace.posteriors, labels)?;
        // softmax + mean cross entropy: (p − onehot) / B
        let n = labels.len() as f64;
        let mut dlogits = trace.posteriors.clone();
        for (r, &l) in labels.iter().enumerate() {
            let v = dlogits.get(r, l);
            dlogits.set(r, l, v - 1.0);
        }
        dlogits.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        let grads = self.backward(&trace, &dlogits);
        Ok((loss, grads, trace))
    }

    pub fn loss(&self, x: &Matrix, segs: &[Range<usize>], labels: &[usize], mode: Mode) -> Result<f64> {
        let trace = self.forward_packed(x, segs, mode)?;
        nn::cross_entropy(&trace.posteriors, labels)
    }

    /// Folds train-mode batch statistics into every running mean/variance.
    pub fn absorb_running_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        for (layer, cache) in self.frame.iter_mut().zip(&trace.frame_caches) {
            layer.block.bn.absorb(&cache.bn);
        }
        if let (Some(att), PoolState::Attention(cache)) = (self.attention.as_mut(), &trace.pool) {
            for (b, c) in att.net.blocks.iter_mut().zip(cache.net_caches()) {
                b.bn.absorb(&c.bn);
            }
        }
        for (b, c) in self.utterance.iter_mut().zip(&trace.utterance_caches) {
            b.bn.absorb(&c.bn);
        }
    }

    /// x-vector of one utterance: pre-activation of the tapped utterance layer.
    pub fn extract_embedding(&self, features: &Matrix) -> Result<Vec<f64>> {
        let trace = self.forward(features, Mode::Infer)?;
        Ok(trace
            .utterance_pre_activation(self.config.embedding_tap)
            .row(0)
            .to_vec())
    }

    /// Embeddings of many utterances, one independent forward each.
    pub fn extract_embeddings<'a, I>(&self, utterances: I) -> Result<Vec<Embedding>>
    where
        I: IntoIterator<Item = (&'a str, &'a Matrix)>,
    {
        let items: Vec<(&str, &Matrix)> = utterances.into_iter().collect();
        par::map(items.len(), |i| {
            let (id, feats) = items[i];
            self.extract_embedding(feats).map(|vector| Embedding {
                id: id.to_string(),
                vector,
            })
        })
        .into_iter()
        .collect()
    }

    /// Trainable tensors in declaration order.
    pub fn trainable(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = Vec::new();
        for l in &self.frame {
            push_block(&mut out, ParamGroup::Frame, &l.block);
        }
        if let Some(att) = &self.attention {
            for b in &att.net.blocks {
                push_block(&mut out, ParamGroup::Compat, b);
            }
            out.push((ParamGroup::Query, &att.query));
        }
        for b in &self.utterance {
            push_block(&mut out, ParamGroup::Utterance, b);
        }
        out.push((ParamGroup::Utterance, self.output.weight.as_slice()));
        out.push((ParamGroup::Utterance, &self.output.bias));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        for l in &mut self.frame {
            push_block_mut(&mut out, ParamGroup::Frame, &mut l.block);
        }
        if let Some(att) = &mut self.attention {
            for b in &mut att.net.blocks {
                push_block_mut(&mut out, ParamGroup::Compat, b);
            }
            out.push((ParamGroup::Query, &mut att.query));
        }
        for b in &mut self.utterance {
            push_block_mut(&mut out, ParamGroup::Utterance, b);
        }
        out.push((ParamGroup::Utterance, self.output.weight.as_mut_slice()));
        out.push((ParamGroup::Utterance, &mut self.output.bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every tensor written to a checkpoint, including running statistics.
    fn state_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.frame {
            out.extend(block_state(&l.block));
        }
        if let Some(att) = &self.attention {
            for b in &att.net.blocks {
                out.extend(block_state(b));
            }
            out.push(&att.query);
        }
        for b in &self.utterance {
            out.extend(block_state(b));
        }
        out.push(self.output.weight.as_slice());
        out.push(&self.output.bias);
        out
    }

    fn state_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.frame {
            out.extend(block_state_mut(&mut l.block));
        }
        if let Some(att) = &mut self.attention {
            for b in &mut att.net.blocks {
                out.extend(block_state_mut(b));
            }
            out.push(&mut att.query);
        }
        for b in &mut self.utterance {
            out.extend(block_state_mut(b));
        }
        out.push(self.output.weight.as_mut_slice());
        out.push(&mut self.output.bias);
        out
    }

    /// Checkpoint bytes: `XVM1`, u64 config length, config JSON, then each
    /// tensor as a u64 element count followed by little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.state_tensors() {
            buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "bad checkpoint magic, expected XVM1"));
        }
        let len = r.u64()? as usize;
        let at = r.pos as u64;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(path, at, format!("config json: {e}")))?;
        let mut model = Model::build(config, 0)?;
        for t in model.state_tensors_mut() {
            let at = r.pos as u64;
            let n = r.u64()? as usize;
            if n != t.len() {
                return Err(Error::format(
                    path,
                    at,
                    format!("tensor has {n} elements, config implies {}", t.len()),
                ));
            }
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XVM1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn push_block<'a>(out: &mut Vec<(ParamGroup, &'a [f64])>, g: ParamGroup, b: &'a DenseBlock) {
    out.push((g, b.affine.weight.as_slice()));
    out.push((g, &b.affine.bias));
    out.push((g, &b.bn.gamma));
    out.push((g, &b.bn.beta));
}

fn push_block_mut<'a>(
    out: &mut Vec<(ParamGroup, &'a mut [f64])>,
    g: ParamGroup,
    b: &'a mut DenseBlock,
) {
    out.push((g, b.affine.weight.as_mut_slice()));
    out.push((g, &mut b.affine.bias));
    out.push((g, &mut b.bn.gamma));
    out.push((g, &mut b.bn.beta));
}

fn block_state(b: &DenseBlock) -> [&[f64]; 6] {
    [
        b.affine.weight.as_slice(),
        &b.affine.bias,
        &b.bn.gamma,
        &b.bn.beta,
        &b.bn.running_mean,
        &b.bn.running_var,
    ]
}

fn block_state_mut(b: &mut DenseBlock) -> [&mut [f64]; 6] {
    [
        b.affine.weight.as_mut_slice(),
        &mut b.affine.bias,
        &mut b.bn.gamma,
        &mut b.bn.beta,
        &mut b.bn.running_mean,
        &mut b.bn.running_var,
    ]
}

fn block_grad<'a>(out: &mut Vec<(ParamGroup, &'a [f64])>, g: ParamGroup, b: &'a DenseBlockGrad) {
    out.push((g, b.affine.weight.as_slice()));
    out.push((g, &b.affine.bias));
    out.push((g, &b.bn.gamma));
    out.push((g, &b.bn.beta));
}

fn block_grad_mut(b: &mut DenseBlockGrad) -> [&mut [f64]; 4] {
    [
        b.affine.weight.as_mut_slice(),
        &mut b.affine.bias,
        &mut b.bn.gamma,
        &mut b.bn.beta,
    ]
}

impl ModelGrads {
    /// Gradient tensors in the order of [`Model::trainable`].
    pub fn tensors(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = Vec::new();
        for b in &self.frame {
            block_grad(&mut out, ParamGroup::Frame, b);
        }
        if !self.query.is_empty() {
            for b in &self.compat {
                block_grad(&mut out, ParamGroup::Compat, b);
            }
            out.push((ParamGroup::Query, &self.query));
        }
        for b in &self.utterance {
            block_grad(&mut out, ParamGroup::Utterance, b);
        }
        out.push((ParamGroup::Utterance, self.output.weight.as_slice()));
        out.push((ParamGroup::Utterance, &self.output.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        // Same order as `tensors`.
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.frame {
            out.extend(block_grad_mut(b));
        }
        if !self.query.is_empty() {
            for b in &mut self.compat {
                out.extend(block_grad_mut(b));
            }
            out.push(&mut self.query);
        }
        for b in &mut self.utterance {
            out.extend(block_grad_mut(b));
        }
        out.push(self.output.weight.as_mut_slice());
        out.push(&mut self.output.bias);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn add_assign(acc: &mut Matrix, other: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}

pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}
