//! Synthetic speaker data, feature files and chunked batching.
//!
//! Synthetic utterances follow `x_t = g_t · scale · s_k + N(0, σ² I)` where
//! `s_k ~ N(0, I)` is the speaker identity and `g_t ∈ {0,1}` is a two-state
//! Markov gate marking informative frames. The gate is kept as ground truth
//! for judging learned attention weights.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"XVF1";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const GATES_FILE: &str = "gates.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub features: Matrix,
    /// Per-frame informativeness flags, synthetic data only.
    pub gate: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    /// Speaker names indexed by label.
    pub speakers: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.cols())
    }

    pub fn min_frames(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.features.rows())
            .min()
            .unwrap_or(0)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub dim: usize,
    /// Probability that an informative frame is followed by another.
    pub p_stay_on: f64,
    /// Probability that an uninformative frame is followed by another.
    pub p_stay_off: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Held-out speakers for the evaluation split.
    pub eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
    /// Leading utterances of each evaluation speaker used for enrollment.
    pub enroll_per_speaker: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 32,
            utts_per_speaker: 20,
            t_min: 150,
            t_max: 300,
            dim: 20,
            p_stay_on: 0.9,
            p_stay_off: 0.9,
            scale: 1.0,
            noise_sigma: 0.5,
            seed: 7,
            eval_speakers: 20,
            eval_utts_per_speaker: 10,
            enroll_per_speaker: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("synth.{field}: {msg}")));
        for (name, p) in [("p_stay_on", self.p_stay_on), ("p_stay_off", self.p_stay_off)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(name, "must lie in (0, 1)");
            }
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma", "must be positive");
        }
        if !self.scale.is_finite() {
            return bad("scale", "must be finite");
        }
        if self.t_min < 10 {
            return bad("t_min", "must be at least 10");
        }
        if self.t_max < self.t_min {
            return bad("t_max", "must be >= t_min");
        }
        if self.dim == 0 || self.num_speakers == 0 || self.utts_per_speaker == 0 {
            return bad("dim", "dimension and counts must be positive");
        }
        if self.enroll_per_speaker >= self.eval_utts_per_speaker && self.eval_speakers > 0 {
            return bad("enroll_per_speaker", "must leave test utterances per speaker");
        }
        Ok(())
    }

    /// Stationary fraction of informative frames.
    pub fn stationary_on(&self) -> f64 {
        let to_on = 1.0 - self.p_stay_off;
        let to_off = 1.0 - self.p_stay_on;
        to_on / (to_on + to_off)
    }
}

/// Two-state Markov chain started from its stationary distribution.
pub(crate) fn markov_gate(rng: &mut ChaCha8Rng, len: usize, cfg: &SynthConfig) -> Vec<u8> {
    let mut on = rng.random::<f64>() < cfg.stationary_on();
    let mut gate = Vec::with_capacity(len);
    for _ in 0..len {
        gate.push(on as u8);
        let stay = if on { cfg.p_stay_on } else { cfg.p_stay_off };
        if rng.random::<f64>() >= stay {
            on = !on;
        }
    }
    gate
}

/// Generates the training split.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    gen_synthetic_split(cfg, Split::Train)
}

/// Generates a split. The evaluation split uses its own random stream and
/// speakers disjoint from training.
pub fn gen_synthetic_split(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (speakers, per_speaker, prefix) = match split {
        Split::Train => (cfg.num_speakers, cfg.utts_per_speaker, "spk"),
        Split::Eval => {
            rng.set_stream(1);
            (cfg.eval_speakers, cfg.eval_utts_per_speaker, "eval")
        }
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let identities: Vec<Vec<f64>> = (0..speakers)
        .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let names: Vec<String> = (0..speakers).map(|k| format!("{prefix}{k:03}")).collect();
    let mut utterances = Vec::with_capacity(speakers * per_speaker);
    for (k, identity) in identities.iter().enumerate() {
        for u in 0..per_speaker {
            let len = rng.random_range(cfg.t_min..=cfg.t_max);
            let gate = markov_gate(&mut rng, len, cfg);
            let mut data = Vec::with_capacity(len * cfg.dim);
            for &g in &gate {
                let amp = g as f64 * cfg.scale;
                for &s in identity {
                    data.push(amp * s + noise.sample(&mut rng));
                }
            }
            utterances.push(Utterance {
                id: format!("{}-u{u:03}", names[k]),
                speaker: k,
                features: Matrix::new(len, cfg.dim, data)?,
                gate: Some(gate),
            });
        }
    }
    Ok(Dataset {
        utterances,
        speakers: names,
        split,
    })
}

pub fn encode_features(features: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * features.as_slice().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(Error::format(path, 0, "file too short for XVF1 magic"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, 0, "bad feature magic, expected XVF1"));
    }
    if bytes.len() < 12 {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, 4, format!("empty matrix {rows}x{cols}")));
    }
    let need = 12 + 4 * rows * cols;
    if bytes.len() < need {
        let whole = (bytes.len() - 12) / 4;
        return Err(Error::format(
            path,
            (12 + 4 * whole) as u64,
            format!("truncated: header says {} floats, found {whole}", rows * cols),
        ));
    }
    if bytes.len() > need {
        return Err(Error::format(path, need as u64, "trailing bytes after feature data"));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, (12 + 4 * i) as u64, "non-finite feature value"));
    }
    Ok(Matrix::from_parts(rows, cols, data))
}

/// Writes `XVF1`, u32 rows, u32 cols, then row-major f32 values.
pub fn write_features(features: &Matrix, path: &Path) -> Result<()> {
    if !features.is_finite() {
        return Err(Error::Data(format!("non-finite features for {}", path.display())));
    }
    fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn gate_string(g: &[u8]) -> String {
    g.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

/// Writes `manifest.tsv`, `gates.tsv` (when gates exist) and one feature
/// file per utterance under `feats/`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut manifest = String::new();
    let mut gates = String::new();
    for u in &ds.utterances {
        let rel = format!("feats/{}.xvf", u.id);
        write_features(&u.features, &dir.join(&rel))?;
        manifest.push_str(&format!("{}\t{}\t{}\n", u.id, ds.speakers[u.speaker], rel));
        if let Some(g) = &u.gate {
            gates.push_str(&format!("{}\t{}\n", u.id, gate_string(g)));
        }
    }
    write_text(&dir.join(MANIFEST_FILE), &manifest)?;
    if !gates.is_empty() {
        write_text(&dir.join(GATES_FILE), &gates)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

pub(crate) fn split_fields<'a>(
    line: &'a str,
    n: usize,
    path: &Path,
    lineno: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(Error::Data(format!(
            "{}:{lineno}: expected {n} tab-separated fields, got {}",
            path.display(),
            fields.len()
        )));
    }
    Ok(fields)
}

pub fn read_gates(path: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let mut out = HashMap::new();
    for (lineno, line) in read_lines(path)? {
        let f = split_fields(&line, 2, path, lineno)?;
        let gate = f[1]
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::Data(format!(
                    "{}:{lineno}: gate character {other:?} is not 0/1",
                    path.display()
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        out.insert(f[0].to_string(), gate);
    }
    Ok(out)
}

/// Loads a dataset directory written by [`save_dataset`]. Speaker labels
/// follow first appearance in the manifest.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let gates_path = dir.join(GATES_FILE);
    let mut gates = if gates_path.exists() {
        read_gates(&gates_path)?
    } else {
        HashMap::new()
    };
    let mut speakers: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut utterances = Vec::new();
    for (lineno, line) in read_lines(&manifest)? {
        let f = split_fields(&line, 3, &manifest, lineno)?;
        let label = *index.entry(f[1].to_string()).or_insert_with(|| {
            speakers.push(f[1].to_string());
            speakers.len() - 1
        });
        let features = read_features(&dir.join(f[2]))?;
        let gate = gates.remove(f[0]);
        if let Some(g) = &gate {
            if g.len() != features.rows() {
                return Err(Error::Data(format!(
                    "gate for {} has {} flags for {} frames",
                    f[0],
                    g.len(),
                    features.rows()
                )));
            }
        }
        utterances.push(Utterance {
            id: f[0].to_string(),
            speaker: label,
            features,
            gate,
        });
    }
    if utterances.is_empty() {
        return Err(Error::Data(format!("{} lists no utterances", manifest.display())));
    }
    Ok(Dataset {
        utterances,
        speakers,
        split,
    })
}

/// One training batch: chunks packed row-wise with their row ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub segments: Vec<Range<usize>>,
    pub labels: Vec<usize>,
    /// Chunks that had to be padded by edge replication.
    pub padded: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let parts: Vec<&Matrix> = utts.iter().map(|u| &u.features).collect();
        let (features, segments) = Matrix::stack(&parts)?;
        Ok(Self {
            features,
            segments,
            labels: utts.iter().map(|u| u.speaker).collect(),
            padded: vec![false; utts.len()],
        })
    }
}

/// Cuts `len` contiguous frames starting at `start`, replicating the last
/// frame when the utterance is shorter.
fn chunk(features: &Matrix, start: usize, len: usize) -> (Vec<f64>, bool) {
    let d = features.cols();
    let mut out = Vec::with_capacity(len * d);
    for t in 0..len {
        let src = (start + t).min(features.rows() - 1);
        out.extend_from_slice(features.row(src));
    }
    (out, features.rows() < len)
}

/// Per-epoch batch generator over a dataset.
#[derive(Debug)]
pub struct Batcher<'a> {
    dataset: &'a Dataset,
    chunk_len: usize,
    batch_size: usize,
    seed: u64,
}

pub fn make_batches(dataset: &Dataset, chunk_len: usize, batch_size: usize, seed: u64) -> Result<Batcher<'_>> {
    if chunk_len == 0 || batch_size == 0 {
        return Err(Error::Config("chunk_len and batch_size must be positive".into()));
    }
    if dataset.utterances.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(Batcher {
        dataset,
        chunk_len,
        batch_size,
        seed,
    })
}

impl<'a> Batcher<'a> {
    fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// All batches of one epoch: every utterance contributes one random
    /// chunk, in a seed-determined shuffled order. A trailing batch with a
    /// single chunk is dropped since batch statistics need two rows.
    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.dataset.utterances.len()).collect();
        order.shuffle(&mut rng);
        let d = self.dataset.utterances[order[0]].features.cols();
        let mut batches = Vec::new();
        for group in order.chunks(self.batch_size) {
            if group.len() < 2 && !batches.is_empty() {
                break;
            }
            let mut data = Vec::with_capacity(group.len() * self.chunk_len * d);
            let mut segments = Vec::with_capacity(group.len());
            let mut labels = Vec::with_capacity(group.len());
            let mut padded = Vec::with_capacity(group.len());
            for (i, &u) in group.iter().enumerate() {
                let utt = &self.dataset.utterances[u];
                let slack = utt.features.rows().saturating_sub(self.chunk_len);
                let start = rng.random_range(0..=slack);
                let (rows, pad) = chunk(&utt.features, start, self.chunk_len);
                data.extend_from_slice(&rows);
                segments.push(i * self.chunk_len..(i + 1) * self.chunk_len);
                labels.push(utt.speaker);
                padded.push(pad);
            }
            batches.push(Batch {
                features: Matrix::from_parts(group.len() * self.chunk_len, d, data),
                segments,
                labels,
                padded,
            });
        }
        batches
    }
}

/// Default location of a split inside a generated data directory.
pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(match split {
        Split::Train => "train",
        Split::Eval => "eval",
    })
}
