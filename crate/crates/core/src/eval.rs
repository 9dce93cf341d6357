//! Trial scoring, detection metrics and attention diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_fields, Dataset};
use crate::error::{Error, Result};
use crate::model::{Embedding, Model};
use crate::nn::{Matrix, Mode};
use crate::par;
use crate::pooling::AttentionRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Enrollment speaker → its enrollment utterance ids.
pub type Enrollments = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialScores {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl TrialScores {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} scores for {} labels",
                scores.len(),
                targets.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("non-finite trial score".into()));
        }
        Ok(Self { scores, targets })
    }

    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Self {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat(true)
            .take(targets.len())
            .chain(std::iter::repeat(false).take(nontargets.len()))
            .collect();
        Self {
            scores,
            targets: labels,
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.targets.iter().filter(|&&t| t).count();
        (t, self.targets.len() - t)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (t, n) = self.counts();
        if t == 0 || n == 0 {
            return Err(Error::Data(format!(
                "need at least one target and one nontarget trial, got {t}/{n}"
            )));
        }
        Ok((t, n))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Cosine scores: each enrollment is the mean of its segment embeddings,
/// length-normalized, compared against the test embedding.
pub fn score_trials(
    embeddings: &HashMap<String, Vec<f64>>,
    enrollments: &Enrollments,
    trials: &[Trial],
) -> Result<TrialScores> {
    let lookup = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::Data(format!("no embedding for utterance {id:?}")))
    };
    let mut models: HashMap<&str, Vec<f64>> = HashMap::new();
    for (spk, utts) in enrollments {
        if utts.is_empty() {
            return Err(Error::Data(format!("enrollment {spk:?} has no segments")));
        }
        let mut mean = vec![0.0; lookup(&utts[0])?.len()];
        for u in utts {
            for (m, v) in mean.iter_mut().zip(lookup(u)?) {
                *m += v;
            }
        }
        models.insert(spk, normalized(&mean));
    }
    for t in trials {
        if !models.contains_key(t.enroll.as_str()) {
            return Err(Error::Data(format!("unknown enrollment speaker {:?}", t.enroll)));
        }
        lookup(&t.test)?;
    }
    let scores = par::map(trials.len(), |i| {
        let t = &trials[i];
        cosine(&models[t.enroll.as_str()], &embeddings[&t.test])
    });
    TrialScores::new(scores, trials.iter().map(|t| t.target).collect())
}

/// Detection operating points `(P_miss, P_fa)` for every distinct threshold,
/// accepting scores `>= θ`, from accept-all to reject-all.
pub fn operating_points(scores: &TrialScores) -> Vec<(f64, f64)> {
    let (nt, nn) = scores.counts();
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]));
    let (mut miss, mut fa) = (0usize, nn);
    let mut points = vec![(0.0, 1.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores.scores[order[i]];
        while i < order.len() && scores.scores[order[i]] == s {
            if scores.targets[order[i]] {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        points.push((miss as f64 / nt as f64, fa as f64 / nn as f64));
    }
    points
}

/// Equal error rate with linear interpolation between adjacent operating
/// points.
pub fn compute_eer(scores: &TrialScores) -> Result<f64> {
    scores.check()?;
    let pts = operating_points(scores);
    for w in pts.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        let (d0, d1) = (m0 - f0, m1 - f1);
        if d0 == 0.0 {
            return Ok(m0);
        }
        if d1 >= 0.0 {
            if d1 == 0.0 {
                return Ok(m1);
            }
            let s = -d0 / (d1 - d0);
            return Ok(m0 + s * (m1 - m0));
        }
    }
    unreachable!("the last operating point has P_miss = 1, P_fa = 0")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

pub const DCF_SRE08: DcfParams = DcfParams {
    p_target: 0.01,
    c_miss: 10.0,
    c_fa: 1.0,
};

pub const DCF_SRE10: DcfParams = DcfParams {
    p_target: 0.001,
    c_miss: 1.0,
    c_fa: 1.0,
};

impl DcfParams {
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target))
            / self.normalizer()
    }
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_min_dcf(scores: &TrialScores, params: DcfParams) -> Result<f64> {
    scores.check()?;
    Ok(operating_points(scores)
        .into_iter()
        .map(|(m, f)| params.normalized_cost(m, f))
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub min_dcf08: f64,
    pub min_dcf10: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn evaluate(scores: &TrialScores, dcf08: DcfParams, dcf10: DcfParams) -> Result<MetricsReport> {
    let (n_target, n_nontarget) = scores.check()?;
    Ok(MetricsReport {
        eer: compute_eer(scores)?,
        min_dcf08: compute_min_dcf(scores, dcf08)?,
        min_dcf10: compute_min_dcf(scores, dcf10)?,
        n_target,
        n_nontarget,
    })
}

/// Per-frame attention of one utterance: the full record and the
/// max-over-heads trace (equal to the weights for a single head).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub max: Vec<f64>,
    pub record: AttentionRecord,
}

pub fn attention_trajectory(model: &Model, features: &Matrix) -> Result<Trajectory> {
    if model.attention.is_none() {
        return Err(Error::Unsupported(
            "attention trajectories need an attention or multihead pooling model".into(),
        ));
    }
    let trace = model.forward(features, Mode::Infer)?;
    let record = trace
        .attention()
        .and_then(|mut r| r.pop())
        .expect("attention model records weights");
    Ok(Trajectory {
        max: record.max_trace(),
        record,
    })
}

impl Trajectory {
    /// `frame<TAB>weight` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (t, w) in self.max.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{w}");
        }
        s
    }

    /// `frame<TAB>head_0<TAB>…` lines for every head.
    pub fn heads_tsv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.record.frames() {
            let _ = write!(s, "{t}");
            for i in 0..self.record.heads() {
                let _ = write!(s, "\t{}", self.record.weights.get(i, t));
            }
            s.push('\n');
        }
        s
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Mean over utterances of the Spearman correlation between per-frame
/// weights and the ground-truth gate.
pub fn gate_correlation(traces: &[Vec<f64>], gates: &[Vec<u8>]) -> Result<f64> {
    if traces.len() != gates.len() || traces.is_empty() {
        return Err(Error::Data(format!(
            "{} weight traces for {} gates",
            traces.len(),
            gates.len()
        )));
    }
    let mut total = 0.0;
    for (i, (w, g)) in traces.iter().zip(gates).enumerate() {
        if w.len() != g.len() {
            return Err(Error::Data(format!(
                "utterance {i}: {} weights for {} gate flags",
                w.len(),
                g.len()
            )));
        }
        let gf: Vec<f64> = g.iter().map(|&x| x as f64).collect();
        total += spearman(w, &gf);
    }
    Ok(total / traces.len() as f64)
}

/// Enrollment from the first `enroll_per_speaker` utterances of every
/// speaker; every remaining utterance is tested against every speaker.
pub fn make_trials(dataset: &Dataset, enroll_per_speaker: usize) -> Result<(Enrollments, Vec<Trial>)> {
    let mut enroll: Enrollments = BTreeMap::new();
    let mut tests: Vec<(&str, usize)> = Vec::new();
    let mut seen = vec![0usize; dataset.num_speakers()];
    for u in &dataset.utterances {
        if seen[u.speaker] < enroll_per_speaker {
            enroll
                .entry(dataset.speakers[u.speaker].clone())
                .or_default()
                .push(u.id.clone());
        } else {
            tests.push((&u.id, u.speaker));
        }
        seen[u.speaker] += 1;
    }
    if enroll.len() < 2 || tests.is_empty() {
        return Err(Error::Data(
            "trial list needs at least two enrolled speakers and one test utterance".into(),
        ));
    }
    let mut trials = Vec::new();
    for (spk, _) in &enroll {
        for &(test, label) in &tests {
            trials.push(Trial {
                enroll: spk.clone(),
                test: test.to_string(),
                target: dataset.speakers[label] == *spk,
            });
        }
    }
    Ok((enroll, trials))
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

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `enroll_spk<TAB>test_utt<TAB>target|nontarget`
pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        let label = if t.target { "target" } else { "nontarget" };
        let _ = writeln!(s, "{}\t{}\t{label}", t.enroll, t.test);
    }
    write_file(path, &s)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let f = split_fields(&line, 3, path, n)?;
            let target = match f[2] {
                "target" => true,
                "nontarget" => false,
                other => {
                    return Err(Error::Data(format!(
                        "{}:{n}: label {other:?} is not target/nontarget",
                        path.display()
                    )))
                }
            };
            Ok(Trial {
                enroll: f[0].into(),
                test: f[1].into(),
                target,
            })
        })
        .collect()
}

/// `enroll_spk<TAB>utt_id`, one line per enrollment segment.
pub fn write_enrollments(path: &Path, enroll: &Enrollments) -> Result<()> {
    let mut s = String::new();
    for (spk, utts) in enroll {
        for u in utts {
            let _ = writeln!(s, "{spk}\t{u}");
        }
    }
    write_file(path, &s)
}

pub fn read_enrollments(path: &Path) -> Result<Enrollments> {
    let mut out: Enrollments = BTreeMap::new();
    for (n, line) in read_lines(path)? {
        let f = split_fields(&line, 2, path, n)?;
        out.entry(f[0].into()).or_default().push(f[1].into());
    }
    Ok(out)
}

/// `utt_id<TAB>v0 v1 …` with shortest round-trip float formatting.
pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut s = String::new();
    for e in embeddings {
        s.push_str(&e.id);
        s.push('\t');
        for (i, v) in e.vector.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn read_embeddings(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for (n, line) in read_lines(path)? {
        let f = split_fields(&line, 2, path, n)?;
        let v = f[1]
            .split(' ')
            .map(|x| {
                x.parse::<f64>().map_err(|e| {
                    Error::Data(format!("{}:{n}: bad embedding value {x:?}: {e}", path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.insert(f[0].to_string(), v);
    }
    Ok(out)
}

/// `enroll<TAB>test<TAB>score`
pub fn write_scores(path: &Path, trials: &[Trial], scores: &TrialScores) -> Result<()> {
    let mut s = String::new();
    for (t, v) in trials.iter().zip(&scores.scores) {
        let _ = writeln!(s, "{}\t{}\t{v}", t.enroll, t.test);
    }
    write_file(path, &s)
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let f = split_fields(&line, 3, path, n)?;
            let v = f[2].parse::<f64>().map_err(|e| {
                Error::Data(format!("{}:{n}: bad score {:?}: {e}", path.display(), f[2]))
            })?;
            Ok((f[0].to_string(), f[1].to_string(), v))
        })
        .collect()
}

/// Attaches trial labels to a scores file, matching on (enroll, test).
pub fn label_scores(scored: &[(String, String, f64)], trials: &[Trial]) -> Result<TrialScores> {
    let labels: HashMap<(&str, &str), bool> = trials
        .iter()
        .map(|t| ((t.enroll.as_str(), t.test.as_str()), t.target))
        .collect();
    let mut scores = Vec::with_capacity(scored.len());
    let mut targets = Vec::with_capacity(scored.len());
    for (e, t, v) in scored {
        let label = labels
            .get(&(e.as_str(), t.as_str()))
            .ok_or_else(|| Error::Data(format!("scored pair ({e}, {t}) is not in the trial list")))?;
        scores.push(*v);
        targets.push(*label);
    }
    TrialScores::new(scores, targets)
}
