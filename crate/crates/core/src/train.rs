//! Joint cross-entropy training and finite-difference gradient checks.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelGrads, ParamGroup};
use crate::nn::{self, Matrix, Mode};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub momentum: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            momentum: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("optimizer.lr must be >= 0, got {}", self.lr)));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("optimizer.{name} must lie in [0, 1)")));
            }
        }
        if self.clip_norm < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config(
                "optimizer clip_norm/weight_decay must be >= 0 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            batch_size: 32,
            chunk_len: 150,
            seed: 1,
        }
    }
}

/// Optimizer with per-tensor accumulators aligned to [`Model::trainable`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(model: &Model, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<usize> = model.trainable().iter().map(|(_, t)| t.len()).collect();
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match config.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Ok(Self {
            config,
            step: 0,
            first: zeros(),
            second,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the L2 norm of the parameter change.
    pub fn apply(&mut self, model: &mut Model, grads: &ModelGrads) -> f64 {
        self.step += 1;
        let c = self.config.clone();
        let grad_tensors = grads.tensors();
        let mut moved = 0.0;
        let (bc1, bc2) = (
            1.0 - c.beta1.powi(self.step as i32),
            1.0 - c.beta2.powi(self.step as i32),
        );
        for (i, (_, param)) in model.trainable_mut().into_iter().enumerate() {
            let g = grad_tensors[i].1;
            for k in 0..param.len() {
                let gk = g[k] + c.weight_decay * param[k];
                let delta = match c.kind {
                    OptimizerKind::SgdMomentum => {
                        let v = &mut self.first[i][k];
                        *v = c.momentum * *v + gk;
                        -c.lr * *v
                    }
                    OptimizerKind::Adam => {
                        let m = &mut self.first[i][k];
                        *m = c.beta1 * *m + (1.0 - c.beta1) * gk;
                        let v = &mut self.second[i][k];
                        *v = c.beta2 * *v + (1.0 - c.beta2) * gk * gk;
                        -c.lr * (self.first[i][k] / bc1) / ((self.second[i][k] / bc2).sqrt() + c.eps)
                    }
                };
                param[k] += delta;
                moved += delta * delta;
            }
        }
        moved.sqrt()
    }
}

/// Scales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn nonfinite_groups(model: &Model, grads: &ModelGrads) -> Vec<&'static str> {
    let mut bad: Vec<&'static str> = Vec::new();
    let params = model.trainable();
    for (i, (group, g)) in grads.tensors().into_iter().enumerate() {
        let p = params[i].1;
        if g.iter().chain(p).any(|v| !v.is_finite()) && !bad.contains(&group.name()) {
            bad.push(group.name());
        }
    }
    bad
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Chunks whose train-mode argmax matched the label.
    pub correct: usize,
    pub grad_norm: f64,
    pub update_norm: f64,
}

/// Forward, backward, clip and update on one batch.
pub fn train_step(model: &mut Model, batch: &Batch, opt: &mut Optimizer) -> Result<StepOutcome> {
    let (loss, mut grads, trace) =
        model.loss_and_grads(&batch.features, &batch.segments, &batch.labels, Mode::Train)?;
    if !loss.is_finite() {
        let groups = nonfinite_groups(model, &grads);
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at optimizer step {}; non-finite parameter groups: {groups:?}",
            opt.steps() + 1
        )));
    }
    let bad = nonfinite_groups(model, &grads);
    if !bad.is_empty() {
        return Err(Error::Numeric(format!(
            "non-finite gradients at optimizer step {} in {bad:?}",
            opt.steps() + 1
        )));
    }
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| argmax(trace.posteriors.row(*r)) == l)
        .count();
    model.absorb_running_stats(&trace);
    let grad_norm = clip_global_norm(&mut grads, opt.config.clip_norm);
    let update_norm = opt.apply(model, &grads);
    Ok(StepOutcome {
        loss,
        correct,
        grad_norm,
        update_norm,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Optional side effects of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory receiving `epoch-NNN.xvm` checkpoints after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<Box<dyn FnMut(&StepLog) -> Result<()> + 'a>>,
}

pub fn train(
    config: ModelConfig,
    dataset: &Dataset,
    hyper: &TrainConfig,
    seed: u64,
    mut hooks: TrainHooks<'_>,
) -> Result<(Model, TrainReport)> {
    let started = Instant::now();
    if config.num_speakers != dataset.num_speakers() {
        return Err(Error::Config(format!(
            "model.num_speakers={} but the dataset has {} speakers",
            config.num_speakers,
            dataset.num_speakers()
        )));
    }
    if dataset.dim() != Some(config.input_dim) {
        return Err(Error::Config(format!(
            "model.input_dim={} but features have {:?} dimensions",
            config.input_dim,
            dataset.dim()
        )));
    }
    let mut model = Model::build(config, seed)?;
    let mut opt = Optimizer::new(&model, hyper.optimizer.clone())?;
    let batcher = make_batches(dataset, hyper.chunk_len, hyper.batch_size, seed)?;
    if let Some(dir) = &hooks.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = TrainReport::default();
    for epoch in 0..hyper.epochs {
        let (mut correct, mut seen) = (0, 0);
        for batch in batcher.epoch(epoch as u64) {
            let out = train_step(&mut model, &batch, &mut opt)?;
            correct += out.correct;
            seen += batch.len();
            report.losses.push(out.loss);
            if let Some(cb) = hooks.on_step.as_mut() {
                cb(&StepLog {
                    step: opt.steps(),
                    loss: out.loss,
                    lr: opt.config.lr,
                    epoch,
                })?;
            }
        }
        report.epoch_accuracy.push(correct as f64 / seen.max(1) as f64);
        if let Some(dir) = &hooks.checkpoint_dir {
            let path = dir.join(format!("epoch-{:03}.xvm", epoch + 1));
            model.save(&path)?;
            report.checkpoints.push(path);
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Closed-set accuracy on full utterances in inference mode.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let hits: Vec<Result<bool>> = par::map(dataset.utterances.len(), |i| {
        let u = &dataset.utterances[i];
        let trace = model.forward(&u.features, Mode::Infer)?;
        Ok(argmax(trace.posteriors.row(0)) == u.speaker)
    });
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / dataset.utterances.len().max(1) as f64)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_MAX_SKIPPED: f64 = 0.05;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupCheck {
    /// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over the whole group.
    pub rel_error: f64,
    /// Worst single coordinate; dominated by finite-difference noise
    /// wherever the true gradient is exactly zero.
    pub max_elementwise: f64,
    pub checked: usize,
    /// Coordinates left out because the step moved a leaky-ReLU input
    /// across zero, where the central difference is meaningless.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: BTreeMap<ParamGroup, GroupCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.values().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    /// Error below `tolerance` in every group, with at most
    /// [`GRADCHECK_MAX_SKIPPED`] of each group's coordinates skipped.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
            && self
                .groups
                .values()
                .all(|g| g.skipped as f64 <= GRADCHECK_MAX_SKIPPED * (g.checked + g.skipped) as f64)
    }
}

#[derive(Default)]
struct GroupAcc {
    diff: f64,
    analytic: f64,
    numeric: f64,
    worst: f64,
    checked: usize,
    skipped: usize,
}

/// Finite-difference check of every trainable parameter of `model` on the
/// mean cross-entropy of a packed batch.
pub fn gradcheck_model(
    model: &Model,
    x: &Matrix,
    segs: &[Range<usize>],
    labels: &[usize],
    mode: Mode,
    eps: f64,
) -> Result<GradcheckReport> {
    let (_, grads, _) = model.loss_and_grads(x, segs, labels, mode)?;
    let signs = model.forward_packed(x, segs, mode)?.activation_signs();
    let analytic: Vec<(ParamGroup, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(g, t)| (g, t.to_vec()))
        .collect();
    // Each tensor is perturbed on its own model copy so tensors can be
    // checked in parallel.
    let numeric: Vec<Result<Vec<Option<f64>>>> = par::map(analytic.len(), |ti| {
        let mut probe = model.clone();
        (0..analytic[ti].1.len())
            .map(|k| {
                let orig = probe.trainable()[ti].1[k];
                let mut eval = |v: f64| -> Result<(f64, bool)> {
                    probe.trainable_mut()[ti].1[k] = v;
                    let trace = probe.forward_packed(x, segs, mode)?;
                    let loss = nn::cross_entropy(&trace.posteriors, labels)?;
                    Ok((loss, trace.activation_signs() == signs))
                };
                let (plus, same_plus) = eval(orig + eps)?;
                let (minus, same_minus) = eval(orig - eps)?;
                probe.trainable_mut()[ti].1[k] = orig;
                Ok((same_plus && same_minus).then(|| (plus - minus) / (2.0 * eps)))
            })
            .collect()
    });
    let mut acc: BTreeMap<ParamGroup, GroupAcc> = BTreeMap::new();
    for ((group, a), n) in analytic.iter().zip(numeric) {
        let n = n?;
        let e = acc.entry(*group).or_default();
        for (&a, &n) in a.iter().zip(&n) {
            let Some(n) = n else {
                e.skipped += 1;
                continue;
            };
            e.checked += 1;
            e.diff += (a - n) * (a - n);
            e.analytic += a * a;
            e.numeric += n * n;
            e.worst = e.worst.max(relative_error(a, n));
        }
    }
    let groups = acc
        .into_iter()
        .map(|(g, e)| {
            let denom = e.analytic.sqrt().max(e.numeric.sqrt()).max(1e-8);
            let check = GroupCheck {
                rel_error: e.diff.sqrt() / denom,
                max_elementwise: e.worst,
                checked: e.checked,
                skipped: e.skipped,
            };
            (g, check)
        })
        .collect();
    Ok(GradcheckReport { groups })
}
