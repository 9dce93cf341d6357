//! Command-line front end: `gen-data`, `train`, `extract`, `score`, `eval`,
//! `attn` and `gradcheck`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic_split, load_dataset, read_features, save_dataset, split_dir, Dataset, Split,
    SynthConfig, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    attention_trajectory, evaluate, label_scores, make_trials, read_embeddings, read_enrollments,
    read_scores, read_trials, score_trials, write_embeddings, write_enrollments, write_scores,
    write_trials, DcfParams, DCF_SRE08, DCF_SRE10,
};
use crate::model::{Model, ModelConfig, PoolingKind};
use crate::nn::{Matrix, Mode};
use crate::train::{gradcheck_model, train, OptimizerKind, TrainConfig, TrainHooks, GRADCHECK_STEP, GRADCHECK_TOLERANCE};

pub const TRIALS_FILE: &str = "trials.tsv";
pub const ENROLL_FILE: &str = "enroll.tsv";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

/// Everything a run needs; flags override individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.optimizer.validate()?;
        if self.train.epochs == 0 || self.train.chunk_len == 0 || self.train.batch_size < 2 {
            return Err(Error::Config(
                "train: epochs and chunk_len must be positive, batch_size at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "xvector", version, about = "x-vector speaker embeddings with attentive pooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/eval corpus with gate sidecars and trials.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and JSONL log.
    Train(TrainArgs),
    /// Extract embeddings for every utterance of a dataset.
    Extract(ExtractArgs),
    /// Cosine-score a trial list.
    Score(ScoreArgs),
    /// EER and minDCF of a scores file.
    Eval(EvalArgs),
    /// Per-frame attention weights of one utterance.
    Attn(AttnArgs),
    /// Finite-difference check of all gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// stats | att | multihead
    #[arg(long)]
    pub pooling: Option<PoolingKind>,
    /// 1-based frame layer providing the keys.
    #[arg(long)]
    pub key_layer: Option<usize>,
    /// Compatibility widths, e.g. 500 or 100-500.
    #[arg(long)]
    pub compat: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
}

impl ModelFlags {
    pub fn apply(&self, cfg: &mut ModelConfig) -> Result<()> {
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        if let Some(l) = self.key_layer {
            cfg.key_layer = l;
        }
        if let Some(c) = &self.compat {
            cfg.compat_hidden = parse_widths(c)?;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam | sgd_momentum
    #[arg(long)]
    pub optimizer: Option<String>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.chunk_len {
            cfg.chunk_len = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = &self.optimizer {
            cfg.optimizer.kind = match v.as_str() {
                "adam" => OptimizerKind::Adam,
                "sgd" | "sgd_momentum" => OptimizerKind::SgdMomentum,
                other => return Err(Error::Usage(format!("unknown optimizer {other:?}"))),
            };
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (a corpus root or a split directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL log; defaults to the model path with a `.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split used when `--data` is a corpus root.
    #[arg(long, default_value = "eval")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// Enrollment list; defaults to enroll.tsv next to the trials.
    #[arg(long)]
    pub enroll: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Trial list providing target/nontarget labels.
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// p_target,c_miss,c_fa replacing the SRE08 costs (0.01,10,1).
    #[arg(long)]
    pub dcf08: Option<String>,
    /// p_target,c_miss,c_fa replacing the SRE10 costs (0.001,1,1).
    #[arg(long)]
    pub dcf10: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Feature file of the utterance.
    #[arg(long)]
    pub utt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional h×T record, one column per head.
    #[arg(long)]
    pub heads_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run config whose model is checked; the tiny preset otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelFlags,
}

pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Usage(format!("bad layer width {w:?} in {s:?}"))),
        })
        .collect()
}

fn parse_dcf(s: &str) -> Result<DcfParams> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Usage(format!("bad cost parameters {s:?}: {e}")))?;
    match v[..] {
        [p_target, c_miss, c_fa] if p_target > 0.0 && p_target < 1.0 && c_miss > 0.0 && c_fa > 0.0 => {
            Ok(DcfParams { p_target, c_miss, c_fa })
        }
        _ => Err(Error::Usage(format!(
            "cost parameters {s:?} must be p_target,c_miss,c_fa with 0<p<1 and positive costs"
        ))),
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Usage(format!("--{name} is required (or set it under \"paths\")")))
}

/// Loads `dir` itself when it holds a manifest, else its `split` subdirectory.
pub fn resolve_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    if dir.join(MANIFEST_FILE).exists() {
        load_dataset(dir, split)
    } else {
        load_dataset(&split_dir(dir, split), split)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

#[derive(Debug, Serialize)]
struct GenSummary {
    train_utterances: usize,
    eval_utterances: usize,
    trials: usize,
    out_dir: PathBuf,
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    let out = required(args.out_dir, &cfg.paths.out_dir, "out-dir")?;
    let train = gen_synthetic_split(&cfg.synth, Split::Train)?;
    let eval = gen_synthetic_split(&cfg.synth, Split::Eval)?;
    save_dataset(&train, &split_dir(&out, Split::Train))?;
    let eval_dir = split_dir(&out, Split::Eval);
    save_dataset(&eval, &eval_dir)?;
    let (enroll, trials) = make_trials(&eval, cfg.synth.enroll_per_speaker)?;
    write_trials(&eval_dir.join(TRIALS_FILE), &trials)?;
    write_enrollments(&eval_dir.join(ENROLL_FILE), &enroll)?;
    print_json(&GenSummary {
        train_utterances: train.utterances.len(),
        eval_utterances: eval.utterances.len(),
        trials: trials.len(),
        out_dir: out,
    });
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    model: PathBuf,
    steps: usize,
    final_loss: f64,
    epoch_accuracy: Vec<f64>,
    parameters: usize,
    wall_time_secs: f64,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    args.model.apply(&mut cfg.model)?;
    args.train.apply(&mut cfg.train)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let data = required(args.data, &cfg.paths.data, "data")?;
    let out = required(args.out_model, &cfg.paths.model, "out-model")?;
    let dataset = resolve_dataset(&data, Split::Train)?;
    let log_path = args.log.unwrap_or_else(|| out.with_extension("jsonl"));
    let log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let hooks = TrainHooks {
        checkpoint_dir: args.checkpoint_dir,
        on_step: Some(Box::new(|entry| {
            let line = serde_json::to_string(entry).expect("log entries serialize");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        })),
    };
    let (model, report) = train(cfg.model.clone(), &dataset, &cfg.train, cfg.train.seed, hooks)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_loss = report.final_loss().unwrap_or(f64::NAN);
    if !final_loss.is_finite() {
        return Err(Error::Numeric(format!("final loss {final_loss} is not finite")));
    }
    model.save(&out)?;
    print_json(&TrainSummary {
        model: out,
        steps: report.losses.len(),
        final_loss,
        epoch_accuracy: report.epoch_accuracy,
        parameters: model.num_parameters(),
        wall_time_secs: report.wall_time_secs,
    });
    Ok(())
}

pub fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let dataset = resolve_dataset(&args.data, args.split)?;
    let embeddings = model.extract_embeddings(
        dataset
            .utterances
            .iter()
            .map(|u| (u.id.as_str(), &u.features)),
    )?;
    write_embeddings(&args.out, &embeddings)
}

pub fn cmd_score(args: ScoreArgs) -> Result<()> {
    let embeddings = read_embeddings(&args.embeddings)?;
    let trials = read_trials(&args.trials)?;
    let enroll_path = args.enroll.unwrap_or_else(|| {
        args.trials
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(ENROLL_FILE)
    });
    let enroll = read_enrollments(&enroll_path)?;
    let scores = score_trials(&embeddings, &enroll, &trials)?;
    write_scores(&args.out, &trials, &scores)
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dcf08 = args.dcf08.as_deref().map_or(Ok(DCF_SRE08), parse_dcf)?;
    let dcf10 = args.dcf10.as_deref().map_or(Ok(DCF_SRE10), parse_dcf)?;
    let scored = read_scores(&args.scores)?;
    let trials = read_trials(&args.trials)?;
    let report = evaluate(&label_scores(&scored, &trials)?, dcf08, dcf10)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report);
    Ok(())
}

pub fn cmd_attn(args: AttnArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let features = read_features(&args.utt)?;
    let traj = attention_trajectory(&model, &features)?;
    fs::write(&args.out, traj.to_tsv()).map_err(|e| Error::io(&args.out, e))?;
    if let Some(path) = &args.heads_out {
        fs::write(path, traj.heads_tsv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Random packed batch for the gradient check: 3 utterances of 7 to 12
/// frames, labels cycling through the classes.
fn gradcheck_batch(cfg: &ModelConfig, seed: u64) -> Result<(Matrix, Vec<std::ops::Range<usize>>, Vec<usize>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<Matrix> = (0..3)
        .map(|_| {
            let t = rng.random_range(7..=12);
            let data = (0..t * cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Matrix::new(t, cfg.input_dim, data)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Matrix> = parts.iter().collect();
    let (x, segs) = Matrix::stack(&refs)?;
    let labels = (0..3).map(|i| i % cfg.num_speakers).collect();
    Ok((x, segs, labels))
}

#[derive(Debug, Serialize)]
struct GradcheckSummary {
    max_rel_error: f64,
    tolerance: f64,
    passed: bool,
    groups: Vec<(String, crate::train::GroupCheck)>,
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(Some(path))?.model,
        None => ModelConfig::tiny(3, PoolingKind::Multihead),
    };
    args.model.apply(&mut cfg)?;
    cfg.validate()?;
    let model = Model::build(cfg.clone(), args.seed)?;
    let (x, segs, labels) = gradcheck_batch(&cfg, args.seed)?;
    let report = gradcheck_model(&model, &x, &segs, &labels, Mode::Train, GRADCHECK_STEP)?;
    let summary = GradcheckSummary {
        max_rel_error: report.max_rel_error(),
        tolerance: GRADCHECK_TOLERANCE,
        passed: report.passed(GRADCHECK_TOLERANCE),
        groups: report
            .groups
            .iter()
            .map(|(g, c)| (g.name().to_string(), *c))
            .collect(),
    };
    print_json(&summary);
    if !summary.passed {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:e} >= {GRADCHECK_TOLERANCE:e}",
            summary.max_rel_error
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attn(a) => cmd_attn(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_parse() {
        assert_eq!(parse_widths("500").unwrap(), vec![500]);
        assert_eq!(parse_widths("100-100-500").unwrap(), vec![100, 100, 500]);
        assert!(matches!(parse_widths("100-x"), Err(Error::Usage(_))));
        assert!(parse_widths("0").is_err());
    }

    #[test]
    fn dcf_flags_parse() {
        assert_eq!(parse_dcf("0.01,10,1").unwrap(), DCF_SRE08);
        assert_eq!(parse_dcf("0.001, 1, 1").unwrap(), DCF_SRE10);
        assert!(parse_dcf("1.5,1,1").is_err());
        assert!(parse_dcf("0.1,1").is_err());
    }

    #[test]
    fn unknown_config_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"model": {"input_dim": 20, "widths": [1]}}"#).unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("widths"), "{err}");
    }

    #[test]
    fn flags_override_config() {
        let mut cfg = ModelConfig::desk(32, PoolingKind::Stats);
        ModelFlags {
            pooling: Some(PoolingKind::Attention),
            key_layer: Some(3),
            compat: Some("100-500".into()),
            heads: None,
        }
        .apply(&mut cfg)
        .unwrap();
        assert_eq!(cfg.pooling, PoolingKind::Attention);
        assert_eq!(cfg.key_layer, 3);
        assert_eq!(cfg.compat_hidden, vec![100, 500]);
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }
}
