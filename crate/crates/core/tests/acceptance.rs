//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::index::sample;

use common::grad::{self, CHECKS, MODELS};
use common::{equiv, oracle, rng};
use rand::Rng;
use xvector::data::{gen_synthetic, gen_synthetic_split, Dataset, Split, SynthConfig};
use xvector::eval::{
    attention_trajectory, compute_eer, compute_min_dcf, gate_correlation, make_trials, score_trials,
    TrialScores, DCF_SRE08, DCF_SRE10,
};
use xvector::model::{Model, ModelConfig, PoolingKind};
use xvector::par::{set_execution, Execution};
use xvector::train::{accuracy, train, TrainConfig, TrainHooks, GRADCHECK_TOLERANCE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    println!("[{status}] criterion {id} {name}: {}", o.detail);
    let _ = std::io::stdout().flush();
}

// 1. Finite differences over every primitive, pooling kind and the full tiny model.
fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst_prim = (0.0f64, String::new());
    for (name, check) in CHECKS {
        for seed in 0..10 {
            let e = check(seed);
            if e >= worst_prim.0 {
                worst_prim = (e, format!("{name}/{seed}"));
            }
        }
    }
    let mut worst_model = (0.0f64, String::new());
    let mut models_pass = true;
    let mut worst_skip = 0.0f64;
    for &(name, pooling, key_layer, heads) in MODELS {
        for seed in 0..10 {
            let report = grad::model(pooling, key_layer, heads, seed);
            models_pass &= report.passed(GRADCHECK_TOLERANCE);
            for g in report.groups.values() {
                worst_skip = worst_skip.max(g.skipped as f64 / (g.checked + g.skipped) as f64);
            }
            let e = report.max_rel_error();
            if e >= worst_model.0 {
                worst_model = (e, format!("{name}/{seed}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: worst_prim.0 < GRADCHECK_TOLERANCE && models_pass && secs < 60.0,
        detail: format!(
            "max primitive/pooling error {:.2e} ({}), max model error {:.2e} ({}), tolerance {GRADCHECK_TOLERANCE:e}, kink-skipped <= {:.1}% per group, {secs:.1}s (< 60s)",
            worst_prim.0, worst_prim.1, worst_model.0, worst_model.1, 100.0 * worst_skip
        ),
    }
}

// 2. Pooling identities.
fn pooling_equivalence() -> Outcome {
    let mut r = rng(2);
    let (mut constant, mut one_head, mut shift, mut perm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..200 {
        let c = r.random_range(-50.0..50.0);
        constant = constant.max(equiv::constant_logits(seed, c));
        one_head = one_head.max(equiv::multihead_one_head(seed));
        shift = shift.max(equiv::logit_shift(seed, 2.0 * c));
        for heads in [1, 2, 10] {
            perm = perm.max(equiv::time_permutation(seed, heads));
        }
    }
    Outcome {
        pass: constant <= 1e-12 && one_head <= 1e-12 && shift <= 1e-9 && perm <= 1e-9,
        detail: format!(
            "constant logits vs stats {constant:.1e} (<= 1e-12), h=1 vs single head {one_head:.1e} (<= 1e-12), logit shift {shift:.1e} (<= 1e-9), time permutation {perm:.1e} (<= 1e-9); 200 cases each"
        ),
    }
}

// 3. Metrics against exhaustive threshold enumeration.
fn metric_oracle() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for set in 0..200 {
        let n = r.random_range(2..=50);
        let nt = r.random_range(1..n);
        // every third set on a coarse grid to force ties
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let v: f64 = r.random_range(-1.0..1.0);
            if set % 3 == 0 { (v * 5.0).round() } else { v }
        };
        let targets: Vec<f64> = (0..nt).map(|_| draw(&mut r) + 0.3).collect();
        let nontargets: Vec<f64> = (nt..n).map(|_| draw(&mut r)).collect();
        let s = TrialScores::from_split(&targets, &nontargets);
        worst = worst.max((compute_eer(&s).unwrap() - oracle::eer(&s)).abs());
        for p in [DCF_SRE08, DCF_SRE10] {
            worst = worst.max((compute_min_dcf(&s, p).unwrap() - oracle::min_dcf(&s, p)).abs());
        }
    }
    let perfect = TrialScores::from_split(&[2.0, 3.0, 2.5], &[0.0, 1.0]);
    let eer0 = compute_eer(&perfect).unwrap();
    let dcf0 = compute_min_dcf(&perfect, DCF_SRE08)
        .unwrap()
        .max(compute_min_dcf(&perfect, DCF_SRE10).unwrap());
    Outcome {
        pass: worst <= 1e-9 && eer0 == 0.0 && dcf0 == 0.0,
        detail: format!(
            "max deviation from oracle {worst:.1e} over 200 sets of <= 50 trials (<= 1e-9); perfect separation EER {eer0}, minDCF {dcf0}"
        ),
    }
}

struct ToyRun {
    model: Model,
    train_acc: f64,
    eer: f64,
    gate_corr: Option<f64>,
    secs: f64,
}

struct Toy {
    runs: BTreeMap<&'static str, ToyRun>,
    eval: Dataset,
}

fn toy_runs() -> Toy {
    let synth = SynthConfig::default();
    let train_set = gen_synthetic(&synth).unwrap();
    let eval = gen_synthetic_split(&synth, Split::Eval).unwrap();
    let (enroll, trials) = make_trials(&eval, synth.enroll_per_speaker).unwrap();
    let gates: Vec<Vec<u8>> = eval.utterances.iter().map(|u| u.gate.clone().unwrap()).collect();
    let hyper = TrainConfig::default();
    // single core, as the criterion is stated
    set_execution(Execution::Sequential);
    let mut runs = BTreeMap::new();
    for (name, pooling) in [
        ("stats", PoolingKind::Stats),
        ("att-4", PoolingKind::Attention),
        ("multihead", PoolingKind::Multihead),
    ] {
        let started = Instant::now();
        let config = ModelConfig::desk(synth.num_speakers, pooling);
        let (model, _) = train(config, &train_set, &hyper, hyper.seed, TrainHooks::default()).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let train_acc = accuracy(&model, &train_set).unwrap();
        let embeddings: HashMap<String, Vec<f64>> = model
            .extract_embeddings(eval.utterances.iter().map(|u| (u.id.as_str(), &u.features)))
            .unwrap()
            .into_iter()
            .map(|e| (e.id, e.vector))
            .collect();
        let eer = compute_eer(&score_trials(&embeddings, &enroll, &trials).unwrap()).unwrap();
        let gate_corr = model.attention.as_ref().map(|_| {
            let traces: Vec<Vec<f64>> = eval
                .utterances
                .iter()
                .map(|u| attention_trajectory(&model, &u.features).unwrap().max)
                .collect();
            gate_correlation(&traces, &gates).unwrap()
        });
        runs.insert(
            name,
            ToyRun {
                model,
                train_acc,
                eer,
                gate_corr,
                secs,
            },
        );
    }
    set_execution(Execution::Parallel);
    Toy { runs, eval }
}

// 4. Toy end-to-end experiment.
fn toy_end_to_end(toy: &Toy) -> Outcome {
    let r = &toy.runs;
    let acc_ok = r.values().all(|x| x.train_acc >= 0.95);
    let eer_ok = r["multihead"].eer <= r["stats"].eer + 0.02;
    let corr_ok = r.values().filter_map(|x| x.gate_corr).all(|c| c > 0.3);
    let time_ok = r.values().all(|x| x.secs < 600.0);
    let per_run: Vec<String> = r
        .iter()
        .map(|(name, x)| {
            let corr = x.gate_corr.map_or(String::new(), |c| format!(" gate_corr {c:.3}"));
            format!("{name}: train_acc {:.3} EER {:.4}{corr} {:.0}s", x.train_acc, x.eer, x.secs)
        })
        .collect();
    Outcome {
        pass: acc_ok && eer_ok && corr_ok && time_ok,
        detail: format!(
            "{} | (a) acc >= 0.95 {acc_ok}, (b) EER multihead <= stats + 0.02 {eer_ok}, (c) gate_corr > 0.3 {corr_ok}, < 600s each {time_ok}",
            per_run.join("; ")
        ),
    }
}

// 5. Multi-head max-weight trace against the single-head trace.
fn trajectory_levels(toy: &Toy) -> Outcome {
    let single = &toy.runs["att-4"].model;
    let multi = &toy.runs["multihead"].model;
    let picks = sample(&mut rng(5), toy.eval.utterances.len(), 10);
    let (mut dominated, mut pointwise, mut total) = (0usize, 0usize, 0usize);
    for i in picks.iter() {
        let feats = &toy.eval.utterances[i].features;
        let s = attention_trajectory(single, feats).unwrap().max;
        let m = attention_trajectory(multi, feats).unwrap().max;
        pointwise += m.iter().zip(&s).filter(|(a, b)| a >= b).count();
        let mut ss = s.clone();
        let mut ms = m.clone();
        ss.sort_by(f64::total_cmp);
        ms.sort_by(f64::total_cmp);
        dominated += ms.iter().zip(&ss).filter(|(a, b)| a >= b).count();
        total += s.len();
    }
    let frac = dominated as f64 / total as f64;
    let raw = pointwise as f64 / total as f64;
    Outcome {
        pass: frac >= 0.9,
        detail: format!(
            "sorted multihead max-trace >= sorted single-head trace on {:.1}% of {total} frames of 10 utterances (>= 90%); frame-aligned {:.1}%",
            100.0 * frac,
            100.0 * raw
        ),
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
        }
    }
}

fn cli(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_xvector"))
        .args(args)
        .env("XVEC_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path, threads: &str) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let cfg = root.join("run.json");
    fs::write(
        &cfg,
        r#"{
  "synth": {"num_speakers": 6, "utts_per_speaker": 6, "t_min": 40, "t_max": 60,
            "eval_speakers": 4, "eval_utts_per_speaker": 5, "enroll_per_speaker": 2},
  "model": {"num_speakers": 6, "pooling": "multihead", "heads": 4},
  "train": {"epochs": 2, "batch_size": 8, "chunk_len": 40}
}"#,
    )
    .unwrap();
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let (cfg, data, model) = (p("run.json"), p("data"), p("model.xvm"));
    let trials = p("data/eval/trials.tsv");
    cli(&["gen-data", "--config", &cfg, "--out-dir", &data, "--seed", "11"], threads)?;
    cli(
        &["train", "--config", &cfg, "--data", &data, "--out-model", &model, "--seed", "3", "--checkpoint-dir", &p("ckpt")],
        threads,
    )?;
    cli(&["extract", "--model", &model, "--data", &data, "--out", &p("emb.tsv")], threads)?;
    cli(&["score", "--embeddings", &p("emb.tsv"), "--trials", &trials, "--out", &p("scores.tsv")], threads)?;
    cli(&["eval", "--scores", &p("scores.tsv"), "--trials", &trials, "--out", &p("metrics.json")], threads)?;
    cli(
        &["attn", "--model", &model, "--utt", &p("data/eval/feats/eval000-u004.xvf"), "--out", &p("attn.tsv")],
        threads,
    )?;
    let mut files = BTreeMap::new();
    collect_files(root, root, &mut files);
    Ok(files)
}

// 6. Same seeds, same bytes: datasets, checkpoints, logs, metrics.
fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let runs = pipeline(a.path(), "0").and_then(|fa| pipeline(b.path(), "1").map(|fb| (fa, fb)));
    match runs {
        Err(e) => Outcome {
            pass: false,
            detail: format!("pipeline failed: {e}"),
        },
        Ok((fa, fb)) => {
            let differing: Vec<String> = fa
                .keys()
                .chain(fb.keys())
                .filter(|k| fa.get(*k) != fb.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            let checkpoints = fa.keys().filter(|k| k.starts_with("ckpt")).count();
            Outcome {
                pass: differing.is_empty() && checkpoints == 2 && fa.contains_key(Path::new("metrics.json")),
                detail: format!(
                    "{} files compared across two CLI runs (default threads vs XVEC_THREADS=1), {checkpoints} epoch checkpoints, differing: {}",
                    fa.len(),
                    if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
                ),
            }
        }
    }
}

fn main() {
    let mut failed = 0;
    let mut run = |id: u32, name: &str, o: Outcome| {
        report(id, name, &o);
        failed += usize::from(!o.pass);
    };
    run(1, "gradient suite", gradient_suite());
    run(2, "pooling equivalence", pooling_equivalence());
    run(3, "metric oracle", metric_oracle());
    run(6, "determinism", determinism());
    let toy = toy_runs();
    run(4, "toy end-to-end", toy_end_to_end(&toy));
    run(5, "attention trajectory levels", trajectory_levels(&toy));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
