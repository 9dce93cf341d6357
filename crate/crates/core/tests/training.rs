mod common;

use xvector::data::{gen_synthetic, make_batches, Batch, SynthConfig};
use xvector::model::{Model, ModelConfig, PoolingKind};
use xvector::nn::Matrix;
use xvector::par::{set_execution, Execution};
use xvector::train::{train, train_step, Optimizer, OptimizerConfig, TrainConfig, TrainHooks};

fn small_synth() -> SynthConfig {
    SynthConfig {
        num_speakers: 4,
        utts_per_speaker: 4,
        t_min: 30,
        t_max: 45,
        ..SynthConfig::default()
    }
}

#[test]
fn single_utterance_overfits() {
    let ds = gen_synthetic(&small_synth()).unwrap();
    let utt = &ds.utterances[0];
    // Two chunks of the same utterance: batch norm needs two rows.
    let first = utt.features.slice_rows(0..25);
    let second = utt.features.slice_rows(5..30);
    let (features, segments) = Matrix::stack(&[&first, &second]).unwrap();
    let batch = Batch {
        features,
        segments,
        labels: vec![0, 0],
        padded: vec![false, false],
    };
    let mut model = Model::build(ModelConfig::desk(2, PoolingKind::Multihead), 4).unwrap();
    let hyper = OptimizerConfig {
        lr: 1e-2,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(&model, hyper).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = train_step(&mut model, &batch, &mut opt).unwrap().loss;
    }
    assert!(loss < 0.01, "loss after 200 steps: {loss}");
}

#[test]
fn sequential_and_parallel_runs_are_bit_identical() {
    let ds = gen_synthetic(&small_synth()).unwrap();
    let hyper = TrainConfig {
        epochs: 2,
        batch_size: 4,
        chunk_len: 30,
        ..TrainConfig::default()
    };
    let run = |exec| {
        set_execution(exec);
        let cfg = ModelConfig::desk(4, PoolingKind::Attention);
        let out = train(cfg, &ds, &hyper, 9, TrainHooks::default()).unwrap();
        set_execution(Execution::Parallel);
        out
    };
    let (a, ra) = run(Execution::Sequential);
    let (b, rb) = run(Execution::Parallel);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra.losses, rb.losses);
    let (_, rc) = run(Execution::Parallel);
    assert!((rc.final_loss().unwrap() - rb.final_loss().unwrap()).abs() <= 1e-9);
}

#[test]
fn checkpoints_written_every_epoch_and_reload() {
    let ds = gen_synthetic(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let hyper = TrainConfig {
        epochs: 3,
        batch_size: 4,
        chunk_len: 30,
        ..TrainConfig::default()
    };
    let hooks = TrainHooks {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        on_step: None,
    };
    let (model, report) = train(ModelConfig::desk(4, PoolingKind::Stats), &ds, &hyper, 2, hooks).unwrap();
    assert_eq!(report.checkpoints.len(), 3);
    assert_eq!(report.epoch_accuracy.len(), 3);
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let last = Model::load(report.checkpoints.last().unwrap()).unwrap();
    assert_eq!(last.to_bytes(), model.to_bytes());
}

#[test]
fn batches_cover_each_utterance_once_per_epoch() {
    let ds = gen_synthetic(&small_synth()).unwrap();
    let batcher = make_batches(&ds, 30, 5, 1).unwrap();
    let batches = batcher.epoch(0);
    let chunks: usize = batches.iter().map(|b| b.len()).sum();
    assert!(chunks >= ds.utterances.len() - 1 && chunks <= ds.utterances.len());
    assert!(batches.iter().all(|b| b.features.rows() == 30 * b.len()));
}
