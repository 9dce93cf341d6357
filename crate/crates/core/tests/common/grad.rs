//! Finite-difference checks of the building blocks. Each check returns the
//! worst element-wise relative error over everything it perturbs.

use rand_chacha::ChaCha8Rng;

use super::{packed_batch, random_matrix, random_vec, rng, tiny_config};
use xvector::model::{Model, PoolingKind};
use xvector::nn::{
    cross_entropy, cross_entropy_backward, leaky_relu, leaky_relu_backward, softmax_rows,
    softmax_rows_backward, splice_backward, splice_segments, Affine, BatchNorm, DenseBlock, Matrix,
    Mode, SpliceContext, LEAKY_SLOPE,
};
use xvector::pooling::{stats_pool, stats_pool_backward, AttentionPooling, CompatibilityNet};
use xvector::train::{gradcheck_model, max_relative_error, numeric_gradient, GradcheckReport, GRADCHECK_STEP};

pub type Check = fn(u64) -> f64;

/// Every primitive and pooling check, by name.
pub const CHECKS: &[(&str, Check)] = &[
    ("affine", affine),
    ("leaky_relu", leaky_relu_check),
    ("batchnorm_train", batchnorm_train),
    ("batchnorm_infer", batchnorm_infer),
    ("splice", splice),
    ("softmax", softmax),
    ("cross_entropy", cross_entropy_check),
    ("dense_block", dense_block),
    ("stats_pooling", stats_pooling),
    ("attention_pooling", |s| attention_layer(1, s)),
    ("multihead_pooling_h2", |s| attention_layer(2, s)),
    ("multihead_pooling_h10", |s| attention_layer(10, s)),
];

/// Model variants of the full tiny network: (label, pooling, key layer, heads).
pub const MODELS: &[(&str, PoolingKind, usize, usize)] = &[
    ("stats", PoolingKind::Stats, 4, 1),
    ("att-3", PoolingKind::Attention, 3, 1),
    ("att-4", PoolingKind::Attention, 4, 1),
    ("att-5", PoolingKind::Attention, 5, 1),
    ("multihead_h1", PoolingKind::Multihead, 4, 1),
    ("multihead_h2", PoolingKind::Multihead, 4, 2),
    ("multihead_h10", PoolingKind::Multihead, 4, 10),
];

fn err(analytic: &[f64], x: &[f64], f: impl FnMut(&[f64]) -> f64) -> f64 {
    max_relative_error(analytic, &numeric_gradient(f, x, GRADCHECK_STEP))
}

fn with(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::new(m.rows(), m.cols(), data.to_vec()).unwrap()
}

/// `Σ r ⊙ y`, turning matrix outputs into scalars.
fn project(y: &Matrix, r: &Matrix) -> f64 {
    y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

pub fn random_block(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> DenseBlock {
    let mut b = DenseBlock::new(Affine::new(random_matrix(rng, dout, din), random_vec(rng, dout)).unwrap());
    b.bn.gamma = random_vec(rng, dout).iter().map(|g| 1.0 + 0.5 * g).collect();
    b.bn.beta = random_vec(rng, dout);
    b
}

pub fn affine(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 6, 4);
    let p = Affine::new(random_matrix(&mut r, 3, 4), random_vec(&mut r, 3)).unwrap();
    let probe = random_matrix(&mut r, 6, 3);
    let (dx, g) = p.backward(&x, &probe);
    let ex = err(dx.as_slice(), x.as_slice(), |v| project(&p.forward(&with(&x, v)).unwrap(), &probe));
    let ew = err(g.weight.as_slice(), p.weight.as_slice(), |v| {
        let q = Affine::new(with(&p.weight, v), p.bias.clone()).unwrap();
        project(&q.forward(&x).unwrap(), &probe)
    });
    let eb = err(&g.bias, &p.bias, |v| {
        let q = Affine::new(p.weight.clone(), v.to_vec()).unwrap();
        project(&q.forward(&x).unwrap(), &probe)
    });
    ex.max(ew).max(eb)
}

/// Inputs are pushed at least 0.1 away from the kink.
pub fn leaky_relu_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x = random_matrix(&mut r, 5, 4);
    for v in x.as_mut_slice() {
        *v += 0.1 * v.signum();
    }
    let probe = random_matrix(&mut r, 5, 4);
    let dx = leaky_relu_backward(&x, &probe, LEAKY_SLOPE);
    err(dx.as_slice(), x.as_slice(), |v| project(&leaky_relu(&with(&x, v), LEAKY_SLOPE), &probe))
}

pub fn batchnorm_train(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 7, 3);
    let mut bn = BatchNorm::new(3);
    bn.gamma = random_vec(&mut r, 3);
    bn.beta = random_vec(&mut r, 3);
    let probe = random_matrix(&mut r, 7, 3);
    let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
    let (dx, g) = bn.backward(&cache, &probe);
    let run = |bn: &BatchNorm, x: &Matrix| project(&bn.forward(x, Mode::Train).unwrap().0, &probe);
    let ex = err(dx.as_slice(), x.as_slice(), |v| run(&bn, &with(&x, v)));
    let eg = err(&g.gamma, &bn.gamma, |v| {
        let mut b = bn.clone();
        b.gamma = v.to_vec();
        run(&b, &x)
    });
    let eb = err(&g.beta, &bn.beta, |v| {
        let mut b = bn.clone();
        b.beta = v.to_vec();
        run(&b, &x)
    });
    ex.max(eg).max(eb)
}

pub fn batchnorm_infer(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 4, 3);
    let mut bn = BatchNorm::new(3);
    bn.gamma = random_vec(&mut r, 3);
    bn.running_mean = random_vec(&mut r, 3);
    bn.running_var = random_vec(&mut r, 3).iter().map(|v| 1.0 + v.abs()).collect();
    let probe = random_matrix(&mut r, 4, 3);
    let (_, cache) = bn.forward(&x, Mode::Infer).unwrap();
    let (dx, _) = bn.backward(&cache, &probe);
    err(dx.as_slice(), x.as_slice(), |v| {
        project(&bn.forward(&with(&x, v), Mode::Infer).unwrap().0, &probe)
    })
}

pub fn splice(seed: u64) -> f64 {
    let contexts = [vec![-2, -1, 0, 1, 2], vec![-3, 0, 3], vec![0], vec![-1, 0]];
    let mut r = rng(seed);
    let ctx = SpliceContext::new(contexts[seed as usize % contexts.len()].clone()).unwrap();
    let x = random_matrix(&mut r, 9, 2);
    let segs = [0..4, 4..9];
    let probe = random_matrix(&mut r, 9, 2 * ctx.len());
    let dx = splice_backward(&probe, &segs, &ctx, 2);
    err(dx.as_slice(), x.as_slice(), |v| {
        project(&splice_segments(&with(&x, v), &segs, &ctx), &probe)
    })
}

pub fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 3, 5);
    let probe = random_matrix(&mut r, 3, 5);
    let dx = softmax_rows_backward(&softmax_rows(&x), &probe);
    err(dx.as_slice(), x.as_slice(), |v| project(&softmax_rows(&with(&x, v)), &probe))
}

/// Cross entropy against posteriors, and composed with softmax.
pub fn cross_entropy_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = random_matrix(&mut r, 4, 3);
    let p = softmax_rows(&logits);
    let labels = [0, 2, 1, 2];
    let dp = cross_entropy_backward(&p, &labels).unwrap();
    let e1 = err(dp.as_slice(), p.as_slice(), |v| cross_entropy(&with(&p, v), &labels).unwrap());
    let dl = softmax_rows_backward(&p, &dp);
    let e2 = err(dl.as_slice(), logits.as_slice(), |v| {
        cross_entropy(&softmax_rows(&with(&logits, v)), &labels).unwrap()
    });
    e1.max(e2)
}

pub fn dense_block(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 6, 4);
    let block = random_block(&mut r, 4, 3);
    let probe = random_matrix(&mut r, 6, 3);
    let (_, cache) = block.forward(&x, Mode::Train).unwrap();
    let (dx, g) = block.backward(&cache, &probe);
    let run = |b: &DenseBlock, x: &Matrix| project(&b.forward(x, Mode::Train).unwrap().0, &probe);
    let ex = err(dx.as_slice(), x.as_slice(), |v| run(&block, &with(&x, v)));
    let ew = err(g.affine.weight.as_slice(), block.affine.weight.as_slice(), |v| {
        let mut b = block.clone();
        b.affine.weight = with(&block.affine.weight, v);
        run(&b, &x)
    });
    let eg = err(&g.bn.gamma, &block.bn.gamma, |v| {
        let mut b = block.clone();
        b.bn.gamma = v.to_vec();
        run(&b, &x)
    });
    ex.max(ew).max(eg)
}

pub fn stats_pooling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 8, 3);
    let probe = random_vec(&mut r, 6);
    let dx = stats_pool_backward(&x, &probe);
    err(dx.as_slice(), x.as_slice(), |v| {
        let out = stats_pool(&with(&x, v));
        out.as_slice().iter().zip(&probe).map(|(a, b)| a * b).sum()
    })
}

/// Attention pooling layer over two packed utterances: values, keys, query
/// and compatibility weights.
pub fn attention_layer(heads: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (dv, dk) = (20, 5);
    let net = CompatibilityNet::new(vec![random_block(&mut r, dk, 6), random_block(&mut r, 6, dv)]).unwrap();
    let layer = AttentionPooling::new(net, random_vec(&mut r, dv), heads).unwrap();
    let values = random_matrix(&mut r, 11, dv);
    let keys = random_matrix(&mut r, 11, dk);
    let segs = [0..5, 5..11];
    let probe = random_matrix(&mut r, 2, 2 * dv);
    let (_, cache) = layer.forward(&values, &keys, &segs, Mode::Train).unwrap();
    let g = layer.backward(&cache, &probe);
    let run = |l: &AttentionPooling, v: &Matrix, k: &Matrix| {
        project(&l.forward(v, k, &segs, Mode::Train).unwrap().0, &probe)
    };
    let mut worst = err(g.values.as_slice(), values.as_slice(), |v| run(&layer, &with(&values, v), &keys));
    worst = worst.max(err(g.keys.as_slice(), keys.as_slice(), |v| run(&layer, &values, &with(&keys, v))));
    worst = worst.max(err(&g.query, &layer.query, |v| {
        let mut l = layer.clone();
        l.query = v.to_vec();
        run(&l, &values, &keys)
    }));
    for (i, bg) in g.net.iter().enumerate() {
        let w = &layer.net.blocks[i].affine.weight;
        worst = worst.max(err(bg.affine.weight.as_slice(), w.as_slice(), |v| {
            let mut l = layer.clone();
            l.net.blocks[i].affine.weight = with(w, v);
            run(&l, &values, &keys)
        }));
    }
    worst
}

/// Whole-network check on three packed utterances in train mode.
pub fn model(pooling: PoolingKind, key_layer: usize, heads: usize, seed: u64) -> GradcheckReport {
    let model = Model::build(tiny_config(pooling, key_layer, heads), seed).unwrap();
    let mut r = rng(100 + seed);
    let (x, segs, labels) = packed_batch(&mut r, &[7, 9, 8], 3, 3);
    gradcheck_model(&model, &x, &segs, &labels, Mode::Train, GRADCHECK_STEP).unwrap()
}
