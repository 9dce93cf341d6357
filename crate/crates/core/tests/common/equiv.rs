//! Pooling identities, each returning the largest absolute deviation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::grad::random_block;
use super::{random_matrix, random_vec, rng};
use xvector::nn::{Matrix, Mode};
use xvector::pooling::{
    attention_logits, attention_pool, multihead_pool, stats_pool, AttentionInputs, CompatibilityNet,
};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn frames(seed: u64) -> usize {
    rng(seed ^ 0xF00D).random_range(2..=40)
}

/// Attention with equal logits against statistics pooling.
pub fn constant_logits(seed: u64, c: f64) -> f64 {
    let mut r = rng(seed);
    let t = frames(seed);
    let values = random_matrix(&mut r, t, 6);
    let (att, _) = attention_pool(&values, &vec![c; t]).unwrap();
    max_diff(att.as_slice(), stats_pool(&values).as_slice())
}

struct Setup {
    values: Matrix,
    keys: Matrix,
    net: CompatibilityNet,
    query: Vec<f64>,
}

fn setup(seed: u64, dv: usize) -> Setup {
    let mut r = rng(seed);
    let t = frames(seed);
    let net = CompatibilityNet::new(vec![random_block(&mut r, 4, 5), random_block(&mut r, 5, dv)]).unwrap();
    Setup {
        values: random_matrix(&mut r, t, dv),
        keys: random_matrix(&mut r, t, 4),
        query: random_vec(&mut r, dv),
        net,
    }
}

/// One-head multi-head pooling against single-head attention pooling.
pub fn multihead_one_head(seed: u64) -> f64 {
    let s = setup(seed, 6);
    let inputs = AttentionInputs {
        values: s.values.clone(),
        keys: s.keys.clone(),
        query: s.query.clone(),
    };
    let (mh, _) = multihead_pool(&inputs, &s.net, 1, Mode::Infer).unwrap();
    let logits = attention_logits(&s.keys, &s.net, &s.query, Mode::Infer).unwrap();
    let (single, _) = attention_pool(&s.values, &logits).unwrap();
    max_diff(mh.as_slice(), single.as_slice())
}

/// Adding `c` to every logit leaves weights and output unchanged.
pub fn logit_shift(seed: u64, c: f64) -> f64 {
    let s = setup(seed, 6);
    let logits = attention_logits(&s.keys, &s.net, &s.query, Mode::Infer).unwrap();
    let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
    let (a, ra) = attention_pool(&s.values, &logits).unwrap();
    let (b, rb) = attention_pool(&s.values, &shifted).unwrap();
    max_diff(a.as_slice(), b.as_slice()).max(max_diff(ra.weights.as_slice(), rb.weights.as_slice()))
}

fn permute_rows(m: &Matrix, order: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = order.iter().map(|&i| m.row(i)).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Reordering frames (values and keys together) leaves statistics,
/// single-head and multi-head outputs unchanged.
pub fn time_permutation(seed: u64, heads: usize) -> f64 {
    let s = setup(seed, 2 * heads.max(3));
    let mut order: Vec<usize> = (0..s.values.rows()).collect();
    order.shuffle(&mut rng(seed + 1));
    let pv = permute_rows(&s.values, &order);
    let pk = permute_rows(&s.keys, &order);
    let mut worst = max_diff(stats_pool(&s.values).as_slice(), stats_pool(&pv).as_slice());
    let run = |values: &Matrix, keys: &Matrix| {
        let inputs = AttentionInputs {
            values: values.clone(),
            keys: keys.clone(),
            query: s.query.clone(),
        };
        multihead_pool(&inputs, &s.net, heads, Mode::Infer).unwrap().0.into_vec()
    };
    worst = worst.max(max_diff(&run(&s.values, &s.keys), &run(&pv, &pk)));
    let logits = attention_logits(&s.keys, &s.net, &s.query, Mode::Infer).unwrap();
    let plogits: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    let (a, _) = attention_pool(&s.values, &logits).unwrap();
    let (b, _) = attention_pool(&pv, &plogits).unwrap();
    worst.max(max_diff(a.as_slice(), b.as_slice()))
}
