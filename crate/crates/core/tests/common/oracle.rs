//! Exhaustive-threshold reference for EER and minDCF. Every operating point
//! is counted from scratch, no sorting sweep.

use xvector::eval::{DcfParams, TrialScores};

/// `(P_miss, P_fa)` for the thresholds min(score) ..= max(score) and +inf,
/// accepting `score >= θ`.
pub fn points(s: &TrialScores) -> Vec<(f64, f64)> {
    let mut thresholds = s.scores.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let nt = s.targets.iter().filter(|&&t| t).count() as f64;
    let nn = s.targets.len() as f64 - nt;
    thresholds
        .iter()
        .map(|&th| {
            let mut miss = 0.0;
            let mut fa = 0.0;
            for (&v, &t) in s.scores.iter().zip(&s.targets) {
                if t && v < th {
                    miss += 1.0;
                }
                if !t && v >= th {
                    fa += 1.0;
                }
            }
            (miss / nt, fa / nn)
        })
        .collect()
}

/// Crossing of `P_miss − P_fa` through zero, linearly interpolated.
pub fn eer(s: &TrialScores) -> f64 {
    let pts = points(s);
    let k = pts.iter().position(|(m, f)| m - f >= 0.0).unwrap();
    let (m1, f1) = pts[k];
    if k == 0 || m1 == f1 {
        return m1;
    }
    let (m0, f0) = pts[k - 1];
    let (d0, d1) = (m0 - f0, m1 - f1);
    m0 + (m1 - m0) * (-d0 / (d1 - d0))
}

pub fn min_dcf(s: &TrialScores, p: DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    points(s)
        .iter()
        .map(|(m, f)| (p.c_miss * m * p.p_target + p.c_fa * f * (1.0 - p.p_target)) / norm)
        .fold(f64::INFINITY, f64::min)
}
