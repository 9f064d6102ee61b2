//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use bwrfn::metrics::{DcfParams, Label, ScoredTrial, Trial};

pub fn scored(scores: &[(f64, bool)]) -> Vec<ScoredTrial> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &(score, target))| ScoredTrial {
            trial: Trial::new(
                format!("e{i}"),
                format!("t{i}"),
                if target { Label::Target } else { Label::Nontarget },
            ),
            score,
        })
        .collect()
}

/// Candidate thresholds: the lowest score (accept all), every midpoint
/// between adjacent distinct scores, and +inf (reject all).
fn thresholds(scores: &[(f64, bool)]) -> Vec<f64> {
    let mut v: Vec<f64> = scores.iter().map(|s| s.0).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut out = vec![v[0]];
    out.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(f64::INFINITY);
    out
}

/// `(frr, far)` at threshold `t` by direct counting; a trial is accepted
/// when its score is at least `t`.
pub fn rates(scores: &[(f64, bool)], t: f64) -> (f64, f64) {
    let nt = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.len() as f64 - nt;
    let miss = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64;
    let fa = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64;
    (miss / nt, fa / nn)
}

/// Brute-force EER: scan thresholds in increasing order and interpolate
/// linearly at the first sign change of `frr - far`.
pub fn eer_oracle(scores: &[(f64, bool)]) -> f64 {
    let pts: Vec<(f64, f64)> = thresholds(scores).into_iter().map(|t| rates(scores, t)).collect();
    for (i, &(frr, far)) in pts.iter().enumerate() {
        if frr >= far {
            if i == 0 {
                return frr;
            }
            let (frr0, far0) = pts[i - 1];
            let d0 = frr0 - far0;
            let d1 = frr - far;
            let s = d0 / (d0 - d1);
            // at the crossing both rates agree, report their mean
            let a = frr0 + s * (frr - frr0);
            let b = far0 + s * (far - far0);
            return 0.5 * (a + b);
        }
    }
    unreachable!("rejecting everything always has frr >= far")
}

pub fn min_dcf_oracle(scores: &[(f64, bool)], p: &DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    thresholds(scores)
        .into_iter()
        .map(|t| {
            let (frr, far) = rates(scores, t);
            (p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far) / norm
        })
        .fold(f64::INFINITY, f64::min)
}
