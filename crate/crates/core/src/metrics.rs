//! Cosine scoring, EER and normalized minDCF over verification trials.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric error: {0}")]
    Metric(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Label,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, label: Label) -> Self {
        Trial { enroll_id: enroll_id.into(), test_id: test_id.into(), label }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.05, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(MetricError::Metric(format!("p_target must lie in (0, 1), got {}", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(MetricError::Metric("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// Cost of the better of the two trivial systems.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_cost(&self, frr: f64, far: f64) -> f64 {
        (self.c_miss * self.p_target * frr + self.c_fa * (1.0 - self.p_target) * far) / self.default_cost()
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::Metric(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::Metric("cannot score a zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One point of the step ROC: accept when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// Operating points at the lowest score, at every midpoint between
/// consecutive distinct scores, and at `+inf`, in increasing threshold order.
pub fn operating_points(scores: &[ScoredTrial]) -> Result<Vec<OperatingPoint>> {
    let mut sorted: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for s in scores {
        if !s.score.is_finite() {
            return Err(MetricError::Metric(format!(
                "non-finite score for trial {} {}",
                s.trial.enroll_id, s.trial.test_id
            )));
        }
        sorted.push((s.score, s.trial.label == Label::Target));
    }
    let n_tar = sorted.iter().filter(|s| s.1).count();
    let n_non = sorted.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(MetricError::Metric(format!(
            "need both target and nontarget trials, got {n_tar} and {n_non}"
        )));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (nt, nn) = (n_tar as f64, n_non as f64);
    let mut points = vec![OperatingPoint { threshold: sorted[0].0, frr: 0.0, far: 1.0 }];
    // tar_below / non_below count scores strictly below the next threshold
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() { 0.5 * (v + sorted[i].0) } else { f64::INFINITY };
        points.push(OperatingPoint {
            threshold,
            frr: tar_below as f64 / nt,
            far: (n_non - non_below) as f64 / nn,
        });
    }
    Ok(points)
}

/// `(eer, threshold)`, interpolating linearly between the last operating
/// point with `FRR < FAR` and the first with `FRR >= FAR`.
pub fn compute_eer(scores: &[ScoredTrial]) -> Result<(f64, f64)> {
    let points = operating_points(scores)?;
    eer_from_points(&points)
}

pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> Result<(f64, f64)> {
    let j = points
        .iter()
        .position(|p| p.frr >= p.far)
        .ok_or_else(|| MetricError::Metric("FAR and FRR never cross".into()))?;
    if j == 0 {
        let p = points[0];
        return Ok((p.frr, p.threshold));
    }
    let (a, b) = (points[j - 1], points[j]);
    let (da, db) = (a.frr - a.far, b.frr - b.far);
    let t = -da / (db - da);
    let eer = a.frr + t * (b.frr - a.frr);
    let threshold = if b.threshold.is_finite() {
        a.threshold + t * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    Ok((eer, threshold))
}

/// `(min_dcf, threshold)` of the normalized detection cost.
pub fn compute_min_dcf(scores: &[ScoredTrial], params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let points = operating_points(scores)?;
    let mut best = (f64::INFINITY, points[0].threshold);
    for p in &points {
        let c = params.normalized_cost(p.frr, p.far);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

/// Trials in the whitespace-separated `enroll test target|nontarget` format.
pub fn parse_trials_str(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 3 {
            return Err(MetricError::Parse {
                line: line_no,
                msg: format!("expected 3 fields, found {}", tokens.len()),
            });
        }
        let label = match tokens[2] {
            "target" => Label::Target,
            "nontarget" => Label::Nontarget,
            other => {
                return Err(MetricError::Parse {
                    line: line_no,
                    msg: format!("label must be target or nontarget, found {other:?}"),
                })
            }
        };
        out.push(Trial::new(tokens[0], tokens[1], label));
    }
    Ok(out)
}

pub fn parse_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| MetricError::Io { path: path.display().to_string(), source })?;
    parse_trials_str(&text)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials.iter().map(|t| format!("{} {} {}\n", t.enroll_id, t.test_id, t.label)).collect()
}

pub fn format_scores(scores: &[ScoredTrial]) -> String {
    scores
        .iter()
        .map(|s| format!("{} {} {:.6}\n", s.trial.enroll_id, s.trial.test_id, s.score))
        .collect()
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[ScoredTrial]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| MetricError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(format_scores(scores).as_bytes()).map_err(io)
}
