//! Coverage, set size and the over/under-confidence verdict.

use serde::{Deserialize, Serialize};

use crate::conformal::{credible_set, PredictionSet, ProbVector};
use crate::error::{Error, Result};

/// Fraction of sets that contain their label.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "sets vs labels",
            left: sets.len(),
            right: labels.len(),
        });
    }
    if sets.is_empty() {
        return Err(Error::InvalidArgument("coverage of zero sets".into()));
    }
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    Ok(hits as f64 / sets.len() as f64)
}

pub fn avg_set_size(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("average size of zero sets".into()));
    }
    Ok(sets.iter().map(|s| s.len()).sum::<usize>() as f64 / sets.len() as f64)
}

pub fn empty_set_rate(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("empty-set rate of zero sets".into()));
    }
    Ok(sets.iter().filter(|s| s.is_empty()).count() as f64 / sets.len() as f64)
}

/// Standard error of a proportion `p` estimated from `n` Bernoulli trials.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Overconfident,
    Underconfident,
    WithinBand,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Overconfident => "overconfident",
            Verdict::Underconfident => "underconfident",
            Verdict::WithinBand => "within_band",
        }
    }

    /// `coverage < 1 - alpha` is overconfident, `coverage > 1 - alpha + 1/(n_cal+1)`
    /// underconfident.
    pub fn classify(coverage: f64, alpha: f64, n_cal: usize) -> Self {
        let target = 1.0 - alpha;
        if coverage < target {
            Verdict::Overconfident
        } else if coverage > target + 1.0 / (n_cal as f64 + 1.0) {
            Verdict::Underconfident
        } else {
            Verdict::WithinBand
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDiagnosis {
    pub credible_coverage_on_cal: f64,
    pub verdict: Verdict,
}

/// Credible-set coverage on calibration data and the resulting verdict.
pub fn diagnose_confidence(
    probs_cal: &[ProbVector],
    labels_cal: &[usize],
    alpha: f64,
    n_cal: usize,
) -> Result<ConfidenceDiagnosis> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let sets: Vec<PredictionSet> = probs_cal.iter().map(|p| credible_set(p, alpha)).collect();
    let cov = coverage(&sets, labels_cal)?;
    Ok(ConfidenceDiagnosis {
        credible_coverage_on_cal: cov,
        verdict: Verdict::classify(cov, alpha, n_cal),
    })
}
