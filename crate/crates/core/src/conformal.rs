//! Prediction sets from predicted class probabilities.
//!
//! Three constructions are provided:
//!
//! * `cred` – the predictive credible set: labels in decreasing probability
//!   order until the cumulative mass strictly exceeds `1 - alpha`. Uses no
//!   calibration data.
//! * `thr` – split conformal with score `1 - p[y]`.
//! * `aps` – split conformal with the adaptive score: the probability mass
//!   ranked strictly above `y` plus `u * p[y]`, `u ~ U[0, 1]`.
//!
//! Conformal thresholds are the `k`-th smallest calibration score with
//! `k = ceil((n + 1)(1 - alpha))`. When `k > n` the threshold is `+inf` and
//! every label is admitted. Probability ties are broken by ascending label
//! index everywhere, so set construction is deterministic given `u`.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance on the probability total accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// A categorical distribution over `K` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if let Some(v) = probs.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid probability {v}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Wraps a vector produced by a softmax; callers guarantee validity.
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn num_labels(&self) -> usize {
        self.0.len()
    }

    pub fn argmax(&self) -> usize {
        self.ranked()[0]
    }

    /// Labels ordered by decreasing probability, ties by ascending index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| match self.0[b].partial_cmp(&self.0[a]) {
            Some(Ordering::Equal) | None => a.cmp(&b),
            Some(o) => o,
        });
        order
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A subset of the label space, kept as a sorted list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PredictionSet {
    members: Vec<usize>,
    num_labels: usize,
}

impl PredictionSet {
    pub fn new(mut members: Vec<usize>, num_labels: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if let Some(&bad) = members.iter().find(|&&m| m >= num_labels) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside label space of size {num_labels}"
            )));
        }
        Ok(Self { members, num_labels })
    }

    pub fn full(num_labels: usize) -> Self {
        Self {
            members: (0..num_labels).collect(),
            num_labels,
        }
    }

    pub fn empty(num_labels: usize) -> Self {
        Self {
            members: Vec::new(),
            num_labels,
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.members.iter().all(|&m| other.contains(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Thr,
    Aps,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::Thr => "thr",
            ScoreKind::Aps => "aps",
        })
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thr" => Ok(ScoreKind::Thr),
            "aps" => Ok(ScoreKind::Aps),
            other => Err(Error::InvalidArgument(format!("unknown score kind '{other}'"))),
        }
    }
}

/// A fitted conformal threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    #[serde(serialize_with = "ser_tau", deserialize_with = "de_tau")]
    pub tau: f64,
    pub alpha: f64,
    pub n_cal: usize,
    pub kind: ScoreKind,
    pub seed: u64,
}

fn ser_tau<S: Serializer>(tau: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *tau == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*tau)
    }
}

fn de_tau<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Tau {
        Num(f64),
        Str(String),
    }
    match Tau::deserialize(d)? {
        Tau::Num(v) => Ok(v),
        Tau::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Tau::Str(s) => Err(serde::de::Error::custom(format!("invalid tau '{s}'"))),
    }
}

impl ConformalCalibration {
    pub fn is_infinite(&self) -> bool {
        self.tau == f64::INFINITY
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.n_cal == 0 {
            return Err(Error::InvalidArgument("n_cal must be >= 1".into()));
        }
        let k = quantile_rank(self.n_cal, self.alpha);
        if k > self.n_cal && !self.is_infinite() {
            return Err(Error::InvalidArgument(format!(
                "rank {k} exceeds n_cal {} but tau is finite",
                self.n_cal
            )));
        }
        if self.tau.is_nan() {
            return Err(Error::InvalidArgument("tau is NaN".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cal: Self = serde_json::from_str(s)?;
        cal.validate()?;
        Ok(cal)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok(())
}

fn check_label(p: &ProbVector, y: usize) -> Result<()> {
    if y >= p.num_labels() {
        return Err(Error::InvalidArgument(format!(
            "label {y} outside label space of size {}",
            p.num_labels()
        )));
    }
    Ok(())
}

/// Smallest set whose cumulative probability strictly exceeds `1 - alpha`.
/// Never empty; falls back to the full set if rounding keeps the total at or
/// below the target.
pub fn credible_set(p: &ProbVector, alpha: f64) -> PredictionSet {
    let target = 1.0 - alpha;
    let mut members = Vec::new();
    let mut mass = 0.0;
    for label in p.ranked() {
        members.push(label);
        mass += p[label];
        if mass > target {
            break;
        }
    }
    members.sort_unstable();
    PredictionSet {
        members,
        num_labels: p.num_labels(),
    }
}

/// `1 - p[y]`.
pub fn thr_score(p: &ProbVector, y: usize) -> Result<f64> {
    check_label(p, y)?;
    Ok(1.0 - p[y])
}

/// Mass ranked strictly above `y` plus `u * p[y]`.
pub fn aps_score(p: &ProbVector, y: usize, u: f64) -> Result<f64> {
    check_label(p, y)?;
    let mut above = 0.0;
    for label in p.ranked() {
        if label == y {
            break;
        }
        above += p[label];
    }
    Ok(aps_value(above, u, p[y]))
}

/// Exact arithmetic keeps the adaptive score in `[0, 1]`; clamp the rounding
/// excess so `u = 1, tau = 1` admits every label.
#[inline]
fn aps_value(above: f64, u: f64, p: f64) -> f64 {
    (above + u * p).min(1.0)
}

/// `k = ceil((n + 1)(1 - alpha))`. A 1e-9 slack absorbs representation
/// error when the product is an integer in exact arithmetic.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    ((x - 1e-9).ceil().max(1.0)) as usize
}

/// The `k`-th smallest score, or `+inf` when `k > n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no calibration scores".into()));
    }
    check_alpha(alpha)?;
    if let Some(v) = scores.iter().find(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("calibration score {v}")));
    }
    let n = scores.len();
    let k = quantile_rank(n, alpha);
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[k - 1])
}

/// Nonconformity scores of the calibration examples. For `aps` one uniform
/// per example is drawn, in order, from a ChaCha8 stream seeded by `seed`.
pub fn calibration_scores(probs: &[ProbVector], labels: &[usize], kind: ScoreKind, seed: u64) -> Result<Vec<f64>> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "calibration probabilities vs labels",
            left: probs.len(),
            right: labels.len(),
        });
    }
    let mut rng = rng::seeded(seed);
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| match kind {
            ScoreKind::Thr => thr_score(p, y),
            ScoreKind::Aps => {
                let u: f64 = rng.random();
                aps_score(p, y, u)
            }
        })
        .collect()
}

/// Fits the conformal threshold on held-out calibration outputs.
pub fn calibrate(
    probs: &[ProbVector],
    labels: &[usize],
    alpha: f64,
    kind: ScoreKind,
    seed: u64,
) -> Result<ConformalCalibration> {
    check_alpha(alpha)?;
    let scores = calibration_scores(probs, labels, kind, seed)?;
    let tau = conformal_quantile(&scores, alpha)?;
    Ok(ConformalCalibration {
        tau,
        alpha,
        n_cal: probs.len(),
        kind,
        seed,
    })
}

/// Builds the conformal set for one test output. For `aps` a single uniform
/// is drawn from `rng` and shared by every candidate label; `thr` consumes
/// no randomness.
pub fn predict_set<R: Rng + ?Sized>(p: &ProbVector, cal: &ConformalCalibration, rng: &mut R) -> PredictionSet {
    let u = match cal.kind {
        ScoreKind::Thr => 0.0,
        ScoreKind::Aps => rng.random(),
    };
    predict_set_with_u(p, cal, u)
}

/// [`predict_set`] with an explicit tie-breaking uniform (ignored by `thr`).
pub fn predict_set_with_u(p: &ProbVector, cal: &ConformalCalibration, u: f64) -> PredictionSet {
    let k = p.num_labels();
    if cal.is_infinite() {
        return PredictionSet::full(k);
    }
    let tau = cal.tau;
    let members = match cal.kind {
        ScoreKind::Thr => (0..k).filter(|&y| 1.0 - p[y] <= tau).collect(),
        ScoreKind::Aps => {
            let mut members = Vec::new();
            let mut above = 0.0;
            for label in p.ranked() {
                if aps_value(above, u, p[label]) <= tau {
                    members.push(label);
                }
                above += p[label];
            }
            members.sort_unstable();
            members
        }
    };
    PredictionSet { members, num_labels: k }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn cal(tau: f64, kind: ScoreKind) -> ConformalCalibration {
        ConformalCalibration {
            tau,
            alpha: 0.1,
            n_cal: 100,
            kind,
            seed: 0,
        }
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    #[test]
    fn credible_set_examples() {
        assert_eq!(credible_set(&pv(&[0.6, 0.3, 0.1]), 0.25).members(), &[0, 1]);
        assert_eq!(credible_set(&ProbVector::uniform(4), 0.05).len(), 4);
        assert_eq!(credible_set(&pv(&[1.0, 0.0, 0.0]), 0.2).members(), &[0]);
        assert_eq!(credible_set(&pv(&[1.0, 0.0, 0.0]), 1e-9).members(), &[0]);
    }

    #[test]
    fn credible_set_breaks_ties_by_index() {
        // equal top masses: label 1 enters before label 2
        let s = credible_set(&pv(&[0.2, 0.4, 0.4]), 0.55);
        assert_eq!(s.members(), &[1, 2]);
        let s = credible_set(&pv(&[0.2, 0.4, 0.4]), 0.65);
        assert_eq!(s.members(), &[1]);
    }

    #[test]
    fn thr_score_examples() {
        let p = pv(&[0.7, 0.3, 0.0]);
        assert!((thr_score(&p, 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(thr_score(&pv(&[1.0, 0.0]), 0).unwrap(), 0.0);
        assert_eq!(thr_score(&p, 2).unwrap(), 1.0);
        assert!(thr_score(&p, 3).is_err());
    }

    #[test]
    fn aps_score_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert!((aps_score(&p, 1, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((aps_score(&p, 1, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(aps_score(&p, 0, 0.0).unwrap(), 0.0);
        assert!((aps_score(&p, 2, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let q = pv(&[0.05, 0.15, 0.3, 0.5]);
        assert!((aps_score(&q, 0, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (1..=9).map(|v| v as f64 / 10.0).rev().collect();
        assert_eq!(quantile_rank(9, 0.1), 9);
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 0.9);
        assert_eq!(quantile_rank(4, 0.5), 3);
        assert_eq!(conformal_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 3.0);
        assert_eq!(quantile_rank(5, 0.01), 6);
        assert_eq!(conformal_quantile(&[0.1; 5], 0.01).unwrap(), f64::INFINITY);
        assert_eq!(quantile_rank(99, 0.05), 95);
        assert_eq!(quantile_rank(499, 0.05), 475);
    }

    #[test]
    fn quantile_errors() {
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[0.2], 0.0).is_err());
        assert!(conformal_quantile(&[0.2], 1.0).is_err());
    }

    #[test]
    fn calibrate_thr_with_perfect_model() {
        let probs = vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0]), pv(&[1.0, 0.0])];
        let c = calibrate(&probs, &[0, 1, 0], 0.4, ScoreKind::Thr, 1).unwrap();
        assert_eq!(c.tau, 0.0);
        assert_eq!(c.n_cal, 3);
    }

    #[test]
    fn calibrate_aps_deterministic() {
        let probs: Vec<ProbVector> = (0..50)
            .map(|i| {
                let a = 0.2 + 0.6 * (i as f64 / 50.0);
                pv(&[a, (1.0 - a) * 0.7, (1.0 - a) * 0.3])
            })
            .collect();
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = calibrate(&probs, &labels, 0.1, ScoreKind::Aps, 9).unwrap();
        let b = calibrate(&probs, &labels, 0.1, ScoreKind::Aps, 9).unwrap();
        assert_eq!(a, b);
        let c = calibrate(&probs, &labels, 0.1, ScoreKind::Aps, 10).unwrap();
        assert_ne!(a.tau, c.tau);
    }

    #[test]
    fn calibrate_rejects_length_mismatch() {
        let probs = vec![pv(&[0.5, 0.5])];
        assert!(matches!(
            calibrate(&probs, &[0, 1], 0.1, ScoreKind::Thr, 0),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(calibrate(&[], &[], 0.1, ScoreKind::Thr, 0).is_err());
    }

    #[test]
    fn predict_set_examples() {
        let p = pv(&[0.7, 0.2, 0.1]);
        assert_eq!(predict_set_with_u(&p, &cal(0.5, ScoreKind::Thr), 0.0).members(), &[0]);
        for kind in [ScoreKind::Thr, ScoreKind::Aps] {
            assert_eq!(predict_set_with_u(&p, &cal(f64::INFINITY, kind), 0.3).len(), 3);
        }
        assert!(predict_set_with_u(&p, &cal(0.2, ScoreKind::Thr), 0.0).is_empty());
    }

    #[test]
    fn aps_set_boundary_cases() {
        let p = pv(&[0.1, 0.6, 0.3]);
        assert_eq!(predict_set_with_u(&p, &cal(1.0, ScoreKind::Aps), 1.0).len(), 3);
        for tau in [0.0, 0.05, 0.5] {
            let s = predict_set_with_u(&p, &cal(tau, ScoreKind::Aps), 0.0);
            assert!(s.contains(1));
        }
    }

    #[test]
    fn predict_set_thr_consumes_no_randomness() {
        let mut r1 = rng::seeded(4);
        let mut r2 = rng::seeded(4);
        let p = pv(&[0.5, 0.5]);
        predict_set(&p, &cal(0.6, ScoreKind::Thr), &mut r1);
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn calibration_json_round_trip() {
        let c = ConformalCalibration {
            tau: f64::INFINITY,
            alpha: 0.01,
            n_cal: 5,
            kind: ScoreKind::Aps,
            seed: 3,
        };
        let s = c.to_json().unwrap();
        assert!(s.contains("\"inf\""));
        assert!(s.contains("\"aps\""));
        assert_eq!(ConformalCalibration::from_json(&s).unwrap(), c);

        let finite = ConformalCalibration {
            tau: 0.123456789012345,
            alpha: 0.05,
            n_cal: 500,
            kind: ScoreKind::Thr,
            seed: 1,
        };
        let back = ConformalCalibration::from_json(&finite.to_json().unwrap()).unwrap();
        assert_eq!(back, finite);
    }

    #[test]
    fn calibration_json_rejects_finite_tau_when_rank_exceeds_n() {
        let s = r#"{"tau":0.5,"alpha":0.01,"n_cal":5,"kind":"thr","seed":0}"#;
        assert!(ConformalCalibration::from_json(s).is_err());
        let s = r#"{"tau":"nope","alpha":0.1,"n_cal":50,"kind":"thr","seed":0}"#;
        assert!(ConformalCalibration::from_json(s).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn prob_vec() -> impl Strategy<Value = ProbVector> {
            proptest::collection::vec(0.0f64..1.0, 2..7).prop_filter_map("non-zero", |v| {
                let total: f64 = v.iter().sum();
                (total > 1e-6).then(|| ProbVector::new(v.iter().map(|x| x / total).collect()).ok())?
            })
        }

        proptest! {
            #[test]
            fn sets_nest_in_tau(
                p in prob_vec(),
                t1 in 0.0f64..1.2,
                t2 in 0.0f64..1.2,
                u in 0.0f64..1.0,
                aps in any::<bool>(),
            ) {
                let kind = if aps { ScoreKind::Aps } else { ScoreKind::Thr };
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let small = predict_set_with_u(&p, &cal(lo, kind), u);
                let big = predict_set_with_u(&p, &cal(hi, kind), u);
                prop_assert!(small.is_subset(&big));
            }

            #[test]
            fn credible_sets_shrink_with_alpha(
                p in prob_vec(),
                a1 in 0.001f64..0.999,
                a2 in 0.001f64..0.999,
            ) {
                let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
                prop_assert!(credible_set(&p, hi).is_subset(&credible_set(&p, lo)));
                prop_assert!(!credible_set(&p, hi).is_empty());
            }

            #[test]
            fn aps_top_label_always_in_with_zero_u(p in prob_vec(), tau in 0.0f64..1.0) {
                let s = predict_set_with_u(&p, &cal(tau, ScoreKind::Aps), 0.0);
                prop_assert!(s.contains(p.argmax()));
            }

            #[test]
            fn aps_full_set_at_unit_threshold(p in prob_vec()) {
                let s = predict_set_with_u(&p, &cal(1.0, ScoreKind::Aps), 1.0);
                prop_assert_eq!(s.len(), p.num_labels());
            }
        }
    }
}
