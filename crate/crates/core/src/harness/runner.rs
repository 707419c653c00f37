//! The evaluation loop: train each method once, then for every alpha and
//! evaluation seed resample the calibration set, calibrate, and score all
//! set methods on the in-distribution and shifted test sets.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use super::config::{ExperimentConfig, MethodConfig, MethodKind, SetMethod};
use super::metrics::{avg_set_size, coverage, diagnose_confidence, empty_set_rate, ConfidenceDiagnosis};
use super::report::{DiagnosisRecord, ExperimentReport, ReportRow};
use crate::conformal::{
    calibrate, credible_set, predict_set_with_u, ConformalCalibration, PredictionSet, ProbVector, ScoreKind,
};
use crate::data::{apply_shift, make_blobs, split, ShiftKind, SyntheticDataset, MAX_INTENSITY};
use crate::error::{Error, Result};
use crate::inference::{
    fit_laplace_last_layer, posterior_predictive_batch, run_sghmc, train_ensemble_selected, train_map_selected,
    train_mfvi_traced, Checkpoint, PosteriorApproximation,
};
use crate::nn::NetworkSpec;
use crate::rng::{self, derive_seed};

const TAG_CAL: u64 = 0xCA1;
const TAG_SCORE_U: u64 = 0xA95;
const TAG_TEST_U: u64 = 0x7E57;
const TAG_CAL_U: u64 = 0xCA15;
const TAG_PRED: u64 = 0x9BED;

/// The generated partitions and the shifted copies of the test partition.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    /// Pool the per-seed calibration sets are drawn from.
    pub cal_pool: SyntheticDataset,
    /// `(none, 0)` first, then every configured kind at intensities 1..=5.
    pub test_variants: Vec<SyntheticDataset>,
}

impl PreparedData {
    pub fn test(&self) -> &SyntheticDataset {
        &self.test_variants[0]
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let full = make_blobs(d.num_classes, d.dim, d.n, d.class_sep, d.within_std, cfg.data_seed())?;
    let [train, val, cal_pool, test] = split(&full, &cfg.split_spec())?;
    if train.is_empty() || cal_pool.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "{} rows leave an empty train, cal or test partition",
            d.n
        )));
    }
    let params = cfg.shift_params();
    let mut test_variants = vec![test.clone()];
    for &kind in &cfg.shift.kinds {
        for i in 1..=MAX_INTENSITY {
            test_variants.push(apply_shift(&test, kind, i, &params)?);
        }
    }
    Ok(PreparedData {
        train,
        val,
        cal_pool,
        test_variants,
    })
}

/// Trains one method (resolved or not) on the training partition.
pub fn train_method(
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    data: &PreparedData,
) -> Result<PosteriorApproximation> {
    let m = cfg.resolve_method(method);
    let spec = cfg.network_spec()?;
    let train = data.train.to_batch();
    let val_batch = data.val.to_batch();
    let val = (!val_batch.is_empty()).then_some(&val_batch);
    let tc = cfg.method_train_config(&m);
    let out = match m.kind {
        MethodKind::Map => train_map_selected(&spec, &train, val, &tc),
        MethodKind::Ensemble => train_ensemble_selected(&spec, &train, val, &tc, m.members.unwrap_or(5)),
        MethodKind::Mfvi => train_mfvi_traced(&spec, &train, val, &tc, &cfg.mfvi_config(&m)).map(|o| o.posterior),
        MethodKind::Sghmc => run_sghmc(&spec, &train, &cfg.sghmc_config(&m)),
        MethodKind::Laplace => {
            train_map_selected(&spec, &train, val, &tc).and_then(|p| laplace_from_map(cfg, &m, &spec, &p, data))
        }
    };
    out.map_err(|e| e.context(format!("training method '{}'", m.name)))
}

fn laplace_from_map(
    cfg: &ExperimentConfig,
    m: &MethodConfig,
    spec: &NetworkSpec,
    map: &PosteriorApproximation,
    data: &PreparedData,
) -> Result<PosteriorApproximation> {
    let PosteriorApproximation::Point { weights } = map else {
        return Err(Error::InvalidArgument("Laplace needs a point estimate".into()));
    };
    let prior = cfg.method_train_config(m).prior;
    fit_laplace_last_layer(spec, weights, &data.train.to_batch(), &prior)
}

/// Trains every configured method, sharing fits between methods that only
/// differ in name or temperature. Independent fits run in parallel.
pub fn train_all(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<Checkpoint>> {
    let spec = cfg.network_spec()?;
    let mut base_keys: Vec<String> = Vec::new();
    let mut base_of = Vec::with_capacity(cfg.methods.len());
    for m in &cfg.methods {
        let key = cfg.resolve_method(m).training_key();
        let idx = base_keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            base_keys.push(key);
            base_keys.len() - 1
        });
        base_of.push(idx);
    }
    // the first method using each key; Laplace keys train the plain MAP
    let reps: Vec<MethodConfig> = (0..base_keys.len())
        .map(|b| {
            let i = base_of.iter().position(|&x| x == b).expect("every key has a method");
            let mut m = cfg.methods[i].clone();
            if m.kind == MethodKind::Laplace {
                m.kind = MethodKind::Map;
            }
            m
        })
        .collect();
    let bases: Vec<PosteriorApproximation> = reps
        .par_iter()
        .map(|m| train_method(cfg, m, data))
        .collect::<Result<_>>()?;

    let mut laplace_cache: HashMap<usize, PosteriorApproximation> = HashMap::new();
    cfg.methods
        .iter()
        .zip(&base_of)
        .map(|(m, &b)| {
            let posterior = if m.kind == MethodKind::Laplace {
                if let Some(p) = laplace_cache.get(&b) {
                    p.clone()
                } else {
                    let p = laplace_from_map(cfg, &cfg.resolve_method(m), &spec, &bases[b], data)
                        .map_err(|e| e.context(format!("training method '{}'", m.name)))?;
                    laplace_cache.insert(b, p.clone());
                    p
                }
            } else {
                bases[b].clone()
            };
            Ok(Checkpoint {
                spec: spec.clone(),
                posterior,
                seed: cfg.train_seed(m.kind),
            })
        })
        .collect()
}

/// Predictive outputs of one method on every evaluation set.
#[derive(Debug, Clone)]
pub struct MethodOutputs {
    pub cal_pool: Vec<ProbVector>,
    pub tests: Vec<Vec<ProbVector>>,
}

pub fn method_outputs(
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    ckpt: &Checkpoint,
    data: &PreparedData,
) -> Result<MethodOutputs> {
    let s = cfg.experiment.predictive_samples;
    let seed = derive_seed(cfg.seed, &[TAG_PRED, ckpt.seed]);
    let t = method.temperature;
    let run = |ds: &SyntheticDataset| posterior_predictive_batch(&ckpt.posterior, &ckpt.spec, ds.inputs(), s, seed, t);
    Ok(MethodOutputs {
        cal_pool: run(&data.cal_pool)?,
        tests: data.test_variants.iter().map(run).collect::<Result<_>>()?,
    })
}

/// Indices of the calibration subsample used with `eval_seed`.
pub fn calibration_indices(pool: usize, n_cal: usize, eval_seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(&mut rng::seeded(derive_seed(eval_seed, &[TAG_CAL])));
    idx.truncate(n_cal.min(pool));
    idx
}

fn score_kind(s: SetMethod) -> Option<ScoreKind> {
    match s {
        SetMethod::Cred => None,
        SetMethod::Thr => Some(ScoreKind::Thr),
        SetMethod::Aps => Some(ScoreKind::Aps),
    }
}

/// Calibration of one score kind for `(alpha, eval_seed)`.
pub fn calibrate_cell(
    probs: &[ProbVector],
    labels: &[usize],
    alpha: f64,
    kind: ScoreKind,
    eval_seed: u64,
) -> Result<ConformalCalibration> {
    let seed = derive_seed(eval_seed, &[TAG_SCORE_U, kind as u64]);
    calibrate(probs, labels, alpha, kind, seed)
}

/// Sets for one set method; `aps` draws one uniform per example from `u_seed`.
fn build_sets(
    probs: &[ProbVector],
    set_method: SetMethod,
    alpha: f64,
    cal: Option<&ConformalCalibration>,
    u_seed: u64,
) -> Vec<PredictionSet> {
    match (set_method, cal) {
        (SetMethod::Cred, _) => probs.iter().map(|p| credible_set(p, alpha)).collect(),
        (_, Some(cal)) => {
            let mut r = rng::seeded(u_seed);
            probs
                .iter()
                .map(|p| {
                    let u: f64 = if cal.kind == ScoreKind::Aps { r.random() } else { 0.0 };
                    predict_set_with_u(p, cal, u)
                })
                .collect()
        }
        (_, None) => unreachable!("conformal set without calibration"),
    }
}

struct CellResult {
    rows: Vec<(usize, usize, ReportRow)>,
    diagnosis: DiagnosisRecord,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    method: &MethodConfig,
    outputs: &MethodOutputs,
    accuracies: &[f64],
    alpha: f64,
    eval_seed: u64,
) -> Result<CellResult> {
    let idx = calibration_indices(data.cal_pool.len(), cfg.experiment.n_cal, eval_seed);
    let cal_probs: Vec<ProbVector> = idx.iter().map(|&i| outputs.cal_pool[i].clone()).collect();
    let cal_labels: Vec<usize> = idx.iter().map(|&i| data.cal_pool.labels()[i]).collect();
    let n_cal = cal_probs.len();
    let ConfidenceDiagnosis {
        credible_coverage_on_cal,
        verdict,
    } = diagnose_confidence(&cal_probs, &cal_labels, alpha, n_cal)?;

    let mut rows = Vec::new();
    let mut cal_sizes = Vec::new();
    let mut taus = Vec::new();
    for (si, &sm) in cfg.experiment.set_methods.iter().enumerate() {
        let cal = score_kind(sm)
            .map(|k| calibrate_cell(&cal_probs, &cal_labels, alpha, k, eval_seed))
            .transpose()?;
        if let Some(c) = &cal {
            taus.push((sm, c.tau));
        }
        let on_cal = build_sets(
            &cal_probs,
            sm,
            alpha,
            cal.as_ref(),
            derive_seed(eval_seed, &[TAG_CAL_U]),
        );
        cal_sizes.push((sm, avg_set_size(&on_cal)?));
        for (vi, (ds, probs)) in data.test_variants.iter().zip(&outputs.tests).enumerate() {
            let sets = build_sets(
                probs,
                sm,
                alpha,
                cal.as_ref(),
                derive_seed(eval_seed, &[TAG_TEST_U, vi as u64]),
            );
            let prov = ds.provenance();
            rows.push((
                si,
                vi,
                ReportRow {
                    method: method.name.clone(),
                    set_method: sm,
                    alpha,
                    shift_kind: prov.shift_kind,
                    intensity: prov.intensity,
                    coverage: coverage(&sets, ds.labels())?,
                    avg_set_size: avg_set_size(&sets)?,
                    accuracy: accuracies[vi],
                    empty_set_rate: empty_set_rate(&sets)?,
                    n_test: ds.len(),
                    eval_seed,
                },
            ));
        }
    }
    Ok(CellResult {
        rows,
        diagnosis: DiagnosisRecord {
            method: method.name.clone(),
            alpha,
            eval_seed,
            n_cal,
            credible_coverage_on_cal,
            verdict,
            cal_avg_set_size: cal_sizes.into_iter().map(|(s, v)| (s.to_string(), v)).collect(),
            tau: taus.into_iter().map(|(s, v)| (s.to_string(), v)).collect(),
        },
    })
}

fn accuracy_of(probs: &[ProbVector], labels: &[usize]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Evaluates already trained methods (one checkpoint per configured method).
pub fn evaluate(cfg: &ExperimentConfig, data: &PreparedData, ckpts: &[Checkpoint]) -> Result<ExperimentReport> {
    if ckpts.len() != cfg.methods.len() {
        return Err(Error::LengthMismatch {
            what: "checkpoints vs methods",
            left: ckpts.len(),
            right: cfg.methods.len(),
        });
    }
    let spec = cfg.network_spec()?;
    for (m, c) in cfg.methods.iter().zip(ckpts) {
        if c.spec != spec {
            return Err(Error::Config(format!(
                "checkpoint for '{}' has a different network",
                m.name
            )));
        }
    }
    let outputs: Vec<MethodOutputs> = cfg
        .methods
        .par_iter()
        .zip(ckpts)
        .map(|(m, c)| method_outputs(cfg, m, c, data).map_err(|e| e.context(format!("method '{}'", m.name))))
        .collect::<Result<_>>()?;
    let accuracies: Vec<Vec<f64>> = outputs
        .iter()
        .map(|o| {
            o.tests
                .iter()
                .zip(&data.test_variants)
                .map(|(p, ds)| accuracy_of(p, ds.labels()))
                .collect()
        })
        .collect();

    let g = &cfg.experiment;
    let cells: Vec<(usize, usize, usize)> = (0..cfg.methods.len())
        .flat_map(|m| (0..g.alphas.len()).flat_map(move |a| (0..g.eval_seeds.len()).map(move |s| (m, a, s))))
        .collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(m, a, s)| {
            evaluate_cell(
                cfg,
                data,
                &cfg.methods[m],
                &outputs[m],
                &accuracies[m],
                g.alphas[a],
                g.eval_seeds[s],
            )
            .map_err(|e| {
                e.context(format!(
                    "method '{}', alpha {}, eval seed {}",
                    cfg.methods[m].name, g.alphas[a], g.eval_seeds[s]
                ))
            })
        })
        .collect::<Result<_>>()?;

    // order: method, set method, alpha, test variant, eval seed
    let mut keyed = Vec::new();
    let mut diagnoses = Vec::new();
    for (&(m, a, s), res) in cells.iter().zip(results) {
        for (si, vi, row) in res.rows {
            keyed.push(((m, si, a, vi, s), row));
        }
        diagnoses.push(res.diagnosis);
    }
    keyed.sort_by_key(|(k, _)| *k);
    Ok(ExperimentReport {
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
        diagnoses,
        config_hash: cfg.hash()?,
    })
}

/// Data generation, training and evaluation in one go.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let ckpts = train_all(cfg, &data)?;
    evaluate(cfg, &data, &ckpts)
}

/// Number of test variants: the clean test set plus five intensities per shift kind.
pub fn variant_count(cfg: &ExperimentConfig) -> usize {
    1 + cfg.shift.kinds.len() * MAX_INTENSITY as usize
}

/// `(kind, intensity)` of every test variant, in report order.
pub fn variants(cfg: &ExperimentConfig) -> Vec<(ShiftKind, u8)> {
    let mut out = vec![(ShiftKind::None, 0)];
    for &k in &cfg.shift.kinds {
        out.extend((1..=MAX_INTENSITY).map(|i| (k, i)));
    }
    out
}
