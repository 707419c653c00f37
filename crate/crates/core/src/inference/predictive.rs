//! Posterior predictive `p(y | x, D)` for every posterior kind.

use std::f64::consts::PI;

use super::laplace::output_variances;
use super::PosteriorApproximation;
use crate::conformal::ProbVector;
use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec};
use crate::rng;

/// Predictive distribution for a single input.
///
/// `n_samples` is the number of weight draws for the mean-field posterior;
/// the other kinds average over their members exactly.
pub fn posterior_predictive(
    posterior: &PosteriorApproximation,
    spec: &NetworkSpec,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<ProbVector> {
    posterior_predictive_tempered(posterior, spec, x, n_samples, seed, 1.0)
}

/// As [`posterior_predictive`] with logits divided by `temperature`.
pub fn posterior_predictive_tempered(
    posterior: &PosteriorApproximation,
    spec: &NetworkSpec,
    x: &[f64],
    n_samples: usize,
    seed: u64,
    temperature: f64,
) -> Result<ProbVector> {
    let mut out = posterior_predictive_batch(posterior, spec, x, n_samples, seed, temperature)?;
    Ok(out.pop().expect("one row"))
}

/// Predictive distributions for the row-major inputs `xs`.
///
/// Mean-field weight draws are taken once from `seed` and shared by all
/// rows, so the result for a row does not depend on the other rows.
pub fn posterior_predictive_batch(
    posterior: &PosteriorApproximation,
    spec: &NetworkSpec,
    xs: &[f64],
    n_samples: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<ProbVector>> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let d = spec.input_dim();
    if !xs.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: xs.len() % d,
        });
    }
    posterior.validate(spec)?;
    let rows = xs.chunks_exact(d);

    let average = |members: &[&[f64]]| -> Vec<ProbVector> {
        let m = members.len() as f64;
        rows.clone()
            .map(|x| {
                let mut acc = vec![0.0; spec.num_classes()];
                for w in members {
                    let p = tempered_softmax(&nn::forward_unchecked(spec, w, x), temperature);
                    for (a, v) in acc.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= m);
                renormalise(acc)
            })
            .collect()
    };

    let out = match posterior {
        PosteriorApproximation::Point { weights } => average(&[weights.as_slice()]),
        PosteriorApproximation::Ensemble { members: ws } | PosteriorApproximation::SampleChain { samples: ws } => {
            let refs: Vec<&[f64]> = ws.iter().map(|w| w.as_slice()).collect();
            average(&refs)
        }
        PosteriorApproximation::MeanField { means, log_sigmas } => {
            let mut r = rng::seeded(seed);
            let draws: Vec<Vec<f64>> = (0..n_samples)
                .map(|_| {
                    let eps = nn::standard_normal_vec(&mut r, means.len());
                    means
                        .as_slice()
                        .iter()
                        .zip(log_sigmas.as_slice())
                        .zip(eps)
                        .map(|((m, ls), e)| m + ls.exp() * e)
                        .collect()
                })
                .collect();
            let refs: Vec<&[f64]> = draws.iter().map(Vec::as_slice).collect();
            average(&refs)
        }
        PosteriorApproximation::LaplaceLastLayer {
            map_weights,
            last_layer_mean,
            last_layer_cov,
        } => {
            let out_layer = spec.output_layer();
            let h = out_layer.fan_in;
            rows.map(|x| {
                let phi = nn::features_unchecked(spec, map_weights.as_slice(), x);
                let (w, b) = last_layer_mean.split_at(out_layer.weight_len());
                let logits: Vec<f64> = w
                    .chunks_exact(h)
                    .zip(b)
                    .map(|(row, bk)| row.iter().zip(&phi).map(|(a, c)| a * c).sum::<f64>() + bk)
                    .collect();
                let var = output_variances(last_layer_cov, &phi, spec.num_classes());
                // probit approximation to E[softmax(f)], f ~ N(mean, diag(var))
                let scaled: Vec<f64> = logits
                    .iter()
                    .zip(&var)
                    .map(|(f, v)| f / (1.0 + PI / 8.0 * v.max(0.0) / temperature.powi(2)).sqrt())
                    .collect();
                renormalise(tempered_softmax(&scaled, temperature))
            })
            .collect()
        }
    };
    Ok(out)
}

fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        nn::softmax(logits)
    } else {
        let z: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
        nn::softmax(&z)
    }
}

fn renormalise(mut p: Vec<f64>) -> ProbVector {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    ProbVector::from_softmax(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, Activation, ScaleRule, WeightVector};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn spec() -> NetworkSpec {
        NetworkSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap()
    }

    fn members(n: usize) -> Vec<WeightVector> {
        (0..n)
            .map(|s| init_weights(&spec(), s as u64, ScaleRule::Fixed(1.0)))
            .collect()
    }

    #[test]
    fn ensemble_is_mean_of_member_softmaxes() {
        let ws = members(3);
        let x = [0.2, -0.7, 1.1];
        let post = PosteriorApproximation::Ensemble { members: ws.clone() };
        let got = posterior_predictive(&post, &spec(), &x, 1, 0).unwrap();
        let mut want = [0.0; 4];
        for w in &ws {
            for (a, v) in want.iter_mut().zip(nn::softmax(&nn::forward(&spec(), w, &x).unwrap())) {
                *a += v / 3.0;
            }
        }
        for k in 0..4 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_mean_field_equals_point() {
        let w = members(1).remove(0);
        let x = [1.0, 0.5, -0.3];
        let mf = PosteriorApproximation::MeanField {
            means: w.clone(),
            log_sigmas: WeightVector(vec![f64::NEG_INFINITY; w.len()]),
        };
        let point = PosteriorApproximation::Point { weights: w };
        let a = posterior_predictive(&mf, &spec(), &x, 7, 3).unwrap();
        let b = posterior_predictive(&point, &spec(), &x, 1, 0).unwrap();
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_field_draws_increase_average_entropy() {
        let w = members(1).remove(0);
        let mut r = rng::seeded(12);
        let xs: Vec<f64> = (0..3 * 64).map(|_| r.random_range(-3.0..3.0)).collect();
        let mf = PosteriorApproximation::MeanField {
            means: w.clone(),
            log_sigmas: WeightVector(vec![-0.5; w.len()]),
        };
        let point = PosteriorApproximation::Point { weights: w };
        let mean_entropy = |post: &PosteriorApproximation| {
            let ps = posterior_predictive_batch(post, &spec(), &xs, 30, 1, 1.0).unwrap();
            ps.iter().map(|p| p.entropy()).sum::<f64>() / ps.len() as f64
        };
        assert!(mean_entropy(&mf) >= mean_entropy(&point) - 1e-9);
    }

    #[test]
    fn laplace_with_zero_covariance_is_point_prediction() {
        let w = members(1).remove(0);
        let ol = spec().output_layer();
        let mean = w.as_slice()[ol.offset..ol.offset + ol.len()].to_vec();
        let post = PosteriorApproximation::LaplaceLastLayer {
            map_weights: w.clone(),
            last_layer_mean: mean,
            last_layer_cov: DMatrix::zeros(ol.len(), ol.len()),
        };
        let x = [0.1, 0.2, 0.3];
        let a = posterior_predictive(&post, &spec(), &x, 1, 0).unwrap();
        let b = posterior_predictive(&PosteriorApproximation::Point { weights: w }, &spec(), &x, 1, 0).unwrap();
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_sharpens_and_softens() {
        let w = members(1).remove(0);
        let post = PosteriorApproximation::Point { weights: w };
        let x = [1.0, 1.0, 1.0];
        let base = posterior_predictive(&post, &spec(), &x, 1, 0).unwrap().entropy();
        let cold = posterior_predictive_tempered(&post, &spec(), &x, 1, 0, 0.5)
            .unwrap()
            .entropy();
        let hot = posterior_predictive_tempered(&post, &spec(), &x, 1, 0, 2.0)
            .unwrap()
            .entropy();
        assert!(cold < base && base < hot);
        assert!(posterior_predictive_tempered(&post, &spec(), &x, 1, 0, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let post = PosteriorApproximation::Point {
            weights: members(1).remove(0),
        };
        assert!(posterior_predictive(&post, &spec(), &[1.0, 2.0], 1, 0).is_err());
        assert!(posterior_predictive(&post, &spec(), &[1.0, 2.0, 3.0], 0, 0).is_err());
        let bad = PosteriorApproximation::Point {
            weights: WeightVector(vec![0.0; 3]),
        };
        assert!(posterior_predictive(&bad, &spec(), &[1.0, 2.0, 3.0], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn ensemble_order_does_not_matter(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 3)) {
            let mut ws = members(4);
            let a = posterior_predictive(&PosteriorApproximation::Ensemble { members: ws.clone() }, &spec(), &x, 1, seed).unwrap();
            ws.reverse();
            ws.swap(0, 2);
            let b = posterior_predictive(&PosteriorApproximation::Ensemble { members: ws }, &spec(), &x, 1, seed).unwrap();
            for k in 0..4 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn predictive_sums_to_one(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 3), ls in -3.0f64..1.0) {
            let w = init_weights(&spec(), seed, ScaleRule::Fixed(2.0));
            let posts = [
                PosteriorApproximation::Point { weights: w.clone() },
                PosteriorApproximation::MeanField { means: w.clone(), log_sigmas: WeightVector(vec![ls; w.len()]) },
                PosteriorApproximation::SampleChain { samples: members(3) },
            ];
            for post in &posts {
                let p = posterior_predictive(post, &spec(), &x, 10, seed).unwrap();
                prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.as_slice().iter().all(|v| *v >= 0.0));
            }
        }
    }
}
