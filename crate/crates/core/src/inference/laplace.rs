//! Last-layer Laplace approximation with a generalised Gauss-Newton Hessian.
//!
//! The hidden layers stay at the MAP; the output layer `theta` (weight rows
//! then biases, `K * (H + 1)` values) gets the Gaussian
//! `N(theta_map, (sum_i J_i^T (diag(p_i) - p_i p_i^T) J_i + lambda I)^-1)`,
//! where `J_i` is the Jacobian of the logits with respect to `theta`.

use nalgebra::DMatrix;

use super::{check_training_data, PosteriorApproximation};
use crate::error::{Error, Result};
use crate::nn::{self, LabeledBatch, NetworkSpec, PriorSpec, WeightVector};

/// Position in the flat output-layer vector of the parameter that multiplies
/// feature `h` for class `k`; `None` selects the bias of class `k`.
pub fn last_layer_jacobian_index(spec: &NetworkSpec, class: usize, feature: Option<usize>) -> usize {
    let h = spec.feature_dim();
    match feature {
        Some(f) => class * h + f,
        None => spec.num_classes() * h + class,
    }
}

pub fn fit_laplace_last_layer(
    spec: &NetworkSpec,
    map_weights: &WeightVector,
    data: &LabeledBatch,
    prior: &PriorSpec,
) -> Result<PosteriorApproximation> {
    map_weights.validate(spec)?;
    check_training_data(spec, data)?;
    let out = spec.output_layer();
    let k = spec.num_classes();
    let h = spec.feature_dim();
    let len = out.len();
    let idx = |c: usize, f: usize| if f < h { c * h + f } else { k * h + c };

    let mut precision = DMatrix::<f64>::zeros(len, len);
    for x in data.rows() {
        let mut phi = nn::features_unchecked(spec, map_weights.as_slice(), x);
        let p = nn::softmax(&nn::forward_unchecked(spec, map_weights.as_slice(), x));
        phi.push(1.0);
        for c in 0..k {
            for c2 in 0..=c {
                let lam = if c == c2 { p[c] - p[c] * p[c] } else { -p[c] * p[c2] };
                if lam == 0.0 {
                    continue;
                }
                for (f, &a) in phi.iter().enumerate() {
                    let i = idx(c, f);
                    for (f2, &b) in phi.iter().enumerate() {
                        precision[(i, idx(c2, f2))] += lam * a * b;
                    }
                }
            }
        }
    }
    // only the c2 <= c blocks were filled; mirror them
    for i in 0..len {
        for j in 0..len {
            let (ci, cj) = (class_of(i, h, k), class_of(j, h, k));
            if cj > ci {
                precision[(i, j)] = precision[(j, i)];
            }
        }
    }
    let lambda = prior.precision();
    for i in 0..len {
        precision[(i, i)] += lambda;
    }
    if precision.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Laplace precision".into()));
    }

    let chol = match precision.clone().cholesky() {
        Some(c) => c,
        None => {
            let mut p = precision;
            for i in 0..len {
                p[(i, i)] += 1e-8;
            }
            p.cholesky()
                .ok_or_else(|| Error::Singular("Laplace precision not positive definite after jitter".into()))?
        }
    };
    let mut cov = chol.inverse();
    // symmetrise round-off
    for i in 0..len {
        for j in 0..i {
            let m = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = m;
            cov[(j, i)] = m;
        }
    }
    let mean = map_weights.as_slice()[out.offset..out.offset + len].to_vec();
    Ok(PosteriorApproximation::LaplaceLastLayer {
        map_weights: map_weights.clone(),
        last_layer_mean: mean,
        last_layer_cov: cov,
    })
}

fn class_of(i: usize, h: usize, k: usize) -> usize {
    if i < k * h {
        i / h.max(1)
    } else {
        i - k * h
    }
}

/// Marginal variance of every logit given features `phi` (without the bias 1).
pub(crate) fn output_variances(cov: &DMatrix<f64>, phi: &[f64], k: usize) -> Vec<f64> {
    let h = phi.len();
    let idx = |c: usize, f: usize| if f < h { c * h + f } else { k * h + c };
    let coef = |f: usize| if f < h { phi[f] } else { 1.0 };
    (0..k)
        .map(|c| {
            let mut v = 0.0;
            for f in 0..=h {
                let a = coef(f);
                if a == 0.0 {
                    continue;
                }
                let i = idx(c, f);
                for f2 in 0..=h {
                    v += a * coef(f2) * cov[(i, idx(c, f2))];
                }
            }
            v
        })
        .collect()
}
