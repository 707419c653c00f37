//! Posterior approximations over the network weights and the posterior
//! predictive (Bayesian model average) they induce.

mod checkpoint;
mod laplace;
mod mfvi;
mod predictive;
mod sgd;
mod sghmc;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use laplace::{fit_laplace_last_layer, last_layer_jacobian_index};
pub use mfvi::{kl_gaussian_diag, train_mfvi, train_mfvi_traced, MfviConfig, MfviOutcome};
pub use predictive::{posterior_predictive, posterior_predictive_batch, posterior_predictive_tempered};
pub use sgd::{train_ensemble, train_ensemble_selected, train_map, train_map_selected};
pub use sghmc::{run_sghmc, sghmc_sample, GaussianPotential, StochasticPotential};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LabeledBatch, NetworkSpec, PriorSpec, WeightVector};

/// Approximate posterior over the weights.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorApproximation {
    /// `delta(w - w_map)`.
    Point { weights: WeightVector },
    /// Independently trained MAP solutions, equally weighted.
    Ensemble { members: Vec<WeightVector> },
    /// Fully factorised Gaussian; `sigma = exp(log_sigma)`.
    MeanField {
        means: WeightVector,
        log_sigmas: WeightVector,
    },
    /// Kept MCMC samples.
    SampleChain { samples: Vec<WeightVector> },
    /// Gaussian over the output layer only; the rest stays at the MAP.
    ///
    /// `last_layer_mean` and `last_layer_cov` use the flat output-layer
    /// layout (weight matrix rows, then biases).
    LaplaceLastLayer {
        map_weights: WeightVector,
        last_layer_mean: Vec<f64>,
        last_layer_cov: DMatrix<f64>,
    },
}

impl PosteriorApproximation {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PosteriorApproximation::Point { .. } => "point",
            PosteriorApproximation::Ensemble { .. } => "ensemble",
            PosteriorApproximation::MeanField { .. } => "mean_field",
            PosteriorApproximation::SampleChain { .. } => "sample_chain",
            PosteriorApproximation::LaplaceLastLayer { .. } => "laplace_last_layer",
        }
    }

    /// Checks the structural invariants against `spec`.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        match self {
            PosteriorApproximation::Point { weights } => weights.validate(spec),
            PosteriorApproximation::Ensemble { members: ws } | PosteriorApproximation::SampleChain { samples: ws } => {
                if ws.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "{} posterior has no members",
                        self.kind_name()
                    )));
                }
                ws.iter().try_for_each(|w| w.validate(spec))
            }
            PosteriorApproximation::MeanField { means, log_sigmas } => {
                means.validate(spec)?;
                if log_sigmas.len() != means.len() {
                    return Err(Error::LengthMismatch {
                        what: "mean-field means vs log sigmas",
                        left: means.len(),
                        right: log_sigmas.len(),
                    });
                }
                // -inf log sigma encodes a degenerate (zero-variance) factor
                if log_sigmas.as_slice().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                    return Err(Error::NonFinite("mean-field log sigma".into()));
                }
                Ok(())
            }
            PosteriorApproximation::LaplaceLastLayer {
                map_weights,
                last_layer_mean,
                last_layer_cov,
            } => {
                map_weights.validate(spec)?;
                let len = spec.output_layer().len();
                if last_layer_mean.len() != len {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        got: last_layer_mean.len(),
                    });
                }
                if last_layer_cov.nrows() != len || last_layer_cov.ncols() != len {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        got: last_layer_cov.nrows(),
                    });
                }
                check_symmetric_psd(last_layer_cov, 1e-8)
            }
        }
    }
}

/// Symmetric to `tol` (relative to the largest entry) with eigenvalues >= -tol.
pub(crate) fn check_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return Err(Error::InvalidArgument(format!("covariance not symmetric at ({i},{j})")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance entry".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -tol * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance has negative eigenvalue {min}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the initial step size to 0 over the whole run.
    Cosine,
    /// Half-cosine decay restarted every `cycle_epochs` epochs.
    Cyclical {
        cycle_epochs: usize,
    },
}

impl Schedule {
    /// Step-size multiplier at global step `t` of `total` steps.
    pub fn factor(&self, t: usize, total: usize, steps_per_epoch: usize) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (PI * t as f64 / total.max(1) as f64).cos()),
            Schedule::Cyclical { cycle_epochs } => {
                let cycle = (cycle_epochs * steps_per_epoch).max(1);
                let pos = (t % cycle) as f64 / cycle as f64;
                0.5 * (1.0 + (PI * pos).cos())
            }
        }
    }
}

/// Optimiser settings shared by MAP, ensembles, mean-field VI and SGHMC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Applied to the gradient of the full-data objective (likelihood summed
    /// over the training set), so it scales like `1 / n`.
    pub step_size: f64,
    pub momentum_decay: f64,
    pub seed: u64,
    pub prior: PriorSpec,
    pub schedule: Schedule,
    /// Validation frequency for best-checkpoint selection.
    pub checkpoint_epochs: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be >= 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum_decay) {
            return Err(Error::Config(format!(
                "momentum_decay must lie in [0, 1), got {}",
                self.momentum_decay
            )));
        }
        if self.checkpoint_epochs < 1 {
            return Err(Error::Config("checkpoint_epochs must be >= 1".into()));
        }
        if let Schedule::Cyclical { cycle_epochs: 0 } = self.schedule {
            return Err(Error::Config("cycle_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    Rmsprop { decay: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SghmcConfig {
    pub train: TrainConfig,
    pub burnin_epochs: usize,
    pub thin_epochs: usize,
    /// `gamma` in `v <- (1 - gamma) v - eta grad + N(0, 2 gamma eta)`.
    pub friction: f64,
    pub preconditioner: Preconditioner,
}

impl SghmcConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.thin_epochs < 1 {
            return Err(Error::Config("thin_epochs must be >= 1".into()));
        }
        if !(self.friction > 0.0 && self.friction <= 1.0) {
            return Err(Error::Config(format!(
                "friction must lie in (0, 1], got {}",
                self.friction
            )));
        }
        if self.burnin_epochs >= self.train.epochs || (self.train.epochs - self.burnin_epochs) < self.thin_epochs {
            return Err(Error::Config(format!(
                "no samples would be kept: epochs {} burnin {} thin {}",
                self.train.epochs, self.burnin_epochs, self.thin_epochs
            )));
        }
        if let Preconditioner::Rmsprop { decay, eps } = self.preconditioner {
            if !(0.0..1.0).contains(&decay) || !(eps > 0.0) {
                return Err(Error::Config("rmsprop needs decay in [0,1) and eps > 0".into()));
            }
        }
        Ok(())
    }

    pub fn kept_samples(&self) -> usize {
        (self.train.epochs - self.burnin_epochs) / self.thin_epochs
    }
}

/// Minibatch index sequence for one epoch; empty data yields a single empty batch.
pub(crate) fn epoch_batches<R: rand::Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    if n == 0 {
        1
    } else {
        n.div_ceil(batch_size)
    }
}

pub(crate) fn check_training_data(spec: &NetworkSpec, data: &LabeledBatch) -> Result<()> {
    if !data.is_empty() && data.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: data.dim(),
        });
    }
    if let Some(&y) = data.labels().iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn accuracy(
    posterior: &PosteriorApproximation,
    spec: &NetworkSpec,
    data: &LabeledBatch,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let probs = posterior_predictive_batch(posterior, spec, data.inputs(), n_samples, seed, 1.0)?;
    let hits = probs
        .iter()
        .zip(data.labels())
        .filter(|(p, &y)| p.argmax() == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule::Cosine;
        assert_eq!(s.factor(0, 100, 10), 1.0);
        assert!((s.factor(50, 100, 10) - 0.5).abs() < 1e-12);
        assert!(s.factor(100, 100, 10).abs() < 1e-12);
    }

    #[test]
    fn cyclical_schedule_restarts() {
        let s = Schedule::Cyclical { cycle_epochs: 2 };
        assert_eq!(s.factor(0, 100, 5), 1.0);
        assert_eq!(s.factor(10, 100, 5), 1.0);
        assert!((s.factor(5, 100, 5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn psd_check() {
        let good = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(check_symmetric_psd(&good, 1e-8).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.4, 1.0]);
        assert!(check_symmetric_psd(&asym, 1e-8).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(check_symmetric_psd(&indefinite, 1e-8).is_err());
    }

    #[test]
    fn empty_chain_is_invalid() {
        let spec = NetworkSpec::new(vec![2, 2], crate::nn::Activation::Relu).unwrap();
        let post = PosteriorApproximation::SampleChain { samples: vec![] };
        assert!(post.validate(&spec).is_err());
    }
}
