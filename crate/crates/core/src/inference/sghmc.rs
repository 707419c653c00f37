//! Stochastic-gradient Hamiltonian Monte Carlo.
//!
//! Update with step size `eta` and friction `gamma`:
//!
//! ```text
//! v     <- (1 - gamma) v - eta * G * grad U(theta) + N(0, 2 gamma eta G)
//! theta <- theta + v
//! ```
//!
//! `G` is the identity, or the RMSprop diagonal `1 / (sqrt(r) + eps)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{check_training_data, epoch_batches, PosteriorApproximation, Preconditioner, SghmcConfig};
use crate::error::{Error, Result};
use crate::nn::{self, init_weights, LabeledBatch, NetworkSpec, PriorSpec, ScaleRule, Tape, WeightVector};
use crate::rng::{self, Rng};

/// A potential `U(theta)` accessed through unbiased gradient estimates.
pub trait StochasticPotential {
    fn dim(&self) -> usize;
    /// Prepares the minibatches of one epoch and returns how many steps it has.
    fn begin_epoch(&mut self, rng: &mut Rng) -> usize;
    /// Writes the gradient estimate for `step` of the current epoch into
    /// `grad` and returns the matching potential estimate.
    fn gradient(&mut self, step: usize, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// `U(theta) = (theta - mean)^T P (theta - mean) / 2`, with optional
/// Gaussian noise of standard deviation `grad_noise` on each gradient.
pub struct GaussianPotential {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    grad_noise: f64,
    steps_per_epoch: usize,
    noise: Rng,
}

impl GaussianPotential {
    pub fn new(
        mean: Vec<f64>,
        precision: DMatrix<f64>,
        grad_noise: f64,
        steps_per_epoch: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = mean.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: precision.nrows(),
            });
        }
        if steps_per_epoch < 1 || !(grad_noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "steps_per_epoch must be >= 1 and grad_noise >= 0".into(),
            ));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            precision,
            grad_noise,
            steps_per_epoch,
            noise: rng::seeded(seed),
        })
    }
}

impl StochasticPotential for GaussianPotential {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn begin_epoch(&mut self, _rng: &mut Rng) -> usize {
        self.steps_per_epoch
    }

    fn gradient(&mut self, _step: usize, theta: &[f64], grad: &mut [f64]) -> f64 {
        let diff = DVector::from_column_slice(theta) - &self.mean;
        let g = &self.precision * &diff;
        for (o, v) in grad.iter_mut().zip(g.iter()) {
            *o = *v;
            if self.grad_noise > 0.0 {
                *o += self.grad_noise * self.noise.sample::<f64, _>(StandardNormal);
            }
        }
        0.5 * diff.dot(&g)
    }
}

/// Negative log joint of a network, estimated on shuffled minibatches.
struct NetworkPotential<'a> {
    spec: &'a NetworkSpec,
    data: &'a LabeledBatch,
    prior: PriorSpec,
    batch_size: usize,
    batches: Vec<Vec<usize>>,
    tape: Tape,
}

impl StochasticPotential for NetworkPotential<'_> {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn begin_epoch(&mut self, rng: &mut Rng) -> usize {
        self.batches = epoch_batches(self.data.len(), self.batch_size, rng);
        self.batches.len()
    }

    fn gradient(&mut self, step: usize, theta: &[f64], grad: &mut [f64]) -> f64 {
        let batch = &self.batches[step];
        let scale = if batch.is_empty() {
            0.0
        } else {
            self.data.len() as f64 / batch.len() as f64
        };
        let nll = nn::minibatch_grad(
            self.spec,
            theta,
            self.data,
            batch,
            scale,
            &self.prior,
            &mut self.tape,
            grad,
        );
        let sq: f64 = theta.iter().map(|w| w * w).sum();
        nll + 0.5 * self.prior.precision() * sq
    }
}

const DIVERGENCE_NORM: f64 = 1e8;

/// Runs the sampler from `init` and returns the kept samples: one at the
/// end of every `thin_epochs`-th epoch after the first `burnin_epochs`.
pub fn sghmc_sample<P: StochasticPotential>(
    potential: &mut P,
    init: Vec<f64>,
    cfg: &SghmcConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let d = potential.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.len(),
        });
    }
    let tc = &cfg.train;
    let gamma = cfg.friction;
    let mut shuffle = rng::seeded(rng::derive_seed(tc.seed, &[0x5E1]));
    let mut noise = rng::seeded(rng::derive_seed(tc.seed, &[0x56C]));
    let mut theta = init;
    let mut v = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut sq_avg = vec![0.0; d];
    let mut precond = vec![1.0; d];
    let mut samples = Vec::with_capacity(cfg.kept_samples());
    let mut t = 0;
    // steps per epoch is only known once the first epoch is prepared
    let mut total = 0;

    for epoch in 1..=tc.epochs {
        let steps = potential.begin_epoch(&mut shuffle);
        if epoch == 1 {
            total = steps * tc.epochs;
        }
        for step in 0..steps {
            let u = potential.gradient(step, &theta, &mut g);
            let eta = tc.step_size * tc.schedule.factor(t, total, steps);
            if let Preconditioner::Rmsprop { decay, eps } = cfg.preconditioner {
                for i in 0..d {
                    sq_avg[i] = decay * sq_avg[i] + (1.0 - decay) * g[i] * g[i];
                    precond[i] = 1.0 / (sq_avg[i].sqrt() + eps);
                }
            }
            let mut norm_sq = 0.0;
            for i in 0..d {
                let z: f64 = noise.sample(StandardNormal);
                v[i] = (1.0 - gamma) * v[i] - eta * precond[i] * g[i] + (2.0 * gamma * eta * precond[i]).sqrt() * z;
                theta[i] += v[i];
                norm_sq += theta[i] * theta[i];
            }
            if !u.is_finite() || !norm_sq.is_finite() || norm_sq.sqrt() > DIVERGENCE_NORM {
                return Err(Error::Divergence(format!(
                    "SGHMC diverged at epoch {epoch} (seed {}, potential {u})",
                    tc.seed
                )));
            }
            t += 1;
        }
        if epoch > cfg.burnin_epochs && (epoch - cfg.burnin_epochs).is_multiple_of(cfg.thin_epochs) {
            samples.push(theta.clone());
        }
    }
    Ok(samples)
}

/// SGHMC over the weights of a network, started from a fan-in initialisation.
pub fn run_sghmc(spec: &NetworkSpec, data: &LabeledBatch, cfg: &SghmcConfig) -> Result<PosteriorApproximation> {
    check_training_data(spec, data)?;
    let mut potential = NetworkPotential {
        spec,
        data,
        prior: cfg.train.prior,
        batch_size: cfg.train.batch_size,
        batches: Vec::new(),
        tape: Tape::new(spec),
    };
    let init = init_weights(spec, cfg.train.seed, ScaleRule::FanIn);
    let samples = sghmc_sample(&mut potential, init.0, cfg)?;
    Ok(PosteriorApproximation::SampleChain {
        samples: samples.into_iter().map(WeightVector).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::inference::{accuracy, Schedule, TrainConfig};
    use crate::nn::Activation;

    fn cfg(epochs: usize, burnin: usize, step: f64, seed: u64) -> SghmcConfig {
        SghmcConfig {
            train: TrainConfig {
                epochs,
                batch_size: 32,
                step_size: step,
                momentum_decay: 0.9,
                seed,
                prior: PriorSpec::new(1.0).unwrap(),
                schedule: Schedule::Constant,
                checkpoint_epochs: 10,
            },
            burnin_epochs: burnin,
            thin_epochs: 1,
            friction: 0.1,
            preconditioner: Preconditioner::None,
        }
    }

    fn target() -> (Vec<f64>, DMatrix<f64>) {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        (vec![1.0, -2.0], cov)
    }

    fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let n = samples.len() as f64;
        let mut mean = vec![0.0; 2];
        for s in samples {
            mean[0] += s[0] / n;
            mean[1] += s[1] / n;
        }
        let mut cov = DMatrix::zeros(2, 2);
        for s in samples {
            for i in 0..2 {
                for j in 0..2 {
                    cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        (mean, cov)
    }

    #[test]
    fn gaussian_target_moments() {
        let (mu, cov) = target();
        let prec = cov.clone().try_inverse().unwrap();
        for seed in [1, 2, 3] {
            let mut pot = GaussianPotential::new(mu.clone(), prec.clone(), 0.0, 20, seed).unwrap();
            let c = cfg(6000, 100, 0.01, seed);
            let samples = sghmc_sample(&mut pot, vec![0.0, 0.0], &c).unwrap();
            assert!(samples.len() >= 5000);
            let (m, s) = moments(&samples);
            for i in 0..2 {
                assert!((m[i] - mu[i]).abs() < 0.15, "seed {seed}: mean {m:?}");
                for j in 0..2 {
                    let tol = 0.15 * (cov[(i, i)] * cov[(j, j)]).sqrt();
                    assert!((s[(i, j)] - cov[(i, j)]).abs() < tol, "seed {seed}: cov {s}");
                }
            }
        }
    }

    #[test]
    fn noisy_gradients_with_rmsprop_stay_near_target() {
        let (mu, cov) = target();
        let prec = cov.try_inverse().unwrap();
        let mut pot = GaussianPotential::new(mu.clone(), prec, 0.1, 20, 9).unwrap();
        let mut c = cfg(3000, 100, 0.005, 9);
        c.preconditioner = Preconditioner::Rmsprop { decay: 0.99, eps: 1e-8 };
        let samples = sghmc_sample(&mut pot, vec![0.0, 0.0], &c).unwrap();
        let (m, _) = moments(&samples);
        assert!((m[0] - mu[0]).abs() < 0.3 && (m[1] - mu[1]).abs() < 0.3, "{m:?}");
    }

    #[test]
    fn zero_step_stays_at_init() {
        let mut pot = GaussianPotential::new(vec![5.0], DMatrix::identity(1, 1), 0.0, 3, 0).unwrap();
        let samples = sghmc_sample(&mut pot, vec![0.25], &cfg(10, 2, 0.0, 0)).unwrap();
        assert_eq!(samples.len(), 8);
        assert!(samples.iter().all(|s| s[0] == 0.25));
    }

    #[test]
    fn full_friction_tiny_step_stays_near_init() {
        let mut pot = GaussianPotential::new(vec![5.0, -5.0], DMatrix::identity(2, 2), 0.0, 10, 0).unwrap();
        let mut c = cfg(50, 0, 1e-12, 6);
        c.friction = 1.0;
        let samples = sghmc_sample(&mut pot, vec![0.5, 0.5], &c).unwrap();
        for s in samples {
            assert!((s[0] - 0.5).abs() < 1e-4 && (s[1] - 0.5).abs() < 1e-4, "{s:?}");
        }
    }

    #[test]
    fn thinning_and_burnin_counts() {
        let mut pot = GaussianPotential::new(vec![0.0], DMatrix::identity(1, 1), 0.0, 1, 0).unwrap();
        let mut c = cfg(20, 5, 0.01, 0);
        c.thin_epochs = 4;
        let samples = sghmc_sample(&mut pot, vec![0.0], &c).unwrap();
        assert_eq!(samples.len(), c.kept_samples());
        assert_eq!(samples.len(), 3);
    }

    #[test]
    fn network_chain_is_deterministic_and_accurate() {
        let spec = NetworkSpec::new(vec![2, 8, 2], Activation::Relu).unwrap();
        let data = make_blobs(2, 2, 160, 4.0, 0.7, 3).unwrap().to_batch();
        let c = cfg(60, 30, 1e-3, 4);
        let a = run_sghmc(&spec, &data, &c).unwrap();
        let b = run_sghmc(&spec, &data, &c).unwrap();
        assert_eq!(a, b);
        let PosteriorApproximation::SampleChain { samples } = &a else {
            unreachable!()
        };
        assert_eq!(samples.len(), 30);
        assert!(accuracy(&a, &spec, &data, 1, 0).unwrap() >= 0.95);
    }

    #[test]
    fn huge_step_diverges() {
        let spec = NetworkSpec::new(vec![2, 8, 2], Activation::Relu).unwrap();
        let data = make_blobs(2, 2, 100, 4.0, 0.7, 3).unwrap().to_batch();
        let err = run_sghmc(&spec, &data, &cfg(50, 10, 1e4, 4)).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }
}
