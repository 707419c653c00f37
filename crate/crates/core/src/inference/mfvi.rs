//! Mean-field Gaussian variational inference with the reparameterisation
//! trick and Adam.
//!
//! The objective is the usual ELBO, `E_q[log p(D|w)] - KL(q || p)`, with
//! `q(w) = prod_i N(mu_i, sigma_i^2)` and `p(w) = N(0, I / lambda)`.
//! Parameters are `(mu, rho = log sigma)`. For a draw `w = mu + sigma * eps`
//! the pathwise gradients of the expected log-likelihood are
//! `g` and `g * eps * sigma` where `g = d log p(D|w) / dw`.

use serde::{Deserialize, Serialize};

use super::{accuracy, check_training_data, epoch_batches, steps_per_epoch, PosteriorApproximation, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{self, init_weights, LabeledBatch, NetworkSpec, PriorSpec, ScaleRule, Tape, WeightVector};
use crate::rng;

/// Closed-form `KL(N(mu, diag(sigma^2)) || N(0, I / lambda))`.
pub fn kl_gaussian_diag(means: &[f64], log_sigmas: &[f64], prior: &PriorSpec) -> Result<f64> {
    if means.len() != log_sigmas.len() {
        return Err(Error::LengthMismatch {
            what: "means vs log sigmas",
            left: means.len(),
            right: log_sigmas.len(),
        });
    }
    let lambda = prior.precision();
    Ok(means
        .iter()
        .zip(log_sigmas)
        .map(|(&m, &ls)| {
            let var = (2.0 * ls).exp();
            0.5 * (lambda * (var + m * m) - 1.0 - lambda.ln()) - ls
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfviConfig {
    /// Initial standard deviation of every factor.
    pub init_sigma: f64,
    /// Reparameterised draws per optimisation step.
    pub n_train_samples: usize,
    /// Posterior-predictive draws used when scoring validation checkpoints.
    pub val_predictive_samples: usize,
}

impl Default for MfviConfig {
    fn default() -> Self {
        Self {
            init_sigma: 0.01,
            n_train_samples: 1,
            val_predictive_samples: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MfviOutcome {
    pub posterior: PosteriorApproximation,
    /// Single-step ELBO estimate after every optimisation step.
    pub elbo_trace: Vec<f64>,
}

pub fn train_mfvi(
    spec: &NetworkSpec,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    init_sigma: f64,
    n_train_samples: usize,
) -> Result<PosteriorApproximation> {
    let mcfg = MfviConfig {
        init_sigma,
        n_train_samples,
        ..MfviConfig::default()
    };
    Ok(train_mfvi_traced(spec, data, None, cfg, &mcfg)?.posterior)
}

/// Full MFVI run. With `val`, the checkpoint with the best validation
/// accuracy (earliest on ties) is returned instead of the last iterate.
pub fn train_mfvi_traced(
    spec: &NetworkSpec,
    data: &LabeledBatch,
    val: Option<&LabeledBatch>,
    cfg: &TrainConfig,
    mcfg: &MfviConfig,
) -> Result<MfviOutcome> {
    cfg.validate()?;
    check_training_data(spec, data)?;
    if !(mcfg.init_sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "init_sigma must be > 0, got {}",
            mcfg.init_sigma
        )));
    }
    if mcfg.n_train_samples < 1 {
        return Err(Error::InvalidArgument("n_train_samples must be >= 1".into()));
    }
    let n = data.len();
    let p = spec.num_params();
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let lambda = cfg.prior.precision();
    let s = mcfg.n_train_samples as f64;

    let mut mu = init_weights(spec, cfg.seed, ScaleRule::FanIn);
    let mut rho = vec![mcfg.init_sigma.ln(); p];
    let mut adam_mu = Adam::new(p, cfg.momentum_decay);
    let mut adam_rho = Adam::new(p, cfg.momentum_decay);
    let mut tape = Tape::new(spec);
    let mut shuffle = rng::seeded(rng::derive_seed(cfg.seed, &[0x5E1]));
    let mut noise = rng::seeded(rng::derive_seed(cfg.seed, &[0xE95]));
    let flat = PriorSpec::flat();

    let mut g_mu = vec![0.0; p];
    let mut g_rho = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut w = vec![0.0; p];
    let mut sigma = vec![0.0; p];
    let mut trace = Vec::with_capacity(total);
    let mut best: Option<(f64, PosteriorApproximation)> = None;
    let mut t = 0;

    for epoch in 1..=cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, &mut shuffle) {
            let scale = if batch.is_empty() {
                0.0
            } else {
                n as f64 / batch.len() as f64
            };
            for (si, ri) in sigma.iter_mut().zip(&rho) {
                *si = ri.exp();
            }
            g_mu.iter_mut().for_each(|v| *v = 0.0);
            g_rho.iter_mut().for_each(|v| *v = 0.0);
            let mut nll = 0.0;
            for _ in 0..mcfg.n_train_samples {
                let eps = nn::standard_normal_vec(&mut noise, p);
                for i in 0..p {
                    w[i] = mu.0[i] + sigma[i] * eps[i];
                }
                nll += nn::minibatch_grad(spec, &w, data, &batch, scale, &flat, &mut tape, &mut g);
                for i in 0..p {
                    g_mu[i] += g[i] / s;
                    g_rho[i] += g[i] * eps[i] * sigma[i] / s;
                }
            }
            let kl = kl_gaussian_diag(mu.as_slice(), &rho, &cfg.prior)?;
            let neg_elbo = nll / s + kl;
            if !neg_elbo.is_finite() {
                return Err(Error::NonFinite(format!(
                    "ELBO {} at epoch {epoch} (seed {})",
                    -neg_elbo, cfg.seed
                )));
            }
            trace.push(-neg_elbo);
            for i in 0..p {
                g_mu[i] += lambda * mu.0[i];
                g_rho[i] += lambda * sigma[i] * sigma[i] - 1.0;
            }
            let lr = cfg.step_size * cfg.schedule.factor(t, total, per_epoch);
            adam_mu.step(mu.as_mut_slice(), &g_mu, lr);
            adam_rho.step(&mut rho, &g_rho, lr);
            t += 1;
        }
        if let Some(val) = val {
            if epoch % cfg.checkpoint_epochs == 0 || epoch == cfg.epochs {
                let post = PosteriorApproximation::MeanField {
                    means: mu.clone(),
                    log_sigmas: WeightVector(rho.clone()),
                };
                let seed = rng::derive_seed(cfg.seed, &[0xACC]);
                let acc = accuracy(&post, spec, val, mcfg.val_predictive_samples, seed)?;
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, post));
                }
            }
        }
    }
    let posterior = best.map(|(_, p)| p).unwrap_or(PosteriorApproximation::MeanField {
        means: mu,
        log_sigmas: WeightVector(rho),
    });
    Ok(MfviOutcome {
        posterior,
        elbo_trace: trace,
    })
}

/// Adam with bias correction; `beta1` comes from the momentum setting.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
}

impl Adam {
    fn new(len: usize, beta1: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::inference::Schedule;
    use crate::nn::Activation;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(epochs: usize, step: f64, lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 50,
            step_size: step,
            momentum_decay: 0.9,
            seed: 11,
            prior: PriorSpec::new(lambda).unwrap(),
            schedule: Schedule::Constant,
            checkpoint_epochs: 10,
        }
    }

    #[test]
    fn kl_closed_form_cases() {
        let unit = PriorSpec::new(1.0).unwrap();
        assert_eq!(kl_gaussian_diag(&[0.0], &[0.0], &unit).unwrap(), 0.0);
        assert!((kl_gaussian_diag(&[1.0], &[0.0], &unit).unwrap() - 0.5).abs() < 1e-15);
        let prior = PriorSpec::new(4.0).unwrap();
        let ls = prior.std().ln();
        assert!(kl_gaussian_diag(&[0.0; 3], &[ls; 3], &prior).unwrap().abs() < 1e-14);
        assert!(kl_gaussian_diag(&[0.0; 3], &[0.0; 2], &prior).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(w) - log p(w)] with 2e5 draws, 1-d
        let prior = PriorSpec::new(2.0).unwrap();
        let (m, ls) = (0.7f64, -0.4f64);
        let s = ls.exp();
        let mut r = rng::seeded(5);
        let n = 200_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut r);
            let w = m + s * e;
            let log_q = -0.5 * e * e - ls;
            let log_p = -0.5 * 2.0 * w * w + 0.5 * 2.0f64.ln();
            let v = log_q - log_p;
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = kl_gaussian_diag(&[m], &[ls], &prior).unwrap();
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn kl_only_limit_recovers_prior() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let prior_lambda = 25.0;
        let post = train_mfvi(&spec, &LabeledBatch::empty(2), &cfg(3000, 0.01, prior_lambda), 0.01, 1).unwrap();
        let PosteriorApproximation::MeanField { means, log_sigmas } = post else {
            panic!("wrong kind")
        };
        let target = (1.0 / prior_lambda).sqrt();
        for (m, ls) in means.0.iter().zip(&log_sigmas.0) {
            assert!(m.abs() < 1e-3, "mean {m}");
            assert!((ls.exp() / target - 1.0).abs() < 0.01, "sigma {}", ls.exp());
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let spec = NetworkSpec::new(vec![2, 16, 2], Activation::Relu).unwrap();
        let data = make_blobs(2, 2, 200, 4.0, 0.7, 1).unwrap().to_batch();
        let post = train_mfvi(&spec, &data, &cfg(100, 0.01, 1.0), 0.01, 1).unwrap();
        let acc = accuracy(&post, &spec, &data, 30, 0).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn elbo_block_means_do_not_decrease() {
        let spec = NetworkSpec::new(vec![2, 8, 3], Activation::Tanh).unwrap();
        let data = make_blobs(3, 2, 90, 3.0, 1.0, 4).unwrap().to_batch();
        let mut c = cfg(600, 0.01, 1.0);
        c.batch_size = 90;
        c.schedule = Schedule::Cosine;
        let mcfg = MfviConfig {
            init_sigma: 0.01,
            n_train_samples: 8,
            val_predictive_samples: 30,
        };
        let out = train_mfvi_traced(&spec, &data, None, &c, &mcfg).unwrap();
        let blocks: Vec<f64> = out
            .elbo_trace
            .chunks_exact(100)
            .map(|b| b.iter().sum::<f64>() / 100.0)
            .collect();
        assert_eq!(blocks.len(), 6);
        for w in blocks.windows(2) {
            assert!(w[1] >= w[0], "ELBO block means {blocks:?}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let data = LabeledBatch::empty(2);
        assert!(train_mfvi(&spec, &data, &cfg(1, 0.01, 1.0), 0.0, 1).is_err());
        assert!(train_mfvi(&spec, &data, &cfg(1, 0.01, 1.0), 0.1, 0).is_err());
    }
}
