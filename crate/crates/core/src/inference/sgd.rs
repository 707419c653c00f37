//! MAP estimation by minibatch SGD with momentum, and deep ensembles.

use super::{accuracy, check_training_data, epoch_batches, steps_per_epoch, PosteriorApproximation, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{self, init_weights, LabeledBatch, NetworkSpec, ScaleRule, Tape, WeightVector};
use crate::rng;

/// Minimises the negative log joint; returns the final iterate.
pub fn train_map(spec: &NetworkSpec, data: &LabeledBatch, cfg: &TrainConfig) -> Result<PosteriorApproximation> {
    train_map_selected(spec, data, None, cfg)
}

/// Like [`train_map`], but when `val` is given the returned weights are the
/// checkpoint (every `cfg.checkpoint_epochs`, plus the final epoch) with the
/// best validation accuracy, ties going to the earliest checkpoint.
pub fn train_map_selected(
    spec: &NetworkSpec,
    data: &LabeledBatch,
    val: Option<&LabeledBatch>,
    cfg: &TrainConfig,
) -> Result<PosteriorApproximation> {
    cfg.validate()?;
    check_training_data(spec, data)?;
    let n = data.len();
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = cfg.epochs * per_epoch;

    let mut w = init_weights(spec, cfg.seed, ScaleRule::FanIn);
    let mut velocity = vec![0.0; w.len()];
    let mut grad = vec![0.0; w.len()];
    let mut tape = Tape::new(spec);
    let mut shuffle = rng::seeded(rng::derive_seed(cfg.seed, &[0x5E1]));
    let mut best: Option<(f64, WeightVector)> = None;
    let mut t = 0;

    for epoch in 1..=cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, &mut shuffle) {
            // the last batch of an epoch may be short; rescale it to n
            let batch_scale = if batch.is_empty() {
                0.0
            } else {
                n as f64 / batch.len() as f64
            };
            let loss = nn::minibatch_grad(
                spec,
                w.as_slice(),
                data,
                &batch,
                batch_scale,
                &cfg.prior,
                &mut tape,
                &mut grad,
            );
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "MAP training loss {loss} at epoch {epoch} (seed {})",
                    cfg.seed
                )));
            }
            let eta = cfg.step_size * cfg.schedule.factor(t, total, per_epoch);
            for ((wi, vi), gi) in w.0.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *vi = cfg.momentum_decay * *vi - eta * gi;
                *wi += *vi;
            }
            t += 1;
        }
        if let Some(val) = val {
            if epoch % cfg.checkpoint_epochs == 0 || epoch == cfg.epochs {
                let point = PosteriorApproximation::Point { weights: w.clone() };
                let acc = accuracy(&point, spec, val, 1, 0)?;
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, w.clone()));
                }
            }
        }
    }
    let weights = best.map_or(w, |(_, bw)| bw);
    Ok(PosteriorApproximation::Point { weights })
}

/// `members` independent MAP runs with seeds `seed, seed + 1, ...`.
pub fn train_ensemble(
    spec: &NetworkSpec,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    members: usize,
) -> Result<PosteriorApproximation> {
    train_ensemble_selected(spec, data, None, cfg, members)
}

pub fn train_ensemble_selected(
    spec: &NetworkSpec,
    data: &LabeledBatch,
    val: Option<&LabeledBatch>,
    cfg: &TrainConfig,
    members: usize,
) -> Result<PosteriorApproximation> {
    if members < 1 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let members = (0..members as u64)
        .map(|j| {
            let member_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(j),
                ..cfg.clone()
            };
            match train_map_selected(spec, data, val, &member_cfg)? {
                PosteriorApproximation::Point { weights } => Ok(weights),
                _ => unreachable!(),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorApproximation::Ensemble { members })
}
