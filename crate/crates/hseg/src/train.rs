//! Minibatch training with per-sample data parallelism.
//!
//! Every sample in a batch runs forward and backward on its own tape in
//! parallel; gradients are then summed in sample order and averaged, so a
//! run is bitwise reproducible regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::net::Network;
use crate::optim::{adamw_step, AdamW, OptimState};
use crate::pipeline::{normalize_patch, PatchPair};
use crate::tape::Tape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Seed for per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { epochs: 100, batch_size: 32, optimizer: AdamW::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when no validation set was given.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters the network now holds.
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Cross-entropy of one sample under the current parameters, with
/// gradients for every parameter when `wanted`.
fn sample_pass(
    net: &Network,
    pair: &PatchPair,
    grads: bool,
) -> Result<(f64, Option<Vec<Vec<f32>>>)> {
    let input = normalize_patch(&pair.image);
    let mut tape = Tape::new();
    let x = tape.leaf(&input, false);
    let pass = net.forward_on(&mut tape, x, grads)?;
    let rho = tape.softmax_channels(pass.logits)?;
    let loss = tape.cross_entropy(rho, &[&pair.labels])?;
    let loss_value = f64::from(tape.data(loss)[0]);
    if !grads {
        return Ok((loss_value, None));
    }
    tape.backward(loss)?;
    let collected = pass
        .param_vars
        .iter()
        .map(|&v| tape.grad(v).expect("params are tracked").to_vec())
        .collect();
    Ok((loss_value, Some(collected)))
}

fn mean_loss(net: &Network, pairs: &[PatchPair], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = indices
        .par_iter()
        .map(|&i| sample_pass(net, &pairs[i], false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train `net` on the indexed patches. After the final epoch the network
/// holds the parameters of the epoch with the lowest validation loss
/// (lowest training loss when `val_idx` is empty). `progress` is called
/// once per epoch.
pub fn fit(
    net: &mut Network,
    pairs: &[PatchPair],
    train_idx: &[usize],
    val_idx: &[usize],
    settings: &TrainSettings,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if settings.epochs == 0 {
        return Err(Error::Config("training needs at least one epoch".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if train_idx.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(&bad) = train_idx.iter().chain(val_idx).find(|&&i| i >= pairs.len()) {
        return Err(Error::Config(format!(
            "sample index {bad} out of range ({} patches)",
            pairs.len()
        )));
    }

    let mut state = OptimState::new(&net.param_lens());
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut log = Vec::with_capacity(settings.epochs);
    let mut best: Option<(usize, f64, Vec<crate::net::Param>)> = None;

    for epoch in 0..settings.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(settings.batch_size) {
            let results: Vec<(f64, Option<Vec<Vec<f32>>>)> = batch
                .par_iter()
                .map(|&i| sample_pass(net, &pairs[i], true))
                .collect::<Result<_>>()?;

            let mut grad_sum: Vec<Vec<f32>> =
                net.param_lens().iter().map(|&n| vec![0.0; n]).collect();
            for (loss, grads) in &results {
                loss_sum += loss;
                let grads = grads.as_ref().expect("requested gradients");
                for (acc, g) in grad_sum.iter_mut().zip(grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for acc in &mut grad_sum {
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }

            let mut params: Vec<&mut [f32]> =
                net.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
            let grads: Vec<&[f32]> = grad_sum.iter().map(|g| g.as_slice()).collect();
            adamw_step(&mut params, &grads, &mut state, &settings.optimizer)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = mean_loss(net, pairs, val_idx)?;

        let entry = EpochLog { epoch, train_loss, val_loss };
        progress(&entry);
        log.push(entry);

        let selector = if val_idx.is_empty() { train_loss } else { val_loss };
        if best.as_ref().is_none_or(|(_, b, _)| selector < *b) {
            best = Some((epoch, selector, net.params().to_vec()));
        }
    }

    let (best_epoch, best_loss, params) = best.expect("epochs >= 1");
    net.set_params(params)?;
    Ok(TrainOutcome { log, best_epoch, best_loss })
}
