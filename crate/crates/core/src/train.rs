//! Mini-batch training loop shared by the neural modules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slg_autodiff::{add_all, derive_seed, AdamConfig, AdamState, Graph, ParamStore, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Seed for example `index` within `epoch`.
pub fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed, &format!("example.{epoch}.{index}"))
}

/// Runs `schedule.epochs` passes of Adam over `n` examples in a seeded
/// shuffled order. `loss` builds the loss of one example on a training
/// graph; a batch minimizes the mean of its examples' losses. Returns the
/// mean example loss of every epoch.
pub fn fit<F>(store: &mut ParamStore<f32>, n: usize, schedule: Schedule, mut loss: F) -> Result<Vec<f64>>
where
    F: for<'g> FnMut(&'g Graph<f32>, usize, u64) -> Result<Var<'g, f32>>,
{
    if n == 0 {
        return Err(Error::Precondition("no training examples".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam = AdamState::new(store, AdamConfig::with_lr(schedule.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (b, batch) in order.chunks(schedule.batch_size).enumerate() {
            let g = Graph::with_params(store, true, derive_seed(schedule.seed, &format!("dropout.{epoch}.{b}")));
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let l = loss(&g, i, example_seed(schedule.seed, epoch, i))?;
                let v = l.item() as f64;
                if !v.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {} (example {i})",
                        epoch + 1
                    )));
                }
                total += v;
                parts.push(l);
            }
            let batch_loss = if parts.len() == 1 {
                parts[0]
            } else {
                add_all(&parts)?.scale(1.0 / parts.len() as f32)
            };
            let grads = g.backward(batch_loss)?;
            adam.step(store, &grads).map_err(|e| {
                Error::Divergence(format!("epoch {}: {e}", epoch + 1))
            })?;
        }
        let mean = total / n as f64;
        log::debug!("epoch {} loss {mean:.6}", epoch + 1);
        curve.push(mean);
    }
    Ok(curve)
}
