use gama_tensor::{par, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::nets::ParamStore;

/// Loss trajectory of a supervised training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    /// Mean training loss of the freshly initialised model.
    pub initial_loss: f64,
    /// Mean of the batch losses seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean training loss of the final model.
    pub final_loss: f64,
}

/// Shuffled mini-batches of `items` for one epoch.
pub(crate) fn epoch_batches(items: &[usize], batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = items.to_vec();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Evaluate `f` per sample in parallel, then average losses and gradients in
/// index order so the result does not depend on scheduling.
pub(crate) fn batch_gradients<F>(
    store: &ParamStore,
    batch: &[usize],
    f: F,
) -> Result<(f64, Vec<Vec<f32>>)>
where
    F: Fn(usize) -> Result<(f64, Vec<Vec<f32>>)> + Sync,
{
    let results = par::map(batch, |&i| f(i));
    let mut acc: Vec<Vec<f32>> = store
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.numel()])
        .collect();
    let mut total = 0.0;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let inv = 1.0 / batch.len().max(1) as f32;
    for a in &mut acc {
        for x in a.iter_mut() {
            *x *= inv;
        }
    }
    Ok((total / batch.len().max(1) as f64, acc))
}

pub(crate) fn mean_loss<F>(items: &[usize], f: F) -> Result<f64>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let losses = par::map(items, |&i| f(i));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / items.len().max(1) as f64)
}

pub(crate) fn ensure_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(GamaError::Diverged(format!("{what} loss became {loss}")))
    }
}
