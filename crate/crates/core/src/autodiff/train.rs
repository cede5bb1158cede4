//! Mini-batch regression loop shared by the conditional and unconditional
//! trainers.
//!
//! Random draws happen sequentially on one generator; per-example gradients
//! may be computed in parallel but are summed in example order, so a run is
//! bitwise reproducible for a fixed seed.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::optim::{AdamW, AdamWConfig};
use super::ScoreNetwork;
use crate::error::{Error, Result};
use crate::rng::{master_rng, Rng};

/// One regression pair `net(input, t) ≈ target` with loss weight `weight`.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean weighted loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains `net` for `cfg.epochs` passes over `n_data` items; `make` turns a
/// data index into a training example, drawing any noise from the supplied
/// generator.
pub fn fit<F>(
    net: &mut ScoreNetwork,
    n_data: usize,
    cfg: &FitConfig,
    make: F,
) -> Result<TrainReport>
where
    F: Fn(usize, &mut Rng) -> Result<Example>,
{
    if n_data == 0 {
        return Err(Error::Training("empty dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Training(
            "epochs and batch size must be positive".into(),
        ));
    }
    let mut rng = master_rng(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, net.n_params());
    let batches_per_epoch = n_data.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n_data).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let examples = batch
                .iter()
                .map(|&i| make(i, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let net_ref = &*net;
            let parts = examples
                .par_iter()
                .map(|ex| net_ref.loss_grad(&ex.input, ex.t, &ex.target, ex.weight))
                .collect::<Vec<_>>();
            let mut grad = vec![0.0; net.n_params()];
            let mut loss = 0.0;
            for part in parts {
                let (l, g) = part?;
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let frac = if total > 1 {
                step as f64 / (total - 1) as f64
            } else {
                0.0
            };
            opt.step(net.params_mut(), &grad, frac)?;
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / n_data as f64);
    }
    report.steps = step;
    Ok(report)
}
