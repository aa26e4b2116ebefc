//! Minibatch loop shared by both training stages.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::il::LabeledStep;
use crate::router::{self, AnchorParams, OptimizerState, RouterParams};
use crate::seed::Rng;

/// Optimizer settings for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Gradient steps (per call of the stage's training routine).
    pub steps: usize,
    pub weight_decay: f64,
    /// Positive-class weight in the BCE; 1.0 disables reweighting.
    pub pos_weight: f64,
}

impl OptConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("{section}.lr must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{section}.batch_size must be at least 1")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("{section}.weight_decay must be >= 0")));
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config(format!("{section}.pos_weight must be positive")));
        }
        Ok(())
    }
}

/// Seeded minibatch index stream: reshuffles after each pass over the data.
pub struct Minibatches {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: Rng,
}

impl Minibatches {
    pub fn new(len: usize, batch: usize, mut rng: Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Minibatches {
            order,
            cursor: 0,
            batch: batch.min(len).max(1),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Run `opt_cfg.steps` AdamW steps on `data`; with an anchor the loss is the
/// anchored BCE, otherwise plain BCE. `on_step` sees (step, minibatch loss,
/// params) after every update.
pub fn run(
    data: &[LabeledStep],
    params: &mut RouterParams,
    opt: &mut OptimizerState,
    anchor: Option<(&AnchorParams, f64)>,
    opt_cfg: &OptConfig,
    batches: &mut Minibatches,
    mut on_step: impl FnMut(usize, f64, &RouterParams),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    for step in 1..=opt_cfg.steps {
        let idx = batches.next_batch();
        let batch: Vec<&LabeledStep> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, grad) = match anchor {
            Some((a, beta)) => {
                router::anchored_loss_and_grad(params, a, &batch, beta, opt_cfg.pos_weight)?
            }
            None => router::bce_loss_and_grad(params, &batch, opt_cfg.pos_weight)?,
        };
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss} at step {step}; parameter norm {:.3e}, lr {:.1e}",
                params.values.iter().map(|v| v * v).sum::<f64>().sqrt(),
                opt.lr
            )));
        }
        router::optimizer_step(params, opt, &grad)?;
        on_step(step, loss, params);
    }
    Ok(())
}

/// Fraction of examples whose greedy (threshold 0.5) decision equals the label.
pub fn accuracy<'a>(params: &RouterParams, data: impl IntoIterator<Item = &'a LabeledStep>) -> Result<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for ex in data {
        let p = router::sigmoid(router::logit(params, &ex.features)?);
        hit += usize::from(router::decide_greedy(p, 0.5) == ex.label);
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { hit as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use std::collections::BTreeMap;

    #[test]
    fn every_index_appears_once_per_pass() {
        let mut mb = Minibatches::new(10, 4, seed::stream(1, &[]));
        let mut counts = BTreeMap::new();
        for _ in 0..5 {
            for i in mb.next_batch() {
                *counts.entry(i).or_insert(0) += 1;
            }
        }
        // 20 draws over 10 items = exactly two passes
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn small_data_uses_full_batch() {
        let mut mb = Minibatches::new(3, 64, seed::stream(1, &[]));
        let mut b = mb.next_batch();
        b.sort();
        assert_eq!(b, vec![0, 1, 2]);
    }
}
