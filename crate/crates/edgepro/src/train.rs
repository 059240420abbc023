//! Lock training: dataset splitting/obfuscation and the alternating
//! clean-locked / obfuscated-unlocked optimization loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lock::{accuracy_over, AuthorizationKey, LockPlan};
use crate::network::Network;
use crate::tensor::{stack, Tensor};

/// The two halves of lock training: `clean` keeps true labels, `obfuscated`
/// carries deliberately wrong ones.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub clean: Vec<(Tensor, usize)>,
    pub obfuscated: Vec<(Tensor, usize)>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once the epoch-mean clean-locked loss drops below this.
    pub loss_threshold: f64,
    pub seed: u64,
    /// Cap on the number of clean examples used for the per-epoch accuracy
    /// probe recorded in the history.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 64,
            max_epochs: 20,
            loss_threshold: 1e-4,
            seed: 0,
            probe_size: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidParam(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParam("max_epochs must be at least 1".into()));
        }
        if !(self.loss_threshold.is_finite() && self.loss_threshold > 0.0) {
            return Err(Error::InvalidParam(format!(
                "loss_threshold must be positive, got {}",
                self.loss_threshold
            )));
        }
        if self.probe_size == 0 {
            return Err(Error::InvalidParam("probe_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One epoch of history: mean clean-locked loss and probe accuracies in both
/// modes. Deterministic for fixed inputs, so two identical runs produce
/// identical histories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub clean_loss: f64,
    pub acc_nl: f64,
    pub acc_nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_clean_loss: f64,
    pub history: Vec<EpochStats>,
    pub wall_seconds: f64,
}

/// Shuffles, halves, and rewrites the second half's labels to a uniform
/// draw over the wrong classes. The clean half takes the extra example when
/// the count is odd.
pub fn split_and_obfuscate(dataset: Dataset, num_classes: usize, seed: u64) -> Result<SplitDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidParam(
            "need at least 2 classes to draw a wrong label".into(),
        ));
    }
    if dataset.len() < 2 {
        return Err(Error::InvalidParam("need at least 2 examples to split".into()));
    }
    for (_, y) in &dataset.examples {
        if *y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: *y,
                num_classes,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = dataset.examples;
    examples.shuffle(&mut rng);
    let keep = examples.len() - examples.len() / 2;
    let mut obfuscated = examples.split_off(keep);
    for (_, y) in &mut obfuscated {
        let r = rng.gen_range(0..num_classes - 1);
        *y = if r >= *y { r + 1 } else { r };
    }
    Ok(SplitDataset {
        clean: examples,
        obfuscated,
        num_classes,
    })
}

/// Alternating lock training. Per iteration: one SGD step on a clean batch
/// through the locked forward pass (replaced activations are constants in
/// the backward pass), then one step on an obfuscated batch through the
/// plain pass. Stops at `max_epochs` or when the epoch-mean clean-locked
/// loss falls below the threshold. A non-finite loss aborts with the last
/// epoch-boundary snapshot.
pub fn lock_train(
    net: Network,
    key: &AuthorizationKey,
    split: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if split.clean.is_empty() || split.obfuscated.is_empty() {
        return Err(Error::InvalidParam("both split halves must be non-empty".into()));
    }
    let plan = LockPlan::compile(&net, key)?;
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clean_order: Vec<usize> = (0..split.clean.len()).collect();
    let mut obf_order: Vec<usize> = (0..split.obfuscated.len()).collect();
    let probe = &split.clean[..split.clean.len().min(cfg.probe_size)];
    let mut history = Vec::new();
    let started = Instant::now();

    for epoch in 0..cfg.max_epochs {
        let snapshot = net.clone();
        clean_order.shuffle(&mut rng);
        obf_order.shuffle(&mut rng);
        let clean_steps = clean_order.len().div_ceil(cfg.batch_size);
        let obf_steps = obf_order.len().div_ceil(cfg.batch_size);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for it in 0..clean_steps.max(obf_steps) {
            if it < clean_steps {
                let idx = batch_indices(&clean_order, it, cfg.batch_size);
                let (batch, labels) = gather(&split.clean, idx);
                let (loss, grads) = net.loss_and_grad_with(&batch, &labels, Some(&plan))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("clean-locked loss became {loss}"),
                        last_good: Box::new(snapshot),
                    });
                }
                net.sgd_step(&grads, cfg.lr)?;
                loss_sum += loss * labels.len() as f64;
                loss_n += labels.len();
            }
            if it < obf_steps {
                let idx = batch_indices(&obf_order, it, cfg.batch_size);
                let (batch, labels) = gather(&split.obfuscated, idx);
                let (loss, grads) = net.loss_and_grad(&batch, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("obfuscated loss became {loss}"),
                        last_good: Box::new(snapshot),
                    });
                }
                net.sgd_step(&grads, cfg.lr)?;
            }
        }
        let clean_loss = loss_sum / loss_n as f64;
        if !clean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("epoch-mean clean-locked loss became {clean_loss}"),
                last_good: Box::new(snapshot),
            });
        }
        history.push(EpochStats {
            clean_loss,
            acc_nl: accuracy_over(&net, probe, Some(&plan))?,
            acc_nu: accuracy_over(&net, probe, None)?,
        });
        if clean_loss < cfg.loss_threshold {
            break;
        }
    }

    let report = TrainReport {
        epochs_run: history.len(),
        final_clean_loss: history.last().map(|h| h.clean_loss).unwrap_or(f64::NAN),
        history,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}

fn batch_indices(order: &[usize], it: usize, batch_size: usize) -> &[usize] {
    let lo = it * batch_size;
    let hi = (lo + batch_size).min(order.len());
    &order[lo..hi]
}

fn gather(examples: &[(Tensor, usize)], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &examples[i].0).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| examples[i].1).collect();
    (stack(&refs).unwrap(), labels)
}
