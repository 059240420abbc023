//! Adaptive attacks against a lock-trained model: fine-tuning, importance
//! pruning, and reverse-engineering search. Every attack works on a copy;
//! the input model is never mutated.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::lock::{accuracy_over, AuthorizationKey, LockPlan};
use crate::network::Network;
use crate::select::{rank_neurons, Strategy};
use crate::tensor::stack;

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub attack: &'static str,
    pub acc_nu_before: f64,
    pub acc_nu_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<&'static str>,
    pub resources: Resources,
    /// Lock candidates that met the success threshold, in Table-style
    /// `layer:neuron:value` notation (layer = network layer index).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovered: Option<Vec<Recovered>>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Resources {
    pub candidate_evaluations: usize,
    pub elapsed_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruned_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovered_candidates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singleton_evaluations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_evaluations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recovered {
    pub layer: usize,
    pub neuron: usize,
    pub value: f64,
}

impl std::fmt::Display for Recovered {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.neuron, self.value)
    }
}

/// Fine-tunes a copy of the model on `holdout` (true labels, plain forward,
/// all parameters) and reports unlocked accuracy on `eval_set` before and
/// after.
pub fn finetune_attack(
    net: &Network,
    holdout: &Dataset,
    epochs: usize,
    lr: f64,
    eval_set: &Dataset,
    seed: u64,
) -> Result<AttackReport> {
    if holdout.is_empty() {
        return Err(Error::InvalidParam("fine-tuning holdout is empty".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidParam(format!("lr must be positive, got {lr}")));
    }
    let started = Instant::now();
    let acc_nu_before = accuracy_over(net, &eval_set.examples, None)?;
    let mut attacked = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..holdout.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(64) {
            let refs: Vec<&crate::tensor::Tensor> =
                idx.iter().map(|&i| &holdout.examples[i].0).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| holdout.examples[i].1).collect();
            let (_, grads) = attacked.loss_and_grad(&stack(&refs)?, &labels)?;
            attacked.sgd_step(&grads, lr)?;
        }
    }
    let acc_nu_after = accuracy_over(&attacked, &eval_set.examples, None)?;
    Ok(AttackReport {
        attack: "finetune",
        acc_nu_before,
        acc_nu_after,
        status: None,
        resources: Resources {
            elapsed_seconds: started.elapsed().as_secs_f64(),
            finetune_epochs: Some(epochs),
            ..Resources::default()
        },
        recovered: None,
    })
}

/// Zeroes the lowest-importance ceil(rate * width) neurons of every lockable
/// layer (ties to the lower index) on a copy, then reports unlocked accuracy.
/// The mask clears a neuron's incoming weights and bias, so its output is
/// exactly zero.
pub fn prune_attack(
    net: &Network,
    metric: Strategy,
    prune_rate: f64,
    probe: &Dataset,
    eval_set: &Dataset,
    seed: u64,
) -> Result<AttackReport> {
    if !(prune_rate > 0.0 && prune_rate < 1.0) {
        return Err(Error::InvalidParam(format!(
            "prune rate must lie in (0, 1), got {prune_rate}"
        )));
    }
    if !matches!(metric, Strategy::Avr | Strategy::Gcr | Strategy::Lrpr) {
        return Err(Error::InvalidParam(format!(
            "pruning metric must be avgact, gradcam, or lrp, got {}",
            metric.name()
        )));
    }
    let started = Instant::now();
    let acc_nu_before = accuracy_over(net, &eval_set.examples, None)?;
    let scores = rank_neurons(net, probe, metric, seed)?;
    let mut attacked = net.clone();
    for (ordinal, li) in net.lockable_layer_indices().into_iter().enumerate() {
        let layer_scores = scores.layer(ordinal);
        for &neuron in &lowest_k(layer_scores, prune_count(layer_scores.len(), prune_rate)) {
            mask_neuron(&mut attacked.layers[li], neuron);
        }
    }
    let acc_nu_after = accuracy_over(&attacked, &eval_set.examples, None)?;
    Ok(AttackReport {
        attack: "prune",
        acc_nu_before,
        acc_nu_after,
        status: None,
        resources: Resources {
            elapsed_seconds: started.elapsed().as_secs_f64(),
            pruned_fraction: Some(prune_rate),
            ..Resources::default()
        },
        recovered: None,
    })
}

/// ceil(rate * width) with a snap for products that are integers up to
/// floating-point noise (0.2 * 10 must prune 2, not 3).
fn prune_count(width: usize, rate: f64) -> usize {
    let x = rate * width as f64;
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    } as usize;
    k.min(width)
}

/// Indices of the k lowest scores, ties broken by lower index.
fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn mask_neuron(layer: &mut Layer, neuron: usize) {
    match layer {
        Layer::Dense { weight, bias } => {
            let inp = weight.shape()[1];
            weight.values_mut()[neuron * inp..(neuron + 1) * inp].fill(0.0);
            bias.values_mut()[neuron] = 0.0;
        }
        Layer::Conv2D { kernels, bias } => {
            let per = kernels.len() / kernels.shape()[0];
            kernels.values_mut()[neuron * per..(neuron + 1) * per].fill(0.0);
            bias.values_mut()[neuron] = 0.0;
        }
        _ => unreachable!("only lockable layers are pruned"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knowledge {
    /// The attacker knows which layers host authorization neurons.
    All,
    /// The attacker only knows the scale factors; all lockable layers are
    /// searched.
    Half,
}

impl FromStr for Knowledge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Knowledge> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Knowledge::All),
            "half" => Ok(Knowledge::Half),
            other => Err(Error::InvalidParam(format!(
                "unknown knowledge level \"{other}\""
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReverseOptions {
    pub knowledge: Knowledge,
    /// Candidate locking values; defaults to 0.1 .. 1.0 in steps of 0.1.
    pub value_grid: Vec<f64>,
    /// A candidate cracks the model when its locked probe accuracy reaches
    /// this fraction of the true key's.
    pub success_threshold: f64,
    /// Maximum candidate evaluations before reporting Timeout.
    pub budget: usize,
    /// 1 = singletons only, 2 = singletons then unordered pairs.
    pub max_pair_order: usize,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        ReverseOptions {
            knowledge: Knowledge::Half,
            value_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            success_threshold: 0.9,
            budget: 100_000,
            max_pair_order: 2,
        }
    }
}

/// Grid search for a lock configuration that restores accuracy. The attacker
/// holds the model and the true scale factors (taken from `true_key`; under
/// `Knowledge::All` also which layers are locked, but never the neuron
/// indices or values). Candidates are enumerated in canonical order:
/// single `(layer, neuron, value)` triples first, then unordered pairs.
/// The search stops at the first candidate whose locked probe accuracy
/// reaches `success_threshold` times the true key's, and reports Timeout
/// when the budget or the whole space is exhausted first.
pub fn reverse_engineer(
    net: &Network,
    true_key: &AuthorizationKey,
    probe: &Dataset,
    opts: &ReverseOptions,
) -> Result<AttackReport> {
    if opts.value_grid.is_empty() {
        return Err(Error::InvalidParam("value grid is empty".into()));
    }
    if opts.max_pair_order == 0 {
        return Err(Error::InvalidParam("max_pair_order must be at least 1".into()));
    }
    if !(opts.success_threshold > 0.0 && opts.success_threshold <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "success threshold must lie in (0, 1], got {}",
            opts.success_threshold
        )));
    }
    let started = Instant::now();
    let gammas: Vec<f64> = true_key.layers.iter().map(|l| l.scale_factor).collect();
    let plan = LockPlan::compile(net, true_key)?;
    let reference = accuracy_over(net, &probe.examples, Some(&plan))?;
    let target = opts.success_threshold * reference;
    let acc_nu_before = accuracy_over(net, &probe.examples, None)?;

    let lockable = net.lockable_layer_indices();
    let widths = net.lockable_widths();
    let search_layers: Vec<usize> = match opts.knowledge {
        Knowledge::All => (0..widths.len())
            .filter(|&k| !true_key.layers[k].locking_values.is_empty())
            .collect(),
        Knowledge::Half => (0..widths.len()).collect(),
    };
    // every (lockable ordinal, neuron) slot in canonical order
    let slots: Vec<(usize, usize)> = search_layers
        .iter()
        .flat_map(|&k| (0..widths[k]).map(move |n| (k, n)))
        .collect();

    let mut evals = 0usize;
    let mut singleton_evals = 0usize;
    let mut pair_evals = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut cracked: Option<Vec<(usize, usize, f64)>> = None;

    'search: {
        for &(k, n) in &slots {
            for &v in &opts.value_grid {
                if evals == opts.budget {
                    break 'search;
                }
                let entries = [(k, n, v)];
                let key = AuthorizationKey::explicit(net, &entries, &gammas)?;
                let acc = accuracy_over(net, &probe.examples, Some(&LockPlan::compile(net, &key)?))?;
                evals += 1;
                singleton_evals += 1;
                best_acc = best_acc.max(acc);
                if acc >= target {
                    cracked = Some(entries.to_vec());
                    break 'search;
                }
            }
        }
        if opts.max_pair_order >= 2 {
            for (a, &(k1, n1)) in slots.iter().enumerate() {
                for &(k2, n2) in &slots[a + 1..] {
                    for &v1 in &opts.value_grid {
                        for &v2 in &opts.value_grid {
                            if evals == opts.budget {
                                break 'search;
                            }
                            let entries = [(k1, n1, v1), (k2, n2, v2)];
                            let key = AuthorizationKey::explicit(net, &entries, &gammas)?;
                            let acc = accuracy_over(
                                net,
                                &probe.examples,
                                Some(&LockPlan::compile(net, &key)?),
                            )?;
                            evals += 1;
                            pair_evals += 1;
                            best_acc = best_acc.max(acc);
                            if acc >= target {
                                cracked = Some(entries.to_vec());
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
    }

    let recovered = cracked.as_ref().map(|entries| {
        entries
            .iter()
            .map(|&(k, n, v)| Recovered {
                layer: lockable[k],
                neuron: n,
                value: v,
            })
            .collect::<Vec<_>>()
    });
    Ok(AttackReport {
        attack: "reverse",
        acc_nu_before,
        acc_nu_after: if best_acc.is_finite() { best_acc } else { acc_nu_before },
        status: Some(if cracked.is_some() { "Cracked" } else { "Timeout" }),
        resources: Resources {
            candidate_evaluations: evals,
            elapsed_seconds: started.elapsed().as_secs_f64(),
            recovered_candidates: Some(recovered.as_ref().map_or(0, Vec::len)),
            singleton_evaluations: Some(singleton_evals),
            pair_evaluations: Some(pair_evals),
            ..Resources::default()
        },
        recovered,
    })
}
