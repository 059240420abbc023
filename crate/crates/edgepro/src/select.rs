//! Neuron-importance ranking and importance-weighted selection.
//!
//! Six strategies score every neuron of every lockable layer. Lower scores
//! mean less important, and the weighted sampler prefers low-importance
//! neurons when picking authorization sets. The pruning attack reuses the
//! same scorers with the opposite intent.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{axpy, Layer};
use crate::network::Network;
use crate::tensor::Tensor;

const LRP_EPSILON: f64 = 1e-6;
const PROBE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    /// Random ranking.
    Rnr,
    /// Cumulative activation value over the probe.
    Avr,
    /// Activation frequency: how often a neuron fires (output > 0).
    Afr,
    /// Cumulative absolute incoming weight.
    Wvr,
    /// Grad-CAM channel importance (conv layers; dense layers fall back to random).
    Gcr,
    /// Layer-wise relevance propagation, epsilon rule (dense layers; conv
    /// layers fall back to random).
    Lrpr,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Rnr,
        Strategy::Avr,
        Strategy::Afr,
        Strategy::Wvr,
        Strategy::Gcr,
        Strategy::Lrpr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Rnr => "rnr",
            Strategy::Avr => "avr",
            Strategy::Afr => "afr",
            Strategy::Wvr => "wvr",
            Strategy::Gcr => "gcr",
            Strategy::Lrpr => "lrpr",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "rnr" | "random" => Ok(Strategy::Rnr),
            "avr" | "avgact" => Ok(Strategy::Avr),
            "afr" => Ok(Strategy::Afr),
            "wvr" => Ok(Strategy::Wvr),
            "gcr" | "gradcam" => Ok(Strategy::Gcr),
            "lrpr" | "lrp" => Ok(Strategy::Lrpr),
            other => Err(Error::InvalidParam(format!(
                "unknown ranking strategy \"{other}\""
            ))),
        }
    }
}

/// Per-neuron importance, one non-negative score vector per lockable layer.
#[derive(Debug, Clone, Serialize)]
pub struct ImportanceScores {
    pub strategy: Strategy,
    pub layers: Vec<Vec<f64>>,
}

impl ImportanceScores {
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        &self.layers[k]
    }
}

/// Scores every lockable layer of `net` under `strategy`, probing with
/// `probe` where the strategy needs activations or gradients. `seed` feeds
/// the random strategy and the fallback scores.
pub fn rank_neurons(
    net: &Network,
    probe: &Dataset,
    strategy: Strategy,
    seed: u64,
) -> Result<ImportanceScores> {
    if probe.is_empty() {
        return Err(Error::InvalidParam("ranking probe is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = net.lockable_widths();
    let layers = match strategy {
        Strategy::Rnr => widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.gen::<f64>()).collect())
            .collect(),
        Strategy::Wvr => wvr_scores(net),
        Strategy::Avr | Strategy::Afr => activation_scores(net, probe, strategy)?,
        Strategy::Gcr => gradcam_scores(net, probe, &mut rng)?,
        Strategy::Lrpr => lrp_scores(net, probe, &mut rng)?,
    };
    debug_assert_eq!(
        layers.iter().map(Vec::len).collect::<Vec<_>>(),
        widths
    );
    Ok(ImportanceScores { strategy, layers })
}

/// Sum of |incoming weight| per neuron; biases are not connections and do
/// not count.
fn wvr_scores(net: &Network) -> Vec<Vec<f64>> {
    net.layers
        .iter()
        .filter_map(|layer| match layer {
            Layer::Dense { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                Some(
                    (0..out)
                        .map(|o| {
                            weight.values()[o * inp..(o + 1) * inp]
                                .iter()
                                .map(|w| w.abs())
                                .sum()
                        })
                        .collect(),
                )
            }
            Layer::Conv2D { kernels, .. } => {
                let per = kernels.len() / kernels.shape()[0];
                Some(
                    kernels
                        .values()
                        .chunks(per)
                        .map(|c| c.iter().map(|w| w.abs()).sum())
                        .collect(),
                )
            }
            _ => None,
        })
        .collect()
}

/// AVR accumulates positive post-activation mass; AFR counts strictly
/// positive activations (per spatial position for conv channels).
fn activation_scores(net: &Network, probe: &Dataset, strategy: Strategy) -> Result<Vec<Vec<f64>>> {
    let lockable = net.lockable_layer_indices();
    let mut scores: Vec<Vec<f64>> = net.lockable_widths().iter().map(|&w| vec![0.0; w]).collect();
    for chunk in probe.examples.chunks(PROBE_CHUNK) {
        let batch = stack_chunk(chunk)?;
        let tape = net.forward_tape(&batch, None)?;
        for (ordinal, &li) in lockable.iter().enumerate() {
            let act = &tape.acts[net.lock_site(li) + 1];
            let score = &mut scores[ordinal];
            if act.shape().len() == 4 {
                let (c_n, plane) = (act.shape()[1], act.shape()[2] * act.shape()[3]);
                for b in 0..act.batch_size() {
                    for (c, slot) in score.iter_mut().enumerate() {
                        let vals = &act.values()[(b * c_n + c) * plane..(b * c_n + c + 1) * plane];
                        *slot += match strategy {
                            Strategy::Avr => vals.iter().map(|v| v.max(0.0)).sum::<f64>(),
                            _ => vals.iter().filter(|&&v| v > 0.0).count() as f64,
                        };
                    }
                }
            } else {
                for b in 0..act.batch_size() {
                    for (slot, &v) in score.iter_mut().zip(act.row(b)) {
                        *slot += match strategy {
                            Strategy::Avr => v.max(0.0),
                            _ => (v > 0.0) as u8 as f64,
                        };
                    }
                }
            }
        }
    }
    Ok(scores)
}

/// Grad-CAM channel importance: per example, the spatial mean of
/// (d logit_pred / d channel map) x (channel activation), rectified, summed
/// over the probe. Dense layers take random fallback scores.
fn gradcam_scores(
    net: &Network,
    probe: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let lockable = net.lockable_layer_indices();
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(lockable.len());
    let mut conv_sites = Vec::new();
    for (ordinal, &li) in lockable.iter().enumerate() {
        let width = net.layers[li].width().unwrap();
        if matches!(net.layers[li], Layer::Conv2D { .. }) {
            scores.push(vec![0.0; width]);
            conv_sites.push((ordinal, net.lock_site(li)));
        } else {
            scores.push((0..width).map(|_| rng.gen::<f64>()).collect());
        }
    }
    if conv_sites.is_empty() {
        return Ok(scores);
    }
    let lowest_site = conv_sites.iter().map(|&(_, s)| s).min().unwrap();
    for chunk in probe.examples.chunks(PROBE_CHUNK) {
        let batch = stack_chunk(chunk)?;
        let tape = net.forward_tape(&batch, None)?;
        let logits = tape.acts.last().unwrap();
        let mut grad = Tensor::zeros(logits.shape().to_vec());
        for b in 0..logits.batch_size() {
            let pred = crate::lock::argmax(logits.row(b));
            grad.row_mut(b)[pred] = 1.0;
        }
        for i in (lowest_site..net.layers.len()).rev() {
            if let Some(&(ordinal, _)) = conv_sites.iter().find(|&&(_, s)| s == i) {
                accumulate_gradcam(&mut scores[ordinal], &grad, &tape.acts[i + 1]);
            }
            grad = net.layers[i]
                .backward(&tape.acts[i], &tape.acts[i + 1], tape.aux[i].as_deref(), &grad)
                .0;
        }
    }
    Ok(scores)
}

fn accumulate_gradcam(score: &mut [f64], grad: &Tensor, act: &Tensor) {
    let (c_n, plane) = (act.shape()[1], act.shape()[2] * act.shape()[3]);
    for b in 0..act.batch_size() {
        for (c, slot) in score.iter_mut().enumerate() {
            let at = (b * c_n + c) * plane;
            let ga = &grad.values()[at..at + plane];
            let aa = &act.values()[at..at + plane];
            let mean = crate::layer::dot(ga, aa) / plane as f64;
            *slot += mean.max(0.0);
        }
    }
}

/// LRP epsilon-rule relevance, started at the predicted logit and propagated
/// down the dense chain; each dense layer's neurons score the summed
/// relevance magnitude arriving at them. Conv layers take random fallback
/// scores; the walk stops where the dense chain ends.
fn lrp_scores(net: &Network, probe: &Dataset, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let lockable = net.lockable_layer_indices();
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(lockable.len());
    for &li in &lockable {
        let width = net.layers[li].width().unwrap();
        if matches!(net.layers[li], Layer::Dense { .. }) {
            scores.push(vec![0.0; width]);
        } else {
            scores.push((0..width).map(|_| rng.gen::<f64>()).collect());
        }
    }
    for chunk in probe.examples.chunks(PROBE_CHUNK) {
        let batch = stack_chunk(chunk)?;
        let tape = net.forward_tape(&batch, None)?;
        let relevances = lrp_walk(net, &tape);
        for (ordinal, &li) in lockable.iter().enumerate() {
            if let Some(rel) = &relevances[li] {
                let score = &mut scores[ordinal];
                for b in 0..rel.batch_size() {
                    for (slot, &r) in score.iter_mut().zip(rel.row(b)) {
                        *slot += r.abs();
                    }
                }
            }
        }
    }
    Ok(scores)
}

/// Walks relevance from the head down through Dense/ReLU/Flatten layers,
/// returning the relevance tensor observed at each dense layer's output.
fn lrp_walk(net: &Network, tape: &crate::network::Tape) -> Vec<Option<Tensor>> {
    let logits = tape.acts.last().unwrap();
    let mut rel = Tensor::zeros(logits.shape().to_vec());
    for b in 0..logits.batch_size() {
        let pred = crate::lock::argmax(logits.row(b));
        rel.row_mut(b)[pred] = logits.row(b)[pred];
    }
    let mut out: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    for i in (0..net.layers.len()).rev() {
        match &net.layers[i] {
            Layer::Dense { weight, .. } => {
                out[i] = Some(rel.clone());
                rel = lrp_dense(weight, &tape.acts[i], &rel);
            }
            Layer::ReLU => {}
            Layer::Flatten => {
                rel = rel.reshape(tape.acts[i].shape().to_vec()).unwrap();
            }
            Layer::Conv2D { .. } | Layer::MaxPool2D { .. } => break,
        }
    }
    out
}

/// Epsilon rule for one dense layer: relevance R_j is shared over inputs i
/// proportionally to a_i * w_ji / (sum_i a_i * w_ji + eps * sign). The bias
/// is left out of the denominator so layer sums are conserved up to the
/// epsilon term.
fn lrp_dense(weight: &Tensor, input: &Tensor, rel_out: &Tensor) -> Tensor {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let b_n = input.batch_size();
    let w = weight.values();
    let mut rel_in = vec![0.0; b_n * inp];
    let mut coeff = vec![0.0; inp];
    for b in 0..b_n {
        let a = input.row(b);
        let r = rel_out.row(b);
        coeff.fill(0.0);
        for j in 0..out {
            if r[j] == 0.0 {
                continue;
            }
            let row = &w[j * inp..(j + 1) * inp];
            let z = crate::layer::dot(row, a);
            let denom = z + if z >= 0.0 { LRP_EPSILON } else { -LRP_EPSILON };
            axpy(&mut coeff, r[j] / denom, row);
        }
        for ((slot, &c), &ai) in rel_in[b * inp..(b + 1) * inp]
            .iter_mut()
            .zip(&coeff)
            .zip(a)
        {
            *slot = c * ai;
        }
    }
    Tensor::from_vec(vec![b_n, inp], rel_in).unwrap()
}

/// Selects round(rho% of width) neurons per layer, without replacement,
/// weighted toward low importance: after an ascending stable sort, the
/// neuron at rank r carries weight (width - r), and tied scores share their
/// rank span's mean weight.
pub fn weighted_sample(
    scores: &ImportanceScores,
    rho_percent: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(rho_percent > 0.0 && rho_percent <= 100.0) {
        return Err(Error::InvalidParam(format!(
            "rho_percent must be in (0, 100], got {rho_percent}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(scores
        .layers
        .iter()
        .map(|layer| {
            let count = crate::lock::auth_count(layer.len(), rho_percent);
            let mut picked = weighted_draw(layer, count, &mut rng);
            picked.sort_unstable();
            picked
        })
        .collect())
}

/// Draws `count` distinct indices with rank-based weights (doubled so tied
/// ranks can share an exact integer mean).
pub(crate) fn weighted_draw(scores: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let width = scores.len();
    let count = count.min(width);
    if count == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    // weight2 = 2 * (width - rank), averaged over runs of equal scores
    let mut weights = vec![0u64; width];
    let mut r = 0;
    while r < width {
        let mut r_end = r + 1;
        while r_end < width && scores[order[r_end]] == scores[order[r]] {
            r_end += 1;
        }
        let shared = (width - r) as u64 + (width - (r_end - 1)) as u64;
        for &idx in &order[r..r_end] {
            weights[idx] = shared;
        }
        r = r_end;
    }
    let mut pool: Vec<usize> = (0..width).collect();
    let mut total: u64 = weights.iter().sum();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let mut t = rng.gen_range(0..total);
        let mut chosen = pool.len() - 1;
        for (slot, &idx) in pool.iter().enumerate() {
            let w = weights[idx];
            if t < w {
                chosen = slot;
                break;
            }
            t -= w;
        }
        let idx = pool.swap_remove(chosen);
        total -= weights[idx];
        picked.push(idx);
    }
    picked
}

fn stack_chunk(chunk: &[(Tensor, usize)]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = chunk.iter().map(|(x, _)| x).collect();
    crate::tensor::stack(&refs)
}
