//! Neuron-level authorization: key generation, the locked forward pass, and
//! accuracy evaluation in both modes.
//!
//! A key names, per lockable layer, a set of authorization neurons with
//! their locking values and one positive scale factor. In the locked pass
//! the standard post-activation output of each lockable layer has the
//! authorized positions overwritten by their locking values (a Conv2D
//! "neuron" is an output channel, overwritten whole), and the resulting
//! layer output is multiplied by the layer's scale factor. Unauthorized
//! inference is the plain forward pass: no replacement, no scaling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::network::Network;
use crate::select::ImportanceScores;
use crate::tensor::Tensor;

/// Lock parameters for one lockable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKey {
    /// Authorized neuron index -> locking value, sorted by index.
    pub locking_values: BTreeMap<usize, f64>,
    /// Layer scale factor, strictly positive.
    pub scale_factor: f64,
}

impl LayerKey {
    pub fn auth_indices(&self) -> Vec<usize> {
        self.locking_values.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuthorizationKey {
    /// One entry per lockable layer, in network order.
    pub layers: Vec<LayerKey>,
    pub rho_percent: f64,
    pub value_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub seed: u64,
}

/// Accuracy of the two inference modes. `acc_nl` is present only when the
/// evaluation was given a key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_nl: Option<f64>,
    pub acc_nu: f64,
    pub n_examples: usize,
}

/// Number of authorization neurons for a layer: round(rho% of width),
/// rounding half away from zero.
pub fn auth_count(width: usize, rho_percent: f64) -> usize {
    (rho_percent / 100.0 * width as f64).round() as usize
}

/// Draws a fresh key for `net`. Selection is uniform without replacement,
/// or importance-weighted when `importance` is given (lower importance,
/// higher selection weight). Locking values come uniformly from
/// `value_range`, one scale factor per layer uniformly from `gamma_range`.
/// Same arguments, same key.
pub fn generate_key(
    net: &Network,
    rho_percent: f64,
    value_range: (f64, f64),
    gamma_range: (f64, f64),
    seed: u64,
    importance: Option<&ImportanceScores>,
) -> Result<AuthorizationKey> {
    if !(rho_percent > 0.0 && rho_percent <= 100.0) {
        return Err(Error::InvalidParam(format!(
            "rho_percent must be in (0, 100], got {rho_percent}"
        )));
    }
    for (name, (lo, hi)) in [("value_range", value_range), ("gamma_range", gamma_range)] {
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
            return Err(Error::InvalidParam(format!(
                "{name} must satisfy 0 <= lo < hi, got ({lo}, {hi})"
            )));
        }
    }
    if gamma_range.1 <= 0.0 {
        return Err(Error::InvalidParam(
            "gamma_range must contain positive values".into(),
        ));
    }
    let widths = net.lockable_widths();
    if let Some(scores) = importance {
        if scores.widths() != widths {
            return Err(Error::InvalidParam(format!(
                "importance scores cover widths {:?}, network has {:?}",
                scores.widths(),
                widths
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(widths.len());
    for (k, &width) in widths.iter().enumerate() {
        let count = auth_count(width, rho_percent);
        let mut indices = match importance {
            None => rand::seq::index::sample(&mut rng, width, count).into_vec(),
            Some(scores) => crate::select::weighted_draw(scores.layer(k), count, &mut rng),
        };
        indices.sort_unstable();
        let mut locking_values = BTreeMap::new();
        for idx in indices {
            locking_values.insert(idx, rng.gen_range(value_range.0..value_range.1));
        }
        let scale_factor = loop {
            let g = rng.gen_range(gamma_range.0..gamma_range.1);
            if g > 0.0 {
                break g;
            }
        };
        layers.push(LayerKey {
            locking_values,
            scale_factor,
        });
    }
    Ok(AuthorizationKey {
        layers,
        rho_percent,
        value_range,
        gamma_range,
        seed,
    })
}

impl AuthorizationKey {
    /// Key that locks nothing: no authorized neurons, every scale factor 1.
    pub fn empty(net: &Network) -> AuthorizationKey {
        AuthorizationKey {
            layers: net
                .lockable_widths()
                .iter()
                .map(|_| LayerKey {
                    locking_values: BTreeMap::new(),
                    scale_factor: 1.0,
                })
                .collect(),
            rho_percent: 0.0,
            value_range: (0.0, 1.0),
            gamma_range: (1.0, 1.0),
            seed: 0,
        }
    }

    /// Key with explicitly chosen entries, one `(lockable-layer ordinal,
    /// neuron index, locking value)` per authorized neuron, plus one scale
    /// factor per lockable layer. Used by the reverse-engineering search and
    /// by tests that need a hand-built key.
    pub fn explicit(
        net: &Network,
        entries: &[(usize, usize, f64)],
        gammas: &[f64],
    ) -> Result<AuthorizationKey> {
        let widths = net.lockable_widths();
        if gammas.len() != widths.len() {
            return Err(Error::InvalidParam(format!(
                "{} scale factors for {} lockable layers",
                gammas.len(),
                widths.len()
            )));
        }
        let mut layers: Vec<LayerKey> = gammas
            .iter()
            .map(|&g| LayerKey {
                locking_values: BTreeMap::new(),
                scale_factor: g,
            })
            .collect();
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for &(k, idx, v) in entries {
            if k >= widths.len() {
                return Err(Error::InvalidParam(format!(
                    "lockable layer ordinal {k} out of range ({} lockable layers)",
                    widths.len()
                )));
            }
            layers[k].locking_values.insert(idx, v);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        if entries.is_empty() {
            vmin = 0.0;
            vmax = 1.0;
        }
        let gmin = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
        let gmax = gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let key = AuthorizationKey {
            layers,
            rho_percent: 100.0 * entries.len() as f64
                / widths.iter().sum::<usize>().max(1) as f64,
            value_range: (vmin, vmax),
            gamma_range: (gmin, gmax),
            seed: 0,
        };
        key.validate(net)?;
        Ok(key)
    }

    /// Checks structural consistency against a network: one entry per
    /// lockable layer, in-range unique indices, finite values, positive
    /// scale factors.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let widths = net.lockable_widths();
        if self.layers.len() != widths.len() {
            return Err(Error::KeyMismatch {
                layer: 0,
                detail: format!(
                    "key covers {} lockable layers, network has {}",
                    self.layers.len(),
                    widths.len()
                ),
            });
        }
        for (k, (lk, &width)) in self.layers.iter().zip(&widths).enumerate() {
            if !(lk.scale_factor.is_finite() && lk.scale_factor > 0.0) {
                return Err(Error::KeyMismatch {
                    layer: k,
                    detail: format!("scale factor {} must be positive", lk.scale_factor),
                });
            }
            for (&idx, &v) in &lk.locking_values {
                if idx >= width {
                    return Err(Error::KeyMismatch {
                        layer: k,
                        detail: format!("neuron index {idx} out of range for width {width}"),
                    });
                }
                if !v.is_finite() {
                    return Err(Error::KeyMismatch {
                        layer: k,
                        detail: format!("locking value for neuron {idx} is not finite"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn total_auth_neurons(&self) -> usize {
        self.layers.iter().map(|l| l.locking_values.len()).sum()
    }
}

/// Compiled form of a key against a concrete network: for each layer index
/// whose output must be transformed, the replacements and scale factor.
/// The lock attaches to the post-activation output: the ReLU immediately
/// following a lockable layer when present, otherwise the lockable layer
/// itself.
#[derive(Debug, Clone)]
pub(crate) struct LockPlan {
    sites: Vec<Option<SiteLock>>,
}

#[derive(Debug, Clone)]
struct SiteLock {
    gamma: f64,
    /// (neuron or channel index, locking value), ascending by index.
    replacements: Vec<(usize, f64)>,
    /// True when the site output is [B, C, H, W] and indices name channels.
    channels: bool,
}

impl LockPlan {
    pub fn compile(net: &Network, key: &AuthorizationKey) -> Result<LockPlan> {
        key.validate(net)?;
        let mut sites = vec![None; net.layers.len()];
        for (ordinal, li) in net.lockable_layer_indices().into_iter().enumerate() {
            let lk = &key.layers[ordinal];
            if lk.locking_values.is_empty() && lk.scale_factor == 1.0 {
                continue;
            }
            let site = net.lock_site(li);
            sites[site] = Some(SiteLock {
                gamma: lk.scale_factor,
                replacements: lk.locking_values.iter().map(|(&i, &v)| (i, v)).collect(),
                channels: matches!(net.layers[li], Layer::Conv2D { .. }),
            });
        }
        Ok(LockPlan { sites })
    }

    /// Replace-then-scale on the output of layer `layer_idx`.
    pub fn apply(&self, layer_idx: usize, t: &mut Tensor) {
        let Some(site) = &self.sites[layer_idx] else {
            return;
        };
        site.transform(t, |v| v);
    }

    /// Gradient counterpart: replaced positions are constants (zero
    /// gradient), everything else carries the scale factor through.
    pub fn apply_backward(&self, layer_idx: usize, g: &mut Tensor) {
        let Some(site) = &self.sites[layer_idx] else {
            return;
        };
        site.transform(g, |_| 0.0);
    }
}

impl SiteLock {
    fn transform(&self, t: &mut Tensor, fill: impl Fn(f64) -> f64) {
        let b_n = t.batch_size();
        if self.channels {
            let shape = t.shape().to_vec();
            let (c_n, plane) = (shape[1], shape[2] * shape[3]);
            let vals = t.values_mut();
            for b in 0..b_n {
                for &(c, v) in &self.replacements {
                    vals[(b * c_n + c) * plane..(b * c_n + c + 1) * plane].fill(fill(v));
                }
            }
        } else {
            for b in 0..b_n {
                let row = t.row_mut(b);
                for &(j, v) in &self.replacements {
                    row[j] = fill(v);
                }
            }
        }
        if self.gamma != 1.0 {
            t.scale(self.gamma);
        }
    }
}

/// Authorized forward pass.
pub fn locked_forward(net: &Network, batch: &Tensor, key: &AuthorizationKey) -> Result<Tensor> {
    let plan = LockPlan::compile(net, key)?;
    net.forward_with(batch, Some(&plan))
}

/// Loss and parameter gradients under an authorized forward pass. Replaced
/// activations are constants to the backward pass; scale factors act as
/// constant multipliers.
pub fn locked_loss_and_grad(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    key: &AuthorizationKey,
) -> Result<(f64, crate::network::Gradients)> {
    let plan = LockPlan::compile(net, key)?;
    net.loss_and_grad_with(batch, labels, Some(&plan))
}

/// Accuracy over a slice of examples; ties in the logit argmax go to the
/// lower class index.
pub(crate) fn accuracy_over(
    net: &Network,
    examples: &[(Tensor, usize)],
    plan: Option<&LockPlan>,
) -> Result<f64> {
    const CHUNK: usize = 256;
    if examples.is_empty() {
        return Err(Error::InvalidParam("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().map(|(x, _)| x).collect();
        let batch = crate::tensor::stack(&refs)?;
        let logits = net.forward_with(&batch, plan)?;
        for (b, (_, label)) in chunk.iter().enumerate() {
            if argmax(logits.row(b)) == *label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates unauthorized accuracy, and authorized accuracy when a key is
/// supplied.
pub fn evaluate(net: &Network, data: &Dataset, key: Option<&AuthorizationKey>) -> Result<EvalResult> {
    let plan = key.map(|k| LockPlan::compile(net, k)).transpose()?;
    let acc_nu = accuracy_over(net, &data.examples, None)?;
    let acc_nl = match &plan {
        Some(p) => Some(accuracy_over(net, &data.examples, Some(p))?),
        None => None,
    };
    Ok(EvalResult {
        acc_nl,
        acc_nu,
        n_examples: data.examples.len(),
    })
}
