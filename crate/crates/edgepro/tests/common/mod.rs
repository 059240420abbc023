//! Shared helpers for integration tests: a deliberately naive reference
//! implementation of the forward pass (plain and authorized), finite
//! difference checking, and random model/key generators. Nothing here reuses
//! the library's forward internals; every layer is recomputed with
//! straight-line per-example loops so the two implementations can check each
//! other.
#![allow(dead_code)]

use edgepro::layer::{Layer, LayerGrads};
use edgepro::lock::{locked_forward, locked_loss_and_grad, AuthorizationKey};
use edgepro::network::Network;
use edgepro::tensor::Tensor;

use rand::distributions::{Distribution, Uniform};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// One value per logit, for a single example in `net.input_shape`.
pub fn reference_forward(net: &Network, example: &[f64], key: Option<&AuthorizationKey>) -> Vec<f64> {
    let mut values = example.to_vec();
    let mut shape = net.input_shape.clone();
    let lockable: Vec<usize> = net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Dense { .. } | Layer::Conv2D { .. }))
        .map(|(i, _)| i)
        .collect();

    for (li, layer) in net.layers.iter().enumerate() {
        let (out, out_shape) = match layer {
            Layer::Dense { weight, bias } => {
                let (o_n, i_n) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.values();
                let mut out = vec![0.0; o_n];
                for o in 0..o_n {
                    let mut acc = bias.values()[o];
                    for i in 0..i_n {
                        acc += w[o * i_n + i] * values[i];
                    }
                    out[o] = acc;
                }
                (out, vec![o_n])
            }
            Layer::Conv2D { kernels, bias } => {
                let ks = kernels.shape();
                let (oc_n, ic_n, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let k = kernels.values();
                let mut out = vec![0.0; oc_n * oh * ow];
                for oc in 0..oc_n {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = bias.values()[oc];
                            for ic in 0..ic_n {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        acc += k[((oc * ic_n + ic) * kh + dy) * kw + dx]
                                            * values[(ic * h + y + dy) * w + x + dx];
                                    }
                                }
                            }
                            out[(oc * oh + y) * ow + x] = acc;
                        }
                    }
                }
                (out, vec![oc_n, oh, ow])
            }
            Layer::ReLU => (
                values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                shape.clone(),
            ),
            Layer::MaxPool2D { window, stride } => {
                let (c_n, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = ((h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1);
                let mut out = vec![0.0; c_n * oh * ow];
                for c in 0..c_n {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..window.0 {
                                for dx in 0..window.1 {
                                    let v =
                                        values[(c * h + y * stride.0 + dy) * w + x * stride.1 + dx];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                            out[(c * oh + y) * ow + x] = best;
                        }
                    }
                }
                (out, vec![c_n, oh, ow])
            }
            Layer::Flatten => (values.clone(), vec![values.len()]),
        };
        values = out;
        shape = out_shape;

        if let Some(key) = key {
            // a lock on layer k lands on the ReLU right after it, if any
            if let Some(ordinal) = lockable.iter().position(|&i| {
                i == li && !matches!(net.layers.get(i + 1), Some(Layer::ReLU))
                    || i + 1 == li && matches!(net.layers[li], Layer::ReLU)
            }) {
                let lk = &key.layers[ordinal];
                if !lk.locking_values.is_empty() || lk.scale_factor != 1.0 {
                    let conv = matches!(net.layers[lockable[ordinal]], Layer::Conv2D { .. });
                    for (&idx, &v) in &lk.locking_values {
                        if conv {
                            let plane = shape[1] * shape[2];
                            values[idx * plane..(idx + 1) * plane].fill(v);
                        } else {
                            values[idx] = v;
                        }
                    }
                    for v in &mut values {
                        *v *= lk.scale_factor;
                    }
                }
            }
        }
    }
    values
}

/// Mean softmax cross-entropy of reference logits, per-example loop.
pub fn reference_loss(net: &Network, batch: &Tensor, labels: &[usize], key: Option<&AuthorizationKey>) -> f64 {
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let logits = reference_forward(net, batch.row(b), key);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - logits[label];
    }
    total / labels.len() as f64
}

/// Absolute-plus-relative tolerance used for gradient agreement.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-7 + 1e-4 * analytic.abs().max(numeric.abs())
}

pub struct Case {
    pub net: Network,
    pub key: AuthorizationKey,
    pub batch: Tensor,
    pub labels: Vec<usize>,
}

/// Random small model: MLPs and conv stacks mixed, at most three lockable
/// layers, every width at most 16.
pub fn random_case(seed: u64) -> Case {
    let mut rng = StdRng::seed_from_u64(seed);
    let classes = rng.gen_range(2..=5);
    let net = if rng.gen_bool(0.5) {
        let input = rng.gen_range(2..=8);
        let depth = rng.gen_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=16)).collect();
        Network::mlp(vec![input], &hidden, classes, rng.gen())
    } else {
        random_conv_net(&mut rng, classes)
    };
    let batch_n = rng.gen_range(1..=4);
    let dist = Uniform::new(-1.5, 1.5);
    let total: usize = net.input_shape.iter().product();
    let batch = Tensor::from_vec(
        std::iter::once(batch_n)
            .chain(net.input_shape.iter().cloned())
            .collect::<Vec<_>>(),
        (0..batch_n * total).map(|_| dist.sample(&mut rng)).collect(),
    )
    .unwrap();
    let labels = (0..batch_n).map(|_| rng.gen_range(0..classes)).collect();
    let key = random_key(&net, &mut rng);
    Case { net, key, batch, labels }
}

fn random_conv_net(rng: &mut StdRng, classes: usize) -> Network {
    let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(5..=9), rng.gen_range(5..=9));
    let k = rng.gen_range(2..=3);
    let oc = rng.gen_range(1..=3);
    let mut layers = vec![random_conv_layer(rng, oc, c, k)];
    let mut shape = (oc, h - k + 1, w - k + 1);
    if rng.gen_bool(0.7) {
        layers.push(Layer::ReLU);
    }
    if rng.gen_bool(0.5) && shape.1 >= 2 && shape.2 >= 2 {
        layers.push(Layer::maxpool2d((2, 2), (2, 2)).unwrap());
        shape = (shape.0, shape.1 / 2, shape.2 / 2);
    }
    if rng.gen_bool(0.4) && shape.1 > k && shape.2 > k {
        let oc2 = rng.gen_range(1..=3);
        layers.push(random_conv_layer(rng, oc2, shape.0, k));
        shape = (oc2, shape.1 - k + 1, shape.2 - k + 1);
        if rng.gen_bool(0.7) {
            layers.push(Layer::ReLU);
        }
    }
    layers.push(Layer::Flatten);
    let flat = shape.0 * shape.1 * shape.2;
    layers.push(random_dense_layer(rng, classes, flat));
    Network::new(vec![c, h, w], layers, classes).unwrap()
}

fn random_dense_layer(rng: &mut StdRng, out: usize, inp: usize) -> Layer {
    let dist = Uniform::new(-0.8, 0.8);
    Layer::dense(
        Tensor::from_vec(vec![out, inp], (0..out * inp).map(|_| dist.sample(rng)).collect()).unwrap(),
        Tensor::from_vec(vec![out], (0..out).map(|_| dist.sample(rng)).collect()).unwrap(),
    )
    .unwrap()
}

fn random_conv_layer(rng: &mut StdRng, oc: usize, ic: usize, k: usize) -> Layer {
    let dist = Uniform::new(-0.8, 0.8);
    Layer::conv2d(
        Tensor::from_vec(
            vec![oc, ic, k, k],
            (0..oc * ic * k * k).map(|_| dist.sample(rng)).collect(),
        )
        .unwrap(),
        Tensor::from_vec(vec![oc], (0..oc).map(|_| dist.sample(rng)).collect()).unwrap(),
    )
    .unwrap()
}

pub fn random_key(net: &Network, rng: &mut StdRng) -> AuthorizationKey {
    let widths = net.lockable_widths();
    let gammas: Vec<f64> = widths.iter().map(|_| rng.gen_range(0.2..2.0)).collect();
    let mut entries = Vec::new();
    for (k, &width) in widths.iter().enumerate() {
        let n = rng.gen_range(0..=width.min(4));
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, width, n).into_vec();
        picked.sort_unstable();
        for idx in picked {
            entries.push((k, idx, rng.gen_range(0.0..2.0)));
        }
    }
    AuthorizationKey::explicit(net, &entries, &gammas).unwrap()
}

/// Compares `locked_forward` (and the plain forward) against the naive
/// reference on `cases` random nets and keys. Returns the worst absolute
/// logit difference, or a description of the first case exceeding 1e-9.
pub fn forward_oracle(cases: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let Case { net, key, batch, .. } = random_case(seed);
        let locked = locked_forward(&net, &batch, &key).map_err(|e| e.to_string())?;
        let plain = net.forward(&batch).map_err(|e| e.to_string())?;
        for b in 0..batch.batch_size() {
            let ref_locked = reference_forward(&net, batch.row(b), Some(&key));
            let ref_plain = reference_forward(&net, batch.row(b), None);
            for c in 0..net.num_classes {
                let dl = (locked.row(b)[c] - ref_locked[c]).abs();
                let dp = (plain.row(b)[c] - ref_plain[c]).abs();
                worst = worst.max(dl).max(dp);
                if dl > 1e-9 || dp > 1e-9 {
                    return Err(format!(
                        "case {seed} example {b} class {c}: locked diff {dl:e}, plain diff {dp:e}"
                    ));
                }
            }
        }
    }
    Ok(worst)
}

/// Scalar parameter counts of a layer as (weights, biases), or None for
/// parameterless kinds.
pub fn param_len(layer: &Layer) -> Option<(usize, usize)> {
    match layer {
        Layer::Dense { weight, bias } => Some((weight.len(), bias.len())),
        Layer::Conv2D { kernels, bias } => Some((kernels.len(), bias.len())),
        _ => None,
    }
}

pub fn param_mut(layer: &mut Layer, coord: usize) -> &mut f64 {
    match layer {
        Layer::Dense { weight, bias } | Layer::Conv2D { kernels: weight, bias } => {
            if coord < weight.len() {
                &mut weight.values_mut()[coord]
            } else {
                &mut bias.values_mut()[coord - weight.len()]
            }
        }
        _ => unreachable!(),
    }
}

pub fn analytic_at(grads: &LayerGrads, coord: usize) -> f64 {
    match grads {
        LayerGrads::Dense { d_weight, d_bias }
        | LayerGrads::Conv2D { d_kernels: d_weight, d_bias } => {
            if coord < d_weight.len() {
                d_weight.values()[coord]
            } else {
                d_bias.values()[coord - d_weight.len()]
            }
        }
        LayerGrads::None => unreachable!(),
    }
}

/// Central finite differences against the analytic gradients on `cases`
/// random nets, six coordinates each, alternating plain and locked losses.
/// Returns (coordinates checked, worst tolerance ratio where 1.0 is the
/// acceptance bound), or a description of the first failing coordinate.
pub fn gradient_oracle(cases: u64) -> Result<(usize, f64), String> {
    let mut checked = 0usize;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..cases {
        let Case { mut net, key, batch, labels } = random_case(10_000 + seed);
        let locked = seed % 2 == 1;
        let loss_of = |net: &Network| -> f64 {
            if locked {
                locked_loss_and_grad(net, &batch, &labels, &key).unwrap().0
            } else {
                net.loss_and_grad(&batch, &labels).unwrap().0
            }
        };
        let grads = if locked {
            locked_loss_and_grad(&net, &batch, &labels, &key).unwrap().1
        } else {
            net.loss_and_grad(&batch, &labels).unwrap().1
        };

        let mut rng = StdRng::seed_from_u64(seed);
        let parametric: Vec<usize> = (0..net.layers.len())
            .filter(|&i| param_len(&net.layers[i]).is_some())
            .collect();
        for _ in 0..6 {
            let li = parametric[rng.gen_range(0..parametric.len())];
            let (w_len, b_len) = param_len(&net.layers[li]).unwrap();
            let coord = rng.gen_range(0..w_len + b_len);
            let h = 1e-5;
            let orig = *param_mut(&mut net.layers[li], coord);
            *param_mut(&mut net.layers[li], coord) = orig + h;
            let up = loss_of(&net);
            *param_mut(&mut net.layers[li], coord) = orig - h;
            let down = loss_of(&net);
            *param_mut(&mut net.layers[li], coord) = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = analytic_at(&grads.layers[li], coord);
            let ratio =
                (analytic - numeric).abs() / (1e-7 + 1e-4 * analytic.abs().max(numeric.abs()));
            worst_ratio = worst_ratio.max(ratio);
            if !grads_agree(analytic, numeric) {
                return Err(format!(
                    "case {seed} (locked={locked}) layer {li} coord {coord}: \
                     analytic {analytic:e} vs numeric {numeric:e}"
                ));
            }
            checked += 1;
        }
    }
    Ok((checked, worst_ratio))
}
