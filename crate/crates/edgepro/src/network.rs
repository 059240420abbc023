//! Network composition, forward/backward evaluation, SGD, checkpoints.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerGrads};
use crate::lock::LockPlan;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

/// Parameter gradients, one entry per layer (non-parametric layers hold
/// `LayerGrads::None`).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

/// Activation record of one forward pass: `acts[0]` is the input batch,
/// `acts[i+1]` the (possibly locked) output of layer `i`. `aux` carries
/// max-pool argmax positions.
pub(crate) struct Tape {
    pub acts: Vec<Tensor>,
    pub aux: Vec<Option<Vec<usize>>>,
}

impl Network {
    /// Validates that layer shapes compose over `input_shape` (per-example,
    /// without the batch dimension) and end in a `[num_classes]` logit vector.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, num_classes: usize) -> Result<Network> {
        if num_classes == 0 {
            return Err(Error::InvalidParam("num_classes must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidParam("network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam(format!(
                "invalid input shape {:?}",
                input_shape
            )));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|detail| Error::shape(i, layer.kind(), detail))?;
        }
        if shape != [num_classes] {
            return Err(Error::shape(
                layers.len() - 1,
                layers.last().unwrap().kind(),
                format!("final output shape {:?}, want [{}]", shape, num_classes),
            ));
        }
        Ok(Network {
            input_shape,
            layers,
            num_classes,
        })
    }

    /// Fully-connected ReLU network: Flatten, then one Dense per hidden width,
    /// then a Dense classifier head.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::Flatten];
        let mut dim = input_shape.iter().product::<usize>();
        for &h in hidden {
            layers.push(Layer::dense_init(dim, h, &mut rng));
            layers.push(Layer::ReLU);
            dim = h;
        }
        layers.push(Layer::dense_init(dim, num_classes, &mut rng));
        Network::new(input_shape, layers, num_classes).unwrap()
    }

    /// Small LeNet-1-style CNN over 28x28 grayscale inputs:
    /// conv 5x5 to 4 channels, pool, conv 5x5 to 12 channels, pool, dense head.
    pub fn lenet1(num_classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Layer::conv2d_init(1, 4, 5, 5, &mut rng),
            Layer::ReLU,
            Layer::maxpool2d((2, 2), (2, 2)).unwrap(),
            Layer::conv2d_init(4, 12, 5, 5, &mut rng),
            Layer::ReLU,
            Layer::maxpool2d((2, 2), (2, 2)).unwrap(),
            Layer::Flatten,
            Layer::dense_init(12 * 4 * 4, num_classes, &mut rng),
        ];
        Network::new(vec![28, 28], layers, num_classes).unwrap()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with(batch, None)
    }

    pub(crate) fn forward_with(&self, batch: &Tensor, plan: Option<&LockPlan>) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut act = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut out, _) = layer.forward(&act);
            if let Some(plan) = plan {
                plan.apply(i, &mut out);
            }
            act = out;
        }
        Ok(act)
    }

    pub(crate) fn forward_tape(&self, batch: &Tensor, plan: Option<&LockPlan>) -> Result<Tape> {
        self.check_batch(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut out, a) = layer.forward(acts.last().unwrap());
            if let Some(plan) = plan {
                plan.apply(i, &mut out);
            }
            acts.push(out);
            aux.push(a);
        }
        Ok(Tape { acts, aux })
    }

    /// Mean softmax cross-entropy and its parameter gradients.
    pub fn loss_and_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.loss_and_grad_with(batch, labels, None)
    }

    /// Locked variant: the forward pass applies the plan, and the backward
    /// pass treats replaced activations as constants while the scale factors
    /// participate as constant multipliers.
    pub(crate) fn loss_and_grad_with(
        &self,
        batch: &Tensor,
        labels: &[usize],
        plan: Option<&LockPlan>,
    ) -> Result<(f64, Gradients)> {
        let tape = self.forward_tape(batch, plan)?;
        let (loss, mut grad) = softmax_cross_entropy(tape.acts.last().unwrap(), labels, self.num_classes)?;
        let mut layer_grads = vec![LayerGrads::None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            if let Some(plan) = plan {
                plan.apply_backward(i, &mut grad);
            }
            let (gin, pg) =
                self.layers[i].backward(&tape.acts[i], &tape.acts[i + 1], tape.aux[i].as_deref(), &grad);
            layer_grads[i] = pg;
            grad = gin;
        }
        Ok((loss, Gradients { layers: layer_grads }))
    }

    /// `p <- p - lr * g` over every trainable parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidParam(format!("invalid learning rate {lr}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidParam(format!(
                "gradient count {} does not match layer count {}",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, grad)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            match (layer, grad) {
                (Layer::Dense { weight, bias }, LayerGrads::Dense { d_weight, d_bias })
                    if weight.shape() == d_weight.shape() && bias.shape() == d_bias.shape() =>
                {
                    apply_step(weight, d_weight, lr);
                    apply_step(bias, d_bias, lr);
                }
                (Layer::Conv2D { kernels, bias }, LayerGrads::Conv2D { d_kernels, d_bias })
                    if kernels.shape() == d_kernels.shape() && bias.shape() == d_bias.shape() =>
                {
                    apply_step(kernels, d_kernels, lr);
                    apply_step(bias, d_bias, lr);
                }
                (l, LayerGrads::None) if !l.lockable() => {}
                (l, _) => {
                    return Err(Error::shape(
                        i,
                        l.kind(),
                        "gradient entry not shape-congruent with layer".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Where a lockable layer's post-activation output lives: the ReLU
    /// immediately above it when present, otherwise the layer itself.
    pub(crate) fn lock_site(&self, layer_idx: usize) -> usize {
        if matches!(self.layers.get(layer_idx + 1), Some(Layer::ReLU)) {
            layer_idx + 1
        } else {
            layer_idx
        }
    }

    pub fn lockable_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].lockable())
            .collect()
    }

    pub fn lockable_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| l.width())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.batch_size() == 0 {
            return Err(Error::InvalidParam("empty batch".into()));
        }
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::shape(
                0,
                "input",
                format!(
                    "batch shape {:?} does not match input shape {:?}",
                    batch.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"EPNN");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        b.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        b.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    b.push(0);
                    b.extend_from_slice(&(weight.shape()[0] as u32).to_le_bytes());
                    b.extend_from_slice(&(weight.shape()[1] as u32).to_le_bytes());
                    write_f64s(&mut b, weight.values());
                    write_f64s(&mut b, bias.values());
                }
                Layer::Conv2D { kernels, bias } => {
                    b.push(1);
                    for &d in kernels.shape() {
                        b.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    write_f64s(&mut b, kernels.values());
                    write_f64s(&mut b, bias.values());
                }
                Layer::ReLU => b.push(2),
                Layer::MaxPool2D { window, stride } => {
                    b.push(3);
                    for d in [window.0, window.1, stride.0, stride.1] {
                        b.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                }
                Layer::Flatten => b.push(4),
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Network> {
        let mut cur = Cursor { b: bytes, pos: 0 };
        let fail = |c: &Cursor, detail: String| Error::format(origin, c.pos as u64, detail);
        let magic = cur.take(4).map_err(|d| fail(&cur, d))?;
        if magic != b"EPNN" {
            return Err(Error::format(origin, 0, "bad magic, want \"EPNN\"".to_string()));
        }
        let version = cur.u16().map_err(|d| fail(&cur, d))?;
        if version != 1 {
            return Err(Error::format(
                origin,
                4,
                format!("unsupported format version {version}"),
            ));
        }
        let layer_count = cur.u32().map_err(|d| fail(&cur, d))? as usize;
        let num_classes = cur.u32().map_err(|d| fail(&cur, d))? as usize;
        let rank = cur.u32().map_err(|d| fail(&cur, d))? as usize;
        if rank == 0 || rank > 8 {
            return Err(fail(&cur, format!("implausible input rank {rank}")));
        }
        let mut input_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input_shape.push(cur.u32().map_err(|d| fail(&cur, d))? as usize);
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let tag = cur.u8().map_err(|d| fail(&cur, d))?;
            let layer = match tag {
                0 => {
                    let out = cur.u32().map_err(|d| fail(&cur, d))? as usize;
                    let inp = cur.u32().map_err(|d| fail(&cur, d))? as usize;
                    let weight = Tensor::from_vec(
                        vec![out, inp],
                        cur.f64s(out * inp).map_err(|d| fail(&cur, d))?,
                    )
                    .map_err(|e| fail(&cur, e.to_string()))?;
                    let bias = Tensor::from_vec(vec![out], cur.f64s(out).map_err(|d| fail(&cur, d))?)
                        .unwrap();
                    Layer::dense(weight, bias).map_err(|e| fail(&cur, e.to_string()))?
                }
                1 => {
                    let mut dims = [0usize; 4];
                    for d in &mut dims {
                        *d = cur.u32().map_err(|e| fail(&cur, e))? as usize;
                    }
                    let n = dims.iter().product();
                    let kernels = Tensor::from_vec(
                        dims.to_vec(),
                        cur.f64s(n).map_err(|d| fail(&cur, d))?,
                    )
                    .unwrap();
                    let bias = Tensor::from_vec(
                        vec![dims[0]],
                        cur.f64s(dims[0]).map_err(|d| fail(&cur, d))?,
                    )
                    .unwrap();
                    Layer::conv2d(kernels, bias).map_err(|e| fail(&cur, e.to_string()))?
                }
                2 => Layer::ReLU,
                3 => {
                    let mut dims = [0usize; 4];
                    for d in &mut dims {
                        *d = cur.u32().map_err(|e| fail(&cur, e))? as usize;
                    }
                    Layer::maxpool2d((dims[0], dims[1]), (dims[2], dims[3]))
                        .map_err(|e| fail(&cur, e.to_string()))?
                }
                4 => Layer::Flatten,
                t => return Err(fail(&cur, format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        if cur.pos != bytes.len() {
            return Err(fail(&cur, format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Network::new(input_shape, layers, num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Network::from_bytes(&bytes, path)
    }
}

fn apply_step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in param.values_mut().iter_mut().zip(grad.values()) {
        *p -= lr * g;
    }
}

/// Mean softmax cross-entropy over the batch, plus the logit gradient.
pub(crate) fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Tensor)> {
    let b_n = logits.batch_size();
    if labels.len() != b_n {
        return Err(Error::InvalidParam(format!(
            "{} labels for a batch of {}",
            labels.len(),
            b_n
        )));
    }
    for &y in labels {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
    }
    let k = logits.row_len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let inv_b = 1.0 / b_n as f64;
    for b in 0..b_n {
        let z = logits.row(b);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let g = &mut grad[b * k..(b + 1) * k];
        for (gi, &zi) in g.iter_mut().zip(z) {
            let e = (zi - m).exp();
            *gi = e;
            sum += e;
        }
        loss += sum.ln() - (z[labels[b]] - m);
        let inv_sum = 1.0 / sum;
        for gi in g.iter_mut() {
            *gi *= inv_sum * inv_b;
        }
        g[labels[b]] -= inv_b;
    }
    Ok((loss * inv_b, Tensor::from_vec(logits.shape().to_vec(), grad)?))
}

fn write_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    buf.reserve(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(b: &'a [u8]) -> Cursor<'a> {
        Cursor { b, pos: 0 }
    }

    pub(crate) fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.b.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.b.len() {
            return Err(format!(
                "truncated: want {} bytes, {} remain",
                n,
                self.b.len() - self.pos
            ));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let net = Network::new(
            vec![3],
            vec![Layer::dense(eye, Tensor::zeros(vec![3])).unwrap()],
            3,
        )
        .unwrap();
        let out = net.forward(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn composition_errors_name_the_layer() {
        let err = Network::new(
            vec![3],
            vec![
                Layer::dense(Tensor::zeros(vec![4, 3]), Tensor::zeros(vec![4])).unwrap(),
                Layer::dense(Tensor::zeros(vec![2, 5]), Tensor::zeros(vec![2])).unwrap(),
            ],
            2,
        )
        .unwrap_err();
        match err {
            Error::ShapeMismatch { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_num_classes() {
        let logits = Tensor::zeros(vec![2, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[3, 7], 10).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = Tensor::zeros(vec![1, 4]);
        logits.values_mut()[2] = 60.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2], 4).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::zeros(vec![1, 4]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[4], 4),
            Err(Error::LabelOutOfRange { label: 4, .. })
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut net = Network::new(
            vec![1],
            vec![Layer::dense(t(&[1, 1], &[1.0]), Tensor::zeros(vec![1])).unwrap()],
            1,
        )
        .unwrap();
        let grads = Gradients {
            layers: vec![LayerGrads::Dense {
                d_weight: t(&[1, 1], &[0.5]),
                d_bias: Tensor::zeros(vec![1]),
            }],
        };
        net.sgd_step(&grads, 0.1).unwrap();
        match &net.layers[0] {
            Layer::Dense { weight, .. } => assert!((weight.values()[0] - 0.95).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let mut net = Network::mlp(vec![4], &[5], 3, 7);
        let before = net.to_bytes();
        let batch = Tensor::zeros(vec![2, 4]);
        let (_, grads) = net.loss_and_grad(&batch, &[0, 1]).unwrap();
        net.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(net.to_bytes(), before);
    }

    #[test]
    fn sgd_step_decreases_loss() {
        let mut net = Network::mlp(vec![2], &[], 2, 3);
        let batch = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let labels = [0usize, 1];
        let (before, grads) = net.loss_and_grad(&batch, &labels).unwrap();
        net.sgd_step(&grads, 0.05).unwrap();
        let (after, _) = net.loss_and_grad(&batch, &labels).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::mlp(vec![6], &[8, 8], 4, 11);
        let batch = Tensor::from_vec(vec![3, 6], (0..18).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = net.forward(&batch).unwrap();
        let b = net.forward(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let net = Network::lenet1(10, 42);
        let bytes = net.to_bytes();
        let back = Network::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.epnn");
        let net = Network::mlp(vec![5], &[7], 3, 9);
        net.save(&path).unwrap();
        assert_eq!(Network::load(&path).unwrap(), net);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let mut bytes = Network::mlp(vec![2], &[], 2, 1).to_bytes();
        bytes[0] = b'X';
        let err = Network::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let bytes = Network::mlp(vec![2], &[3], 2, 1).to_bytes();
        let err = Network::from_bytes(&bytes[..bytes.len() - 4], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn batch_shape_mismatch_is_diagnosed() {
        let net = Network::mlp(vec![4], &[], 2, 5);
        let err = net.forward(&Tensor::zeros(vec![1, 5])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
