//! Layer kinds and their forward/backward kernels.
//!
//! Shapes are per-batch: Dense consumes `[B, in]`, Conv2D and MaxPool2D
//! consume `[B, C, H, W]`. A single-channel Conv2D also accepts `[B, H, W]`,
//! which has the same memory layout as `[B, 1, H, W]`. Conv2D is stride-1
//! with valid padding; MaxPool2D floors partial windows away. All kernels
//! trust their input shapes; the owning `Network` validates composition at
//! construction time and batch shape on entry.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Conv2D { kernels: Tensor, bias: Tensor },
    ReLU,
    MaxPool2D { window: (usize, usize), stride: (usize, usize) },
    Flatten,
}

/// Per-layer parameter gradients, mirroring parameter shapes.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    None,
    Dense { d_weight: Tensor, d_bias: Tensor },
    Conv2D { d_kernels: Tensor, d_bias: Tensor },
}

impl Layer {
    /// Dense layer; `weight` is `[out, in]`, `bias` is `[out]`.
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Layer> {
        if weight.shape().len() != 2 {
            return Err(Error::InvalidParam(format!(
                "dense weight must be rank 2, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::InvalidParam(format!(
                "dense bias {:?} does not match weight rows {}",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        Ok(Layer::Dense { weight, bias })
    }

    /// Xavier-uniform initialized dense layer: U(±sqrt(6/(fan_in+fan_out))).
    pub fn dense_init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Layer {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Tensor::from_vec(
            vec![out_dim, in_dim],
            (0..out_dim * in_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )
        .unwrap();
        Layer::Dense {
            weight,
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Conv2D layer; `kernels` is `[out_ch, in_ch, kh, kw]`, `bias` is `[out_ch]`.
    pub fn conv2d(kernels: Tensor, bias: Tensor) -> Result<Layer> {
        if kernels.shape().len() != 4 {
            return Err(Error::InvalidParam(format!(
                "conv kernels must be rank 4, got {:?}",
                kernels.shape()
            )));
        }
        if bias.shape() != [kernels.shape()[0]] {
            return Err(Error::InvalidParam(format!(
                "conv bias {:?} does not match out-channel count {}",
                bias.shape(),
                kernels.shape()[0]
            )));
        }
        Ok(Layer::Conv2D { kernels, bias })
    }

    pub fn conv2d_init(
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl Rng,
    ) -> Layer {
        let fan_in = in_ch * kh * kw;
        let fan_out = out_ch * kh * kw;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernels = Tensor::from_vec(
            vec![out_ch, in_ch, kh, kw],
            (0..out_ch * in_ch * kh * kw)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )
        .unwrap();
        Layer::Conv2D {
            kernels,
            bias: Tensor::zeros(vec![out_ch]),
        }
    }

    pub fn maxpool2d(window: (usize, usize), stride: (usize, usize)) -> Result<Layer> {
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidParam(
                "maxpool window and stride must be positive".into(),
            ));
        }
        Ok(Layer::MaxPool2D { window, stride })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2D { .. } => "conv2d",
            Layer::ReLU => "relu",
            Layer::MaxPool2D { .. } => "maxpool2d",
            Layer::Flatten => "flatten",
        }
    }

    /// Lockable layers host authorization neurons.
    pub fn lockable(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2D { .. })
    }

    /// Neuron count of a lockable layer: output units for Dense, output
    /// channels for Conv2D.
    pub fn width(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } => Some(weight.shape()[0]),
            Layer::Conv2D { kernels, .. } => Some(kernels.shape()[0]),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weight, bias } => weight.len() + bias.len(),
            Layer::Conv2D { kernels, bias } => kernels.len() + bias.len(),
            _ => 0,
        }
    }

    /// Per-example output shape for a per-example input shape, or a
    /// diagnostic if the shapes do not compose.
    pub(crate) fn out_shape(&self, in_shape: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Dense { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if in_shape != [inp] {
                    return Err(format!(
                        "dense expects input [{}], got {:?}",
                        inp, in_shape
                    ));
                }
                Ok(vec![out])
            }
            Layer::Conv2D { kernels, .. } => {
                let k = kernels.shape();
                let (oc, ic, kh, kw) = (k[0], k[1], k[2], k[3]);
                let channel_ok = match in_shape.len() {
                    2 => ic == 1,
                    3 => in_shape[0] == ic,
                    _ => false,
                };
                if !channel_ok {
                    return Err(format!(
                        "conv expects input [{}, H, W], got {:?}",
                        ic, in_shape
                    ));
                }
                let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
                if h < kh || w < kw {
                    return Err(format!(
                        "conv kernel {}x{} larger than input {}x{}",
                        kh, kw, h, w
                    ));
                }
                Ok(vec![oc, h - kh + 1, w - kw + 1])
            }
            Layer::ReLU => Ok(in_shape.to_vec()),
            Layer::MaxPool2D { window, stride } => {
                if in_shape.len() != 3 {
                    return Err(format!("maxpool expects input [C, H, W], got {:?}", in_shape));
                }
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                if h < window.0 || w < window.1 {
                    return Err(format!(
                        "pool window {}x{} larger than input {}x{}",
                        window.0, window.1, h, w
                    ));
                }
                Ok(vec![
                    c,
                    (h - window.0) / stride.0 + 1,
                    (w - window.1) / stride.1 + 1,
                ])
            }
            Layer::Flatten => {
                if in_shape.is_empty() {
                    return Err("flatten expects a non-empty input shape".into());
                }
                Ok(vec![in_shape.iter().product()])
            }
        }
    }

    /// Forward kernel. The auxiliary vector holds max-pool argmax positions
    /// (flat indices into the input values) and is `None` elsewhere.
    pub(crate) fn forward(&self, input: &Tensor) -> (Tensor, Option<Vec<usize>>) {
        match self {
            Layer::Dense { weight, bias } => (dense_forward(weight, bias, input), None),
            Layer::Conv2D { kernels, bias } => (conv2d_forward(kernels, bias, input), None),
            Layer::ReLU => {
                let mut out = input.clone();
                for v in out.values_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                (out, None)
            }
            Layer::MaxPool2D { window, stride } => {
                let (out, arg) = maxpool_forward(input, *window, *stride);
                (out, Some(arg))
            }
            Layer::Flatten => {
                let b = input.batch_size();
                let n = input.row_len();
                (input.clone().reshape(vec![b, n]).unwrap(), None)
            }
        }
    }

    /// Backward kernel: consumes the upstream gradient and produces the
    /// gradient w.r.t. this layer's input plus parameter gradients.
    ///
    /// ReLU uses the recorded *output* sign, so a positive rescaling of the
    /// stored activations (as the locked pass applies) does not disturb the
    /// mask.
    pub(crate) fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        aux: Option<&[usize]>,
        grad_out: &Tensor,
    ) -> (Tensor, LayerGrads) {
        match self {
            Layer::Dense { weight, .. } => dense_backward(weight, input, grad_out),
            Layer::Conv2D { kernels, .. } => conv2d_backward(kernels, input, grad_out),
            Layer::ReLU => {
                let mut grad_in = grad_out.clone();
                for (g, y) in grad_in.values_mut().iter_mut().zip(output.values()) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
                (grad_in, LayerGrads::None)
            }
            Layer::MaxPool2D { .. } => {
                let arg = aux.expect("maxpool backward needs the forward argmax record");
                let mut grad_in = vec![0.0; input.len()];
                for (g, &src) in grad_out.values().iter().zip(arg) {
                    grad_in[src] += g;
                }
                (
                    Tensor::from_vec(input.shape().to_vec(), grad_in).unwrap(),
                    LayerGrads::None,
                )
            }
            Layer::Flatten => (
                grad_out.clone().reshape(input.shape().to_vec()).unwrap(),
                LayerGrads::None,
            ),
        }
    }
}

/// Dot product with four accumulators; the compiler vectorizes this shape.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dst += a * src`, elementwise over equal-length slices.
pub(crate) fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dense_forward(weight: &Tensor, bias: &Tensor, input: &Tensor) -> Tensor {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let b_n = input.batch_size();
    let w = weight.values();
    let mut out = vec![0.0; b_n * out_dim];
    for b in 0..b_n {
        let x = input.row(b);
        let row = &mut out[b * out_dim..(b + 1) * out_dim];
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = bias.values()[o] + dot(&w[o * in_dim..(o + 1) * in_dim], x);
        }
    }
    Tensor::from_vec(vec![b_n, out_dim], out).unwrap()
}

fn dense_backward(weight: &Tensor, input: &Tensor, grad_out: &Tensor) -> (Tensor, LayerGrads) {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let b_n = input.batch_size();
    let w = weight.values();
    let mut d_weight = vec![0.0; out_dim * in_dim];
    let mut d_bias = vec![0.0; out_dim];
    let mut grad_in = vec![0.0; b_n * in_dim];
    for b in 0..b_n {
        let x = input.row(b);
        let g = grad_out.row(b);
        let gi = &mut grad_in[b * in_dim..(b + 1) * in_dim];
        for (o, &go) in g.iter().enumerate() {
            d_bias[o] += go;
            axpy(&mut d_weight[o * in_dim..(o + 1) * in_dim], go, x);
            axpy(gi, go, &w[o * in_dim..(o + 1) * in_dim]);
        }
    }
    (
        Tensor::from_vec(vec![b_n, in_dim], grad_in).unwrap(),
        LayerGrads::Dense {
            d_weight: Tensor::from_vec(vec![out_dim, in_dim], d_weight).unwrap(),
            d_bias: Tensor::from_vec(vec![out_dim], d_bias).unwrap(),
        },
    )
}

fn conv2d_forward(kernels: &Tensor, bias: &Tensor, input: &Tensor) -> Tensor {
    let ks = kernels.shape();
    let (oc, ic, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let is = input.shape();
    let (b_n, h, w) = (is[0], is[is.len() - 2], is[is.len() - 1]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let kv = kernels.values();
    let iv = input.values();
    let mut out = vec![0.0; b_n * oc * oh * ow];
    for b in 0..b_n {
        for o in 0..oc {
            let plane = &mut out[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            plane.fill(bias.values()[o]);
            for c in 0..ic {
                let src = &iv[(b * ic + c) * h * w..(b * ic + c + 1) * h * w];
                for p in 0..kh {
                    for q in 0..kw {
                        let k = kv[((o * ic + c) * kh + p) * kw + q];
                        if k == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            axpy(
                                &mut plane[y * ow..(y + 1) * ow],
                                k,
                                &src[(y + p) * w + q..(y + p) * w + q + ow],
                            );
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b_n, oc, oh, ow], out).unwrap()
}

fn conv2d_backward(kernels: &Tensor, input: &Tensor, grad_out: &Tensor) -> (Tensor, LayerGrads) {
    let ks = kernels.shape();
    let (oc, ic, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let is = input.shape();
    let (b_n, h, w) = (is[0], is[is.len() - 2], is[is.len() - 1]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let kv = kernels.values();
    let iv = input.values();
    let gv = grad_out.values();
    let mut d_kern = vec![0.0; kernels.len()];
    let mut d_bias = vec![0.0; oc];
    let mut grad_in = vec![0.0; input.len()];
    for b in 0..b_n {
        for o in 0..oc {
            let g_plane = &gv[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            d_bias[o] += g_plane.iter().sum::<f64>();
            for c in 0..ic {
                let src = &iv[(b * ic + c) * h * w..(b * ic + c + 1) * h * w];
                let gi = &mut grad_in[(b * ic + c) * h * w..(b * ic + c + 1) * h * w];
                for p in 0..kh {
                    for q in 0..kw {
                        let ki = ((o * ic + c) * kh + p) * kw + q;
                        let k = kv[ki];
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let g_row = &g_plane[y * ow..(y + 1) * ow];
                            let s_row = &src[(y + p) * w + q..(y + p) * w + q + ow];
                            acc += dot(g_row, s_row);
                            if k != 0.0 {
                                axpy(&mut gi[(y + p) * w + q..(y + p) * w + q + ow], k, g_row);
                            }
                        }
                        d_kern[ki] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape().to_vec(), grad_in).unwrap(),
        LayerGrads::Conv2D {
            d_kernels: Tensor::from_vec(ks.to_vec(), d_kern).unwrap(),
            d_bias: Tensor::from_vec(vec![oc], d_bias).unwrap(),
        },
    )
}

fn maxpool_forward(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> (Tensor, Vec<usize>) {
    let is = input.shape();
    let (b_n, c_n, h, w) = (is[0], is[1], is[2], is[3]);
    let (ph, pw) = window;
    let (sh, sw) = stride;
    let (oh, ow) = ((h - ph) / sh + 1, (w - pw) / sw + 1);
    let iv = input.values();
    let mut out = vec![0.0; b_n * c_n * oh * ow];
    let mut arg = vec![0usize; out.len()];
    let mut pos = 0;
    for bc in 0..b_n * c_n {
        let base = bc * h * w;
        for y0 in 0..oh {
            for x0 in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = base;
                for p in 0..ph {
                    let row = base + (y0 * sh + p) * w + x0 * sw;
                    for q in 0..pw {
                        let v = iv[row + q];
                        if v > best {
                            best = v;
                            best_at = row + q;
                        }
                    }
                }
                out[pos] = best;
                arg[pos] = best_at;
                pos += 1;
            }
        }
    }
    (
        Tensor::from_vec(vec![b_n, c_n, oh, ow], out).unwrap(),
        arg,
    )
}
