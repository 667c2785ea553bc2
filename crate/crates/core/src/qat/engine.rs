//! Layer-wise reverse-mode differentiation over a chain model.

use std::collections::BTreeMap;

use super::alpha_grad;
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::graph::activation::{
    clipped_gelu_grad_scalar, clipped_gelu_scalar, gelu_grad_scalar, gelu_scalar, softmax,
    swish_grad_scalar, swish_scalar,
};
use crate::graph::{LayerKind, Model, WeightGranularity};
use crate::kernels::{
    col2im, conv_weight_matrix, im2col, nchw_to_nhwc_rows, nhwc_rows_to_nchw, weight_params,
    ConvGeometry,
};
use crate::quant::{fake_quantize, QuantParams};
use crate::tensor::{matmul, Tensor};

/// How quantized layers treat their operands in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FakeQuantMode {
    /// Snap to the integer grid (training).
    #[default]
    Quantize,
    /// Clip to the range without rounding: the surrogate whose true gradient
    /// the straight-through estimator computes.
    ClipOnly,
}

/// Loss gradients with respect to named parameters and per-layer activation
/// ranges (zero for layers without fake quantization).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub alphas: Vec<f64>,
}

enum Cache {
    Linear {
        xin: Tensor,
        xq: Tensor,
        wq: Tensor,
    },
    Conv {
        xin: Tensor,
        patches: Tensor,
        wmat: Tensor,
        kernel: [usize; 4],
        g: ConvGeometry,
    },
    BatchNorm {
        x: Tensor,
        c: Vec<f64>,
    },
    Elementwise(Tensor),
    Softmax(Tensor),
    Flatten(Vec<usize>),
}

/// A model evaluated against an external parameter store.
pub(crate) struct Net<'a> {
    pub model: &'a Model,
    pub params: &'a BTreeMap<String, Tensor>,
    /// Per layer: `Some(alpha)` where the input is fake-quantized.
    pub alphas: &'a [Option<f64>],
    pub mode: FakeQuantMode,
    pub bits: u32,
}

pub(crate) struct Tape {
    caches: Vec<Cache>,
}

fn param<'p>(params: &'p BTreeMap<String, Tensor>, name: &str) -> Result<&'p Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn add_bias(y: &mut [f64], b: Option<&Tensor>) {
    if let Some(b) = b {
        let n = b.len();
        for row in y.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
}

fn column_sums(x: &Tensor, n: usize) -> Tensor {
    let mut s = vec![0.0; n];
    for row in x.data().chunks(n) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(vec![n], s).expect("n columns")
}

fn accumulate(grads: &mut BTreeMap<String, Tensor>, name: &str, g: Tensor) {
    match grads.get_mut(name) {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

fn bn_coefficients(
    params: &BTreeMap<String, Tensor>,
    kind: &LayerKind,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let LayerKind::BatchNorm {
        gamma,
        beta,
        mean,
        var,
        eps,
    } = kind
    else {
        unreachable!()
    };
    let (g, b, e, v) = (
        param(params, gamma)?.data(),
        param(params, beta)?.data(),
        param(params, mean)?.data(),
        param(params, var)?.data(),
    );
    let inv: Vec<f64> = v.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let c = (0..g.len()).map(|k| g[k] * inv[k]).collect();
    let d = (0..g.len()).map(|k| b[k] - g[k] * e[k] * inv[k]).collect();
    Ok((c, d, inv))
}

impl Net<'_> {
    fn quantize_input(&self, x: &Tensor, alpha: Option<f64>) -> Result<Tensor> {
        match (alpha, self.mode) {
            (None, _) => Ok(x.clone()),
            (Some(a), FakeQuantMode::ClipOnly) => Ok(x.map(|v| v.clamp(-a, a))),
            (Some(a), FakeQuantMode::Quantize) => {
                fake_quantize(x, &QuantParams::scale(a, self.bits)?)
            }
        }
    }

    /// Weight matrix (`p × n`) as seen by the forward pass. Max calibration
    /// never clips, so the surrogate is the identity.
    fn quantize_weight(&self, w: &Tensor, alpha: Option<f64>, per_column: bool) -> Result<Tensor> {
        if alpha.is_none() || self.mode == FakeQuantMode::ClipOnly {
            return Ok(w.clone());
        }
        fake_quantize(w, &weight_params(w, per_column, self.bits)?)
    }

    /// Run layers `0..upto`.
    pub fn forward(&self, x: &Tensor, upto: usize) -> Result<(Tensor, Tape)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(upto);
        for (i, l) in self.model.layers()[..upto].iter().enumerate() {
            let alpha = self.alphas[i];
            let per_column = l.quant.weight_granularity == WeightGranularity::PerChannel;
            let (y, cache) = match &l.kind {
                LayerKind::Linear { weight, bias } => {
                    let xq = self.quantize_input(&h, alpha)?;
                    let wq = self.quantize_weight(param(self.params, weight)?, alpha, per_column)?;
                    let mut y = matmul(&xq, &wq)?;
                    let b = bias.as_deref().map(|b| param(self.params, b)).transpose()?;
                    add_bias(y.data_mut(), b);
                    (y, Cache::Linear { xin: h, xq, wq })
                }
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let g = ConvGeometry {
                        stride: *stride,
                        padding: *padding,
                    };
                    let w = param(self.params, weight)?;
                    let kernel: [usize; 4] = w.shape().try_into().map_err(|_| Error::shape("conv kernel"))?;
                    let xq = self.quantize_input(&h, alpha)?;
                    let patches = im2col(&xq, kernel[2], kernel[3], g)?;
                    let wmat = self.quantize_weight(&conv_weight_matrix(w)?, alpha, per_column)?;
                    let mut rows = matmul(&patches, &wmat)?;
                    let b = bias.as_deref().map(|b| param(self.params, b)).transpose()?;
                    add_bias(rows.data_mut(), b);
                    let [n, _, hh, ww] = *h.shape() else { unreachable!() };
                    let oh = (hh + 2 * g.padding - kernel[2]) / g.stride + 1;
                    let ow = (ww + 2 * g.padding - kernel[3]) / g.stride + 1;
                    let y = nhwc_rows_to_nchw(rows.data(), n, oh, ow, kernel[0]);
                    (
                        y,
                        Cache::Conv {
                            xin: h,
                            patches,
                            wmat,
                            kernel,
                            g,
                        },
                    )
                }
                LayerKind::BatchNorm { .. } => {
                    let (c, d, _) = bn_coefficients(self.params, &l.kind)?;
                    let y = crate::graph::channel_affine(&h, &c, &d)?;
                    (y, Cache::BatchNorm { x: h, c })
                }
                LayerKind::Relu => (h.map(|v| v.max(0.0)), Cache::Elementwise(h)),
                LayerKind::Gelu => (h.map(gelu_scalar), Cache::Elementwise(h)),
                LayerKind::Swish => (h.map(swish_scalar), Cache::Elementwise(h)),
                LayerKind::ClippedGelu { limit } => (
                    h.map(|v| clipped_gelu_scalar(v, *limit)),
                    Cache::Elementwise(h),
                ),
                LayerKind::Softmax => {
                    let y = softmax(&h);
                    (y.clone(), Cache::Softmax(y))
                }
                LayerKind::Flatten => {
                    let shape = h.shape().to_vec();
                    let n = shape[0];
                    let len = h.len();
                    (h.reshape(vec![n, len / n.max(1)])?, Cache::Flatten(shape))
                }
            };
            caches.push(cache);
            h = y;
        }
        Ok((h, Tape { caches }))
    }

    pub fn backward(&self, tape: Tape, dy: Tensor) -> Result<Gradients> {
        let mut grads = BTreeMap::new();
        let mut alphas = vec![0.0; self.model.layers().len()];
        let mut dy = dy;
        for (i, cache) in tape.caches.into_iter().enumerate().rev() {
            let l = &self.model.layers()[i];
            let alpha = self.alphas[i];
            dy = match (cache, &l.kind) {
                (Cache::Linear { xin, xq, wq }, LayerKind::Linear { weight, bias }) => {
                    let n = wq.shape()[1];
                    accumulate(&mut grads, weight, matmul(&xq.transpose2()?, &dy)?);
                    if let Some(b) = bias {
                        accumulate(&mut grads, b, column_sums(&dy, n));
                    }
                    let dxq = matmul(&dy, &wq.transpose2()?)?;
                    self.mask_input(&xin, dxq, alpha, &mut alphas[i])?
                }
                (
                    Cache::Conv {
                        xin,
                        patches,
                        wmat,
                        kernel,
                        g,
                    },
                    LayerKind::Conv2d { weight, bias, .. },
                ) => {
                    let rows = nchw_to_nhwc_rows(&dy)?;
                    let dwmat = matmul(&patches.transpose2()?, &rows)?;
                    accumulate(&mut grads, weight, dwmat.transpose2()?.reshape(kernel.to_vec())?);
                    if let Some(b) = bias {
                        accumulate(&mut grads, b, column_sums(&rows, kernel[0]));
                    }
                    let dpatches = matmul(&rows, &wmat.transpose2()?)?;
                    let dxq = col2im(&dpatches, xin.shape(), kernel[2], kernel[3], g)?;
                    self.mask_input(&xin, dxq, alpha, &mut alphas[i])?
                }
                (
                    Cache::BatchNorm { x, c },
                    LayerKind::BatchNorm {
                        gamma, beta, mean, ..
                    },
                ) => {
                    let (_, _, inv) = bn_coefficients(self.params, &l.kind)?;
                    let e = param(self.params, mean)?.data();
                    let ch = c.len();
                    let inner: usize = x.shape()[2..].iter().product();
                    let mut dg = vec![0.0; ch];
                    let mut db = vec![0.0; ch];
                    let mut dx = dy.clone();
                    for (idx, v) in dx.data_mut().iter_mut().enumerate() {
                        let k = (idx / inner) % ch;
                        let g = *v;
                        dg[k] += g * (x.data()[idx] - e[k]) * inv[k];
                        db[k] += g;
                        *v = c[k] * g;
                    }
                    accumulate(&mut grads, gamma, Tensor::new(vec![ch], dg)?);
                    accumulate(&mut grads, beta, Tensor::new(vec![ch], db)?);
                    dx
                }
                (Cache::Elementwise(x), kind) => {
                    let d: Box<dyn Fn(f64) -> f64> = match kind {
                        LayerKind::Relu => Box::new(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                        LayerKind::Gelu => Box::new(gelu_grad_scalar),
                        LayerKind::Swish => Box::new(swish_grad_scalar),
                        LayerKind::ClippedGelu { limit } => {
                            let limit = *limit;
                            Box::new(move |v| clipped_gelu_grad_scalar(v, limit))
                        }
                        _ => unreachable!(),
                    };
                    x.zip_map(&dy, |v, g| g * d(v))?
                }
                (Cache::Softmax(y), _) => {
                    let k = *y.shape().last().unwrap_or(&1);
                    let mut dx = dy.clone();
                    for (row, yrow) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                        let dot: f64 = row.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (v, &s) in row.iter_mut().zip(yrow) {
                            *v = s * (*v - dot);
                        }
                    }
                    dx
                }
                (Cache::Flatten(shape), _) => dy.reshape(shape)?,
                _ => unreachable!("cache matches layer kind"),
            };
        }
        Ok(Gradients {
            params: grads,
            alphas,
        })
    }

    fn mask_input(
        &self,
        xin: &Tensor,
        dxq: Tensor,
        alpha: Option<f64>,
        dalpha: &mut f64,
    ) -> Result<Tensor> {
        let Some(a) = alpha else { return Ok(dxq) };
        *dalpha += alpha_grad(xin.data(), dxq.data(), a);
        let range = match self.mode {
            FakeQuantMode::ClipOnly => (-a, a),
            FakeQuantMode::Quantize => {
                let r = QuantParams::scale(a, self.bits)?.representable_range(0);
                (r.beta, r.alpha)
            }
        };
        xin.zip_map(&dxq, |v, g| if v >= range.0 && v <= range.1 { g } else { 0.0 })
    }
}

/// Mean loss over the batch and its gradient with respect to `out`.
///
/// Class labels use softmax cross-entropy on `out` as logits; targets use
/// the mean squared error.
pub(crate) fn loss_and_grad(out: &Tensor, labels: &Labels) -> Result<(f64, Tensor)> {
    let n = out.shape()[0].max(1);
    let k = out.len() / n;
    match labels {
        Labels::Classes(c) => {
            let p = softmax(&out.clone().reshape(vec![n, k])?);
            let mut d = p.clone();
            let mut loss = 0.0;
            for (r, &y) in c.iter().enumerate() {
                let y = y as usize;
                if y >= k {
                    return Err(Error::shape(format!("label {y} for {k} outputs")));
                }
                let z = &out.data()[r * k..(r + 1) * k];
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - z[y];
                d.data_mut()[r * k + y] -= 1.0;
            }
            d.data_mut().iter_mut().for_each(|v| *v /= n as f64);
            Ok((loss / n as f64, d.reshape(out.shape().to_vec())?))
        }
        Labels::Targets(t) => {
            if t.len() != out.len() {
                return Err(Error::shape(format!("targets {:?} vs outputs {:?}", t.shape(), out.shape())));
            }
            let m = out.len() as f64;
            let loss = out.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m;
            let d = Tensor::from_fn(out.shape().to_vec(), |i| 2.0 * (out.data()[i] - t.data()[i]) / m);
            Ok((loss, d))
        }
    }
}

/// Layers to run before the loss: a trailing softmax is fused into the
/// cross-entropy.
pub(crate) fn loss_depth(model: &Model, labels: &Labels) -> usize {
    let n = model.layers().len();
    match (model.layers().last(), labels) {
        (Some(l), Labels::Classes(_)) if l.kind == LayerKind::Softmax => n - 1,
        _ => n,
    }
}

/// Mean loss of `model` on one batch and its gradients, with the
/// straight-through estimator through every enabled layer.
pub fn loss_gradients(
    model: &Model,
    x: &Tensor,
    labels: &Labels,
    mode: FakeQuantMode,
) -> Result<(f64, Gradients)> {
    let alphas = layer_alphas(model)?;
    let net = Net {
        model,
        params: model.weights(),
        alphas: &alphas,
        mode,
        bits: 8,
    };
    let (out, tape) = net.forward(x, loss_depth(model, labels))?;
    let (loss, d) = loss_and_grad(&out, labels)?;
    Ok((loss, net.backward(tape, d)?))
}

/// Per-layer fake-quantization ranges of the enabled layers.
pub(crate) fn layer_alphas(model: &Model) -> Result<Vec<Option<f64>>> {
    model
        .layers()
        .iter()
        .map(|l| {
            if l.quant.enabled {
                l.quant
                    .activation_alpha
                    .map(Some)
                    .ok_or_else(|| Error::MissingCalibration(l.input_tensor()))
            } else {
                Ok(None)
            }
        })
        .collect()
}
