//! fp32 and int8 execution of chain models.

use super::activation::{clipped_gelu, gelu, relu, softmax, swish};
use super::fold::batch_norm_coefficients;
use super::{Layer, LayerKind, Model, WeightGranularity};
use crate::error::{Error, Result};
use crate::kernels::{
    conv2d, conv2d_int8, conv_weight_matrix, integer_matmul_scale, ConvGeometry, QLinearWeights,
};
use crate::quant::{quantize, QuantParams};
use crate::tensor::{matmul, Tensor};

const BITS: u32 = 8;

fn check_input(model: &Model, x: &Tensor) -> Result<()> {
    if x.rank() == 0 || x.shape()[1..] != *model.input_shape() {
        return Err(Error::shape(format!(
            "input {:?}, model expects [N, {:?}]",
            x.shape(),
            model.input_shape()
        )));
    }
    Ok(())
}

fn bias<'a>(model: &'a Model, name: &Option<String>) -> Result<Option<&'a [f64]>> {
    name.as_deref()
        .map(|b| model.weight(b).map(|t| t.data()))
        .transpose()
}

fn add_row_bias(y: &mut Tensor, b: Option<&[f64]>) {
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(b.len()) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

/// Apply `y = c[ch] * x + d[ch]` over axis 1.
pub(crate) fn channel_affine(x: &Tensor, c: &[f64], d: &[f64]) -> Result<Tensor> {
    let ch = c.len();
    if x.rank() < 2 || x.shape()[1] != ch {
        return Err(Error::shape(format!("{:?} for {ch} channels", x.shape())));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let k = (i / inner) % ch;
        *v = c[k] * *v + d[k];
    }
    Ok(y)
}

/// Real evaluation of one layer on a batched tensor.
pub(crate) fn apply_fp32(model: &Model, layer: &Layer, x: &Tensor) -> Result<Tensor> {
    let y = match &layer.kind {
        LayerKind::Linear { weight, bias: b } => {
            let mut y = matmul(x, model.weight(weight)?)?;
            add_row_bias(&mut y, bias(model, b)?);
            y
        }
        LayerKind::Conv2d {
            weight,
            bias: b,
            stride,
            padding,
        } => conv2d(
            x,
            model.weight(weight)?,
            bias(model, b)?,
            ConvGeometry {
                stride: *stride,
                padding: *padding,
            },
        )?,
        LayerKind::BatchNorm { .. } => {
            let (c, d) = batch_norm_coefficients(model, layer)?;
            channel_affine(x, &c, &d)?
        }
        LayerKind::Relu => relu(x),
        LayerKind::Gelu => gelu(x),
        LayerKind::Swish => swish(x),
        LayerKind::ClippedGelu { limit } => clipped_gelu(x, *limit),
        LayerKind::Softmax => softmax(x),
        LayerKind::Flatten => {
            let n = x.shape()[0];
            x.clone().reshape(vec![n, x.len() / n.max(1)])?
        }
    };
    Ok(y)
}

/// Reference real-valued execution.
pub fn forward_fp32(model: &Model, x: &Tensor) -> Result<Tensor> {
    check_input(model, x)?;
    let mut h = x.clone();
    for l in model.layers() {
        h = apply_fp32(model, l, &h).map_err(|e| wrap(l, e))?;
    }
    Ok(h)
}

fn wrap(l: &Layer, e: Error) -> Error {
    match e {
        Error::Shape(s) => Error::Layer {
            layer: l.name.clone(),
            reason: s,
        },
        e => e,
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    act: QuantParams,
    weights: QLinearWeights,
    kernel: Option<(usize, usize, ConvGeometry)>,
}

/// Quantized execution with weights prepared once per model.
///
/// Enabled layers quantize their input per-tensor with the calibrated
/// symmetric range, run the integer kernel against per-channel (or
/// per-tensor) max-calibrated weights and emit real outputs with the bias
/// added in real arithmetic. Every other layer runs exactly as in
/// [`forward_fp32`].
#[derive(Debug, Clone)]
pub struct Int8Executor<'m> {
    model: &'m Model,
    prepared: Vec<Option<Prepared>>,
}

impl<'m> Int8Executor<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let prepared = model
            .layers()
            .iter()
            .map(|l| if l.quant.enabled { prepare(model, l).map(Some) } else { Ok(None) })
            .collect::<Result<_>>()?;
        Ok(Self { model, prepared })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_observed(x, |_, _| {})
    }

    /// Run the model, handing each layer's input to `observe` before the
    /// layer executes.
    pub fn forward_observed(
        &self,
        x: &Tensor,
        mut observe: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        check_input(self.model, x)?;
        let mut h = x.clone();
        for (i, (l, p)) in self.model.layers().iter().zip(&self.prepared).enumerate() {
            observe(i, &h);
            h = match p {
                None => apply_fp32(self.model, l, &h),
                Some(p) => self.apply_int8(l, p, &h),
            }
            .map_err(|e| wrap(l, e))?;
        }
        Ok(h)
    }

    fn apply_int8(&self, l: &Layer, p: &Prepared, x: &Tensor) -> Result<Tensor> {
        let xq = quantize(x, &p.act)?;
        match (&l.kind, p.kernel) {
            (LayerKind::Linear { bias: b, .. }, None) => {
                let mut y = integer_matmul_scale(&xq, &p.weights)?;
                add_row_bias(&mut y, bias(self.model, b)?);
                Ok(y)
            }
            (LayerKind::Conv2d { bias: b, .. }, Some((kh, kw, g))) => {
                conv2d_int8(&xq, &p.weights, kh, kw, bias(self.model, b)?, g)
            }
            _ => unreachable!("prepared only for linear and conv layers"),
        }
    }
}

fn prepare(model: &Model, l: &Layer) -> Result<Prepared> {
    let alpha = l
        .quant
        .activation_alpha
        .ok_or_else(|| Error::MissingCalibration(l.input_tensor()))?;
    let act = QuantParams::scale(alpha, BITS)?;
    let per_column = l.quant.weight_granularity == WeightGranularity::PerChannel;
    match &l.kind {
        LayerKind::Linear { weight, .. } => Ok(Prepared {
            act,
            weights: QLinearWeights::quantize_scale(model.weight(weight)?, per_column, BITS)?,
            kernel: None,
        }),
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
            ..
        } => {
            let w = model.weight(weight)?;
            let (kh, kw) = (w.shape()[2], w.shape()[3]);
            Ok(Prepared {
                act,
                weights: QLinearWeights::quantize_scale(&conv_weight_matrix(w)?, per_column, BITS)?,
                kernel: Some((
                    kh,
                    kw,
                    ConvGeometry {
                        stride: *stride,
                        padding: *padding,
                    },
                )),
            })
        }
        _ => Err(Error::Layer {
            layer: l.name.clone(),
            reason: "not quantizable".into(),
        }),
    }
}

/// Quantized execution; see [`Int8Executor`].
pub fn forward_int8(model: &Model, x: &Tensor) -> Result<Tensor> {
    Int8Executor::new(model)?.forward(x)
}
