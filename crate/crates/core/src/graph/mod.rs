//! Chain models: layer list plus a named weight store.
//!
//! Tensors carry a leading batch axis at execution time; shapes stored in
//! the model (`input_shape`, inferred layer shapes) are per sample.

pub mod activation;
mod exec;
mod fold;
mod format;

pub use activation::{clipped_gelu, gelu, relu, softmax, swish, GELU_MIN, SWISH_MIN};
pub use exec::{forward_fp32, forward_int8, Int8Executor};
pub(crate) use exec::channel_affine;
pub use fold::{batch_norm_coefficients, fold_batch_norm};
pub use format::MODEL_MAGIC;

use std::collections::BTreeMap;

use crate::calib::CalibrationCache;
use crate::error::{Error, Result};
use crate::kernels::{conv_output_size, ConvGeometry};
use crate::tensor::Tensor;

/// Default batch-norm epsilon when a model file omits it.
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightGranularity {
    #[default]
    PerChannel,
    PerTensor,
}

/// Per-layer quantization switch and calibrated activation range.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantConfig {
    pub enabled: bool,
    pub weight_granularity: WeightGranularity,
    /// Symmetric range of the layer's input activation.
    pub activation_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `y = x W + b` with `W` stored as `in × out`.
    Linear {
        weight: String,
        bias: Option<String>,
    },
    /// OIHW kernel.
    Conv2d {
        weight: String,
        bias: Option<String>,
        stride: usize,
        padding: usize,
    },
    /// Inference-mode batch norm over axis 1.
    BatchNorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        eps: f64,
    },
    Relu,
    Gelu,
    Swish,
    ClippedGelu {
        limit: f64,
    },
    Softmax,
    Flatten,
}

impl LayerKind {
    pub fn is_quantizable(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Gelu => "gelu",
            LayerKind::Swish => "swish",
            LayerKind::ClippedGelu { .. } => "clipped_gelu",
            LayerKind::Softmax => "softmax",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Names of every weight tensor the layer references.
    pub fn tensor_names(&self) -> Vec<&str> {
        match self {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                std::iter::once(weight.as_str()).chain(bias.as_deref()).collect()
            }
            LayerKind::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => vec![gamma, beta, mean, var],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub quant: QuantConfig,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            quant: QuantConfig::default(),
        }
    }

    pub fn linear(name: &str) -> Self {
        Self::new(
            name,
            LayerKind::Linear {
                weight: format!("{name}.weight"),
                bias: Some(format!("{name}.bias")),
            },
        )
    }

    pub fn conv2d(name: &str, stride: usize, padding: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                weight: format!("{name}.weight"),
                bias: Some(format!("{name}.bias")),
                stride,
                padding,
            },
        )
    }

    pub fn batch_norm(name: &str, eps: f64) -> Self {
        Self::new(
            name,
            LayerKind::BatchNorm {
                gamma: format!("{name}.gamma"),
                beta: format!("{name}.beta"),
                mean: format!("{name}.mean"),
                var: format!("{name}.var"),
                eps,
            },
        )
    }

    /// Name under which this layer's input activation is calibrated.
    pub fn input_tensor(&self) -> String {
        input_tensor_name(&self.name)
    }
}

pub fn input_tensor_name(layer: &str) -> String {
    format!("{layer}.input")
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=' || c == ':')
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    weights: BTreeMap<String, Tensor>,
}

impl Model {
    /// Validate names, weight references and shape chaining. Weights are
    /// rounded to `f32`, the precision of the on-disk format.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let weights = weights
            .into_iter()
            .map(|(k, v)| (k, v.round_to_f32()))
            .collect();
        let model = Self {
            input_shape,
            layers,
            weights,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !valid_name(&l.name) {
                return Err(Error::Layer {
                    layer: l.name.clone(),
                    reason: "invalid layer name".into(),
                });
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Layer {
                    layer: l.name.clone(),
                    reason: "duplicate layer name".into(),
                });
            }
            if !l.kind.is_quantizable() && l.quant.enabled {
                return Err(Error::Layer {
                    layer: l.name.clone(),
                    reason: "only linear and conv2d layers can be quantized".into(),
                });
            }
            for t in l.kind.tensor_names() {
                if !valid_name(t) {
                    return Err(Error::Layer {
                        layer: l.name.clone(),
                        reason: format!("invalid tensor name `{t}`"),
                    });
                }
                if !self.weights.contains_key(t) {
                    return Err(Error::MissingTensor(t.to_string()));
                }
            }
            if let LayerKind::BatchNorm { eps, var, .. } = &l.kind {
                let var = &self.weights[var.as_str()];
                if eps.is_nan() || *eps < 0.0 || var.data().iter().any(|&v| v < 0.0 || v + eps <= 0.0) {
                    return Err(Error::Layer {
                        layer: l.name.clone(),
                        reason: "batch norm needs Var >= 0 and Var + eps > 0".into(),
                    });
                }
            }
            if let LayerKind::ClippedGelu { limit } = l.kind {
                if limit.is_nan() || limit <= 0.0 {
                    return Err(Error::Layer {
                        layer: l.name.clone(),
                        reason: "clip limit must be positive".into(),
                    });
                }
            }
            if let Some(a) = l.quant.activation_alpha {
                if !a.is_finite() || a <= 0.0 {
                    return Err(Error::NonPositiveRange(a));
                }
            }
        }
        for k in self.weights.keys() {
            if !valid_name(k) {
                return Err(Error::format(format!("invalid tensor name `{k}`")));
            }
        }
        self.infer_shapes().map(|_| ())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Replace a weight tensor, keeping its shape; the value is rounded to
    /// `f32`.
    pub fn set_weight(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .weights
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{name}`: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value.round_to_f32();
        Ok(())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn quantizable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_quantizable())
            .collect()
    }

    /// Quantizable layers whose quantization is currently enabled.
    pub fn enabled_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].quant.enabled)
            .collect()
    }

    pub fn set_quant_enabled(&mut self, idx: usize, enabled: bool) -> Result<()> {
        let l = &mut self.layers[idx];
        if enabled && !l.kind.is_quantizable() {
            return Err(Error::Layer {
                layer: l.name.clone(),
                reason: "only linear and conv2d layers can be quantized".into(),
            });
        }
        l.quant.enabled = enabled;
        Ok(())
    }

    /// Enable (or disable) quantization of every quantizable layer.
    pub fn set_all_quant(&mut self, enabled: bool) {
        for l in &mut self.layers {
            if l.kind.is_quantizable() {
                l.quant.enabled = enabled;
            }
        }
    }

    pub fn set_weight_granularity(&mut self, g: WeightGranularity) {
        for l in &mut self.layers {
            l.quant.weight_granularity = g;
        }
    }

    pub fn set_activation_alpha(&mut self, idx: usize, alpha: Option<f64>) -> Result<()> {
        if let Some(a) = alpha {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::NonPositiveRange(a));
            }
        }
        self.layers[idx].quant.activation_alpha = alpha;
        Ok(())
    }

    /// Copy calibrated ranges from `cache` onto every quantizable layer that
    /// has an entry; returns how many layers were updated.
    pub fn attach_calibration(&mut self, cache: &CalibrationCache) -> usize {
        let mut n = 0;
        for l in &mut self.layers {
            if !l.kind.is_quantizable() {
                continue;
            }
            if let Some(a) = cache.alpha(&l.input_tensor()) {
                l.quant.activation_alpha = Some(a);
                n += 1;
            }
        }
        n
    }

    /// Per-sample output shape of every layer.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = self.layer_output_shape(l, &shape).map_err(|e| Error::Layer {
                layer: l.name.clone(),
                reason: e.to_string(),
            })?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn layer_output_shape(&self, l: &Layer, input: &[usize]) -> Result<Vec<usize>> {
        match &l.kind {
            LayerKind::Linear { weight, bias } => {
                let w = self.weight(weight)?;
                let [wi, wo] = *w.shape() else {
                    return Err(Error::shape(format!("linear weight {:?}", w.shape())));
                };
                if input != [wi] {
                    return Err(Error::shape(format!("input {input:?}, weight expects [{wi}]")));
                }
                if let Some(b) = bias {
                    if self.weight(b)?.shape() != [wo] {
                        return Err(Error::shape("linear bias"));
                    }
                }
                Ok(vec![wo])
            }
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let w = self.weight(weight)?;
                let [o, c, kh, kw] = *w.shape() else {
                    return Err(Error::shape(format!("conv weight {:?}", w.shape())));
                };
                let [ic, h, wd] = *input else {
                    return Err(Error::shape(format!("conv input {input:?}")));
                };
                if ic != c {
                    return Err(Error::shape(format!("{ic} channels, kernel expects {c}")));
                }
                if let Some(b) = bias {
                    if self.weight(b)?.shape() != [o] {
                        return Err(Error::shape("conv bias"));
                    }
                }
                let g = ConvGeometry {
                    stride: *stride,
                    padding: *padding,
                };
                Ok(vec![o, conv_output_size(h, kh, g)?, conv_output_size(wd, kw, g)?])
            }
            LayerKind::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let c = *input.first().ok_or_else(|| Error::shape("batch norm of scalar"))?;
                for t in [gamma, beta, mean, var] {
                    if self.weight(t)?.shape() != [c] {
                        return Err(Error::shape(format!("`{t}` must have {c} channels")));
                    }
                }
                Ok(input.to_vec())
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            _ => Ok(input.to_vec()),
        }
    }

    /// Replace every GELU with `ClippedGelu(limit)`.
    pub fn clip_gelu_outputs(&self, limit: f64) -> Result<Model> {
        let mut m = self.clone();
        for l in &mut m.layers {
            if l.kind == LayerKind::Gelu {
                l.kind = LayerKind::ClippedGelu { limit };
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub(crate) fn from_parts_unchecked(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        weights: BTreeMap<String, Tensor>,
    ) -> Self {
        Self {
            input_shape,
            layers,
            weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mlp() -> Model {
        let mut w = BTreeMap::new();
        w.insert("fc1.weight".into(), Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.25 - 0.5));
        w.insert("fc1.bias".into(), Tensor::new(vec![3], vec![0.1, 0.0, -0.1]).unwrap());
        w.insert("fc2.weight".into(), Tensor::from_fn(vec![3, 2], |i| 0.5 - i as f64 * 0.2));
        w.insert("fc2.bias".into(), Tensor::zeros(vec![2]));
        Model::new(
            vec![2],
            vec![
                Layer::linear("fc1"),
                Layer::new("relu", LayerKind::Relu),
                Layer::linear("fc2"),
            ],
            w,
        )
        .unwrap()
    }

    #[test]
    fn shape_inference() {
        assert_eq!(mlp().infer_shapes().unwrap(), vec![vec![3], vec![3], vec![2]]);
    }

    #[test]
    fn rejects_missing_tensor_and_bad_chain() {
        let m = mlp();
        let mut w = m.weights().clone();
        w.remove("fc2.bias");
        assert!(matches!(
            Model::new(vec![2], m.layers().to_vec(), w),
            Err(Error::MissingTensor(_))
        ));
        assert!(Model::new(vec![5], m.layers().to_vec(), m.weights().clone()).is_err());
    }

    #[test]
    fn only_linear_and_conv_quantize() {
        let mut m = mlp();
        assert_eq!(m.quantizable_layers(), vec![0, 2]);
        assert!(m.set_quant_enabled(1, true).is_err());
        m.set_all_quant(true);
        assert_eq!(m.enabled_layers(), vec![0, 2]);
    }

    #[test]
    fn weights_are_stored_at_f32_precision() {
        let mut m = mlp();
        m.set_weight("fc2.bias", Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap())
            .unwrap();
        assert!(m.weight("fc2.bias").unwrap().is_f32_exact());
    }

    #[test]
    fn attach_calibration_by_tensor_name() {
        let mut m = mlp();
        let mut c = CalibrationCache::new();
        c.insert("fc2.input", crate::calib::CalibrationMethod::Max, 2.0);
        assert_eq!(m.attach_calibration(&c), 1);
        assert_eq!(m.layers()[2].quant.activation_alpha, Some(2.0));
        assert_eq!(m.layers()[0].quant.activation_alpha, None);
    }
}
