//! Quantization-aware fine-tuning.
//!
//! Fake quantization runs in the forward pass; the backward pass uses the
//! straight-through estimator, passing gradients unchanged inside the
//! representable range and zeroing them outside. Weight ranges are
//! re-derived from the current weights every step (per-channel max);
//! activation ranges stay at their calibrated values unless they are
//! learned.

mod engine;
mod gradcheck;
mod optim;
mod train;

pub use engine::{loss_gradients, FakeQuantMode, Gradients};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{cosine_lr, Sgd};
pub use train::{train, train_logged, train_scalar, ScalarTrainOutcome, TrainConfig};

use crate::error::{Error, Result};
use crate::quant::{fake_quantize, QuantParams};
use crate::tensor::Tensor;

/// A value together with the gradient of the loss with respect to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    value: Tensor,
    grad: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        if value.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "value {:?} vs gradient {:?}",
                value.shape(),
                grad.shape()
            )));
        }
        Ok(Self { value, grad })
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Elementwise membership in the representable range of `params`.
pub fn ste_mask(x: &Tensor, params: &QuantParams) -> Result<Vec<bool>> {
    let idx = params.slice_indexer(x.shape())?;
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.representable_range(idx.slice(i)).contains(v))
        .collect())
}

/// Fake-quantize `x.value`; the returned gradient is `x.grad` (the upstream
/// gradient) masked by [`ste_mask`].
pub fn fake_quant_forward_backward(x: &DualTensor, params: &QuantParams) -> Result<DualTensor> {
    let value = fake_quantize(&x.value, params)?;
    let mask = ste_mask(&x.value, params)?;
    let grad = Tensor::from_fn(x.grad.shape().to_vec(), |i| {
        if mask[i] {
            x.grad.data()[i]
        } else {
            0.0
        }
    });
    Ok(DualTensor { value, grad })
}

/// Symmetric activation range that may be trained.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableRange {
    alpha: f64,
    pub learnable: bool,
    pub grad: f64,
}

/// Learned ranges are projected back to at least this value.
pub const MIN_ALPHA: f64 = 1e-6;

impl LearnableRange {
    pub fn new(alpha: f64, learnable: bool) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::NonPositiveRange(alpha));
        }
        Ok(Self {
            alpha,
            learnable,
            grad: 0.0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Set alpha, projecting onto `[MIN_ALPHA, inf)`.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = if alpha.is_finite() { alpha.max(MIN_ALPHA) } else { self.alpha };
    }
}

/// Gradient of the loss with respect to the clip threshold of
/// `clip(x, -alpha, alpha)`: `+g` where `x > alpha`, `-g` where
/// `x < -alpha`, summed. Also accumulated into `range.grad`.
pub fn pact_range_backward(x: &DualTensor, range: &mut LearnableRange) -> f64 {
    let g = alpha_grad(x.value.data(), x.grad.data(), range.alpha);
    if range.learnable {
        range.grad += g;
    }
    g
}

pub(crate) fn alpha_grad(x: &[f64], g: &[f64], alpha: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&v, &g)| {
            if v > alpha {
                g
            } else if v < -alpha {
                -g
            } else {
                0.0
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{affine_params, scale_params, RangeSpec};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn ste_examples() {
        let p = scale_params(1.0, 8).unwrap();
        let inside = DualTensor::new(t(&[0.3]), t(&[1.0])).unwrap();
        assert_eq!(fake_quant_forward_backward(&inside, &p).unwrap().grad().data(), &[1.0]);
        let outside = DualTensor::new(t(&[2.0]), t(&[1.0])).unwrap();
        let out = fake_quant_forward_backward(&outside, &p).unwrap();
        assert_eq!(out.grad().data(), &[0.0]);
        assert_eq!(out.value().data(), &[1.0]);
    }

    #[test]
    fn pact_examples() {
        let mut r = LearnableRange::new(1.0, true).unwrap();
        let inside = DualTensor::new(t(&[0.5, -0.9, 0.0]), t(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(pact_range_backward(&inside, &mut r), 0.0);
        let one = DualTensor::new(t(&[5.0]), t(&[0.7])).unwrap();
        assert_eq!(pact_range_backward(&one, &mut r), 0.7);
        // L = g1 * clip(5) + g2 * clip(-5); dL/dalpha = g1 - g2.
        let g = 0.4;
        let sym = DualTensor::new(t(&[5.0, -5.0]), t(&[g, -g])).unwrap();
        let analytic = pact_range_backward(&sym, &mut r);
        let loss = |a: f64| g * 5f64.clamp(-a, a) - g * (-5f64).clamp(-a, a);
        let h = 1e-6;
        let fd = (loss(1.0 + h) - loss(1.0 - h)) / (2.0 * h);
        assert!((analytic - fd).abs() < 1e-6);
        assert!((analytic - 2.0 * g).abs() < 1e-15);
        assert!((r.grad - (0.7 + 2.0 * g)).abs() < 1e-15);
    }

    #[test]
    fn projection_keeps_alpha_positive() {
        let mut r = LearnableRange::new(0.5, true).unwrap();
        r.set_alpha(-3.0);
        assert_eq!(r.alpha(), MIN_ALPHA);
        assert!(LearnableRange::new(0.0, true).is_err());
    }

    proptest! {
        #[test]
        fn mask_is_range_membership(
            xs in prop::collection::vec(-3.0f64..3.0, 1..64),
            lo in -2.0f64..-0.1,
            hi in 0.1f64..2.0,
        ) {
            let x = t(&xs);
            for p in [scale_params(hi, 8).unwrap(), affine_params(RangeSpec::new(lo, hi).unwrap(), 8).unwrap()] {
                let r = p.representable_range(0);
                let m = ste_mask(&x, &p).unwrap();
                for (v, inside) in xs.iter().zip(m) {
                    prop_assert_eq!(inside, *v >= r.beta && *v <= r.alpha);
                }
            }
        }
    }
}
