//! Elementwise activations and their derivatives.
//!
//! `erf` comes from `libm` (the fdlibm rational approximations, error well
//! below 1e-7 over the whole real line).

use crate::tensor::Tensor;

/// Global minimum of GELU, attained near x = -0.7518.
pub const GELU_MIN: f64 = -0.169_971_207_479_903_7;
/// Global minimum of Swish, attained near x = -1.2785.
pub const SWISH_MIN: f64 = -0.278_464_542_761_073_7;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn clipped_gelu_scalar(x: f64, limit: f64) -> f64 {
    gelu_scalar(x).min(limit)
}

/// Zero where the clip is active (`GELU(x) > limit`).
pub fn clipped_gelu_grad_scalar(x: f64, limit: f64) -> f64 {
    if gelu_scalar(x) > limit {
        0.0
    } else {
        gelu_grad_scalar(x)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn swish(x: &Tensor) -> Tensor {
    x.map(swish_scalar)
}

pub fn clipped_gelu(x: &Tensor, limit: f64) -> Tensor {
    x.map(|v| clipped_gelu_scalar(v, limit))
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let last = x.shape().last().copied().unwrap_or(1).max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(last) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, scale_params};
    use proptest::prelude::*;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn vanish_at_origin() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(swish_scalar(0.0), 0.0);
    }

    #[test]
    fn relu_example() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn minima_by_dense_scan() {
        let scan = |f: fn(f64) -> f64| {
            (0..=400_000)
                .map(|i| f(-4.0 + i as f64 * 1e-5))
                .fold(f64::INFINITY, f64::min)
        };
        let g = scan(gelu_scalar);
        let s = scan(swish_scalar);
        assert!((g - -0.1700).abs() < 1e-4, "{g}");
        assert!((s - -0.2785).abs() < 1e-4, "{s}");
        assert!((g - GELU_MIN).abs() < 1e-9 && g >= GELU_MIN - 1e-15);
        assert!((s - SWISH_MIN).abs() < 1e-9 && s >= SWISH_MIN - 1e-15);
    }

    #[test]
    fn gelu_saturates() {
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn erf_accuracy_against_series() {
        // Maclaurin series, converged in f64 for |x| <= 2.
        let series = |x: f64| {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        };
        for i in 0..=400 {
            let x = -2.0 + i as f64 * 0.01;
            assert!((libm::erf(x) - series(x)).abs() < 1e-7);
        }
    }

    #[test]
    fn gelu10_grid_examples() {
        let p10 = scale_params(10.0, 8).unwrap();
        assert_eq!(p10.scale_factor(), 12.7);
        assert_eq!(p10.quantize_value(-0.17, 0), -2);
        let p50 = scale_params(50.0, 8).unwrap();
        assert_eq!(p50.quantize_value(-0.17, 0), 0);
        let x = Tensor::from_fn(vec![601], |i| -3.0 + i as f64 * 0.01);
        let q = quantize(&clipped_gelu(&x, 10.0), &p10).unwrap();
        let mut neg: Vec<i8> = q.data().iter().copied().filter(|&c| c < 0).collect();
        neg.sort();
        neg.dedup();
        assert_eq!(neg, vec![-2, -1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap();
        let y = softmax(&x);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(y.data()[3] > 0.999);
    }

    proptest! {
        #[test]
        fn monotone_past_one(a in 1.0f64..20.0, d in 1e-3f64..5.0) {
            prop_assert!(gelu_scalar(a + d) > gelu_scalar(a));
            prop_assert!(swish_scalar(a + d) > swish_scalar(a));
        }

        #[test]
        fn clipped_gelu_bounds(x in -50.0f64..50.0, limit in 0.01f64..20.0) {
            let y = clipped_gelu_scalar(x, limit);
            prop_assert!(y >= GELU_MIN && y <= limit);
            if x <= 0.0 {
                prop_assert_eq!(y, gelu_scalar(x));
            }
        }

        #[test]
        fn derivatives_match_finite_differences(x in -6.0f64..6.0) {
            prop_assert!((gelu_grad_scalar(x) - central(gelu_scalar, x)).abs() < 1e-7);
            prop_assert!((swish_grad_scalar(x) - central(swish_scalar, x)).abs() < 1e-7);
        }
    }
}
