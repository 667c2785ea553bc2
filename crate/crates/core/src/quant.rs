//! Range mapping between reals and b-bit signed integers.
//!
//! Two schemes are supported. Affine maps `[beta, alpha]` onto the full
//! integer range `[-2^(b-1), 2^(b-1)-1]` with an integer zero-point. Scale
//! maps `[-alpha, alpha]` onto the symmetric range `[-(2^(b-1)-1), 2^(b-1)-1]`
//! and has no zero-point.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`), and `s*x + z`
//! is evaluated in `f64` before rounding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Affine,
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One `(scale, zero_point)` pair per slice along the given axis.
    PerAxis(usize),
}

/// Representable real interval `[beta, alpha]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSpec {
    pub beta: f64,
    pub alpha: f64,
}

impl RangeSpec {
    pub fn new(beta: f64, alpha: f64) -> Result<Self> {
        if !beta.is_finite() || !alpha.is_finite() {
            return Err(Error::InvalidRange { beta, alpha });
        }
        if beta == alpha {
            return Err(Error::EmptyRange(alpha));
        }
        if beta > alpha {
            return Err(Error::InvalidRange { beta, alpha });
        }
        Ok(Self { beta, alpha })
    }

    /// `[-alpha, alpha]`.
    pub fn symmetric(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::NonPositiveRange(alpha));
        }
        Ok(Self {
            beta: -alpha,
            alpha,
        })
    }

    pub fn is_symmetric(&self) -> bool {
        self.beta == -self.alpha && self.alpha > 0.0
    }

    pub fn contains(&self, x: f64) -> bool {
        self.beta <= x && x <= self.alpha
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitWidth(bits))
    }
}

/// `clip(x, l, u)`: `l` below the interval, `u` above it, `x` otherwise.
pub fn clip(x: f64, l: f64, u: f64) -> f64 {
    if x < l {
        l
    } else if x > u {
        u
    } else {
        x
    }
}

/// Scale, zero-point, bit width and granularity of a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    scheme: Scheme,
    bit_width: u32,
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
}

impl QuantParams {
    /// Affine parameters for `range`: `s = (2^b - 1)/(alpha - beta)`,
    /// `z = -round(beta*s) - 2^(b-1)`.
    pub fn affine(range: RangeSpec, bit_width: u32) -> Result<Self> {
        let (s, z) = affine_pair(range, bit_width)?;
        Ok(Self {
            scheme: Scheme::Affine,
            bit_width,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            zero_points: vec![z],
        })
    }

    /// Scale parameters for `[-alpha, alpha]`: `s = (2^(b-1) - 1)/alpha`.
    pub fn scale(alpha: f64, bit_width: u32) -> Result<Self> {
        let s = scale_factor(alpha, bit_width)?;
        Ok(Self {
            scheme: Scheme::Scale,
            bit_width,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            zero_points: vec![0],
        })
    }

    pub fn scale_per_axis(alphas: &[f64], axis: usize, bit_width: u32) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidParams("no slices".into()));
        }
        let scales = alphas
            .iter()
            .map(|&a| scale_factor(a, bit_width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scheme: Scheme::Scale,
            bit_width,
            granularity: Granularity::PerAxis(axis),
            zero_points: vec![0; scales.len()],
            scales,
        })
    }

    pub fn affine_per_axis(ranges: &[RangeSpec], axis: usize, bit_width: u32) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidParams("no slices".into()));
        }
        let (scales, zero_points) = ranges
            .iter()
            .map(|&r| affine_pair(r, bit_width))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            scheme: Scheme::Affine,
            bit_width,
            granularity: Granularity::PerAxis(axis),
            scales,
            zero_points,
        })
    }

    /// Build directly from scales and zero-points, validating every invariant.
    pub fn from_parts(
        scheme: Scheme,
        bit_width: u32,
        granularity: Granularity,
        scales: Vec<f64>,
        zero_points: Vec<i32>,
    ) -> Result<Self> {
        check_bits(bit_width)?;
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::InvalidParams("scale/zero-point count mismatch".into()));
        }
        if granularity == Granularity::PerTensor && scales.len() != 1 {
            return Err(Error::InvalidParams("per-tensor params need one scale".into()));
        }
        if scales.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidParams("scales must be positive and finite".into()));
        }
        let p = Self {
            scheme,
            bit_width,
            granularity,
            scales,
            zero_points,
        };
        let ok = p.zero_points.iter().all(|&z| match scheme {
            Scheme::Scale => z == 0,
            Scheme::Affine => z >= p.qmin() && z <= p.qmax(),
        });
        if !ok {
            return Err(Error::InvalidParams("zero-point outside integer range".into()));
        }
        Ok(p)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    /// Scale of a per-tensor parameter set (first slice otherwise).
    pub fn scale_factor(&self) -> f64 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_points[0]
    }

    pub fn num_slices(&self) -> usize {
        self.scales.len()
    }

    /// Smallest integer code.
    pub fn qmin(&self) -> i32 {
        match self.scheme {
            Scheme::Affine => -(1 << (self.bit_width - 1)),
            Scheme::Scale => -((1 << (self.bit_width - 1)) - 1),
        }
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bit_width - 1)) - 1
    }

    /// Real interval that maps onto `[qmin, qmax]` for slice `i`.
    pub fn representable_range(&self, i: usize) -> RangeSpec {
        let (s, z) = (self.scales[i], self.zero_points[i] as f64);
        RangeSpec {
            beta: (self.qmin() as f64 - z) / s,
            alpha: (self.qmax() as f64 - z) / s,
        }
    }

    /// `clip(round(s*x + z), qmin, qmax)` for slice `i`.
    #[inline]
    pub fn quantize_value(&self, x: f64, i: usize) -> i32 {
        let (s, z) = (self.scales[i], self.zero_points[i]);
        let v = (s * x + z as f64).round();
        clip(v, self.qmin() as f64, self.qmax() as f64) as i32
    }

    /// `(q - z)/s` for slice `i`.
    #[inline]
    pub fn dequantize_value(&self, q: i32, i: usize) -> f64 {
        (q - self.zero_points[i]) as f64 / self.scales[i]
    }

    /// Slice index of every element of a tensor with `shape`.
    pub(crate) fn slice_indexer(&self, shape: &[usize]) -> Result<SliceIndexer> {
        match self.granularity {
            Granularity::PerTensor => Ok(SliceIndexer {
                stride: 1,
                extent: 1,
            }),
            Granularity::PerAxis(axis) => {
                if axis >= shape.len() || shape[axis] != self.scales.len() {
                    return Err(Error::shape(format!(
                        "{} slices along axis {axis} of shape {shape:?}",
                        self.scales.len()
                    )));
                }
                Ok(SliceIndexer {
                    stride: shape[axis + 1..].iter().product(),
                    extent: shape[axis],
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SliceIndexer {
    stride: usize,
    extent: usize,
}

impl SliceIndexer {
    #[inline]
    pub(crate) fn slice(&self, flat: usize) -> usize {
        if self.extent == 1 {
            0
        } else {
            (flat / self.stride) % self.extent
        }
    }
}

fn affine_pair(range: RangeSpec, bit_width: u32) -> Result<(f64, i32)> {
    check_bits(bit_width)?;
    let range = RangeSpec::new(range.beta, range.alpha)?;
    let s = ((1u32 << bit_width) - 1) as f64 / (range.alpha - range.beta);
    let z = -(range.beta * s).round() - (1u32 << (bit_width - 1)) as f64;
    let (lo, hi) = (-(1i64 << (bit_width - 1)), (1i64 << (bit_width - 1)) - 1);
    if z < lo as f64 || z > hi as f64 {
        return Err(Error::InvalidRange {
            beta: range.beta,
            alpha: range.alpha,
        });
    }
    Ok((s, z as i32))
}

fn scale_factor(alpha: f64, bit_width: u32) -> Result<f64> {
    check_bits(bit_width)?;
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::NonPositiveRange(alpha));
    }
    Ok(((1u32 << (bit_width - 1)) - 1) as f64 / alpha)
}

/// Convenience wrapper over [`QuantParams::affine`].
pub fn affine_params(range: RangeSpec, bit_width: u32) -> Result<QuantParams> {
    QuantParams::affine(range, bit_width)
}

/// Convenience wrapper over [`QuantParams::scale`].
pub fn scale_params(alpha: f64, bit_width: u32) -> Result<QuantParams> {
    QuantParams::scale(alpha, bit_width)
}

/// Integer tensor plus the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, params: QuantParams) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} for {} codes",
                data.len()
            )));
        }
        params.slice_indexer(&shape)?;
        let (lo, hi) = (params.qmin(), params.qmax());
        if data.iter().any(|&q| (q as i32) < lo || (q as i32) > hi) {
            return Err(Error::InvalidParams("code outside integer range".into()));
        }
        Ok(Self {
            shape,
            data,
            params,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

pub fn quantize(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    let idx = params.slice_indexer(x.shape())?;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.quantize_value(v, idx.slice(i)) as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        data,
        params: params.clone(),
    })
}

pub fn dequantize(xq: &QuantizedTensor) -> Tensor {
    let p = &xq.params;
    let idx = p
        .slice_indexer(&xq.shape)
        .expect("validated at construction");
    let data = xq
        .data
        .iter()
        .enumerate()
        .map(|(i, &q)| p.dequantize_value(q as i32, idx.slice(i)))
        .collect();
    Tensor::new(xq.shape.clone(), data).expect("same shape")
}

/// `dequantize(quantize(x))`.
pub fn fake_quantize(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, params)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn affine_params_examples() {
        let p = affine_params(RangeSpec::new(-1.0, 1.0).unwrap(), 8).unwrap();
        assert_eq!(p.scale_factor(), 127.5);
        assert_eq!(p.zero_point(), 0);

        let p = affine_params(RangeSpec::new(0.0, 255.0).unwrap(), 8).unwrap();
        assert_eq!(p.scale_factor(), 1.0);
        assert_eq!(p.zero_point(), -128);

        let p = affine_params(RangeSpec::new(-0.5, 1.5).unwrap(), 8).unwrap();
        assert_eq!(p.scale_factor(), 127.5);
        assert_eq!(p.zero_point(), -64);
    }

    #[test]
    fn affine_rejects_empty_range() {
        assert!(matches!(
            affine_params(RangeSpec { beta: 1.0, alpha: 1.0 }, 8),
            Err(Error::EmptyRange(_))
        ));
        assert!(RangeSpec::new(2.0, 2.0).is_err());
    }

    #[test]
    fn scale_params_examples() {
        assert_eq!(scale_params(1.0, 8).unwrap().scale_factor(), 127.0);
        assert_eq!(scale_params(127.0, 8).unwrap().scale_factor(), 1.0);
        assert_eq!(scale_params(10.0, 4).unwrap().scale_factor(), 0.7);
        assert!(matches!(scale_params(0.0, 8), Err(Error::NonPositiveRange(_))));
        assert!(matches!(scale_params(-1.0, 8), Err(Error::NonPositiveRange(_))));
        assert!(matches!(scale_params(1.0, 9), Err(Error::BitWidth(9))));
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clip(5.0, -3.0, 3.0), 3.0);
        assert_eq!(clip(-5.0, -3.0, 3.0), -3.0);
        assert_eq!(clip(1.0, -3.0, 3.0), 1.0);
    }

    #[test]
    fn quantize_examples() {
        let s = scale_params(1.0, 8).unwrap();
        assert_eq!(quantize(&t(&[1.0, 2.0]), &s).unwrap().data(), &[127, 127]);
        assert_eq!(quantize(&t(&[-2.0]), &s).unwrap().data(), &[-127]);

        let a = affine_params(RangeSpec::new(-1.0, 1.0).unwrap(), 8).unwrap();
        // round(-191.25) = -191 clips to -128
        assert_eq!(quantize(&t(&[-1.5]), &a).unwrap().data(), &[-128]);
    }

    #[test]
    fn dequantize_examples() {
        let s = scale_params(1.0, 8).unwrap();
        let q = QuantizedTensor::new(vec![1], vec![127], s).unwrap();
        assert_eq!(dequantize(&q).data(), &[1.0]);

        let a = affine_params(RangeSpec::new(-1.0, 1.0).unwrap(), 8).unwrap();
        let q = QuantizedTensor::new(vec![1], vec![0], a).unwrap();
        assert_eq!(dequantize(&q).data(), &[0.0]);

        let a = affine_params(RangeSpec::new(-0.5, 1.5).unwrap(), 8).unwrap();
        let q = QuantizedTensor::new(vec![1], vec![-64], a).unwrap();
        assert_eq!(dequantize(&q).data(), &[0.0]);
    }

    #[test]
    fn fake_quantize_examples() {
        let s = scale_params(12.7, 8).unwrap();
        assert_eq!(s.scale_factor(), 10.0);
        assert_eq!(fake_quantize(&t(&[0.26]), &s).unwrap().data(), &[0.3]);
        assert_eq!(fake_quantize(&t(&[0.0]), &s).unwrap().data(), &[0.0]);
        let s = scale_params(1.0, 8).unwrap();
        assert_eq!(fake_quantize(&t(&[100.0]), &s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn scale_codes_never_use_minus_128() {
        let s = scale_params(1.0, 8).unwrap();
        assert_eq!(s.qmin(), -127);
        assert_eq!(quantize(&t(&[-1e9]), &s).unwrap().data(), &[-127]);
    }

    #[test]
    fn per_axis_uses_slice_scale() {
        let p = QuantParams::scale_per_axis(&[1.0, 10.0], 1, 8).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.5, 10.0]).unwrap();
        assert_eq!(quantize(&x, &p).unwrap().data(), &[127, 13, 64, 127]);
        let bad = Tensor::zeros(vec![2, 3]);
        assert!(quantize(&bad, &p).is_err());
    }

    #[test]
    fn quantized_tensor_rejects_out_of_range_codes() {
        let s = scale_params(1.0, 8).unwrap();
        assert!(QuantizedTensor::new(vec![1], vec![-128], s).is_err());
        let s4 = scale_params(1.0, 4).unwrap();
        assert!(QuantizedTensor::new(vec![1], vec![8], s4).is_err());
    }

    fn arb_params() -> impl Strategy<Value = QuantParams> {
        prop_oneof![
            (0.01f64..100.0, 2u32..=8).prop_map(|(a, b)| scale_params(a, b).unwrap()),
            (-50.0f64..-0.01, 0.01f64..50.0, 2u32..=8)
                .prop_map(|(lo, hi, b)| affine_params(RangeSpec::new(lo, hi).unwrap(), b).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn round_trip_contraction(p in arb_params(), u in 0.0f64..=1.0) {
            let r = p.representable_range(0);
            let x = r.beta + u * (r.alpha - r.beta);
            let fq = fake_quantize(&t(&[x]), &p).unwrap().data()[0];
            let s = p.scale_factor();
            prop_assert!((fq - x).abs() <= 0.5 / s * (1.0 + 1e-12));
        }

        #[test]
        fn outside_range_saturates(p in arb_params(), d in 0.001f64..1e3) {
            let r = p.representable_range(0);
            let hi = fake_quantize(&t(&[r.alpha + d]), &p).unwrap().data()[0];
            let lo = fake_quantize(&t(&[r.beta - d]), &p).unwrap().data()[0];
            prop_assert_eq!(hi, p.dequantize_value(p.qmax(), 0));
            prop_assert_eq!(lo, p.dequantize_value(p.qmin(), 0));
        }

        #[test]
        fn idempotent(p in arb_params(), x in -200.0f64..200.0) {
            let once = fake_quantize(&t(&[x]), &p).unwrap();
            let twice = fake_quantize(&once, &p).unwrap();
            prop_assert_eq!(once.data()[0].to_bits(), twice.data()[0].to_bits());
        }

        #[test]
        fn affine_zero_exact(lo in -50.0f64..-0.01, hi in 0.01f64..50.0, b in 2u32..=8) {
            let p = affine_params(RangeSpec::new(lo, hi).unwrap(), b).unwrap();
            prop_assert_eq!(fake_quantize(&t(&[0.0]), &p).unwrap().data()[0], 0.0);
        }

        #[test]
        fn scale_symmetry(a in 0.01f64..100.0, b in 2u32..=8, x in -200.0f64..200.0) {
            let p = scale_params(a, b).unwrap();
            let q = quantize(&t(&[x, -x]), &p).unwrap();
            prop_assert_eq!(q.data()[1], -q.data()[0]);
        }

        #[test]
        fn monotone(p in arb_params(), x in -200.0f64..200.0, d in 0.0f64..50.0) {
            let q = quantize(&t(&[x, x + d]), &p).unwrap();
            prop_assert!(q.data()[0] <= q.data()[1]);
        }

        #[test]
        fn grid_membership(p in arb_params(), x in -200.0f64..200.0) {
            let q = quantize(&t(&[x]), &p).unwrap();
            let k = q.data()[0] as i32;
            prop_assert!(k >= p.qmin() && k <= p.qmax());
            let xh = dequantize(&q).data()[0];
            prop_assert_eq!(xh, (k - p.zero_point()) as f64 / p.scale_factor());
        }
    }
}
