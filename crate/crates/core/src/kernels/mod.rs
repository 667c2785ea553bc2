//! Integer-domain matrix kernels.
//!
//! With a per-tensor activation scale `s_x` and per-column weight scales
//! `s_w[j]`, the dequantized product factors as
//! `y[i][j] = (1 / (s_x * s_w[j])) * sum_k xq[i][k] * wq[k][j]`, so the sum
//! runs entirely in `i32`. [`matmul_dequant_reference`] evaluates the
//! unfactored form and is the oracle for the factored kernels.

mod conv;

pub use conv::{conv2d, conv2d_int8, conv_output_size, conv_weight_matrix, im2col, ConvGeometry};
pub(crate) use conv::{col2im, nhwc_rows_to_nchw, nchw_to_nhwc_rows};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantParams, QuantizedTensor, RangeSpec, Scheme};
use crate::tensor::Tensor;

/// Largest inner dimension for which an `i32` accumulator cannot overflow
/// with 8-bit operands.
pub const MAX_INNER_DIM: usize = 1 << 15;

const PAR_THRESHOLD: usize = 1 << 16;

/// Quantized `p×n` weight matrix with per-column (or per-tensor) scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QLinearWeights {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scales: Vec<f64>,
    zero_points: Option<Vec<i32>>,
}

impl QLinearWeights {
    pub fn new(
        rows: usize,
        cols: usize,
        data: Vec<i8>,
        scales: Vec<f64>,
        zero_points: Option<Vec<i32>>,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} codes for a {rows}x{cols} weight",
                data.len()
            )));
        }
        if scales.len() != 1 && scales.len() != cols {
            return Err(Error::shape(format!(
                "{} scales for {cols} columns",
                scales.len()
            )));
        }
        if scales.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidParams("weight scales must be positive".into()));
        }
        if let Some(z) = &zero_points {
            if z.len() != cols {
                return Err(Error::shape(format!(
                    "{} zero-points for {cols} columns",
                    z.len()
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            data,
            scales,
            zero_points,
        })
    }

    /// Scale-quantize a real `p×n` matrix with max calibration, either one
    /// scale per column or a single scale for the whole matrix.
    ///
    /// An all-zero column gets scale 1 so that it still quantizes to zeros.
    pub fn quantize_scale(w: &Tensor, per_column: bool, bit_width: u32) -> Result<Self> {
        let params = weight_params(w, per_column, bit_width)?;
        let q = crate::quant::quantize(w, &params)?;
        Self::from_quantized(&q)
    }

    /// Per-column affine quantization over each column's `[min, max]`
    /// (widened to include zero). Only used by the affine demonstration path.
    pub fn quantize_affine(w: &Tensor, bit_width: u32) -> Result<Self> {
        let (p, n) = dims2(w)?;
        let mut ranges = Vec::with_capacity(n);
        for j in 0..n {
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for k in 0..p {
                let v = w.data()[k * n + j];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo == hi {
                hi = 1.0;
            }
            ranges.push(RangeSpec::new(lo, hi)?);
        }
        let params = QuantParams::affine_per_axis(&ranges, 1, bit_width)?;
        let q = crate::quant::quantize(w, &params)?;
        let data = q.data().to_vec();
        Self::new(
            p,
            n,
            data,
            params.scales().to_vec(),
            Some(params.zero_points().to_vec()),
        )
    }

    /// From a quantized `p×n` tensor that is per-tensor or per-axis along
    /// axis 1 (columns).
    pub fn from_quantized(q: &QuantizedTensor) -> Result<Self> {
        if q.shape().len() != 2 {
            return Err(Error::shape(format!("weight of shape {:?}", q.shape())));
        }
        let (p, n) = (q.shape()[0], q.shape()[1]);
        let params = q.params();
        match params.granularity() {
            Granularity::PerTensor | Granularity::PerAxis(1) => {}
            Granularity::PerAxis(a) => {
                return Err(Error::InvalidParams(format!(
                    "weights quantized along axis {a}; expected per-column"
                )))
            }
        }
        let zp = match params.scheme() {
            Scheme::Scale => None,
            Scheme::Affine => {
                let z = params.zero_points();
                Some(if z.len() == 1 { vec![z[0]; n] } else { z.to_vec() })
            }
        };
        Self::new(p, n, q.data().to_vec(), params.scales().to_vec(), zp)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> Option<&[i32]> {
        self.zero_points.as_deref()
    }

    #[inline]
    pub fn scale(&self, j: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[j]
        }
    }

    #[inline]
    pub fn zero_point(&self, j: usize) -> i32 {
        self.zero_points.as_ref().map_or(0, |z| z[j])
    }

    pub fn is_affine(&self) -> bool {
        self.zero_points
            .as_ref()
            .is_some_and(|z| z.iter().any(|&v| v != 0))
    }

    /// Dequantized real matrix.
    pub fn dequantize(&self) -> Tensor {
        let n = self.cols;
        Tensor::from_fn(vec![self.rows, n], |idx| {
            let j = idx % n;
            (self.data[idx] as i32 - self.zero_point(j)) as f64 / self.scale(j)
        })
    }
}

/// Max-calibrated scale parameters for a `p×n` weight matrix.
pub fn weight_params(w: &Tensor, per_column: bool, bit_width: u32) -> Result<QuantParams> {
    let (p, n) = dims2(w)?;
    if per_column {
        let mut alphas = vec![0.0f64; n];
        for k in 0..p {
            for (j, a) in alphas.iter_mut().enumerate() {
                *a = a.max(w.data()[k * n + j].abs());
            }
        }
        for a in &mut alphas {
            if *a == 0.0 {
                *a = ((1u32 << (bit_width - 1)) - 1) as f64;
            }
        }
        QuantParams::scale_per_axis(&alphas, 1, bit_width)
    } else {
        let mut a = w.max_abs();
        if a == 0.0 {
            a = ((1u32 << (bit_width - 1)) - 1) as f64;
        }
        QuantParams::scale(a, bit_width)
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("expected a matrix, got {s:?}"))),
    }
}

/// Integer matrix with one `(scale, zero_point)` per element.
///
/// This is the finest granularity; any coarser layout expands into it.
#[derive(Debug, Clone)]
pub struct ScaledMatrix {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
}

impl ScaledMatrix {
    pub fn from_activation(xq: &QuantizedTensor) -> Result<Self> {
        let (m, p) = match xq.shape() {
            [m, p] => (*m, *p),
            s => return Err(Error::shape(format!("activation of shape {s:?}"))),
        };
        let params = xq.params();
        let idx = params.slice_indexer(xq.shape())?;
        let mut scales = Vec::with_capacity(m * p);
        let mut zps = Vec::with_capacity(m * p);
        for e in 0..m * p {
            let s = idx.slice(e);
            scales.push(params.scales()[s]);
            zps.push(params.zero_points()[s]);
        }
        Ok(Self {
            rows: m,
            cols: p,
            codes: xq.data().iter().map(|&v| v as i32).collect(),
            scales,
            zero_points: zps,
        })
    }

    pub fn from_weights(w: &QLinearWeights) -> Self {
        let n = w.cols;
        let len = w.rows * n;
        Self {
            rows: w.rows,
            cols: n,
            codes: w.data.iter().map(|&v| v as i32).collect(),
            scales: (0..len).map(|e| w.scale(e % n)).collect(),
            zero_points: (0..len).map(|e| w.zero_point(e % n)).collect(),
        }
    }

    fn dequant(&self, e: usize) -> f64 {
        (self.codes[e] - self.zero_points[e]) as f64 / self.scales[e]
    }
}

/// Dequantize every element with its own parameters, then multiply in
/// `f64`.
pub fn matmul_dequant_reference(x: &ScaledMatrix, w: &ScaledMatrix) -> Result<Tensor> {
    if x.cols != w.rows {
        return Err(Error::shape(format!(
            "inner dimensions {} vs {}",
            x.cols, w.rows
        )));
    }
    let (m, p, n) = (x.rows, x.cols, w.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..p {
                acc += x.dequant(i * p + k) * w.dequant(k * n + j);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

fn activation_dims(xq: &QuantizedTensor, w: &QLinearWeights) -> Result<(usize, usize, usize)> {
    let (m, p) = match xq.shape() {
        [m, p] => (*m, *p),
        s => return Err(Error::shape(format!("activation of shape {s:?}"))),
    };
    if p != w.rows {
        return Err(Error::shape(format!("inner dimensions {p} vs {}", w.rows)));
    }
    if p > MAX_INNER_DIM {
        return Err(Error::InnerDimensionTooLarge(p));
    }
    if xq.params().granularity() != Granularity::PerTensor {
        return Err(Error::Granularity);
    }
    Ok((m, p, w.cols))
}

/// `acc[i][j] = sum_k xq[i][k] * wq[k][j]` in `i32`.
fn int_gemm(x: &[i8], w: &[i8], m: usize, p: usize, n: usize) -> Vec<i32> {
    let mut acc = vec![0i32; m * n];
    let row = |(i, out): (usize, &mut [i32])| {
        let xr = &x[i * p..(i + 1) * p];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0 {
                continue;
            }
            let xv = xv as i32;
            let wr = &w[k * n..(k + 1) * n];
            for (o, &wv) in out.iter_mut().zip(wr) {
                *o += xv * wv as i32;
            }
        }
    };
    if m * n * p >= PAR_THRESHOLD && n > 0 {
        acc.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        acc.chunks_mut(n).enumerate().for_each(row);
    }
    acc
}

/// Scale-quantized matmul with the scales factored out of the sum.
///
/// Requires a per-tensor activation scale with zero-point 0 and weights
/// without zero-points; the result is real (`f64`).
pub fn integer_matmul_scale(xq: &QuantizedTensor, w: &QLinearWeights) -> Result<Tensor> {
    let (m, p, n) = activation_dims(xq, w)?;
    if w.is_affine() {
        return Err(Error::AffinePerAxis);
    }
    if xq.params().zero_point() != 0 {
        return Err(Error::InvalidParams(
            "scale kernel needs an activation zero-point of 0; use the affine kernel".into(),
        ));
    }
    let acc = int_gemm(xq.data(), &w.data, m, p, n);
    let sx = xq.params().scale_factor();
    let mult: Vec<f64> = (0..n).map(|j| 1.0 / (sx * w.scale(j))).collect();
    let out = acc
        .iter()
        .enumerate()
        .map(|(e, &a)| a as f64 * mult[e % n])
        .collect();
    Tensor::new(vec![m, n], out)
}

/// The input-independent term of the affine decomposition, one `i32` per
/// output column: `sum_k (wq[k][j] * z_x - z_x * z_w[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineOfflineTerm {
    pub z_x: i32,
    pub per_col: Vec<i32>,
}

pub fn affine_offline_term(w: &QLinearWeights, z_x: i32) -> AffineOfflineTerm {
    let (p, n) = (w.rows, w.cols);
    let mut per_col = vec![0i32; n];
    for k in 0..p {
        for (j, t) in per_col.iter_mut().enumerate() {
            let wq = w.data[k * n + j] as i32;
            *t = t.wrapping_add(wq * z_x - z_x * w.zero_point(j));
        }
    }
    AffineOfflineTerm { z_x, per_col }
}

impl AffineOfflineTerm {
    /// Fold a real bias into the offline term by quantizing it at the
    /// accumulator scale `s_x * s_w[j]`.
    pub fn with_bias(&self, bias: &[f64], s_x: f64, w: &QLinearWeights) -> Result<Self> {
        if bias.len() != self.per_col.len() {
            return Err(Error::shape(format!(
                "bias of {} for {} columns",
                bias.len(),
                self.per_col.len()
            )));
        }
        let per_col = self
            .per_col
            .iter()
            .enumerate()
            .map(|(j, &t)| t.wrapping_sub((bias[j] * s_x * w.scale(j)).round() as i32))
            .collect();
        Ok(Self {
            z_x: self.z_x,
            per_col,
        })
    }
}

/// The three integer terms of an affine matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTerms {
    pub m: usize,
    pub n: usize,
    /// `sum_k xq[i][k] * wq[k][j]`, `m×n`.
    pub gemm: Vec<i32>,
    /// Offline term, per column.
    pub offline: Vec<i32>,
    /// `sum_k xq[i][k] * z_w[j]`, `m×n`.
    pub online: Vec<i32>,
}

impl AffineTerms {
    /// `gemm - offline - online` per output element. Intermediate values
    /// use wrapping arithmetic; the result is exact whenever it fits in i32.
    pub fn combine(&self) -> Vec<i32> {
        let n = self.n;
        self.gemm
            .iter()
            .zip(&self.online)
            .enumerate()
            .map(|(e, (&g, &o))| g.wrapping_sub(self.offline[e % n]).wrapping_sub(o))
            .collect()
    }
}

/// Integer work done by [`integer_matmul_affine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineOpCount {
    /// Multiply-adds in the integer GEMM (term 1).
    pub gemm_macs: usize,
    /// Online work for term 3: `m*p` row-sum adds plus `m*n` multiplies.
    pub online_ops: usize,
    /// Element-wise subtractions of the precomputed term 2.
    pub offline_adds: usize,
}

pub fn affine_terms(
    xq: &QuantizedTensor,
    w: &QLinearWeights,
    offline: &AffineOfflineTerm,
) -> Result<AffineTerms> {
    let (m, p, n) = activation_dims(xq, w)?;
    if xq.params().zero_point() != offline.z_x {
        return Err(Error::InvalidParams(format!(
            "offline term built for z_x={}, activation has z_x={}",
            offline.z_x,
            xq.params().zero_point()
        )));
    }
    if offline.per_col.len() != n {
        return Err(Error::shape("offline term column count"));
    }
    let gemm = int_gemm(xq.data(), &w.data, m, p, n);
    let mut online = vec![0i32; m * n];
    for i in 0..m {
        let row_sum: i32 = xq.data()[i * p..(i + 1) * p].iter().map(|&v| v as i32).sum();
        for j in 0..n {
            online[i * n + j] = row_sum.wrapping_mul(w.zero_point(j));
        }
    }
    Ok(AffineTerms {
        m,
        n,
        gemm,
        offline: offline.per_col.clone(),
        online,
    })
}

/// Affine-quantized matmul via the three-term decomposition.
pub fn integer_matmul_affine(
    xq: &QuantizedTensor,
    w: &QLinearWeights,
    offline: &AffineOfflineTerm,
) -> Result<(Tensor, AffineOpCount)> {
    let terms = affine_terms(xq, w, offline)?;
    let (m, n) = (terms.m, terms.n);
    let p = w.rows;
    let sx = xq.params().scale_factor();
    let out = terms
        .combine()
        .iter()
        .enumerate()
        .map(|(e, &v)| v as f64 * (1.0 / (sx * w.scale(e % n))))
        .collect();
    let count = AffineOpCount {
        gemm_macs: m * n * p,
        online_ops: m * p + m * n,
        offline_adds: m * n,
    };
    Ok((Tensor::new(vec![m, n], out)?, count))
}
