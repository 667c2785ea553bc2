//! Convolution lowered to matrix multiplication through a patch matrix.
//!
//! Layouts: activations NCHW, kernels OIHW. The patch matrix has one row per
//! output position `(n, oy, ox)` and one column per `(c, ky, kx)`; the kernel
//! becomes a `(C*KH*KW) × O` matrix, so per-output-channel weight scales are
//! exactly per-column scales of the lowered GEMM.

use super::{integer_matmul_scale, QLinearWeights};
use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, g: ConvGeometry) -> Result<usize> {
    if g.stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    let padded = input + 2 * g.padding;
    if kernel > padded || kernel == 0 {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / g.stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub(crate) fn new(x_shape: &[usize], kh: usize, kw: usize, g: ConvGeometry) -> Result<Self> {
        let [n, c, h, w] = x_shape else {
            return Err(Error::shape(format!("conv input {x_shape:?}, expected NCHW")));
        };
        Ok(Self {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            kh,
            kw,
            oh: conv_output_size(*h, kh, g)?,
            ow: conv_output_size(*w, kw, g)?,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Input offset for patch entry, or `None` inside the padding.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn source(&self, g: ConvGeometry, b: usize, oy: usize, ox: usize, ci: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some(((b * self.c + ci) * self.h + iy as usize) * self.w + ix as usize)
    }
}

fn im2col_dims<T: Copy + Default>(x: &[T], d: ConvDims, g: ConvGeometry) -> Vec<T> {
    let cols = d.cols();
    let mut out = vec![T::default(); d.rows() * cols];
    for b in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let r = (b * d.oh + oy) * d.ow + ox;
                let row = &mut out[r * cols..(r + 1) * cols];
                for ci in 0..d.c {
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            if let Some(s) = d.source(g, b, oy, ox, ci, ky, kx) {
                                row[(ci * d.kh + ky) * d.kw + kx] = x[s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch matrix of an NCHW tensor: `(N*OH*OW) × (C*KH*KW)`.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, g: ConvGeometry) -> Result<Tensor> {
    let d = ConvDims::new(x.shape(), kh, kw, g)?;
    Tensor::new(vec![d.rows(), d.cols()], im2col_dims(x.data(), d, g))
}

/// Scatter-add a patch-matrix gradient back onto the NCHW input.
pub(crate) fn col2im(cols: &Tensor, x_shape: &[usize], kh: usize, kw: usize, g: ConvGeometry) -> Result<Tensor> {
    let d = ConvDims::new(x_shape, kh, kw, g)?;
    let nc = d.cols();
    let mut out = Tensor::zeros(x_shape.to_vec());
    let o = out.data_mut();
    let src = cols.data();
    for b in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let r = (b * d.oh + oy) * d.ow + ox;
                for ci in 0..d.c {
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            if let Some(s) = d.source(g, b, oy, ox, ci, ky, kx) {
                                o[s] += src[r * nc + (ci * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// OIHW kernel as a `(C*KH*KW) × O` matrix.
pub fn conv_weight_matrix(w: &Tensor) -> Result<Tensor> {
    let [o, c, kh, kw] = w.shape() else {
        return Err(Error::shape(format!("conv kernel {:?}, expected OIHW", w.shape())));
    };
    w.clone().reshape(vec![*o, c * kh * kw])?.transpose2()
}

/// `(N*OH*OW) × O` rows to NCHW.
pub(crate) fn nhwc_rows_to_nchw(rows: &[f64], n: usize, oh: usize, ow: usize, o: usize) -> Tensor {
    let mut out = vec![0.0; rows.len()];
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let r = (b * oh + y) * ow + x;
                for c in 0..o {
                    out[((b * o + c) * oh + y) * ow + x] = rows[r * o + c];
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).expect("consistent dims")
}

/// NCHW to `(N*H*W) × C` rows.
pub(crate) fn nchw_to_nhwc_rows(t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = t.shape() else {
        return Err(Error::shape(format!("expected NCHW, got {:?}", t.shape())));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    let mut out = vec![0.0; t.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[((b * h + y) * w + x) * c + ch] = t.data()[((b * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(vec![n * h * w, c], out)
}

fn add_bias_rows(rows: &mut [f64], bias: Option<&[f64]>, o: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::shape(format!("bias of {} for {o} channels", b.len())));
        }
        for row in rows.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Ok(())
}

/// Real convolution through im2col and a real GEMM.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: ConvGeometry) -> Result<Tensor> {
    let [o, ci, kh, kw] = *w.shape() else {
        return Err(Error::shape(format!("conv kernel {:?}, expected OIHW", w.shape())));
    };
    let d = ConvDims::new(x.shape(), kh, kw, g)?;
    if d.c != ci {
        return Err(Error::shape(format!("{} input channels, kernel expects {ci}", d.c)));
    }
    let patches = im2col(x, kh, kw, g)?;
    let mut rows = matmul(&patches, &conv_weight_matrix(w)?)?.into_data();
    add_bias_rows(&mut rows, bias, o)?;
    Ok(nhwc_rows_to_nchw(&rows, d.n, d.oh, d.ow, o))
}

/// Quantized convolution: int8 patch matrix times per-output-channel
/// quantized kernel matrix, accumulated in `i32`.
pub fn conv2d_int8(
    xq: &QuantizedTensor,
    w: &QLinearWeights,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    g: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::new(xq.shape(), kh, kw, g)?;
    if d.cols() != w.rows() {
        return Err(Error::shape(format!(
            "patch width {} vs kernel matrix rows {}",
            d.cols(),
            w.rows()
        )));
    }
    let patches = QuantizedTensor::new(
        vec![d.rows(), d.cols()],
        im2col_dims(xq.data(), d, g),
        xq.params().clone(),
    )?;
    let mut rows = integer_matmul_scale(&patches, w)?.into_data();
    add_bias_rows(&mut rows, bias, w.cols())?;
    Ok(nhwc_rows_to_nchw(&rows, d.n, d.oh, d.ow, w.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fake_quantize, quantize, scale_params};
    use rand::{Rng, SeedableRng};

    fn direct_conv(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: ConvGeometry) -> Tensor {
        let [n, c, h, wd] = *x.shape() else { panic!() };
        let [o, _, kh, kw] = *w.shape() else { panic!() };
        let oh = (h + 2 * g.padding - kh) / g.stride + 1;
        let ow = (wd + 2 * g.padding - kw) / g.stride + 1;
        let mut out = Tensor::zeros(vec![n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (xx * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pointwise_conv_is_linear_layer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
        let w = rand_tensor(&mut rng, vec![5, 3, 1, 1]);
        let y = conv2d(&x, &w, None, ConvGeometry::default()).unwrap();
        let rows = nchw_to_nhwc_rows(&x).unwrap();
        let lin = matmul(&rows, &conv_weight_matrix(&w).unwrap()).unwrap();
        let expect = nhwc_rows_to_nchw(lin.data(), 2, 4, 4, 5);
        assert_eq!(y, expect);
    }

    #[test]
    fn centre_tap_kernel_reproduces_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![1, 1, 5, 5]);
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let g = ConvGeometry { stride: 1, padding: 1 };
        assert_eq!(conv2d(&x, &w, None, g).unwrap(), x);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeometry { stride, padding };
            let x = rand_tensor(&mut rng, vec![1, 2, 5, 5]);
            let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
            let b = [0.1, -0.2, 0.3];
            let y = conv2d(&x, &w, Some(&b), g).unwrap();
            let r = direct_conv(&x, &w, Some(&b), g);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::zeros(vec![1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, ConvGeometry::default()).is_err());
        let g = ConvGeometry { stride: 1, padding: 2 };
        assert!(conv2d(&x, &w, None, g).is_ok());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeometry { stride: 2, padding: 1 };
        let x = rand_tensor(&mut rng, vec![2, 2, 5, 4]);
        let cols = im2col(&x, 3, 3, g).unwrap();
        let r = rand_tensor(&mut rng, cols.shape().to_vec());
        let lhs: f64 = cols.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&r, x.shape(), 3, 3, g).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn quantized_conv_matches_fake_quant_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeometry { stride: 1, padding: 1 };
        let x = rand_tensor(&mut rng, vec![1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let xp = scale_params(x.max_abs(), 8).unwrap();
        let wm = conv_weight_matrix(&w).unwrap();
        let qw = QLinearWeights::quantize_scale(&wm, true, 8).unwrap();
        let y = conv2d_int8(&quantize(&x, &xp).unwrap(), &qw, 3, 3, None, g).unwrap();

        let xf = fake_quantize(&x, &xp).unwrap();
        let wf = qw.dequantize().transpose2().unwrap().reshape(vec![3, 2, 3, 3]).unwrap();
        let r = direct_conv(&xf, &wf, None, g);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }
}
