//! 3D convolution and transposed convolution with analytic gradients.
//!
//! Both are lowered to GEMM through an explicit column buffer. Weights use
//! the `[C_out, C_in, k, k, k]` layout for convolution and `[C_in, C_out, k,
//! k, k]` for transposed convolution, so a deconvolution sharing a
//! convolution's weight buffer is exactly its data adjoint.

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
#[inline]
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Gather input patches into a `[C*k^3, P_out]` row-major buffer.
fn im2col<T: Scalar>(input: &[T], g: &Geometry) -> Vec<T> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let p = g.pad as isize;
    let s = g.stride;
    let cols = g.cols();
    let mut col = vec![T::zero(); g.rows() * cols];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    // valid ox range: 0 <= ox*s + kx - p < w
                    let ox_lo = ceil_div_nonneg(p - kx as isize, s as isize);
                    let ox_hi = ((w as isize - 1 + p - kx as isize).div_euclid(s as isize) + 1)
                        .clamp(0, ow as isize);
                    for oz in 0..od {
                        let iz = (oz * s + kz) as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[(iz as usize * h + iy as usize) * w..][..w];
                            let out = &mut dst[(oz * oh + oy) * ow..][..ow];
                            if s == 1 {
                                let lo = ox_lo as usize;
                                let hi = ox_hi.max(ox_lo) as usize;
                                if hi > lo {
                                    let off = (lo as isize + kx as isize - p) as usize;
                                    out[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                                }
                            } else {
                                for ox in ox_lo.max(0) as usize..ox_hi.max(0) as usize {
                                    out[ox] = src[(ox * s + kx) - p as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

#[inline]
fn ceil_div_nonneg(a: isize, b: isize) -> isize {
    if a <= 0 {
        0
    } else {
        (a + b - 1) / b
    }
}

/// Scatter-add a column buffer back onto the input grid.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, out: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let p = g.pad as isize;
    let s = g.stride;
    let cols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * cols..(row + 1) * cols];
                    let ox_lo = ceil_div_nonneg(p - kx as isize, s as isize).max(0) as usize;
                    let ox_hi = ((w as isize - 1 + p - kx as isize).div_euclid(s as isize) + 1)
                        .clamp(0, ow as isize) as usize;
                    for oz in 0..od {
                        let iz = (oz * s + kz) as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[(iz as usize * h + iy as usize) * w..][..w];
                            let s_row = &src[(oz * oh + oy) * ow..][..ow];
                            if s == 1 && ox_hi > ox_lo {
                                let off = (ox_lo as isize + kx as isize - p) as usize;
                                for (a, &b) in dst[off..off + (ox_hi - ox_lo)]
                                    .iter_mut()
                                    .zip(&s_row[ox_lo..ox_hi])
                                {
                                    *a += b;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    dst[(ox * s + kx) - p as usize] += s_row[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn spatial_of(t: &Tensor<impl Scalar>, op: &'static str) -> Result<[usize; 3]> {
    if t.shape().len() != 4 {
        return Err(Error::shape(op, &[0, 0, 0, 0], t.shape()));
    }
    Ok(t.spatial())
}

fn check_conv(
    input: &Tensor<impl Scalar>,
    weight: &Tensor<impl Scalar>,
    stride: usize,
    pad: usize,
    op: &'static str,
) -> Result<(Geometry, usize)> {
    let sp = spatial_of(input, op)?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || ws[1] != input.channels() {
        return Err(Error::shape(op, &[0, input.channels(), 0, 0, 0], ws));
    }
    let k = ws[2];
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] =
            conv_out_extent(sp[a], k, stride, pad).ok_or_else(|| Error::shape(op, &[k; 3], &sp))?;
    }
    Ok((
        Geometry {
            channels: input.channels(),
            input: sp,
            output,
            kernel: k,
            stride,
            pad,
        },
        ws[0],
    ))
}

/// Cross-correlation of `[C_in, D, H, W]` with `[C_out, C_in, k, k, k]`.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, co) = check_conv(input, weight, stride, pad, "conv3d_forward")?;
    bias.expect_shape("conv3d_forward bias", &[co])?;
    let p = g.cols();
    let kk = g.rows();
    let mut out = vec![T::zero(); co * p];
    for (c, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(bias.data()[c]);
    }
    let owned;
    let col: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    T::gemm(
        co,
        kk,
        p,
        T::one(),
        (weight.data(), kk as isize, 1),
        (col, p as isize, 1),
        T::one(),
        (&mut out, p as isize, 1),
    );
    Tensor::from_vec(&[co, g.output[0], g.output[1], g.output[2]], out)
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let (g, co) = check_conv(input, weight, stride, pad, "conv3d_backward")?;
    grad_out.expect_shape(
        "conv3d_backward grad_out",
        &[co, g.output[0], g.output[1], g.output[2]],
    )?;
    let p = g.cols();
    let kk = g.rows();
    let go = grad_out.data();

    let bias: Vec<T> = go.chunks(p).map(|c| c.iter().copied().sum()).collect();

    let owned;
    let col: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let mut gw = vec![T::zero(); co * kk];
    // gW[co, K] = gout[co, P] * col^T[P, K]
    T::gemm(
        co,
        p,
        kk,
        T::one(),
        (go, p as isize, 1),
        (col, 1, p as isize),
        T::zero(),
        (&mut gw, kk as isize, 1),
    );
    // gcol[K, P] = W^T[K, co] * gout[co, P]
    let mut gcol = vec![T::zero(); kk * p];
    T::gemm(
        kk,
        co,
        p,
        T::one(),
        (weight.data(), 1, kk as isize),
        (go, p as isize, 1),
        T::zero(),
        (&mut gcol, p as isize, 1),
    );
    let gin = if g.is_pointwise() {
        gcol
    } else {
        let mut gin = vec![T::zero(); input.len()];
        col2im(&gcol, &g, &mut gin);
        gin
    };
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[co], bias)?,
    })
}

/// Output extent of a transposed convolution along one axis.
#[inline]
pub fn deconv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input - 1) * stride + kernel).checked_sub(2 * pad)
}

fn check_deconv(
    input: &Tensor<impl Scalar>,
    weight: &Tensor<impl Scalar>,
    stride: usize,
    pad: usize,
    op: &'static str,
) -> Result<Geometry> {
    let sp = spatial_of(input, op)?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || ws[0] != input.channels() || stride == 0
    {
        return Err(Error::shape(op, &[input.channels(), 0, 0, 0, 0], ws));
    }
    let k = ws[2];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = deconv_out_extent(sp[a], k, stride, pad)
            .ok_or_else(|| Error::shape(op, &[k; 3], &sp))?;
    }
    // Geometry of the adjoint convolution: deconv output is its input.
    Ok(Geometry {
        channels: ws[1],
        input: out,
        output: sp,
        kernel: k,
        stride,
        pad,
    })
}

/// Transposed convolution of `[C_in, D, H, W]` with `[C_in, C_out, k, k, k]`.
pub fn deconv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = check_deconv(input, weight, stride, pad, "deconv3d_forward")?;
    let co = g.channels;
    bias.expect_shape("deconv3d_forward bias", &[co])?;
    let ci = input.channels();
    let kk = g.rows();
    let p = g.cols();
    // cols[K, P_in] = W^T[K, ci] * x[ci, P_in]
    let mut cols = vec![T::zero(); kk * p];
    T::gemm(
        kk,
        ci,
        p,
        T::one(),
        (weight.data(), 1, kk as isize),
        (input.data(), p as isize, 1),
        T::zero(),
        (&mut cols, p as isize, 1),
    );
    let plane: usize = g.input.iter().product();
    let mut out = vec![T::zero(); co * plane];
    col2im(&cols, &g, &mut out);
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.data()[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::from_vec(&[co, g.input[0], g.input[1], g.input[2]], out)
}

pub fn deconv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let g = check_deconv(input, weight, stride, pad, "deconv3d_backward")?;
    let co = g.channels;
    grad_out.expect_shape(
        "deconv3d_backward grad_out",
        &[co, g.input[0], g.input[1], g.input[2]],
    )?;
    let ci = input.channels();
    let kk = g.rows();
    let p = g.cols();
    let plane: usize = g.input.iter().product();
    let bias: Vec<T> = grad_out
        .data()
        .chunks(plane)
        .map(|c| c.iter().copied().sum())
        .collect();
    let col = im2col(grad_out.data(), &g);
    // gin[ci, P] = W[ci, K] * col[K, P]
    let mut gin = vec![T::zero(); ci * p];
    T::gemm(
        ci,
        kk,
        p,
        T::one(),
        (weight.data(), kk as isize, 1),
        (&col, p as isize, 1),
        T::zero(),
        (&mut gin, p as isize, 1),
    );
    // gW[ci, K] = x[ci, P] * col^T[P, K]
    let mut gw = vec![T::zero(); ci * kk];
    T::gemm(
        ci,
        p,
        kk,
        T::one(),
        (input.data(), p as isize, 1),
        (&col, 1, p as isize),
        T::zero(),
        (&mut gw, kk as isize, 1),
    );
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[co], bias)?,
    })
}

/// Convolution layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv3d<T> {
    /// He-normal initialisation scaled by `gain`, zero bias.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel.pow(3)) as f64;
        Self {
            weight: Tensor::randn(
                &[c_out, c_in, kernel, kernel, kernel],
                gain * (2.0 / fan_in).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    /// "Same" padded convolution for odd kernels.
    pub fn same(c_in: usize, c_out: usize, kernel: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self::new(c_in, c_out, kernel, 1, kernel / 2, gain, rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d_forward(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    /// Accumulate parameter gradients into `grads`; returns the input gradient.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let g = conv3d_backward(x, &self.weight, grad_out, self.stride, self.pad)?;
        grads.weight.axpy(T::one(), &g.weight)?;
        grads.bias.axpy(T::one(), &g.bias)?;
        Ok(g.input)
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed-convolution layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv3d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> Deconv3d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output voxel of a k=s transposed conv sees exactly c_in taps.
        let fan_in = (c_in * (kernel / stride).max(1).pow(3)) as f64;
        Self {
            weight: Tensor::randn(
                &[c_in, c_out, kernel, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        deconv3d_forward(x, &self.weight, &self.bias, self.stride, 0)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let g = deconv3d_backward(x, &self.weight, grad_out, self.stride, 0)?;
        grads.weight.axpy(T::one(), &g.weight)?;
        grads.bias.axpy(T::one(), &g.bias)?;
        Ok(g.input)
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
