//! 3D max pooling with argmax routing.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Pooled output plus the flat input index of each output's maximum.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max pool `[C, D, H, W]` over cubic windows. Ties go to the first index in
/// x-fastest scan order.
pub fn maxpool3d_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Pooled<T>> {
    if input.shape().len() != 4 || window == 0 || stride == 0 {
        return Err(Error::shape(
            "maxpool3d_forward",
            &[0, 0, 0, 0],
            input.shape(),
        ));
    }
    let [d, h, w] = input.spatial();
    if d < window || h < window || w < window {
        return Err(Error::shape(
            "maxpool3d_forward",
            &[input.channels(), window, window, window],
            input.shape(),
        ));
    }
    let (od, oh, ow) = (
        (d - window) / stride + 1,
        (h - window) / stride + 1,
        (w - window) / stride + 1,
    );
    let c = input.channels();
    let x = input.data();
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for kz in 0..window {
                        for ky in 0..window {
                            let row =
                                base + ((z * stride + kz) * h + y * stride + ky) * w + xx * stride;
                            for kx in 0..window {
                                let v = x[row + kx];
                                if v > best || best_i == usize::MAX {
                                    best = v;
                                    best_i = row + kx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(&[c, od, oh, ow], out)?,
        argmax: arg,
    })
}

/// Route each output gradient to its recorded argmax.
pub fn maxpool3d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool3d_backward",
            &[argmax.len()],
            &[grad_out.len()],
        ));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    Ok(g)
}
