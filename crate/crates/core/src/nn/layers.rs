//! Activations, fully connected layers and residual blocks.

use rand::Rng;

use super::conv::Conv3d;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(T::zero()))
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(y.shape(), |i| {
        if y.data()[i] > T::zero() {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    })
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer on `[N, in]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Tensor::randn(&[outputs, inputs], gain * (2.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    fn check(&self, x: &Tensor<T>, op: &'static str) -> Result<usize> {
        let (_, inputs) = self.dims();
        if x.shape().len() != 2 || x.shape()[1] != inputs {
            return Err(Error::shape(
                op,
                &[x.shape().first().copied().unwrap_or(0), inputs],
                x.shape(),
            ));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check(x, "fc_forward")?;
        let (out, inp) = self.dims();
        let mut y = vec![T::zero(); n * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.bias.data());
        }
        // y[N, out] = x[N, in] * W^T[in, out]
        T::gemm(
            n,
            inp,
            out,
            T::one(),
            (x.data(), inp as isize, 1),
            (self.weight.data(), 1, inp as isize),
            T::one(),
            (&mut y, out as isize, 1),
        );
        Tensor::from_vec(&[n, out], y)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let n = self.check(x, "fc_backward")?;
        let (out, inp) = self.dims();
        grad_out.expect_shape("fc_backward grad_out", &[n, out])?;
        let go = grad_out.data();
        // gW[out, in] += g^T[out, N] * x[N, in]
        T::gemm(
            out,
            n,
            inp,
            T::one(),
            (go, 1, out as isize),
            (x.data(), inp as isize, 1),
            T::one(),
            (grads.weight.data_mut(), inp as isize, 1),
        );
        for row in go.chunks(out) {
            for (b, &g) in grads.bias.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        // gx[N, in] = g[N, out] * W[out, in]
        let mut gx = vec![T::zero(); n * inp];
        T::gemm(
            n,
            out,
            inp,
            T::one(),
            (go, out as isize, 1),
            (self.weight.data(), inp as isize, 1),
            T::zero(),
            (&mut gx, inp as isize, 1),
        );
        Tensor::from_vec(&[n, inp], gx)
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// `relu(F(x) + shortcut(x))` with `F = conv3 -> relu -> conv3`; the shortcut
/// is the identity, or a 1×1×1 projection when channel counts differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv3d<T>,
    pub conv2: Conv3d<T>,
    pub projection: Option<Conv3d<T>>,
}

/// Activations kept from a residual forward pass.
#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    hidden: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv3d::same(c_in, c_out, 3, 1.0, rng);
        // Small residual branch keeps activations bounded without normalisation.
        let conv2 = Conv3d::same(c_out, c_out, 3, 0.25, rng);
        let projection = (c_in != c_out).then(|| Conv3d::same(c_in, c_out, 1, 1.0, rng));
        Self {
            conv1,
            conv2,
            projection,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            projection: self.projection.as_ref().map(Conv3d::zeros_like),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ResidualCache<T>> {
        let hidden = relu(&self.conv1.forward(x)?);
        let mut sum = self.conv2.forward(&hidden)?;
        match &self.projection {
            Some(p) => sum.axpy(T::one(), &p.forward(x)?)?,
            None => sum.axpy(T::one(), x)?,
        }
        Ok(ResidualCache {
            hidden,
            output: relu(&sum),
        })
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &ResidualCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let g_sum = relu_backward(&cache.output, grad_out);
        let g_hidden = self
            .conv2
            .backward(&cache.hidden, &g_sum, &mut grads.conv2)?;
        let g_pre = relu_backward(&cache.hidden, &g_hidden);
        let mut gx = self.conv1.backward(x, &g_pre, &mut grads.conv1)?;
        match (&self.projection, grads.projection.as_mut()) {
            (Some(p), Some(gp)) => gx.axpy(T::one(), &p.backward(x, &g_sum, gp)?)?,
            _ => gx.axpy(T::one(), &g_sum)?,
        }
        Ok(gx)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self
            .conv1
            .params()
            .into_iter()
            .chain(self.conv2.params())
            .collect();
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self
            .conv1
            .params_mut()
            .into_iter()
            .chain(self.conv2.params_mut())
            .collect();
        if let Some(p) = &mut self.projection {
            v.extend(p.params_mut());
        }
        v
    }
}
