use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`]: `f32` for training, `f64`
/// for gradient checks.
pub trait Scalar:
    Float + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    const NAME: &'static str;

    /// `C = alpha * A * B + beta * C` over row/column strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_extent(a.0.len(), m, k, a.1, a.2);
                check_extent(b.0.len(), k, n, b.1, b.2);
                check_extent(c.0.len(), m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand was bounds-checked against its
                // slice for the given shape and strides above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dense n-dimensional array, last axis fastest.
///
/// Spatial feature maps are `[C, D, H, W]` with W (x) fastest, matching the
/// voxel order of [`crate::volume::Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape("tensor", &[n], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Spatial extents of a `[C, D, H, W]` tensor.
    pub fn spatial(&self) -> [usize; 3] {
        debug_assert_eq!(self.shape.len(), 4);
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        self.expect_shape("axpy", other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, shape, &self.shape));
        }
        Ok(())
    }

    /// Concatenate `[C_i, D, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of no tensors".into()))?;
        let sp = first.spatial();
        let mut c = 0;
        for p in parts {
            if p.shape.len() != 4 || p.spatial() != sp {
                return Err(Error::shape("concat_channels", &first.shape, &p.shape));
            }
            c += p.channels();
        }
        let mut data = Vec::with_capacity(c * sp.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(&[c, sp[0], sp[1], sp[2]], data)
    }

    /// Split along channels into pieces of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Self>> {
        let sp = self.spatial();
        let plane: usize = sp.iter().product();
        if counts.iter().sum::<usize>() != self.channels() {
            return Err(Error::shape(
                "split_channels",
                &[counts.iter().sum()],
                &[self.channels()],
            ));
        }
        let mut out = Vec::with_capacity(counts.len());
        let mut off = 0;
        for &c in counts {
            out.push(Self::from_vec(
                &[c, sp[0], sp[1], sp[2]],
                self.data[off..off + c * plane].to_vec(),
            )?);
            off += c * plane;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| -(i as f64));
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2, 2]);
        let parts = c.split_channels(&[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, (&a, 3, 1), (&b, 2, 1), 0.0, (&mut c, 2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }
}
