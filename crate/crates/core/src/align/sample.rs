//! Trilinear sampling of a feature volume along an affine grid.
//!
//! Normalised coordinates put `-1` and `+1` on the centres of the first and
//! last voxel along each axis, and order components `(x, y, z)` = `(W, H, D)`.

use super::AffineParams;
use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Normalised coordinate of output index `i` on an axis of `n` samples.
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

#[inline]
fn to_index(u: f64, n: usize) -> f64 {
    // a single-voxel axis holds its only sample at u = 0
    if n <= 1 {
        return u;
    }
    (u + 1.0) / 2.0 * (n - 1) as f64
}

/// Precomputed corner offsets and weights of every output sample. Corners
/// outside the input contribute zero (zero padding).
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    input_spatial: [usize; 3],
    output_spatial: [usize; 3],
    taps: Vec<[(usize, f64); 8]>,
}

impl SamplingPlan {
    /// `input_spatial` and `out` are `[D, H, W]`.
    pub fn new(a: &AffineParams, input_spatial: [usize; 3], out: [usize; 3]) -> Self {
        let [d, h, w] = input_spatial;
        let m = &a.matrix;
        let mut taps = Vec::with_capacity(out.iter().product());
        for k in 0..out[0] {
            let uz = normalized_coord(k, out[0]);
            for j in 0..out[1] {
                let uy = normalized_coord(j, out[1]);
                for i in 0..out[2] {
                    let ux = normalized_coord(i, out[2]);
                    let src: [f64; 3] = std::array::from_fn(|r| {
                        m[r][0] * ux + m[r][1] * uy + m[r][2] * uz + m[r][3]
                    });
                    let pos = [
                        to_index(src[0], w),
                        to_index(src[1], h),
                        to_index(src[2], d),
                    ];
                    taps.push(corner_taps(pos, [w, h, d]));
                }
            }
        }
        Self {
            input_spatial,
            output_spatial: out,
            taps,
        }
    }
}

fn corner_taps(pos: [f64; 3], n: [usize; 3]) -> [(usize, f64); 8] {
    let mut out = [(0usize, 0.0f64); 8];
    if pos.iter().any(|p| !p.is_finite()) {
        return out;
    }
    let base = pos.map(|p| p.floor());
    let frac: [f64; 3] = std::array::from_fn(|a| pos[a] - base[a]);
    for (c, slot) in out.iter_mut().enumerate() {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            let o = (c >> a) & 1;
            idx[a] = base[a] as i64 + o as i64;
            w *= if o == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w != 0.0 && (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < n[a]) {
            *slot = (
                idx[0] as usize + n[0] * (idx[1] as usize + n[1] * idx[2] as usize),
                w,
            );
        }
    }
    out
}

/// Resample `[C, D, H, W]` onto an `out = [D', H', W']` grid through `a`.
pub fn grid_sample_3d_forward<T: Scalar>(
    input: &Tensor<T>,
    a: &AffineParams,
    out: [usize; 3],
) -> Result<Tensor<T>> {
    if input.shape().len() != 4 {
        return Err(Error::shape("grid_sample_3d", &[0, 0, 0, 0], input.shape()));
    }
    let plan = SamplingPlan::new(a, input.spatial(), out);
    grid_sample_with_plan(input, &plan)
}

pub fn grid_sample_with_plan<T: Scalar>(
    input: &Tensor<T>,
    plan: &SamplingPlan,
) -> Result<Tensor<T>> {
    let sp = input.spatial();
    if input.shape().len() != 4 || sp != plan.input_spatial {
        return Err(Error::shape("grid_sample_3d", &plan.input_spatial, &sp));
    }
    let c = input.channels();
    let plane_in: usize = sp.iter().product();
    let plane_out = plan.taps.len();
    let mut data = vec![T::zero(); c * plane_out];
    for ch in 0..c {
        let src = &input.data()[ch * plane_in..(ch + 1) * plane_in];
        let dst = &mut data[ch * plane_out..(ch + 1) * plane_out];
        for (o, taps) in dst.iter_mut().zip(&plan.taps) {
            let mut acc = 0.0;
            for &(idx, w) in taps {
                if w != 0.0 {
                    acc += w * src[idx].as_f64();
                }
            }
            *o = T::from_f64(acc);
        }
    }
    let o = plan.output_spatial;
    Tensor::from_vec(&[c, o[0], o[1], o[2]], data)
}

/// Adjoint of the forward sampler with respect to its input.
pub fn grid_sample_3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    a: &AffineParams,
    input_spatial: [usize; 3],
) -> Result<Tensor<T>> {
    let plan = SamplingPlan::new(a, input_spatial, grad_out.spatial());
    grid_sample_backward_with_plan(grad_out, &plan)
}

pub fn grid_sample_backward_with_plan<T: Scalar>(
    grad_out: &Tensor<T>,
    plan: &SamplingPlan,
) -> Result<Tensor<T>> {
    if grad_out.shape().len() != 4 || grad_out.spatial() != plan.output_spatial {
        return Err(Error::shape(
            "grid_sample_3d_backward",
            &plan.output_spatial,
            grad_out.shape(),
        ));
    }
    let c = grad_out.channels();
    let plane_in: usize = plan.input_spatial.iter().product();
    let plane_out = plan.taps.len();
    let mut data = vec![0.0f64; c * plane_in];
    for ch in 0..c {
        let g = &grad_out.data()[ch * plane_out..(ch + 1) * plane_out];
        let dst = &mut data[ch * plane_in..(ch + 1) * plane_in];
        for (&go, taps) in g.iter().zip(&plan.taps) {
            let go = go.as_f64();
            for &(idx, w) in taps {
                if w != 0.0 {
                    dst[idx] += w * go;
                }
            }
        }
    }
    let s = plan.input_spatial;
    Tensor::from_vec(
        &[c, s[0], s[1], s[2]],
        data.into_iter().map(T::from_f64).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_affine, Orientation};
    use crate::nn::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Orientation {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        let m = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        Orientation::from_columns([0, 1, 2].map(|c| [m[0][c], m[1][c], m[2][c]]))
    }

    #[test]
    fn identity_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[2, 4, 5, 6], 1.0, &mut rng);
        let a = AffineParams::identity();
        let y = grid_sample_3d_forward(&x, &a, [4, 5, 6]).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_stays_constant_in_range() {
        let x = Tensor::<f64>::full(&[1, 6, 6, 6], 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_affine(&random_rotation(&mut rng), [0.05, -0.1, 0.0], [0.5; 3]);
        let y = grid_sample_3d_forward(&x, &a, [5, 5, 5]).unwrap();
        assert!(y.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn half_scale_samples_central_region() {
        // 9 samples along x: with s = 0.5 the grid spans indices 2..=6
        let x = Tensor::<f64>::from_fn(&[1, 1, 1, 9], |i| i as f64);
        let a = build_affine(&Orientation::identity(), [0.0; 3], [0.5, 0.5, 0.5]);
        let y = grid_sample_3d_forward(&x, &a, [1, 1, 5]).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn ramp_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = [7usize, 8, 9]; // D, H, W
        let coef = [0.3, -0.7, 1.1, 0.2];
        // value as a function of normalised (x, y, z)
        let ramp = |u: [f64; 3]| coef[0] * u[0] + coef[1] * u[1] + coef[2] * u[2] + coef[3];
        let x = Tensor::<f64>::from_fn(&[1, n[0], n[1], n[2]], |idx| {
            let i = idx % n[2];
            let j = (idx / n[2]) % n[1];
            let k = idx / (n[1] * n[2]);
            ramp([
                normalized_coord(i, n[2]),
                normalized_coord(j, n[1]),
                normalized_coord(k, n[0]),
            ])
        });
        for _ in 0..10 {
            let o = random_rotation(&mut rng);
            let t = [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ];
            let a = build_affine(&o, t, [0.4, 0.5, 0.3]);
            let out = [4, 5, 6];
            let y = grid_sample_3d_forward(&x, &a, out).unwrap();
            let m = a.matrix;
            for k in 0..out[0] {
                for j in 0..out[1] {
                    for i in 0..out[2] {
                        let u = [
                            normalized_coord(i, out[2]),
                            normalized_coord(j, out[1]),
                            normalized_coord(k, out[0]),
                        ];
                        let src: [f64; 3] = std::array::from_fn(|r| {
                            m[r][0] * u[0] + m[r][1] * u[1] + m[r][2] * u[2] + m[r][3]
                        });
                        let got = y.data()[i + out[2] * (j + out[1] * k)];
                        assert!((got - ramp(src)).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_is_adjoint_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 5, 5, 5], 1.0, &mut rng);
        let a = build_affine(
            &random_rotation(&mut rng),
            [0.1, 0.2, -0.3],
            [0.8, 0.7, 0.9],
        );
        let out = [4, 4, 4];
        let y = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let sx = grid_sample_3d_forward(&x, &a, out).unwrap();
        let bt = grid_sample_3d_backward(&y, &a, [5, 5, 5]).unwrap();
        assert!((sx.dot(&y) - x.dot(&bt)).abs() < 1e-6);
        let err = grad_check(
            |v| {
                let t = Tensor::from_vec(&[2, 5, 5, 5], v.to_vec()).unwrap();
                grid_sample_3d_forward(&t, &a, out).unwrap().dot(&y)
            },
            x.data(),
            bt.data(),
            1e-5,
        );
        assert!(err < 1e-6);
        let id = grid_sample_3d_backward(&y, &AffineParams::identity(), [4, 4, 4]).unwrap();
        assert_eq!(id.data(), y.data());
    }

    #[test]
    fn out_of_range_is_zero() {
        let x = Tensor::<f64>::full(&[1, 3, 3, 3], 1.0);
        let a = build_affine(&Orientation::identity(), [5.0, 0.0, 0.0], [1.0; 3]);
        let y = grid_sample_3d_forward(&x, &a, [3, 3, 3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
