//! Fixed-size max pooling and central cross-section extraction.

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Default pooled extent per axis.
pub const ROI_SIZE: usize = 7;

/// `[start, end)` of bin `i` when splitting `n` voxels into `bins`.
fn bin_range(i: usize, n: usize, bins: usize) -> (usize, usize) {
    let edge = |b: usize| ((b * n) as f64 / bins as f64).round() as usize;
    let start = edge(i).min(n - 1);
    let end = edge(i + 1).clamp(start + 1, n);
    (start, end)
}

#[derive(Debug, Clone)]
pub struct RoiPooled<T> {
    pub output: Tensor<T>,
    /// Flat input index of each output's maximum.
    pub argmax: Vec<usize>,
}

/// Max pool `[C, D, H, W]` onto a `bins³` grid.
pub fn roi_pool_3d<T: Scalar>(input: &Tensor<T>, bins: usize) -> Result<RoiPooled<T>> {
    let shape = input.shape();
    if shape.len() != 4 || shape.contains(&0) || bins == 0 {
        return Err(Error::shape("roi_pool_3d", &[1, 1, 1, 1], shape));
    }
    let [d, h, w] = input.spatial();
    let c = input.channels();
    let plane = d * h * w;
    let ranges = |n| (0..bins).map(|i| bin_range(i, n, bins)).collect::<Vec<_>>();
    let (rz, ry, rx) = (ranges(d), ranges(h), ranges(w));
    let mut out = Vec::with_capacity(c * bins.pow(3));
    let mut argmax = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        let base = ch * plane;
        for &(z0, z1) in &rz {
            for &(y0, y1) in &ry {
                for &(x0, x1) in &rx {
                    let mut best = base + (z0 * h + y0) * w + x0;
                    for z in z0..z1 {
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let idx = base + (z * h + y) * w + x;
                                if input.data()[idx] > input.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    out.push(input.data()[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(RoiPooled {
        output: Tensor::from_vec(&[c, bins, bins, bins], out)?,
        argmax,
    })
}

/// Route each pooled gradient to its bin's argmax.
pub fn roi_pool_3d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "roi_pool_3d_backward",
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

/// The axial (z = D/2), coronal (y = H/2) and sagittal (x = W/2) planes of
/// a cubic `[C, n, n, n]` tensor, stacked as `[3C, n, n]` in that order.
pub fn extract_cross_sections<T: Scalar>(cube: &Tensor<T>) -> Result<Tensor<T>> {
    let n = cubic_extent(cube)?;
    let c = cube.channels();
    let m = n / 2;
    let at = |ch: usize, z: usize, y: usize, x: usize| cube.data()[((ch * n + z) * n + y) * n + x];
    let mut out = Vec::with_capacity(3 * c * n * n);
    for ch in 0..c {
        for a in 0..n {
            for b in 0..n {
                out.push(at(ch, m, a, b));
            }
        }
    }
    for ch in 0..c {
        for a in 0..n {
            for b in 0..n {
                out.push(at(ch, a, m, b));
            }
        }
    }
    for ch in 0..c {
        for a in 0..n {
            for b in 0..n {
                out.push(at(ch, a, b, m));
            }
        }
    }
    Tensor::from_vec(&[3 * c, n, n], out)
}

/// Scatter cross-section gradients back into the cube.
pub fn extract_cross_sections_backward<T: Scalar>(
    cube_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Tensor::<T>::zeros(cube_shape);
    let n = cubic_extent(&g)?;
    let c = g.channels();
    grad.expect_shape("extract_cross_sections_backward", &[3 * c, n, n])?;
    let m = n / 2;
    let gd = g.data_mut();
    let idx = |ch: usize, z: usize, y: usize, x: usize| ((ch * n + z) * n + y) * n + x;
    let src = grad.data();
    let plane = n * n;
    for ch in 0..c {
        for a in 0..n {
            for b in 0..n {
                let o = a * n + b;
                gd[idx(ch, m, a, b)] += src[ch * plane + o];
                gd[idx(ch, a, m, b)] += src[(c + ch) * plane + o];
                gd[idx(ch, a, b, m)] += src[(2 * c + ch) * plane + o];
            }
        }
    }
    Ok(g)
}

fn cubic_extent<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    let s = t.shape();
    if s.len() != 4 || s[1] != s[2] || s[2] != s[3] || s[1] == 0 {
        return Err(Error::shape(
            "cross_sections",
            &[s.first().copied().unwrap_or(0), s[1], s[1], s[1]],
            s,
        ));
    }
    Ok(s[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bins_cover_axis() {
        for n in 1..40 {
            let mut covered = vec![false; n];
            for i in 0..7 {
                let (s, e) = bin_range(i, n, 7);
                assert!(s < e && e <= n);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c), "n={n}");
        }
    }

    #[test]
    fn seven_cube_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[2, 7, 7, 7], 1.0, &mut rng);
        assert_eq!(roi_pool_3d(&x, 7).unwrap().output, x);
    }

    #[test]
    fn constant_input() {
        let x = Tensor::<f64>::full(&[1, 14, 14, 14], 0.3);
        let p = roi_pool_3d(&x, 7).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 10, 9, 11], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(&[2, 7, 7, 7], 1.0, &mut rng);
        let p = roi_pool_3d(&x, 7).unwrap();
        let g = roi_pool_3d_backward(x.shape(), &p.argmax, &probe).unwrap();
        let err = grad_check(
            |v| {
                roi_pool_3d(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), 7)
                    .unwrap()
                    .output
                    .dot(&probe)
            },
            x.data(),
            g.data(),
            1e-6,
        );
        assert!(err < 1e-6);
    }

    #[test]
    fn symmetric_cube_gives_identical_slices() {
        let n = 9;
        let c = (n as f64 - 1.0) / 2.0;
        let x = Tensor::<f64>::from_fn(&[1, n, n, n], |i| {
            let (a, b, d) = (
                (i % n) as f64 - c,
                ((i / n) % n) as f64 - c,
                (i / (n * n)) as f64 - c,
            );
            (-(a * a + b * b + d * d) / 8.0).exp()
        });
        let s = extract_cross_sections(&x).unwrap();
        let p = n * n;
        assert_eq!(&s.data()[..p], &s.data()[p..2 * p]);
        assert_eq!(&s.data()[..p], &s.data()[2 * p..]);
    }

    #[test]
    fn z_tube_gives_disk_and_bars() {
        let n = 8;
        let x = Tensor::<f64>::from_fn(&[1, n, n, n], |i| {
            let (a, b) = ((i % n) as f64 - 4.0, ((i / n) % n) as f64 - 4.0);
            if a * a + b * b <= 4.0 {
                1.0
            } else {
                0.0
            }
        });
        let s = extract_cross_sections(&x).unwrap();
        let p = n * n;
        let axial: f64 = s.data()[..p].iter().sum();
        let coronal = &s.data()[p..2 * p];
        assert!(axial > 8.0 && axial < 20.0);
        // coronal rows (over z) are identical: a bar along z
        for z in 1..n {
            assert_eq!(&coronal[z * n..(z + 1) * n], &coronal[..n]);
        }
    }

    #[test]
    fn cross_section_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 6, 6, 6], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[6, 6, 6], 1.0, &mut rng);
        let lhs = extract_cross_sections(&x).unwrap().dot(&y);
        let rhs = x.dot(&extract_cross_sections_backward(x.shape(), &y).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
