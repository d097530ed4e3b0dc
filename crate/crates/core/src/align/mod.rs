//! Vessel-aligned resampling of candidate cubes.
//!
//! A candidate's surroundings are thresholded and the principal axes of the
//! vessel voxels give an orientation. The feature map is then resampled on a
//! grid whose first axis follows the vessel, max-pooled to a fixed size, and
//! reduced to three orthogonal central planes for the classifier.

mod roi;
mod sample;

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

pub use roi::{
    extract_cross_sections, extract_cross_sections_backward, roi_pool_3d, roi_pool_3d_backward,
    RoiPooled, ROI_SIZE,
};
pub use sample::{
    grid_sample_3d_backward, grid_sample_3d_forward, grid_sample_backward_with_plan,
    grid_sample_with_plan, normalized_coord, SamplingPlan,
};

use crate::error::{Error, Result};
use crate::nn::net::FEATURE_STRIDE;
use crate::nn::tensor::{Scalar, Tensor};
use crate::proposal::BoxCube;
use crate::volume::{crop_cube, hu_to_unit, Volume, WorldPoint, AIR_NORMALIZED};

/// Fewer vessel voxels than this leave the orientation undefined.
pub const MIN_MASK_VOXELS: usize = 10;

/// Principal axes of a vessel segment, strongest first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub v1: [f64; 3],
    pub v2: [f64; 3],
    pub v3: [f64; 3],
    pub eigenvalues: [f64; 3],
    /// Set when the estimate fell back to the canonical axes.
    pub degenerate: bool,
}

impl Orientation {
    pub fn identity() -> Self {
        Self {
            v1: [1.0, 0.0, 0.0],
            v2: [0.0, 1.0, 0.0],
            v3: [0.0, 0.0, 1.0],
            eigenvalues: [0.0; 3],
            degenerate: false,
        }
    }

    pub fn fallback() -> Self {
        Self {
            degenerate: true,
            ..Self::identity()
        }
    }

    pub fn from_columns(v: [[f64; 3]; 3]) -> Self {
        Self {
            v1: v[0],
            v2: v[1],
            v3: v[2],
            ..Self::identity()
        }
    }

    pub fn axes(&self) -> [[f64; 3]; 3] {
        [self.v1, self.v2, self.v3]
    }

    pub fn determinant(&self) -> f64 {
        let [a, b, c] = self.axes();
        dot(a, cross(b, c))
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    v.map(|x| x / n)
}

/// Angle in degrees between two undirected axes.
pub fn axis_angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = (dot(a, b).abs() / (dot(a, a) * dot(b, b)).sqrt()).min(1.0);
    c.acos().to_degrees()
}

/// 3×4 map from normalised target coordinates to normalised source
/// coordinates: `src = M [x, y, z]^T + t`, where column `j` of `M` is
/// `s_j v_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub matrix: [[f64; 4]; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        build_affine(&Orientation::identity(), [0.0; 3], [1.0; 3])
    }
}

pub fn build_affine(orientation: &Orientation, t: [f64; 3], s: [f64; 3]) -> AffineParams {
    let v = orientation.axes();
    let mut matrix = [[0.0; 4]; 3];
    for (i, row) in matrix.iter_mut().enumerate() {
        for j in 0..3 {
            row[j] = s[j] * v[j][i];
        }
        row[3] = t[i];
    }
    AffineParams { matrix }
}

/// Thresholded vessel voxels of a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselMask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub mask: Vec<bool>,
}

impl VesselMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Default vessel threshold: 100 HU in normalised units.
pub fn default_vessel_threshold() -> f64 {
    hu_to_unit(100.0)
}

pub fn segment_vessels(c_ori: &Volume, threshold: f64) -> VesselMask {
    VesselMask {
        dims: c_ori.dims(),
        spacing: c_ori.spacing(),
        mask: c_ori
            .data()
            .iter()
            .map(|&v| v as f64 >= threshold)
            .collect(),
    }
}

/// Principal axes of the mask voxel positions (in mm).
///
/// Eigenvectors are sorted by descending eigenvalue, each flipped so its
/// largest-magnitude component is positive, and `v3 = v1 × v2`. A nearly
/// isotropic spread or a mask below [`MIN_MASK_VOXELS`] returns the
/// canonical axes with `degenerate` set. When only `λ2 ≈ λ3`, `v2` is taken
/// from the canonical axis least aligned with `v1`.
pub fn pca_orientation(mask: &VesselMask) -> Orientation {
    let [nx, ny, _] = mask.dims;
    let pts: Vec<[f64; 3]> = mask
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(idx, _)| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            [
                i as f64 * mask.spacing[0],
                j as f64 * mask.spacing[1],
                k as f64 * mask.spacing[2],
            ]
        })
        .collect();
    if pts.len() < MIN_MASK_VOXELS {
        return Orientation::fallback();
    }
    let n = pts.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut cov = Matrix3::<f64>::zeros();
    for p in &pts {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: [f64; 3] = order.map(|i| eig.eigenvalues[i].max(0.0));
    let scale = lam[0].max(f64::MIN_POSITIVE);
    let tol = 1e-6;
    if (lam[0] - lam[2]) / scale < tol {
        return Orientation {
            eigenvalues: lam,
            ..Orientation::fallback()
        };
    }
    let col = |i: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(order[i]);
        canonical_sign([c[0], c[1], c[2]])
    };
    let v1 = col(0);
    let v2 = if (lam[1] - lam[2]) / scale < 1e-3 {
        let k = (0..3)
            .min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs()))
            .expect("three axes");
        let mut e = [0.0; 3];
        e[k] = 1.0;
        let p = dot(e, v1);
        canonical_sign(normalize([
            e[0] - p * v1[0],
            e[1] - p * v1[1],
            e[2] - p * v1[2],
        ]))
    } else {
        // re-orthogonalise against v1 to absorb solver round-off
        let c = col(1);
        let p = dot(c, v1);
        canonical_sign(normalize([
            c[0] - p * v1[0],
            c[1] - p * v1[1],
            c[2] - p * v1[2],
        ]))
    };
    let v3 = cross(v1, v2);
    Orientation {
        v1,
        v2,
        v3,
        eigenvalues: lam,
        degenerate: false,
    }
}

fn canonical_sign(v: [f64; 3]) -> [f64; 3] {
    let k = (0..3)
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
        .expect("three axes");
    if v[k] < 0.0 {
        v.map(|x| -x)
    } else {
        v
    }
}

/// Alignment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Side of the sampled region relative to the candidate side.
    pub crop_factor: f64,
    /// Samples per axis drawn from the feature map before pooling.
    pub feature_extent: usize,
    pub roi_size: usize,
    /// Samples per axis of the aligned image cube.
    pub image_extent: usize,
    pub vessel_threshold: f64,
    /// When false the canonical axes are used (no vessel alignment).
    pub align: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            crop_factor: 1.5,
            feature_extent: 14,
            roi_size: ROI_SIZE,
            image_extent: 32,
            vessel_threshold: default_vessel_threshold(),
            align: true,
        }
    }
}

/// Raw-image and feature-map crops around a candidate.
#[derive(Debug, Clone)]
pub struct ProposalCrops<T> {
    pub c_ori: Volume,
    pub c_feat: Tensor<T>,
}

/// Geometry shared by a normalised-intensity tile and its stride-4
/// feature map.
#[derive(Debug, Clone, Copy)]
struct TileFrame {
    origin: [f64; 3],
    spacing: f64,
    n_vox: usize,
    n_feat: usize,
}

impl TileFrame {
    fn new<T: Scalar>(volume: &Volume, features: &Tensor<T>) -> Result<Self> {
        let d = volume.dims();
        let sp = volume.spacing();
        if d[0] != d[1] || d[1] != d[2] || sp[0] != sp[1] || sp[1] != sp[2] {
            return Err(Error::Input(format!(
                "alignment needs a cubic isotropic tile, got dims {d:?} spacing {sp:?}"
            )));
        }
        let fs = features.spatial();
        let nf = d[0] / FEATURE_STRIDE;
        if features.shape().len() != 4 || fs != [nf; 3] {
            return Err(Error::shape("align features", &[nf, nf, nf], &fs));
        }
        Ok(Self {
            origin: volume.origin(),
            spacing: sp[0],
            n_vox: d[0],
            n_feat: nf,
        })
    }

    fn voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing)
    }

    /// Affine into the voxel grid for a cube of `side_mm` centred at `center`.
    fn voxel_affine(&self, o: &Orientation, center: [f64; 3], side_mm: f64) -> AffineParams {
        let n = (self.n_vox - 1).max(1) as f64;
        let v = self.voxel(center);
        let t = v.map(|x| 2.0 * x / n - 1.0);
        let s = side_mm / self.spacing / n;
        build_affine(o, t, [s; 3])
    }

    /// Affine into the feature grid; feature voxel `f` has its receptive
    /// centre at voxel `stride * f + (stride - 1) / 2`.
    fn feature_affine(&self, o: &Orientation, center: [f64; 3], side_mm: f64) -> AffineParams {
        let stride = FEATURE_STRIDE as f64;
        let n = (self.n_feat - 1).max(1) as f64;
        let v = self.voxel(center);
        let t = v.map(|x| 2.0 * ((x - (stride - 1.0) / 2.0) / stride) / n - 1.0);
        let s = side_mm / self.spacing / stride / n;
        build_affine(o, t, [s; 3])
    }
}

/// Axis-aligned crops: `C_ori` at the volume spacing and `C_feat` with
/// `ceil(extent / 4)` samples per axis.
pub fn crop_proposal<T: Scalar>(
    volume: &Volume,
    features: &Tensor<T>,
    cube: &BoxCube,
    crop_factor: f64,
) -> Result<ProposalCrops<T>> {
    let frame = TileFrame::new(volume, features)?;
    let side = cube.side * crop_factor;
    let c_ori = crop_cube(
        volume,
        WorldPoint::from_array(cube.center),
        side,
        AIR_NORMALIZED,
    )?;
    let n = c_ori.dims()[0].div_ceil(FEATURE_STRIDE);
    let a = frame.feature_affine(&Orientation::identity(), cube.center, side);
    let c_feat = grid_sample_3d_forward(features, &a, [n; 3])?;
    Ok(ProposalCrops { c_ori, c_feat })
}

/// A candidate resampled along its vessel, with what backward needs.
#[derive(Debug, Clone)]
pub struct AlignedCandidate<T> {
    pub orientation: Orientation,
    /// `[C, r, r, r]` pooled aligned features.
    pub pooled: Tensor<T>,
    /// `[3C, r, r]` central planes of `pooled`; the classifier input.
    pub sections: Tensor<T>,
    plan: SamplingPlan,
    sampled_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Estimate the orientation of the vessel around `cube`.
pub fn candidate_orientation(
    volume: &Volume,
    cube: &BoxCube,
    cfg: &AlignConfig,
) -> Result<Orientation> {
    if !cfg.align {
        return Ok(Orientation::identity());
    }
    let c_ori = crop_cube(
        volume,
        WorldPoint::from_array(cube.center),
        cube.side * cfg.crop_factor,
        AIR_NORMALIZED,
    )?;
    let mask = segment_vessels(&c_ori, cfg.vessel_threshold);
    Ok(if mask.is_empty() {
        Orientation::fallback()
    } else {
        pca_orientation(&mask)
    })
}

/// Orientation estimate, aligned feature resampling, pooling and
/// cross-section extraction for one candidate.
pub fn align_candidate<T: Scalar>(
    volume: &Volume,
    features: &Tensor<T>,
    cube: &BoxCube,
    cfg: &AlignConfig,
) -> Result<AlignedCandidate<T>> {
    let orientation = candidate_orientation(volume, cube, cfg)?;
    align_with_orientation(volume, features, cube, &orientation, cfg)
}

pub fn align_with_orientation<T: Scalar>(
    volume: &Volume,
    features: &Tensor<T>,
    cube: &BoxCube,
    orientation: &Orientation,
    cfg: &AlignConfig,
) -> Result<AlignedCandidate<T>> {
    let frame = TileFrame::new(volume, features)?;
    let a = frame.feature_affine(orientation, cube.center, cube.side * cfg.crop_factor);
    let plan = SamplingPlan::new(&a, features.spatial(), [cfg.feature_extent; 3]);
    let sampled = grid_sample_with_plan(features, &plan)?;
    let pooled = roi_pool_3d(&sampled, cfg.roi_size)?;
    let sections = extract_cross_sections(&pooled.output)?;
    Ok(AlignedCandidate {
        orientation: *orientation,
        pooled: pooled.output,
        sections,
        plan,
        sampled_shape: sampled.shape().to_vec(),
        argmax: pooled.argmax,
    })
}

/// Accumulate the feature-map gradient of `grad_sections` into `grad_features`.
pub fn align_candidate_backward<T: Scalar>(
    aligned: &AlignedCandidate<T>,
    grad_sections: &Tensor<T>,
    grad_features: &mut Tensor<T>,
) -> Result<()> {
    let g_pooled = extract_cross_sections_backward(aligned.pooled.shape(), grad_sections)?;
    let g_sampled = roi_pool_3d_backward(&aligned.sampled_shape, &aligned.argmax, &g_pooled)?;
    let g = grid_sample_backward_with_plan(&g_sampled, &aligned.plan)?;
    grad_features.axpy(T::one(), &g)
}

/// The aligned raw-intensity cube around a candidate (`image_extent³`).
pub fn aligned_image(
    volume: &Volume,
    cube: &BoxCube,
    orientation: &Orientation,
    cfg: &AlignConfig,
) -> Result<Tensor<f64>> {
    let d = volume.dims();
    let dummy = Tensor::<f64>::zeros(&[
        1,
        d[0] / FEATURE_STRIDE,
        d[1] / FEATURE_STRIDE,
        d[2] / FEATURE_STRIDE,
    ]);
    let frame = TileFrame::new(volume, &dummy)?;
    let a = frame.voxel_affine(orientation, cube.center, cube.side * cfg.crop_factor);
    let x = Tensor::from_vec(
        &[1, d[2], d[1], d[0]],
        volume.data().iter().map(|&v| v as f64).collect(),
    )?;
    grid_sample_3d_forward(&x, &a, [cfg.image_extent; 3])
}

/// Mean absolute difference of two aligned cubes in units of the intensity range.
pub fn aligned_difference(a: &Tensor<f64>, b: &Tensor<f64>, range: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
        / range
}

/// Write the three cross-sections of an aligned image as 8-bit PGMs
/// (`<stem>_axial.pgm`, `_coronal`, `_sagittal`) with the orientation as JSON.
pub fn write_debug_dump(
    dir: &Path,
    stem: &str,
    image: &Tensor<f64>,
    orientation: &Orientation,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sections = extract_cross_sections(image)?;
    let n = image.shape()[1];
    for (i, name) in ["axial", "coronal", "sagittal"].iter().enumerate() {
        let plane = &sections.data()[i * n * n..(i + 1) * n * n];
        let mut bytes = format!("P5\n{n} {n}\n255\n").into_bytes();
        bytes.extend(
            plane
                .iter()
                .map(|&v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        let path = dir.join(format!("{stem}_{name}.pgm"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(format!("{stem}_orientation.json"));
    let json = serde_json::to_string_pretty(orientation).expect("orientation serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
