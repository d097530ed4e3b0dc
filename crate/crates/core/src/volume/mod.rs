//! Volume representation, physical-space geometry and preprocessing.
//!
//! Voxels are stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`. World coordinates are in millimetres; `origin`
//! is the world position of the centre of voxel `(0, 0, 0)`.

mod io;

pub use io::{read_metaimage, read_volume, write_volume, VolumeMeta};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// HU window lower bound.
pub const HU_MIN: f64 = -1200.0;
/// HU window upper bound.
pub const HU_MAX: f64 = 600.0;
/// Normalized intensity of air-equivalent padding (`HU_MIN` after [`hu_to_unit`]).
pub const AIR_NORMALIZED: f32 = -1.0;

/// A point in scanner space, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(self, other: WorldPoint) -> f64 {
        let d = [self.x - other.x, self.y - other.y, self.z - other.z];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Interpolation used when resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Trilinear,
    /// For label masks.
    Nearest,
}

/// A 3D scalar grid with physical spacing and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        value: f32,
    ) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, vec![value; n])
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Map `f` over every voxel, keeping the geometry.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn world_to_voxel(&self, p: WorldPoint) -> [f64; 3] {
        let p = p.to_array();
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> WorldPoint {
        WorldPoint::from_array(std::array::from_fn(|a| {
            self.origin[a] + v[a] * self.spacing[a]
        }))
    }

    /// Physical extent spanned by voxel centres along each axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn center_world(&self) -> WorldPoint {
        self.voxel_to_world(std::array::from_fn(|a| (self.dims[a] - 1) as f64 / 2.0))
    }

    /// Trilinear sample at a continuous voxel coordinate; neighbours outside
    /// the grid take `pad`.
    pub fn sample_padded(&self, v: [f64; 3], pad: f32) -> f64 {
        let base: [f64; 3] = std::array::from_fn(|a| v[a].floor());
        let frac: [f64; 3] = std::array::from_fn(|a| v[a] - base[a]);
        let mut acc = 0.0;
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                idx[a] = base[a] as i64 + off[a] as i64;
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let inside = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a]);
            let value = if inside {
                self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize) as f64
            } else {
                pad as f64
            };
            acc += w * value;
        }
        acc
    }

    /// Trilinear sample with coordinates clamped to the grid (edge replication).
    pub fn sample_clamped(&self, v: [f64; 3]) -> f64 {
        let c: [f64; 3] = std::array::from_fn(|a| v[a].clamp(0.0, (self.dims[a] - 1) as f64));
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            lo[a] = c[a].floor() as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            t[a] = c[a] - lo[a] as f64;
        }
        let g = |i: usize, j: usize, k: usize| self.get(i, j, k) as f64;
        let c00 = g(lo[0], lo[1], lo[2]) * (1.0 - t[0]) + g(hi[0], lo[1], lo[2]) * t[0];
        let c10 = g(lo[0], hi[1], lo[2]) * (1.0 - t[0]) + g(hi[0], hi[1], lo[2]) * t[0];
        let c01 = g(lo[0], lo[1], hi[2]) * (1.0 - t[0]) + g(hi[0], lo[1], hi[2]) * t[0];
        let c11 = g(lo[0], hi[1], hi[2]) * (1.0 - t[0]) + g(hi[0], hi[1], hi[2]) * t[0];
        let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
        let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
        c0 * (1.0 - t[2]) + c1 * t[2]
    }

    fn sample_nearest(&self, v: [f64; 3]) -> f32 {
        let idx: [usize; 3] =
            std::array::from_fn(|a| (v[a].round().max(0.0) as usize).min(self.dims[a] - 1));
        self.get(idx[0], idx[1], idx[2])
    }
}

/// Resample onto an isotropic grid of spacing `target` mm, keeping the origin.
pub fn resample_isotropic(vol: &Volume, target: f64, interp: Interpolation) -> Result<Volume> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::InvalidVolume(format!(
            "target spacing must be positive, got {target}"
        )));
    }
    if vol.spacing.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidVolume("non-finite spacing".into()));
    }
    let dims: [usize; 3] = std::array::from_fn(|a| {
        ((vol.dims[a] as f64 * vol.spacing[a] / target).round() as usize).max(1)
    });
    let ratio: [f64; 3] = std::array::from_fn(|a| target / vol.spacing[a]);
    let same_grid = ratio.iter().all(|&r| r == 1.0) && dims == vol.dims;
    if same_grid {
        let mut out = vol.clone();
        out.spacing = [target; 3];
        return Ok(out);
    }
    Volume::from_fn(dims, [target; 3], vol.origin, |i, j, k| {
        let v = [
            i as f64 * ratio[0],
            j as f64 * ratio[1],
            k as f64 * ratio[2],
        ];
        match interp {
            Interpolation::Trilinear => vol.sample_clamped(v) as f32,
            Interpolation::Nearest => vol.sample_nearest(v),
        }
    })
}

/// Clip to the HU window and map linearly onto `[-1, 1]`.
#[inline]
pub fn hu_to_unit(hu: f64) -> f64 {
    let c = hu.clamp(HU_MIN, HU_MAX);
    2.0 * (c - HU_MIN) / (HU_MAX - HU_MIN) - 1.0
}

pub fn normalize_hu(vol: &Volume) -> Volume {
    vol.map(|v| hu_to_unit(v as f64) as f32)
}

/// [`normalize_hu`] with an explicit window.
pub fn normalize_hu_window(vol: &Volume, hu_min: f64, hu_max: f64) -> Volume {
    vol.map(|v| {
        let c = (v as f64).clamp(hu_min, hu_max);
        (2.0 * (c - hu_min) / (hu_max - hu_min) - 1.0) as f32
    })
}

/// Regular tiling of a volume into overlapping cubes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubeGrid {
    pub cube_side: usize,
    pub overlap: usize,
    /// Voxel-index origin of each cube, x-fastest enumeration.
    pub origins: Vec<[usize; 3]>,
    /// Volume extent after padding up to `cube_side` where needed.
    pub padded_dims: [usize; 3],
}

fn axis_origins(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o);
        if o + side >= extent {
            break;
        }
        o = (o + stride).min(extent - side);
    }
    out
}

/// Tile `dims` into cubes of `cube_side` voxels overlapping by `overlap`.
///
/// Axes shorter than the cube are padded (at the high end) when `allow_pad`
/// is set, otherwise an error is returned.
pub fn tile_volume(
    dims: [usize; 3],
    cube_side: usize,
    overlap: usize,
    allow_pad: bool,
) -> Result<CubeGrid> {
    if cube_side == 0 || overlap >= cube_side {
        return Err(Error::Tiling(format!(
            "need 0 <= overlap < cube_side, got overlap {overlap}, side {cube_side}"
        )));
    }
    let mut padded = dims;
    for a in 0..3 {
        if dims[a] < cube_side {
            if !allow_pad {
                return Err(Error::Tiling(format!(
                    "cube side {cube_side} exceeds volume extent {} on axis {a}",
                    dims[a]
                )));
            }
            padded[a] = cube_side;
        }
    }
    let stride = cube_side - overlap;
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(padded[a], cube_side, stride))
        .collect();
    let mut origins = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(CubeGrid {
        cube_side,
        overlap,
        origins,
        padded_dims: padded,
    })
}

/// Extract a tile as a volume (padding with `pad` beyond the data).
pub fn extract_tile(vol: &Volume, origin: [usize; 3], side: usize, pad: f32) -> Volume {
    let world_origin = vol.voxel_to_world(origin.map(|o| o as f64)).to_array();
    let d = vol.dims;
    Volume::from_fn([side; 3], vol.spacing, world_origin, |i, j, k| {
        let (x, y, z) = (origin[0] + i, origin[1] + j, origin[2] + k);
        if x < d[0] && y < d[1] && z < d[2] {
            vol.get(x, y, z)
        } else {
            pad
        }
    })
    .expect("tile geometry is valid")
}

/// Axis-aligned crop of physical side `side` mm centred at `center`.
///
/// The crop keeps the source spacing; its dims are `round(side / spacing)`.
/// Samples are trilinear; neighbours outside the source take `pad_value`.
pub fn crop_cube(vol: &Volume, center: WorldPoint, side: f64, pad_value: f32) -> Result<Volume> {
    if !(side.is_finite() && side > 0.0) {
        return Err(Error::Input(format!(
            "crop side must be positive, got {side}"
        )));
    }
    let dims: [usize; 3] =
        std::array::from_fn(|a| ((side / vol.spacing[a]).round() as usize).max(1));
    let c = center.to_array();
    let origin: [f64; 3] =
        std::array::from_fn(|a| c[a] - (dims[a] - 1) as f64 / 2.0 * vol.spacing[a]);
    let start = vol.world_to_voxel(WorldPoint::from_array(origin));
    Volume::from_fn(dims, vol.spacing, origin, |i, j, k| {
        let v = [
            start[0] + i as f64,
            start[1] + j as f64,
            start[2] + k as f64,
        ];
        vol.sample_padded(v, pad_value) as f32
    })
}
