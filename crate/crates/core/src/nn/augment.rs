//! Training-time geometric augmentation: axis flips, rotation about the z
//! axis and isotropic scaling, applied while resampling a crop so voxels
//! and ground truth go through the same map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::phantom::GroundTruthEmbolus;
use crate::volume::{Volume, WorldPoint, AIR_NORMALIZED};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    /// Upper bound of the z rotation, degrees (drawn from `[0, max]`).
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: true,
            max_rotation_deg: 180.0,
            scale_range: (0.75, 1.25),
        }
    }
}

/// One draw of the augmentation parameters. The forward map takes an
/// offset `d` from the crop centre in the source to `scale * Rz(angle) * F d`
/// in the output, with `F` the flip diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: [bool; 3],
    pub angle_deg: f64,
    pub scale: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            flip: [false; 3],
            angle_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let flip = if cfg.flip {
            [rng.random(), rng.random(), rng.random()]
        } else {
            [false; 3]
        };
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(0.0..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        Self {
            flip,
            angle_deg,
            scale,
        }
    }

    fn sign(&self) -> [f64; 3] {
        self.flip.map(|f| if f { -1.0 } else { 1.0 })
    }

    /// Apply the linear part to a source offset.
    pub fn forward(&self, d: [f64; 3]) -> [f64; 3] {
        let s = self.sign();
        let f = [d[0] * s[0], d[1] * s[1], d[2] * s[2]];
        let (sn, cs) = self.angle_deg.to_radians().sin_cos();
        [
            self.scale * (cs * f[0] - sn * f[1]),
            self.scale * (sn * f[0] + cs * f[1]),
            self.scale * f[2],
        ]
    }

    pub fn inverse(&self, d: [f64; 3]) -> [f64; 3] {
        let (sn, cs) = self.angle_deg.to_radians().sin_cos();
        let u = d.map(|v| v / self.scale);
        let r = [cs * u[0] + sn * u[1], -sn * u[0] + cs * u[1], u[2]];
        let s = self.sign();
        [r[0] * s[0], r[1] * s[1], r[2] * s[2]]
    }
}

/// A crop with ground truth expressed in its own world frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub emboli: Vec<GroundTruthEmbolus>,
}

/// Resample an `n³` crop centred at voxel coordinate `center` of `vol`
/// under `aug`. The crop keeps the source spacing; its world origin is the
/// position of the crop's first voxel had it been cut without augmentation.
/// Ground truth is mapped with the same transform.
pub fn augmented_crop(
    vol: &Volume,
    emboli: &[GroundTruthEmbolus],
    center: [f64; 3],
    n: usize,
    aug: &Augmentation,
) -> Sample {
    let sp = vol.spacing();
    let half = (n as f64 - 1.0) / 2.0;
    // offsets are handled in mm so anisotropic spacing stays correct
    let out = Volume::from_fn(
        [n; 3],
        sp,
        std::array::from_fn(|a| vol.origin()[a] + (center[a] - half) * sp[a]),
        |i, j, k| {
            let d_out = [
                (i as f64 - half) * sp[0],
                (j as f64 - half) * sp[1],
                (k as f64 - half) * sp[2],
            ];
            let d_src = aug.inverse(d_out);
            let v = std::array::from_fn(|a| center[a] + d_src[a] / sp[a]);
            vol.sample_padded(v, AIR_NORMALIZED) as f32
        },
    )
    .expect("crop geometry is valid");
    let c_world = vol.voxel_to_world(center).to_array();
    let out_center = out.voxel_to_world([half; 3]).to_array();
    let emboli = emboli
        .iter()
        .map(|e| {
            let p = e.center.to_array();
            let d = aug.forward(std::array::from_fn(|a| p[a] - c_world[a]));
            let ax = aug.forward(e.axis).map(|v| v / aug.scale);
            GroundTruthEmbolus {
                center: WorldPoint::from_array(std::array::from_fn(|a| out_center[a] + d[a])),
                radius: e.radius * aug.scale,
                half_length: e.half_length * aug.scale,
                axis: ax,
            }
        })
        .collect();
    Sample {
        volume: out,
        emboli,
    }
}

/// Augment a whole sample about its centre.
pub fn augment(sample: &Sample, aug: &Augmentation) -> Sample {
    let d = sample.volume.dims();
    assert!(
        d[0] == d[1] && d[1] == d[2],
        "augment expects a cubic sample"
    );
    let c = [(d[0] as f64 - 1.0) / 2.0; 3];
    augmented_crop(&sample.volume, &sample.emboli, c, d[0], aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_with_marker(at: [usize; 3]) -> Sample {
        let mut v = Volume::filled([17; 3], [1.0; 3], [0.0; 3], -1.0).unwrap();
        v.set(at[0], at[1], at[2], 1.0);
        let e = GroundTruthEmbolus {
            center: WorldPoint::new(at[0] as f64, at[1] as f64, at[2] as f64),
            radius: 1.0,
            half_length: 2.0,
            axis: [1.0, 0.0, 0.0],
        };
        Sample {
            volume: v,
            emboli: vec![e],
        }
    }

    #[test]
    fn identity_draw_is_exact() {
        let s = sample_with_marker([3, 12, 5]);
        let a = augment(&s, &Augmentation::identity());
        assert_eq!(a.volume.data(), s.volume.data());
        assert_eq!(a.emboli, s.emboli);
        let off = AugmentConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(
            Augmentation::draw(&off, &mut ChaCha8Rng::seed_from_u64(0)),
            Augmentation::identity()
        );
    }

    #[test]
    fn double_flip_restores() {
        let s = sample_with_marker([3, 12, 5]);
        let f = Augmentation {
            flip: [false, true, false],
            ..Augmentation::identity()
        };
        let twice = augment(&augment(&s, &f), &f);
        assert_eq!(twice.volume.data(), s.volume.data());
        let c = twice.emboli[0].center;
        assert!((c.y - 12.0).abs() < 1e-12);
    }

    #[test]
    fn marker_follows_gt_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = sample_with_marker([10, 6, 9]);
            let aug = Augmentation::draw(&AugmentConfig::default(), &mut rng);
            let a = augment(&s, &aug);
            let (best, _) =
                a.volume
                    .data()
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f32::MIN),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
            let p = [best % 17, (best / 17) % 17, best / 289].map(|x| x as f64);
            let g = a.emboli[0].center.to_array();
            let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
            // the brightest resampled voxel is the nearest grid point to the true image
            assert!(d <= 0.87, "marker at {p:?}, gt at {g:?}");
        }
    }

    #[test]
    fn forward_inverse_round_trip() {
        let a = Augmentation {
            flip: [true, false, true],
            angle_deg: 37.0,
            scale: 1.2,
        };
        let d = [1.5, -2.0, 0.25];
        let r = a.inverse(a.forward(d));
        for i in 0..3 {
            assert!((r[i] - d[i]).abs() < 1e-12);
        }
    }
}
