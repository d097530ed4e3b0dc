//! Anchor-cube machinery for the candidate proposal subnet.
//!
//! Anchors are indexed scale-major: anchor `s * P + v` is scale `s` at
//! feature voxel `v = x + nx * (y + ny * z)`, which matches the channel layout
//! of the head output (`5 * s + c` with `c` in `dx, dy, dz, dd, logit`).

mod sampling;

pub use sampling::{sample_fp_batch, FpBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::logistic;
use crate::nn::tensor::{Scalar, Tensor};

/// Channels per scale in the head output.
pub const VALUES_PER_ANCHOR: usize = 5;

/// Axis-aligned cube: centre in mm and side length in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCube {
    pub center: [f64; 3],
    pub side: f64,
}

impl BoxCube {
    pub fn new(center: [f64; 3], side: f64) -> Self {
        debug_assert!(side > 0.0);
        Self { center, side }
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(3)
    }
}

/// Anchor scales (mm, ascending) and the feature stride (voxels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorSpec {
    pub scales: Vec<f64>,
    pub feature_stride: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![10.0, 30.0, 60.0],
            feature_stride: 4,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty()
            || self.scales.iter().any(|&s| !(s > 0.0))
            || self.scales.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "anchor scales must be positive and strictly increasing: {:?}",
                self.scales
            )));
        }
        if self.feature_stride == 0 {
            return Err(Error::Config("feature stride must be positive".into()));
        }
        Ok(())
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }
}

/// Offsets of a cube relative to an anchor, with a log-ratio side term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegressionTarget {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dd: f64,
}

impl RegressionTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dz, self.dd]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            dd: a[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

/// A proposed cube with its PE probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cube: BoxCube,
    pub probability: f64,
}

/// One anchor per (feature voxel, scale), centred at the receptive centre
/// `(i + 0.5) * stride` measured from the input cube's outer corner.
///
/// `featmap_dims` and `voxel_origin_world` are `[x, y, z]`; the latter is the
/// world position of the input cube's first voxel centre.
pub fn gen_anchors(
    featmap_dims: [usize; 3],
    spec: &AnchorSpec,
    voxel_origin_world: [f64; 3],
    spacing: [f64; 3],
) -> Vec<BoxCube> {
    let [nx, ny, nz] = featmap_dims;
    let stride = spec.feature_stride as f64;
    let mut out = Vec::with_capacity(nx * ny * nz * spec.n_scales());
    for &s in &spec.scales {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = [i, j, k];
                    let center = std::array::from_fn(|a| {
                        voxel_origin_world[a] + ((idx[a] as f64 + 0.5) * stride - 0.5) * spacing[a]
                    });
                    out.push(BoxCube::new(center, s));
                }
            }
        }
    }
    out
}

/// Intersection over union of two axis-aligned cubes.
pub fn iou(a: &BoxCube, b: &BoxCube) -> f64 {
    let mut inter = 1.0;
    for ax in 0..3 {
        let lo = (a.center[ax] - a.side / 2.0).max(b.center[ax] - b.side / 2.0);
        let hi = (a.center[ax] + a.side / 2.0).min(b.center[ax] + b.side / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode(gt: &BoxCube, anchor: &BoxCube) -> RegressionTarget {
    let d = anchor.side;
    RegressionTarget {
        dx: (gt.center[0] - anchor.center[0]) / d,
        dy: (gt.center[1] - anchor.center[1]) / d,
        dz: (gt.center[2] - anchor.center[2]) / d,
        dd: (gt.side / d).ln(),
    }
}

pub fn decode(t: &RegressionTarget, anchor: &BoxCube) -> BoxCube {
    let d = anchor.side;
    BoxCube {
        center: [
            anchor.center[0] + d * t.dx,
            anchor.center[1] + d * t.dy,
            anchor.center[2] + d * t.dz,
        ],
        side: d * t.dd.exp(),
    }
}

/// Thresholds of the anchor labelling rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelRule {
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Mark each ground truth's best-overlapping anchor positive.
    pub force_best: bool,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            negative_iou: 0.02,
            force_best: true,
        }
    }
}

/// Label every anchor and record the ground truth it is matched to.
pub fn label_anchors(
    anchors: &[BoxCube],
    gts: &[BoxCube],
    rule: &LabelRule,
) -> Vec<(AnchorLabel, Option<usize>)> {
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];
    let mut out: Vec<(AnchorLabel, Option<usize>)> = anchors
        .iter()
        .enumerate()
        .map(|(ai, a)| {
            let mut best = (0.0f64, None);
            for (gi, g) in gts.iter().enumerate() {
                // cubes farther apart than half their summed sides cannot overlap
                let reach = (a.side + g.side) / 2.0;
                if (0..3).any(|ax| (a.center[ax] - g.center[ax]).abs() >= reach) {
                    continue;
                }
                let v = iou(a, g);
                if v > best.0 {
                    best = (v, Some(gi));
                }
                if v > best_for_gt[gi].0 {
                    best_for_gt[gi] = (v, ai);
                }
            }
            match best {
                (v, Some(g)) if v > rule.positive_iou => (AnchorLabel::Positive, Some(g)),
                (v, m) if v < rule.negative_iou => (AnchorLabel::Negative, m.filter(|_| v > 0.0)),
                (_, m) => (AnchorLabel::Ignored, m),
            }
        })
        .collect();
    if rule.force_best {
        for (gi, &(v, ai)) in best_for_gt.iter().enumerate() {
            if v > 0.0 && out[ai].0 != AnchorLabel::Positive {
                out[ai] = (AnchorLabel::Positive, Some(gi));
            }
        }
    }
    out
}

/// Three-channel `[3, nz, ny, nx]` map of each feature voxel's receptive
/// centre in whole-volume coordinates, normalised to `[-1, 1]`
/// (channels x, y, z).
pub fn location_feature_map<T: Scalar>(
    cube_origin: [usize; 3],
    featmap_dims: [usize; 3],
    volume_dims: [usize; 3],
    stride: usize,
) -> Tensor<T> {
    let [nx, ny, nz] = featmap_dims;
    let plane = nx * ny * nz;
    let mut data = vec![T::zero(); 3 * plane];
    let coord = |axis: usize, i: usize| -> T {
        let g = cube_origin[axis] as f64 + (i as f64 + 0.5) * stride as f64 - 0.5;
        let extent = (volume_dims[axis].max(2) - 1) as f64;
        T::from_f64(2.0 * g / extent - 1.0)
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = i + nx * (j + ny * k);
                data[v] = coord(0, i);
                data[plane + v] = coord(1, j);
                data[2 * plane + v] = coord(2, k);
            }
        }
    }
    Tensor::from_vec(&[3, nz, ny, nx], data).expect("shape matches")
}

/// Per-anchor `(logits, deltas)` views of a `[5N, D, H, W]` head output.
pub fn split_head<T: Scalar>(
    featmap: &Tensor<T>,
    n_scales: usize,
) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    let shape = featmap.shape();
    if shape.len() != 4 || shape[0] != VALUES_PER_ANCHOR * n_scales {
        return Err(Error::shape(
            "decode_head",
            &[VALUES_PER_ANCHOR * n_scales],
            &shape[..shape.len().min(1)],
        ));
    }
    let p: usize = shape[1..].iter().product();
    let d = featmap.data();
    let mut logits = Vec::with_capacity(n_scales * p);
    let mut deltas = Vec::with_capacity(n_scales * p);
    for s in 0..n_scales {
        let base = s * VALUES_PER_ANCHOR * p;
        for v in 0..p {
            deltas.push(std::array::from_fn(|c| d[base + c * p + v].as_f64()));
            logits.push(d[base + 4 * p + v].as_f64());
        }
    }
    Ok((logits, deltas))
}

/// Inverse of [`split_head`]: scatter per-anchor gradients into head layout.
pub fn merge_head_grad<T: Scalar>(
    grad_logits: &[f64],
    grad_deltas: &[[f64; 4]],
    n_scales: usize,
    spatial: [usize; 3],
) -> Tensor<T> {
    let p: usize = spatial.iter().product();
    let mut g = Tensor::zeros(&[
        VALUES_PER_ANCHOR * n_scales,
        spatial[0],
        spatial[1],
        spatial[2],
    ]);
    let gd = g.data_mut();
    for s in 0..n_scales {
        let base = s * VALUES_PER_ANCHOR * p;
        for v in 0..p {
            let a = s * p + v;
            for c in 0..4 {
                gd[base + c * p + v] = T::from_f64(grad_deltas[a][c]);
            }
            gd[base + 4 * p + v] = T::from_f64(grad_logits[a]);
        }
    }
    g
}

/// Decode every anchor whose probability reaches `prob_threshold`.
pub fn decode_head<T: Scalar>(
    featmap: &Tensor<T>,
    anchors: &[BoxCube],
    n_scales: usize,
    prob_threshold: f64,
) -> Result<Vec<Candidate>> {
    let (logits, deltas) = split_head(featmap, n_scales)?;
    if logits.len() != anchors.len() {
        return Err(Error::shape(
            "decode_head anchors",
            &[logits.len()],
            &[anchors.len()],
        ));
    }
    Ok(logits
        .iter()
        .zip(&deltas)
        .zip(anchors)
        .filter_map(|((&l, d), a)| {
            let p = logistic(l);
            (p >= prob_threshold).then(|| Candidate {
                cube: decode(&RegressionTarget::from_array(*d), a),
                probability: p,
            })
        })
        .collect())
}

fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then_with(|| a.cube.center[0].total_cmp(&b.cube.center[0]))
        .then_with(|| a.cube.center[1].total_cmp(&b.cube.center[1]))
        .then_with(|| a.cube.center[2].total_cmp(&b.cube.center[2]))
        .then_with(|| a.cube.side.total_cmp(&b.cube.side))
}

/// Greedy suppression in descending probability; a candidate is kept iff
/// its IoU with every kept candidate is below `iou_threshold`.
pub fn nms_3d(candidates: &[Candidate], iou_threshold: f64) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(candidate_order);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in sorted {
        if kept.iter().all(|k| iou(&k.cube, &c.cube) < iou_threshold) {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64, y: f64, z: f64, d: f64) -> BoxCube {
        BoxCube::new([x, y, z], d)
    }

    #[test]
    fn anchor_counts_and_sides() {
        let spec = AnchorSpec::default();
        let a = gen_anchors([24, 24, 24], &spec, [0.0; 3], [1.0; 3]);
        assert_eq!(a.len(), 41472);
        for (s, chunk) in a.chunks(24 * 24 * 24).enumerate() {
            assert!(chunk.iter().all(|c| c.side == spec.scales[s]));
        }
        // first anchor at the receptive centre of feature voxel 0
        assert_eq!(a[0].center, [1.5, 1.5, 1.5]);
    }

    #[test]
    fn single_anchor_at_cube_center() {
        let spec = AnchorSpec {
            scales: vec![10.0],
            feature_stride: 96,
        };
        let a = gen_anchors([1, 1, 1], &spec, [-10.0, 0.0, 5.0], [1.0; 3]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].center, [-10.0 + 47.5, 47.5, 5.0 + 47.5]);
    }

    #[test]
    fn anchor_spec_validation() {
        assert!(AnchorSpec::default().validate().is_ok());
        assert!(AnchorSpec {
            scales: vec![30.0, 10.0],
            feature_stride: 4
        }
        .validate()
        .is_err());
        assert!(AnchorSpec {
            scales: vec![0.0],
            feature_stride: 4
        }
        .validate()
        .is_err());
    }

    #[test]
    fn iou_examples() {
        let a = cube(0.0, 0.0, 0.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &cube(10.0, 0.0, 0.0, 10.0)), 0.0);
        assert!((iou(&a, &cube(5.0, 0.0, 0.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn encode_example() {
        let anchor = cube(50.0, 50.0, 50.0, 30.0);
        let t = encode(&cube(53.0, 50.0, 50.0, 30.0), &anchor);
        assert!((t.dx - 0.1).abs() < 1e-15 && t.dy == 0.0 && t.dz == 0.0 && t.dd == 0.0);
        assert_eq!(encode(&anchor, &anchor), RegressionTarget::default());
    }

    #[test]
    fn decode_examples() {
        let anchor = cube(1.0, 2.0, 3.0, 12.0);
        assert_eq!(decode(&RegressionTarget::default(), &anchor), anchor);
        let t = RegressionTarget {
            dd: 2f64.ln(),
            ..Default::default()
        };
        assert!((decode(&t, &anchor).side - 24.0).abs() < 1e-12);
    }

    #[test]
    fn labelling_rules() {
        let anchors = vec![
            cube(0.0, 0.0, 0.0, 10.0),
            cube(100.0, 0.0, 0.0, 10.0),
            cube(4.6, 0.0, 0.0, 10.0),
        ];
        let rule = LabelRule::default();
        let none = label_anchors(&anchors, &[], &rule);
        assert!(none.iter().all(|l| *l == (AnchorLabel::Negative, None)));
        let lab = label_anchors(&anchors, &[cube(0.0, 0.0, 0.0, 10.0)], &rule);
        assert_eq!(lab[0], (AnchorLabel::Positive, Some(0)));
        assert_eq!(lab[1].0, AnchorLabel::Negative);
        // IoU of offset 4.6 is 5.4/14.6 ~ 0.37 -> ignored band
        assert_eq!(lab[2].0, AnchorLabel::Ignored);
    }

    #[test]
    fn forced_best_anchor() {
        let anchors = vec![cube(0.0, 0.0, 0.0, 10.0), cube(3.0, 3.0, 3.0, 10.0)];
        let gt = [cube(2.5, 2.5, 2.5, 6.0)];
        let with = label_anchors(&anchors, &gt, &LabelRule::default());
        assert_eq!(with[1], (AnchorLabel::Positive, Some(0)));
        let without = label_anchors(
            &anchors,
            &gt,
            &LabelRule {
                force_best: false,
                ..Default::default()
            },
        );
        assert!(without.iter().all(|l| l.0 != AnchorLabel::Positive));
    }

    #[test]
    fn location_map_normalisation() {
        // feature voxel 11 has its receptive centre at 45.5, the middle of 92 voxels
        let m = location_feature_map::<f64>([0, 0, 0], [24, 24, 24], [92, 92, 92], 4);
        let v = 11 + 24 * (11 + 24 * 11);
        let p = 24 * 24 * 24;
        for c in 0..3 {
            assert!(m.data()[c * p + v].abs() < 1e-12);
        }
        let last = m.data()[p - 1];
        assert!(m.data()[0] < -0.95 && last > 0.95);
    }

    #[test]
    fn location_map_consistent_across_tiles() {
        let dims = [160, 160, 160];
        let a = location_feature_map::<f64>([0, 0, 0], [24, 24, 24], dims, 4);
        let b = location_feature_map::<f64>([64, 0, 32], [24, 24, 24], dims, 4);
        // global feature voxel (20, 5, 10) is local (20,5,10) in a and (4,5,2) in b
        let p = 24 * 24 * 24;
        let ia = 20 + 24 * (5 + 24 * 10);
        let ib = 4 + 24 * (5 + 24 * 2);
        for c in 0..3 {
            assert_eq!(a.data()[c * p + ia], b.data()[c * p + ib]);
        }
    }

    #[test]
    fn decode_head_cases() {
        let spec = AnchorSpec {
            scales: vec![10.0, 30.0],
            feature_stride: 4,
        };
        let anchors = gen_anchors([2, 1, 1], &spec, [0.0; 3], [1.0; 3]);
        let mut f = Tensor::<f64>::full(&[10, 1, 1, 2], -1e3);
        assert!(decode_head(&f, &anchors, 2, 0.1).unwrap().is_empty());
        // scale 1 at feature voxel x=1: logit 0 with dx=0.1, dd=ln 2
        let p = 2;
        f.data_mut()[(5 + 4) * p + 1] = 0.0;
        f.data_mut()[5 * p + 1] = 0.1;
        f.data_mut()[(5 + 1) * p + 1] = 0.0;
        f.data_mut()[(5 + 2) * p + 1] = 0.0;
        f.data_mut()[(5 + 3) * p + 1] = 2f64.ln();
        let c = decode_head(&f, &anchors, 2, 0.1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].probability, 0.5);
        let a = anchors[3];
        assert!((c[0].cube.center[0] - (a.center[0] + 3.0)).abs() < 1e-12);
        assert!((c[0].cube.side - 60.0).abs() < 1e-9);
        assert!(decode_head(&Tensor::<f64>::zeros(&[9, 1, 1, 2]), &anchors, 2, 0.1).is_err());
    }

    #[test]
    fn split_merge_round_trip() {
        let f = Tensor::<f64>::from_fn(&[15, 2, 3, 4], |i| i as f64);
        let (l, d) = split_head(&f, 3).unwrap();
        assert_eq!(merge_head_grad::<f64>(&l, &d, 3, [2, 3, 4]), f);
    }

    #[test]
    fn nms_cases() {
        let c = |x: f64, p: f64| Candidate {
            cube: cube(x, 0.0, 0.0, 10.0),
            probability: p,
        };
        assert_eq!(nms_3d(&[c(0.0, 0.5)], 0.1), vec![c(0.0, 0.5)]);
        assert_eq!(nms_3d(&[c(0.0, 0.4), c(0.0, 0.9)], 0.1), vec![c(0.0, 0.9)]);
        assert_eq!(nms_3d(&[c(0.0, 0.4), c(50.0, 0.9)], 0.1).len(), 2);
    }
}
