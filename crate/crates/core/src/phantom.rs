//! Synthetic CT-angiography-like phantoms: a dark lung body with bright,
//! slowly winding vessel tubes and darker ellipsoidal filling defects.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::froc::{write_annotations, GtRecord};
use crate::volume::{write_volume, Volume, WorldPoint};

/// Mask labels.
pub const LABEL_BACKGROUND: f32 = 0.0;
pub const LABEL_LUMEN: f32 = 1.0;
pub const LABEL_EMBOLUS: f32 = 2.0;

const SEGMENT_MM: f64 = 8.0;
const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intensities {
    pub background: f64,
    pub parenchyma: f64,
    pub lumen: f64,
    pub embolus: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            background: -900.0,
            parenchyma: -800.0,
            lumen: 300.0,
            embolus: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub n_vessels: usize,
    /// Lumen radius interval, mm.
    pub vessel_radius_range: (f64, f64),
    pub n_emboli: usize,
    /// Cross-sectional semi-axis interval of emboli, mm.
    pub embolus_radius_range: (f64, f64),
    /// Ratio of the along-vessel semi-axis to the cross-sectional one.
    pub embolus_elongation: f64,
    /// Minimum distance of embolus centres from the volume border, mm.
    pub border_margin: f64,
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96; 3],
            spacing: 1.0,
            n_vessels: 5,
            vessel_radius_range: (3.0, 6.0),
            n_emboli: 3,
            embolus_radius_range: (1.5, 3.0),
            embolus_elongation: 2.0,
            border_margin: 8.0,
            intensities: Intensities::default(),
            noise_sigma: 20.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (vl, vh) = self.vessel_radius_range;
        let (el, eh) = self.embolus_radius_range;
        if self.dims.contains(&0) || !(self.spacing > 0.0) {
            return bad(format!(
                "phantom dims/spacing must be positive: {:?} {}",
                self.dims, self.spacing
            ));
        }
        if !(vl > 0.0 && vl <= vh) || !(el > 0.0 && el <= eh) {
            return bad("radius ranges must be positive and ordered".into());
        }
        if eh >= vh {
            return bad(format!(
                "embolus radius upper bound {eh} must be below vessel radius upper bound {vh}"
            ));
        }
        if self.n_emboli > 0 && self.n_vessels == 0 {
            return bad("emboli need at least one vessel".into());
        }
        if !(self.embolus_elongation >= 1.0) || !(self.noise_sigma >= 0.0) {
            return bad("elongation must be >= 1 and noise sigma >= 0".into());
        }
        Ok(())
    }
}

/// An ellipsoidal embolus: cross-sectional semi-axis `radius`, semi-axis
/// `half_length` along the host vessel direction `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEmbolus {
    pub center: WorldPoint,
    pub radius: f64,
    pub half_length: f64,
    pub axis: [f64; 3],
}

impl GroundTruthEmbolus {
    /// Largest semi-axis; the radius used for hit testing.
    pub fn max_semi_axis(&self) -> f64 {
        self.radius.max(self.half_length)
    }

    /// Whether a world point lies inside the ellipsoid.
    pub fn contains(&self, p: WorldPoint) -> bool {
        ellipsoid_level(p.to_array(), self) <= 1.0
    }
}

fn ellipsoid_level(p: [f64; 3], e: &GroundTruthEmbolus) -> f64 {
    let c = e.center.to_array();
    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let along = d[0] * e.axis[0] + d[1] * e.axis[1] + d[2] * e.axis[2];
    let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along).max(0.0);
    along * along / (e.half_length * e.half_length) + r2 / (e.radius * e.radius)
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Intensities in HU.
    pub volume: Volume,
    pub emboli: Vec<GroundTruthEmbolus>,
    /// Labels: 0 background, 1 lumen, 2 embolus.
    pub mask: Volume,
}

struct Vessel {
    points: Vec<[f64; 3]>,
    radius: f64,
}

impl Vessel {
    fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Centreline point and unit tangent at arc length `s`.
    fn at(&self, mut s: f64) -> ([f64; 3], [f64; 3]) {
        let last = self.points.len() - 2;
        for (i, w) in self.points.windows(2).enumerate() {
            let l = dist(w[0], w[1]);
            if s <= l || i == last {
                let t = (s / l).clamp(0.0, 1.0);
                let dir = sub(w[1], w[0]).map(|v| v / l);
                return (
                    std::array::from_fn(|a| w[0][a] + t * (w[1][a] - w[0][a])),
                    dir,
                );
            }
            s -= l;
        }
        unreachable!("vessel has at least one segment")
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| n.sample(rng));
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return unit(v);
        }
    }
}

/// Distance from `p` to segment `ab`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, std::array::from_fn(|i| a[i] + t * ab[i]))
}

fn random_vessel(spec: &PhantomSpec, rng: &mut impl Rng) -> Vessel {
    let ext: [f64; 3] = spec.dims.map(|d| (d - 1) as f64 * spec.spacing);
    let start: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.25..0.75) * ext[a]);
    let radius = rng.random_range(spec.vessel_radius_range.0..=spec.vessel_radius_range.1);
    let dir = random_unit(rng);
    let drift = Normal::new(0.0, 0.25).expect("drift");
    let inside = |p: [f64; 3]| (0..3).all(|a| p[a] >= -radius && p[a] <= ext[a] + radius);
    let grow = |dir0: [f64; 3], rng: &mut dyn rand::RngCore| {
        let mut pts = Vec::new();
        let mut p = start;
        let mut d = dir0;
        for _ in 0..32 {
            d = unit(std::array::from_fn(|a| d[a] + drift.sample(rng)));
            p = std::array::from_fn(|a| p[a] + SEGMENT_MM * d[a]);
            pts.push(p);
            if !inside(p) {
                break;
            }
        }
        pts
    };
    let forward = grow(dir, rng);
    let backward = grow(dir.map(|v| -v), rng);
    let mut points: Vec<[f64; 3]> = backward.into_iter().rev().collect();
    points.push(start);
    points.extend(forward);
    Vessel { points, radius }
}

/// Generate one phantom; identical specs give bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nx, ny, nz] = spec.dims;
    let h = spec.spacing;
    let n = nx * ny * nz;
    let iv = spec.intensities;
    let ext: [f64; 3] = spec.dims.map(|d| (d - 1) as f64 * h);
    let mid = ext.map(|e| e / 2.0);
    let body = ext.map(|e| 0.48 * e + h);

    let mut hu = vec![iv.background as f32; n];
    let mut label = vec![LABEL_BACKGROUND; n];
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [i as f64 * h, j as f64 * h, k as f64 * h];
                let q: f64 = (0..3).map(|a| ((p[a] - mid[a]) / body[a]).powi(2)).sum();
                if q <= 1.0 {
                    hu[idx(i, j, k)] = iv.parenchyma as f32;
                }
            }
        }
    }

    let vessels: Vec<Vessel> = (0..spec.n_vessels)
        .map(|_| random_vessel(spec, &mut rng))
        .collect();
    let to_range = |lo: f64, hi: f64, n: usize| -> std::ops::Range<usize> {
        let a = (lo / h).floor().max(0.0) as usize;
        let b = ((hi / h).ceil() + 1.0).clamp(0.0, n as f64) as usize;
        a.min(n)..b
    };
    for v in &vessels {
        for w in v.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let r = v.radius;
            let rng_axis =
                |ax: usize, n: usize| to_range(a[ax].min(b[ax]) - r, a[ax].max(b[ax]) + r, n);
            for k in rng_axis(2, nz) {
                for j in rng_axis(1, ny) {
                    for i in rng_axis(0, nx) {
                        let p = [i as f64 * h, j as f64 * h, k as f64 * h];
                        if segment_distance(p, a, b) <= r {
                            hu[idx(i, j, k)] = iv.lumen as f32;
                            label[idx(i, j, k)] = LABEL_LUMEN;
                        }
                    }
                }
            }
        }
    }

    let mut emboli: Vec<GroundTruthEmbolus> = Vec::with_capacity(spec.n_emboli);
    let lengths: Vec<f64> = vessels.iter().map(Vessel::length).collect();
    let total: f64 = lengths.iter().sum();
    let margin = spec.border_margin;
    let mut failures = Vec::new();
    for e in 0..spec.n_emboli {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let mut pick = rng.random_range(0.0..total);
            let mut vi = 0;
            while vi + 1 < vessels.len() && pick > lengths[vi] {
                pick -= lengths[vi];
                vi += 1;
            }
            let v = &vessels[vi];
            let (c, axis) = v.at(pick.min(lengths[vi]));
            let (rl, rh) = spec.embolus_radius_range;
            let r_max = rh.min(v.radius - h);
            if r_max < rl {
                continue;
            }
            let radius = rng.random_range(rl..=r_max);
            let half_length = radius * spec.embolus_elongation;
            if (0..3).any(|a| c[a] < margin || c[a] > ext[a] - margin) {
                continue;
            }
            let ci: [usize; 3] = std::array::from_fn(|a| (c[a] / h).round() as usize);
            if label[idx(ci[0], ci[1], ci[2])] != LABEL_LUMEN {
                continue;
            }
            let clear = emboli
                .iter()
                .all(|o| dist(o.center.to_array(), c) > o.half_length + half_length + 2.0 * h);
            if !clear {
                continue;
            }
            placed = Some(GroundTruthEmbolus {
                center: WorldPoint::from_array(c),
                radius,
                half_length,
                axis,
            });
            break;
        }
        match placed {
            Some(g) => {
                let reach = g.max_semi_axis();
                let c = g.center.to_array();
                let ax = |a: usize, n: usize| to_range(c[a] - reach, c[a] + reach, n);
                for k in ax(2, nz) {
                    for j in ax(1, ny) {
                        for i in ax(0, nx) {
                            let id = idx(i, j, k);
                            if label[id] == LABEL_LUMEN
                                && ellipsoid_level([i as f64 * h, j as f64 * h, k as f64 * h], &g)
                                    <= 1.0
                            {
                                hu[id] = iv.embolus as f32;
                                label[id] = LABEL_EMBOLUS;
                            }
                        }
                    }
                }
                emboli.push(g);
            }
            None => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Placement(format!(
            "could not place emboli {failures:?} of {} after {PLACEMENT_RETRIES} attempts each (seed {})",
            spec.n_emboli, spec.seed
        )));
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("noise sigma is valid");
        for v in hu.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    Ok(Phantom {
        volume: Volume::new(spec.dims, [h; 3], [0.0; 3], hu)?,
        emboli,
        mask: Volume::new(spec.dims, [h; 3], [0.0; 3], label)?,
    })
}

/// Seed of scan `index` under a master seed.
pub fn scan_seed(master: u64, index: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"phantom-scan");
    hasher.update(master.to_le_bytes());
    hasher.update((index as u64).to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn scan_id(index: usize) -> String {
    format!("scan_{index:04}")
}

/// Generate scan `index` of a dataset, resampling placement failures with a
/// bumped seed so datasets never have holes.
pub fn dataset_phantom(template: &PhantomSpec, master_seed: u64, index: usize) -> Result<Phantom> {
    let mut last = None;
    for attempt in 0..8u64 {
        let spec = PhantomSpec {
            seed: scan_seed(
                master_seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                index,
            ),
            ..template.clone()
        };
        match generate_phantom(&spec) {
            Err(e @ Error::Placement(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Ground-truth records for FROC scoring.
pub fn gt_records(scan: &str, emboli: &[GroundTruthEmbolus]) -> Vec<GtRecord> {
    emboli
        .iter()
        .map(|e| GtRecord {
            scan_id: scan.to_string(),
            center: e.center,
            radius: e.max_semi_axis(),
        })
        .collect()
}

/// File names used inside a dataset directory.
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const EMBOLI_FILE: &str = "emboli.json";

/// Full per-scan ground truth, kept next to the annotation CSV so training
/// can test containment against the ellipsoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTruth {
    pub scan_id: String,
    pub emboli: Vec<GroundTruthEmbolus>,
}

/// Write `n_scans` phantoms into `dir` as `<scan_id>.json` + `.raw`, plus
/// the annotation CSV and the ellipsoid list. Returns the volume paths.
pub fn generate_dataset(
    dir: &Path,
    n_scans: usize,
    template: &PhantomSpec,
    master_seed: u64,
) -> Result<Vec<PathBuf>> {
    if n_scans == 0 {
        return Err(Error::Input("n_scans must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(n_scans);
    let mut records = Vec::new();
    let mut truth = Vec::with_capacity(n_scans);
    for index in 0..n_scans {
        let p = dataset_phantom(template, master_seed, index)?;
        let id = scan_id(index);
        let path = dir.join(format!("{id}.json"));
        write_volume(&path, &p.volume)?;
        records.extend(gt_records(&id, &p.emboli));
        truth.push(ScanTruth {
            scan_id: id,
            emboli: p.emboli,
        });
        paths.push(path);
    }
    write_annotations(&dir.join(ANNOTATIONS_FILE), &records)?;
    let json_path = dir.join(EMBOLI_FILE);
    let json = serde_json::to_string_pretty(&truth).expect("ground truth serialises");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(paths)
}

pub fn read_truth(dir: &Path) -> Result<Vec<ScanTruth>> {
    let path = dir.join(EMBOLI_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}
