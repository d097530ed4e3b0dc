//! Detection scoring: matching at a localisation tolerance and FROC curves.

mod csv_io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use csv_io::{
    read_annotations, read_detections, read_froc, write_annotations, write_detections, write_froc,
};

use crate::error::{Error, Result};
use crate::volume::WorldPoint;

/// Localisation tolerances reported by default, mm.
pub const TOLERANCES_MM: [f64; 3] = [0.0, 2.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scan_id: String,
    pub point: WorldPoint,
    pub size: f64,
    pub probability: f64,
}

/// Ground truth abstracted to a sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub scan_id: String,
    pub center: WorldPoint,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub tolerance: f64,
    /// `(fp_per_scan, sensitivity)`, ascending.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanMatch {
    /// `(gt index, detection index)`.
    pub hits: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    /// Detections landing on an already matched ground truth.
    pub duplicates: Vec<usize>,
    pub missed: Vec<usize>,
}

fn hits(det: &DetectionRecord, gt: &GtRecord, tolerance: f64) -> Option<f64> {
    let d = det.point.distance(gt.center);
    (d <= gt.radius + tolerance).then_some(d)
}

/// Descending probability, ties kept in input order.
fn probability_order(dets: &[&DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].probability.total_cmp(&dets[a].probability));
    order
}

fn match_refs(dets: &[&DetectionRecord], gts: &[&GtRecord], tolerance: f64) -> ScanMatch {
    let mut taken = vec![false; gts.len()];
    let mut out = ScanMatch::default();
    for di in probability_order(dets) {
        let det = dets[di];
        let mut best: Option<(f64, usize)> = None;
        let mut any_hit = false;
        for (gi, gt) in gts.iter().enumerate() {
            if let Some(d) = hits(det, gt, tolerance) {
                any_hit = true;
                if !taken[gi] && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                out.hits.push((gi, di));
            }
            None if any_hit => out.duplicates.push(di),
            None => out.false_positives.push(di),
        }
    }
    out.missed = (0..gts.len()).filter(|&g| !taken[g]).collect();
    out
}

/// Greedy matching of one scan's detections, most probable first; each
/// detection takes the nearest unmatched ground truth it hits.
pub fn match_scan(dets: &[DetectionRecord], gts: &[GtRecord], tolerance: f64) -> Result<ScanMatch> {
    let mut ids = dets
        .iter()
        .map(|d| &d.scan_id)
        .chain(gts.iter().map(|g| &g.scan_id));
    if let Some(first) = ids.next() {
        if let Some(other) = ids.find(|id| *id != first) {
            return Err(Error::Input(format!(
                "match_scan got mixed scan ids {first:?} and {other:?}"
            )));
        }
    }
    let d: Vec<&DetectionRecord> = dets.iter().collect();
    let g: Vec<&GtRecord> = gts.iter().collect();
    Ok(match_refs(&d, &g, tolerance))
}

/// Scans are the union of ids in `gts` and `dets` plus `extra_scans`
/// (scans with neither still count towards FP/scan).
fn scan_groups<'a>(
    dets: &'a [DetectionRecord],
    gts: &'a [GtRecord],
    extra_scans: &'a [String],
) -> BTreeMap<&'a str, (Vec<&'a DetectionRecord>, Vec<&'a GtRecord>)> {
    let mut groups: BTreeMap<&str, (Vec<&DetectionRecord>, Vec<&GtRecord>)> = BTreeMap::new();
    for s in extra_scans {
        groups.entry(s).or_default();
    }
    for d in dets {
        groups.entry(&d.scan_id).or_default().0.push(d);
    }
    for g in gts {
        groups.entry(&g.scan_id).or_default().1.push(g);
    }
    groups
}

/// FROC curve over every distinct probability threshold, starting at `(0, 0)`.
///
/// Matching is greedy by probability, so the matches among detections above
/// a threshold are a prefix of the full matching; one pass suffices.
pub fn froc(
    dets: &[DetectionRecord],
    gts: &[GtRecord],
    scans: &[String],
    tolerance: f64,
) -> Result<FrocCurve> {
    if gts.is_empty() {
        return Err(Error::UndefinedSensitivity);
    }
    let groups = scan_groups(dets, gts, scans);
    let n_scans = groups.len() as f64;
    // outcome per detection: +1 tp, -1 fp, 0 duplicate
    let mut events: Vec<(f64, i8)> = Vec::with_capacity(dets.len());
    for (d, g) in groups.values() {
        let m = match_refs(d, g, tolerance);
        events.extend(m.hits.iter().map(|&(_, di)| (d[di].probability, 1)));
        events.extend(m.false_positives.iter().map(|&di| (d[di].probability, -1)));
        events.extend(m.duplicates.iter().map(|&di| (d[di].probability, 0)));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = gts.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let p = events[i].0;
        while i < events.len() && events[i].0 == p {
            match events[i].1 {
                1 => tp += 1,
                -1 => fp += 1,
                _ => {}
            }
            i += 1;
        }
        points.push((fp as f64 / n_scans, tp as f64 / total));
    }
    Ok(FrocCurve { tolerance, points })
}

/// Largest sensitivity at or below `fp_per_scan` (step function).
pub fn sensitivity_at(curve: &FrocCurve, fp_per_scan: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.0 <= fp_per_scan)
        .map(|p| p.1)
        .fold(0.0, f64::max)
}

/// Reference FROC: rematch from scratch at every threshold.
pub fn froc_brute_force(
    dets: &[DetectionRecord],
    gts: &[GtRecord],
    scans: &[String],
    tolerance: f64,
) -> Result<FrocCurve> {
    if gts.is_empty() {
        return Err(Error::UndefinedSensitivity);
    }
    let groups = scan_groups(dets, gts, scans);
    let thresholds: BTreeSet<u64> = dets.iter().map(|d| d.probability.to_bits()).collect();
    let mut ts: Vec<f64> = thresholds.into_iter().map(f64::from_bits).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    let mut points = vec![(0.0, 0.0)];
    for t in ts {
        let (mut tp, mut fp) = (0, 0);
        for (d, g) in groups.values() {
            let kept: Vec<&DetectionRecord> =
                d.iter().copied().filter(|x| x.probability >= t).collect();
            let m = match_refs(&kept, g, tolerance);
            tp += m.hits.len();
            fp += m.false_positives.len();
        }
        points.push((
            fp as f64 / groups.len() as f64,
            tp as f64 / gts.len() as f64,
        ));
    }
    Ok(FrocCurve { tolerance, points })
}
