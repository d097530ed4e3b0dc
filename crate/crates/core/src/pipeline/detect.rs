//! Inference: tile, propose, suppress, align and rescore.

use super::train::stack_sections;
use super::{Model, Scan};
use crate::align::{align_candidate, AlignedCandidate};
use crate::config::{RunConfig, ScoreMode};
use crate::error::Result;
use crate::froc::DetectionRecord;
use crate::nn::layers::logistic;
use crate::nn::net::FEATURE_STRIDE;
use crate::nn::Tensor;
use crate::proposal::{decode_head, gen_anchors, location_feature_map, nms_3d, Candidate};
use crate::volume::{extract_tile, tile_volume, Volume, WorldPoint, AIR_NORMALIZED};

/// Candidates for one preprocessed volume, scored per `mode`.
pub fn detect_volume(
    model: &Model,
    volume: &Volume,
    cfg: &RunConfig,
    mode: ScoreMode,
) -> Result<Vec<Candidate>> {
    let d = &cfg.detect;
    let grid = tile_volume(volume.dims(), d.tile_side, d.tile_overlap, true)?;
    let nf = d.tile_side / FEATURE_STRIDE;
    let mut all = Vec::new();
    for &origin in &grid.origins {
        let tile = extract_tile(volume, origin, d.tile_side, AIR_NORMALIZED);
        let input = Tensor::from_vec(
            &[1, d.tile_side, d.tile_side, d.tile_side],
            tile.data().to_vec(),
        )?;
        let loc = location_feature_map::<f32>(origin, [nf; 3], volume.dims(), FEATURE_STRIDE);
        let cache = model.net.forward(&input, &loc)?;
        let anchors = gen_anchors([nf; 3], &cfg.anchors, tile.origin(), tile.spacing());
        let cands = decode_head(
            &cache.output,
            &anchors,
            model.net.n_scales(),
            d.prob_threshold,
        )?;
        let mut kept = nms_3d(&cands, d.nms_iou);
        kept.truncate(d.max_candidates);
        // drop proposals centred in the padding beyond the volume
        kept.retain(|c| {
            let v = volume.world_to_voxel(WorldPoint::from_array(c.cube.center));
            (0..3).all(|a| v[a] >= -0.5 && v[a] <= volume.dims()[a] as f64 - 0.5)
        });
        if mode != ScoreMode::Proposal && !kept.is_empty() {
            let aligned: Vec<AlignedCandidate<f32>> = kept
                .iter()
                .map(|c| align_candidate(&tile, &cache.features, &c.cube, &cfg.align))
                .collect::<Result<_>>()?;
            let x = stack_sections(&aligned, model.fp.inputs())?;
            let logits = model.fp.forward(&x)?.logits;
            for (c, &l) in kept.iter_mut().zip(logits.data()) {
                let p_fp = logistic(l as f64);
                c.probability = match mode {
                    ScoreMode::Product => c.probability * p_fp,
                    _ => p_fp,
                };
            }
        }
        all.extend(kept);
    }
    if grid.origins.len() > 1 {
        all = nms_3d(&all, d.nms_iou);
    } else {
        all.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    }
    Ok(all)
}

/// Detect on many scans with up to `threads` workers. Scans are split into
/// contiguous chunks and results come back in input order, so the output
/// does not depend on the thread count.
pub fn detect_scans(
    model: &Model,
    scans: &[Scan],
    cfg: &RunConfig,
    mode: ScoreMode,
    threads: usize,
) -> Result<Vec<Vec<Candidate>>> {
    let threads = threads.clamp(1, scans.len().max(1));
    if threads == 1 {
        return scans
            .iter()
            .map(|s| detect_volume(model, &s.volume, cfg, mode))
            .collect();
    }
    let chunk = scans.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<Candidate>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scans
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| detect_volume(model, &s.volume, cfg, mode))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("detection worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(scans.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn detection_records(scan_id: &str, cands: &[Candidate]) -> Vec<DetectionRecord> {
    cands
        .iter()
        .map(|c| DetectionRecord {
            scan_id: scan_id.to_string(),
            point: WorldPoint::from_array(c.cube.center),
            size: c.cube.side,
            probability: c.probability,
        })
        .collect()
}
