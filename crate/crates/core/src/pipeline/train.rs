//! Two-stage training: proposal network alone, then jointly with the
//! false-positive classifier whose loss flows back through alignment.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stream_rng, Model, Optimizers, Scan};
use crate::align::{align_candidate, align_candidate_backward, AlignedCandidate};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::augment::{augmented_crop, Augmentation, Sample};
use crate::nn::loss::{bce_with_logit, proposal_loss, AnchorTerm, LossWeights};
use crate::nn::net::FEATURE_STRIDE;
use crate::nn::ohem::ohem_select;
use crate::nn::Tensor;
use crate::proposal::sample_fp_batch;
use crate::proposal::{
    decode_head, encode, gen_anchors, label_anchors, location_feature_map, merge_head_grad,
    split_head, AnchorLabel, BoxCube, Candidate,
};

/// Training progress; epochs `0..train.epochs` are proposal-only, the next
/// `train.joint_epochs` are joint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub joint: bool,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub fp_loss: f64,
    pub fp_batches: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    classification: f64,
    regression: f64,
    fp_loss: Option<f64>,
}

/// Box used to label anchors for an embolus.
pub(crate) fn gt_cube(e: &crate::phantom::GroundTruthEmbolus) -> BoxCube {
    BoxCube::new(e.center.to_array(), 2.0 * e.max_semi_axis())
}

/// Crop origin (voxel indices) for one training step.
fn choose_crop(scan: &Scan, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> [usize; 3] {
    let n = cfg.train.crop_side;
    let dims = scan.volume.dims();
    let sp = scan.volume.spacing();
    let half = (n as f64 - 1.0) / 2.0;
    let positive = !scan.emboli.is_empty() && rng.random_bool(cfg.train.positive_crop_fraction);
    let center: [f64; 3] = if positive {
        let e = &scan.emboli[rng.random_range(0..scan.emboli.len())];
        let v = scan.volume.world_to_voxel(e.center);
        let j = cfg.train.crop_jitter_mm;
        std::array::from_fn(|a| {
            v[a] + if j > 0.0 {
                rng.random_range(-j..=j) / sp[a]
            } else {
                0.0
            }
        })
    } else {
        std::array::from_fn(|a| {
            let hi = (dims[a] as f64 - 1.0 - half).max(half);
            rng.random_range(half..=hi)
        })
    };
    std::array::from_fn(|a| {
        let max = dims[a].saturating_sub(n) as f64;
        (center[a] - half).round().clamp(0.0, max) as usize
    })
}

fn volume_tensor(v: &crate::volume::Volume) -> Tensor<f32> {
    let d = v.dims();
    Tensor::from_vec(&[1, d[2], d[1], d[0]], v.data().to_vec()).expect("dims match data")
}

/// Emboli whose centre lies in the crop, as boxes.
fn crop_gts(sample: &Sample) -> Vec<BoxCube> {
    let v = &sample.volume;
    let d = v.dims();
    sample
        .emboli
        .iter()
        .filter(|e| {
            let p = v.world_to_voxel(e.center);
            (0..3).all(|a| p[a] >= -0.5 && p[a] <= d[a] as f64 - 0.5)
        })
        .map(gt_cube)
        .collect()
}

/// Classifier input rows for a set of aligned candidates.
pub(crate) fn stack_sections(
    aligned: &[AlignedCandidate<f32>],
    inputs: usize,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(aligned.len() * inputs);
    for a in aligned {
        if a.sections.len() != inputs {
            return Err(Error::shape("fp input", &[inputs], &[a.sections.len()]));
        }
        data.extend_from_slice(a.sections.data());
    }
    Tensor::from_vec(&[aligned.len(), inputs], data)
}

/// False-positive loss over a sampled batch of this crop's proposals.
/// Returns the loss and the gradient on the feature map.
fn fp_step(
    model: &Model,
    grads: &mut Model,
    sample: &Sample,
    features: &Tensor<f32>,
    cands: Vec<Candidate>,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, Tensor<f32>)>> {
    let t = &cfg.train;
    let (pos, neg): (Vec<&Candidate>, Vec<&Candidate>) = cands.iter().partition(|c| {
        sample
            .emboli
            .iter()
            .any(|e| e.contains(crate::volume::WorldPoint::from_array(c.cube.center)))
    });
    let batch = match sample_fp_batch(pos.len(), neg.len(), t.fp_batch, t.fp_negative_ratio, rng) {
        Ok(b) => b,
        Err(Error::EmptyBatch) => return Ok(None),
        Err(e) => return Err(e),
    };
    let chosen: Vec<(&Candidate, f64)> = batch
        .positives
        .iter()
        .map(|&i| (pos[i], 1.0))
        .chain(batch.negatives.iter().map(|&i| (neg[i], 0.0)))
        .collect();
    let aligned: Vec<AlignedCandidate<f32>> = chosen
        .iter()
        .map(|(c, _)| align_candidate(&sample.volume, features, &c.cube, &cfg.align))
        .collect::<Result<_>>()?;
    let x = stack_sections(&aligned, model.fp.inputs())?;
    let cache = model.fp.forward(&x)?;
    let b = chosen.len() as f64;
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(chosen.len());
    for (i, (_, label)) in chosen.iter().enumerate() {
        let (l, dl) = bce_with_logit(cache.logits.data()[i] as f64, *label);
        loss += l / b;
        g.push((t.fp_loss_weight * dl / b) as f32);
    }
    let g = Tensor::from_vec(&[chosen.len(), 1], g)?;
    let gx = model.fp.backward(&cache, &g, &mut grads.fp)?;
    let mut gf = Tensor::zeros(features.shape());
    let row = model.fp.inputs();
    for (i, a) in aligned.iter().enumerate() {
        let gs = Tensor::from_vec(
            a.sections.shape(),
            gx.data()[i * row..(i + 1) * row].to_vec(),
        )?;
        align_candidate_backward(a, &gs, &mut gf)?;
    }
    Ok(Some((t.fp_loss_weight * loss, gf)))
}

/// One crop: forward, losses, backward into `grads` (which must be zero).
fn train_step(
    model: &Model,
    grads: &mut Model,
    scan: &Scan,
    cfg: &RunConfig,
    joint: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let n = cfg.train.crop_side;
    let origin = choose_crop(scan, cfg, rng);
    let aug = Augmentation::draw(&cfg.augment, rng);
    let center = origin.map(|o| o as f64 + (n as f64 - 1.0) / 2.0);
    let sample = augmented_crop(&scan.volume, &scan.emboli, center, n, &aug);

    let nf = n / FEATURE_STRIDE;
    let loc = location_feature_map::<f32>(origin, [nf; 3], scan.volume.dims(), FEATURE_STRIDE);
    let cache = model.net.forward(&volume_tensor(&sample.volume), &loc)?;
    let anchors = gen_anchors(
        [nf; 3],
        &cfg.anchors,
        sample.volume.origin(),
        sample.volume.spacing(),
    );
    let gts = crop_gts(&sample);
    let labels = label_anchors(&anchors, &gts, &cfg.labels);
    let (logits, deltas) = split_head(&cache.output, model.net.n_scales())?;

    let mut terms = Vec::new();
    let mut negatives = Vec::new();
    for (ai, (label, gt)) in labels.iter().enumerate() {
        match label {
            AnchorLabel::Positive => {
                let g = &gts[gt.expect("positives carry their ground truth")];
                terms.push(AnchorTerm::positive(ai, encode(g, &anchors[ai]).to_array()));
            }
            AnchorLabel::Negative => negatives.push(ai),
            AnchorLabel::Ignored => {}
        }
    }
    let neg_scores: Vec<f64> = negatives.iter().map(|&a| logits[a]).collect();
    for i in ohem_select(&neg_scores, cfg.train.ohem_pool, cfg.train.ohem_keep, rng) {
        terms.push(AnchorTerm::negative(negatives[i]));
    }
    let weights = LossWeights::for_terms(cfg.train.lambda, &terms);
    let loss = proposal_loss(&logits, &deltas, &terms, &weights)?;
    let grad_out = merge_head_grad::<f32>(
        &loss.grad_logits,
        &loss.grad_deltas,
        model.net.n_scales(),
        cache.output.spatial(),
    );

    let mut fp_loss = None;
    let mut grad_features = None;
    if joint {
        let mut cands = decode_head(
            &cache.output,
            &anchors,
            model.net.n_scales(),
            cfg.train.fp_prob_threshold,
        )?;
        cands.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        cands.truncate(cfg.train.fp_candidates);
        if let Some((l, mut gf)) = fp_step(model, grads, &sample, &cache.features, cands, cfg, rng)?
        {
            fp_loss = Some(l);
            if cfg.train.fp_backbone_grad != 0.0 {
                gf.scale(cfg.train.fp_backbone_grad as f32);
                grad_features = Some(gf);
            }
        }
    }
    model
        .net
        .backward(&cache, &grad_out, grad_features.as_ref(), &mut grads.net)?;
    Ok(StepStats {
        classification: loss.classification,
        regression: loss.regression,
        fp_loss,
    })
}

/// Run the remaining epochs of `state`, calling `on_epoch` after each one
/// (checkpointing and logging live there). Every epoch draws from its own
/// RNG stream, so resuming from a saved state reproduces the same steps.
pub fn train(
    model: &mut Model,
    opt: &mut Optimizers,
    scans: &[Scan],
    cfg: &RunConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochStats, &Model, &Optimizers, &TrainState) -> Result<()>,
) -> Result<()> {
    if scans.is_empty() {
        return Err(Error::Input("no training scans".into()));
    }
    let total = cfg.train.epochs + cfg.train.joint_epochs;
    while state.epochs_done < total {
        let epoch = state.epochs_done;
        let joint = epoch >= cfg.train.epochs;
        let mut rng = stream_rng(cfg.seed, "train-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..scans.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = StepStats::default();
        let mut fp_sum = 0.0;
        let mut fp_batches = 0;
        for &si in &order {
            let mut grads = model.zeros_like();
            let s = train_step(model, &mut grads, &scans[si], cfg, joint, &mut rng)?;
            sum.classification += s.classification;
            sum.regression += s.regression;
            if let Some(l) = s.fp_loss {
                fp_sum += l;
                fp_batches += 1;
            }
            opt.net.step(model.net.params_mut(), &grads.net.params())?;
            if joint {
                opt.fp.step(model.fp.params_mut(), &grads.fp.params())?;
            }
        }
        let k = order.len() as f64;
        let fp_loss = if fp_batches > 0 {
            fp_sum / fp_batches as f64
        } else {
            0.0
        };
        let stats = EpochStats {
            epoch,
            joint,
            loss: (sum.classification + sum.regression) / k + fp_loss,
            classification: sum.classification / k,
            regression: sum.regression / k,
            fp_loss,
            fp_batches,
        };
        state.epochs_done += 1;
        state.history.push(stats);
        on_epoch(&stats, model, opt, state)?;
    }
    Ok(())
}
