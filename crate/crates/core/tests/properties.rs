use pedet_core::align::{build_affine, grid_sample_3d_forward, roi_pool_3d, Orientation};
use pedet_core::froc::{froc, match_scan, DetectionRecord, GtRecord};
use pedet_core::nn::loss::{proposal_loss, AnchorTerm, LossWeights};
use pedet_core::proposal::{decode, encode, iou, nms_3d};
use pedet_core::{BoxCube, Candidate, Tensor, WorldPoint};
use proptest::prelude::*;

fn cube() -> impl Strategy<Value = BoxCube> {
    (prop::array::uniform3(-20.0..20.0f64), 1.0..40.0f64).prop_map(|(c, s)| BoxCube::new(c, s))
}

fn candidates() -> impl Strategy<Value = Vec<Candidate>> {
    prop::collection::vec((cube(), 0.0..1.0f64), 0..30).prop_map(|v| {
        v.into_iter()
            .map(|(cube, probability)| Candidate { cube, probability })
            .collect()
    })
}

fn det(x: [f64; 3], p: f64) -> DetectionRecord {
    DetectionRecord {
        scan_id: "s".into(),
        point: WorldPoint::from_array(x),
        size: 10.0,
        probability: p,
    }
}

fn gt(x: [f64; 3], r: f64) -> GtRecord {
    GtRecord {
        scan_id: "s".into(),
        center: WorldPoint::from_array(x),
        radius: r,
    }
}

fn tensor(shape: &[usize]) -> impl Strategy<Value = Tensor<f64>> {
    let shape = shape.to_vec();
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-1.0..1.0f64, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in cube(), b in cube()) {
        let ab = iou(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - iou(&b, &a)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip(g in cube(), a in cube()) {
        let back = decode(&encode(&g, &a), &a);
        for k in 0..3 {
            prop_assert!((back.center[k] - g.center[k]).abs() < 1e-9);
        }
        prop_assert!((back.side - g.side).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_a_maximal_antichain(cands in candidates(), thr in 0.05..0.9f64) {
        let kept = nms_3d(&cands, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.cube, &b.cube) <= thr);
                prop_assert!(a.probability >= b.probability);
            }
        }
        // every dropped candidate overlaps a kept one at least as probable
        for c in &cands {
            if !kept.contains(c) {
                prop_assert!(kept.iter().any(|k| k.probability >= c.probability && iou(&k.cube, &c.cube) > thr));
            }
        }
    }

    #[test]
    fn grid_sample_is_linear(x in tensor(&[2, 4, 5, 3]), y in tensor(&[2, 4, 5, 3]), a in -2.0..2.0f64,
                              t in prop::array::uniform3(-0.5..0.5f64), s in prop::array::uniform3(0.3..1.2f64)) {
        let aff = build_affine(&Orientation::identity(), t, s);
        let mut z = x.clone();
        z.axpy(a, &y).unwrap();
        let fz = grid_sample_3d_forward(&z, &aff, [3, 3, 4]).unwrap();
        let mut expect = grid_sample_3d_forward(&x, &aff, [3, 3, 4]).unwrap();
        expect.axpy(a, &grid_sample_3d_forward(&y, &aff, [3, 3, 4]).unwrap()).unwrap();
        for (p, q) in fz.data().iter().zip(expect.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_pool_is_monotone(x in tensor(&[2, 5, 6, 7]), bump in prop::collection::vec(0.0..1.0f64, 2 * 5 * 6 * 7), bins in 1usize..5) {
        let y = Tensor::from_vec(x.shape(), x.data().iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        let px = roi_pool_3d(&x, bins).unwrap().output;
        let py = roi_pool_3d(&y, bins).unwrap().output;
        prop_assert!(px.data().iter().zip(py.data()).all(|(a, b)| a <= b));
        let max = x.data().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(px.data().iter().all(|&v| v <= max));
    }

    #[test]
    fn matching_accounts_for_every_finding(
        dets in prop::collection::vec((prop::array::uniform3(0.0..40.0f64), 0.0..1.0f64), 0..20),
        gts in prop::collection::vec((prop::array::uniform3(0.0..40.0f64), 1.0..6.0f64), 1..6),
        tol in 0.0..6.0f64,
    ) {
        let d: Vec<_> = dets.iter().map(|&(x, p)| det(x, p)).collect();
        let g: Vec<_> = gts.iter().map(|&(x, r)| gt(x, r)).collect();
        let m = match_scan(&d, &g, tol).unwrap();
        prop_assert_eq!(m.hits.len() + m.missed.len(), g.len());
        prop_assert_eq!(m.hits.len() + m.false_positives.len() + m.duplicates.len(), d.len());
    }

    #[test]
    fn froc_ignores_detection_order(
        dets in prop::collection::vec((prop::array::uniform3(0.0..40.0f64), 0.0..1.0f64), 1..20),
        gts in prop::collection::vec((prop::array::uniform3(0.0..40.0f64), 1.0..6.0f64), 1..6),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        // distinct probabilities so the greedy order is fully determined
        let d: Vec<_> = dets.iter().enumerate().map(|(i, &(x, p))| det(x, p + i as f64 * 1e-9)).collect();
        let g: Vec<_> = gts.iter().map(|&(x, r)| gt(x, r)).collect();
        let mut shuffled = d.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(froc(&d, &g, &[], 2.0).unwrap(), froc(&shuffled, &g, &[], 2.0).unwrap());
    }

    #[test]
    fn proposal_loss_is_non_negative(
        logits in prop::collection::vec(-8.0..8.0f64, 6),
        deltas in prop::collection::vec(prop::array::uniform4(-2.0..2.0f64), 6),
        roles in prop::collection::vec((0usize..3, prop::array::uniform4(-2.0..2.0f64)), 6),
        lambda in 0.0..4.0f64,
    ) {
        let terms: Vec<AnchorTerm> = roles
            .iter()
            .enumerate()
            .filter_map(|(i, &(r, t))| match r {
                0 => Some(AnchorTerm::positive(i, t)),
                1 => Some(AnchorTerm::negative(i)),
                _ => None,
            })
            .collect();
        prop_assume!(!terms.is_empty());
        let l = proposal_loss(&logits, &deltas, &terms, &LossWeights::for_terms(lambda, &terms)).unwrap();
        prop_assert!(l.total >= 0.0 && l.classification >= 0.0 && l.regression >= 0.0);
    }
}
