//! Implementation-vs-reference checks and invariants for geometry, NMS,
//! evaluation, merging and the dataset format.

mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use pseudoloop::coco::{parse_dataset, serialize_dataset, validate, AnnotationRecord, Source};
use pseudoloop::eval::{average_precision, evaluate, match_detections, MatchRecord};
use pseudoloop::merge::{merge_datasets, merge_pseudo, to_pseudo_annotations, MergePolicy};
use pseudoloop::{class_wise_nms, filter_by_score, iou, BBox, Detection, PredictionSet};
use support::*;

#[test]
fn nms_matches_quadratic_reference() {
    let mut r = rng(1);
    for case in 0..300 {
        let p = random_predictions(&mut r, 50, 3, 4);
        for tau in [0.0, 0.3, 0.5, 0.7, 1.0] {
            let got = class_wise_nms(&p, tau);
            let mut want: Vec<Detection> = ref_nms_keep(&p, tau).into_iter().map(|i| p.detections[i].clone()).collect();
            want.sort_by(|a, b| {
                (a.image_id, a.category_id).cmp(&(b.image_id, b.category_id)).then(b.score.partial_cmp(&a.score).unwrap())
            });
            let key = |d: &Detection| (d.image_id, d.category_id, d.score.to_bits(), d.bbox.x.to_bits(), d.bbox.y.to_bits(), d.bbox.w.to_bits(), d.bbox.h.to_bits());
            let mut g: Vec<_> = got.detections.iter().map(key).collect();
            let mut w: Vec<_> = want.iter().map(key).collect();
            g.sort();
            w.sort();
            assert_eq!(g, w, "case {case}, tau {tau}");
        }
    }
}

#[test]
fn fifty_boxes_per_image() {
    let mut r = rng(50);
    for _ in 0..50 {
        let mut p = random_predictions(&mut r, 0, 1, 1);
        for img in 1..=3 {
            let extra = random_predictions(&mut r, 50, 1, 2);
            p.detections.extend(extra.detections.into_iter().map(|mut d| {
                d.image_id = img;
                d
            }));
        }
        let got = class_wise_nms(&p, 0.5).len();
        assert_eq!(got, ref_nms_keep(&p, 0.5).len());
    }
}

#[test]
fn evaluator_matches_reference() {
    let mut r = rng(2);
    for case in 0..500 {
        let (gt, p) = random_scene(&mut r, 5, 8);
        let tp = ref_match(&gt, &p, 0.5);
        let m = match_detections(&gt, &p, 0.5).unwrap();
        let got: Vec<bool> = m.iter().map(|x| x.tp).collect();
        assert_eq!(got, tp, "case {case}");

        let report = evaluate(&gt, &p).unwrap();
        for ((cat, want), got) in ref_class_aps(&gt, &p, 0.5).into_iter().zip(&report.per_class) {
            assert_eq!(cat, got.category_id);
            match (want, got.ap) {
                (None, None) => {}
                (Some(w), Some(g)) => assert!((w - g).abs() <= 1e-9, "case {case}: {w} vs {g}"),
                other => panic!("case {case}: {other:?}"),
            }
        }
    }
}

fn flags(tp: &[bool]) -> Vec<MatchRecord> {
    tp.iter()
        .enumerate()
        .map(|(i, &t)| MatchRecord {
            detection: i,
            image_id: 1,
            category_id: 1,
            score: 1.0 - i as f64 / 100.0,
            gt_id: t.then_some(i as u64),
            iou: 0.0,
            tp: t,
        })
        .collect()
}

#[test]
fn ap_fixtures_agree_with_reference() {
    for (tp, n, want) in [
        (vec![true], 1, 1.0),
        (vec![false, true], 1, 0.5),
        (vec![true, false, true], 2, 0.5 + 0.5 * 2.0 / 3.0),
    ] {
        assert!((ref_ap(&tp, n) - want).abs() < 1e-12);
        assert!((average_precision(&flags(&tp), n).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn merge_matches_brute_force_filter() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (gt, p) = random_scene(&mut r, 6, 10);
        let pseudo = to_pseudo_annotations(&p, &gt).unwrap();
        let thr = [0.3, 0.5, 0.9][pseudo.len() % 3];
        let policy = MergePolicy { gt_suppression_iou: thr, ..MergePolicy::default() };
        let merged = merge_pseudo(&gt, &pseudo, &policy).unwrap();

        let mut want = gt.annotations.clone();
        want.extend(pseudo.iter().filter(|ps| {
            gt.annotations.iter().all(|g| {
                g.image_id != ps.image_id || g.category_id != ps.category_id || ref_iou(&g.bbox, &ps.bbox) <= thr
            })
        }).cloned());
        assert_eq!(merged.annotations, want);
        assert!(validate(&merged).is_empty());
        assert!(merged.annotations.len() <= gt.annotations.len() + pseudo.len());
        assert_eq!(serialize_dataset(&merged), serialize_dataset(&merge_pseudo(&gt, &pseudo, &policy).unwrap()));
    }
}

#[test]
fn pseudo_ids_are_consecutive_above_base() {
    let mut r = rng(4);
    let (gt, _) = random_scene(&mut r, 5, 0);
    let p = random_predictions(&mut r, 0, 1, 1);
    let mut p = p;
    for k in 0..100 {
        let img = gt.images[k % gt.images.len()].id;
        let cat = gt.categories[k % gt.categories.len()].id;
        p.detections.push(Detection::new(img, cat, BBox::new(k as f64, 0.0, 4.0, 4.0), (k as f64) / 100.0));
    }
    let ps = to_pseudo_annotations(&p, &gt).unwrap();
    let base = gt.max_annotation_id().unwrap_or(0);
    let ids: Vec<u64> = ps.iter().map(|a| a.id).collect();
    assert_eq!(ids, (base + 1..=base + 100).collect::<Vec<_>>());
}

#[test]
fn dataset_merge_always_validates() {
    let mut r = rng(5);
    for _ in 0..200 {
        let a = random_dataset(&mut r);
        let b = random_dataset(&mut r);
        let m = merge_datasets(&a, &b).unwrap();
        assert!(validate(&m).is_empty());
        assert_eq!(m.images.len(), a.images.len() + b.images.len());
        assert_eq!(m.annotations.len(), a.annotations.len() + b.annotations.len());
        assert!(m.annotations[a.annotations.len()..].iter().all(|x| x.source != Source::GroundTruth));
    }
}

#[test]
fn mean_ap_invariant_under_category_relabeling() {
    let mut r = rng(6);
    for _ in 0..200 {
        let (mut gt, mut p) = random_scene(&mut r, 5, 8);
        let before = evaluate(&gt, &p).unwrap().map_50;
        let relabel: BTreeMap<u64, u64> = gt.categories.iter().map(|c| (c.id, 1000 - c.id * 13)).collect();
        for c in &mut gt.categories {
            c.id = relabel[&c.id];
        }
        for a in &mut gt.annotations {
            a.category_id = relabel[&a.category_id];
        }
        for d in &mut p.detections {
            d.category_id = relabel[&d.category_id];
        }
        let after = evaluate(&gt, &p).unwrap().map_50;
        assert!((before - after).abs() < 1e-12);
    }
}

#[test]
fn ground_truth_against_itself_is_perfect() {
    let mut r = rng(7);
    for _ in 0..100 {
        let (gt, _) = random_scene(&mut r, 5, 0);
        if gt.annotations.is_empty() {
            continue;
        }
        let p = PredictionSet::new(0, gt.annotations.iter().map(|a| Detection::new(a.image_id, a.category_id, a.bbox, 1.0)).collect());
        assert_eq!(evaluate(&gt, &p).unwrap().map_50, 1.0);
    }
}

#[test]
fn adding_low_fp_or_top_tp_moves_ap_the_right_way() {
    let mut r = rng(8);
    for _ in 0..300 {
        let (gt, p) = random_scene(&mut r, 5, 8);
        let base = evaluate(&gt, &p).unwrap();
        let Some(target) = gt.annotations.first() else { continue };
        let class_ap = |rep: &pseudoloop::EvalReport| {
            rep.per_class.iter().find(|c| c.category_id == target.category_id).unwrap().ap.unwrap()
        };

        let mut with_fp = p.clone();
        // Far outside every ground-truth box, below every score.
        with_fp.detections.push(Detection::new(target.image_id, target.category_id, BBox::new(500.0, 500.0, 5.0, 5.0), 0.0));
        let fp_ap = class_ap(&evaluate(&gt, &with_fp).unwrap());
        assert!(fp_ap <= class_ap(&base) + 1e-12);

        let matched: Vec<Option<u64>> = match_detections(&gt, &p, 0.5).unwrap().into_iter().map(|m| m.gt_id).collect();
        if matched.contains(&Some(target.id)) {
            continue;
        }
        let mut with_tp = p.clone();
        with_tp.detections.insert(0, Detection::new(target.image_id, target.category_id, target.bbox, 1.0));
        let tp_ap = class_ap(&evaluate(&gt, &with_tp).unwrap());
        assert!(tp_ap + 1e-12 >= class_ap(&base), "{tp_ap} < {}", class_ap(&base));
    }
}

#[test]
fn shuffling_distinct_scores_does_not_change_ap() {
    use rand::seq::SliceRandom;
    let mut r = rng(9);
    for _ in 0..200 {
        let (gt, mut p) = random_scene(&mut r, 5, 8);
        for (i, d) in p.detections.iter_mut().enumerate() {
            d.score = (i as f64 + 1.0) / 100.0;
        }
        let before = evaluate(&gt, &p).unwrap();
        p.detections.shuffle(&mut r);
        let after = evaluate(&gt, &p).unwrap();
        for (a, b) in before.per_class.iter().zip(&after.per_class) {
            assert_eq!(a.ap, b.ap);
        }
    }
}

#[test]
fn round_trip_random_datasets() {
    let mut r = rng(10);
    for _ in 0..200 {
        let d = random_dataset(&mut r);
        assert!(validate(&d).is_empty());
        let once = serialize_dataset(&d);
        let parsed = parse_dataset(&once).unwrap();
        assert_eq!(parsed, d);
        assert_eq!(serialize_dataset(&parsed), once);
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.01..100.0f64, 0.01..100.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn arb_predictions() -> impl Strategy<Value = PredictionSet> {
    prop::collection::vec((1..3u64, 1..3u64, arb_box(), 0.0..=1.0f64), 0..40).prop_map(|v| {
        PredictionSet::new(0, v.into_iter().map(|(i, c, b, s)| Detection::new(i, c, b, s)).collect())
    })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn nms_subset_idempotent_and_separated(p in arb_predictions(), tau in 0.0..=1.0f64) {
        let once = class_wise_nms(&p, tau);
        prop_assert!(once.detections.iter().all(|d| p.detections.contains(d)));
        prop_assert_eq!(&class_wise_nms(&once, tau), &once);
        for (i, a) in once.detections.iter().enumerate() {
            for b in &once.detections[i + 1..] {
                if a.image_id == b.image_id && a.category_id == b.category_id {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= tau);
                }
            }
        }
    }

    #[test]
    fn filter_monotone(p in arb_predictions(), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let loose = filter_by_score(&p, lo);
        let strict = filter_by_score(&p, hi);
        prop_assert!(strict.detections.iter().all(|d| loose.detections.contains(d)));
        let brute: Vec<Detection> = p.detections.iter().filter(|d| d.score >= hi).cloned().collect();
        prop_assert_eq!(strict.detections, brute);
    }

    #[test]
    fn merge_keeps_ground_truth(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (gt, p) = random_scene(&mut r, 6, 10);
        let pseudo = to_pseudo_annotations(&p, &gt).unwrap();
        let merged = merge_pseudo(&gt, &pseudo, &MergePolicy::default()).unwrap();
        prop_assert_eq!(&merged.annotations[..gt.annotations.len()], &gt.annotations[..]);
        prop_assert!(merged.annotations[gt.annotations.len()..].iter().all(|a: &AnnotationRecord| a.source == Source::Pseudo));
        prop_assert_eq!(&merged.images, &gt.images);
        prop_assert_eq!(&merged.categories, &gt.categories);
    }

    #[test]
    fn dataset_round_trip(seed in any::<u64>()) {
        let d = random_dataset(&mut rng(seed));
        let bytes = serialize_dataset(&d);
        prop_assert_eq!(parse_dataset(&bytes).unwrap(), d);
    }
}
