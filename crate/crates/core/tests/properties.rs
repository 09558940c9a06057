mod common;

use std::collections::HashSet;
use std::fs;

use kps_core::data_io::persist::sha256_hex;
use kps_core::data_io::{load_annotations, save_annotations, ArtifactKind, RunDir};
use kps_core::datamodel::{BBox, DatasetMeta, Keypoint, LossWeights};
use kps_core::evaluation::pck_score;
use kps_core::heatmap::{decode_peaks, render_heatmaps, RenderConfig};
use kps_core::losses::{total_loss, transformation_invariance_loss};
use kps_core::sampling::{compose_batches, generate_split, labeled_count, BatchSpec};
use kps_core::warp::{compose, invert_warp, sample_warp, warp_points};
use kps_core::Error;
use ndarray::Array1;
use proptest::prelude::*;

const FRACTIONS: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("im{i:04}")).collect()
}

fn meta(k: usize, side: usize) -> DatasetMeta {
    DatasetMeta::new((0..k).map(|i| format!("k{i}")).collect(), (side, side)).unwrap()
}

proptest! {
    #[test]
    fn splits_partition_the_ids(n in 1usize..300, fi in 0usize..5, repeat in 0usize..4, seed in any::<u64>()) {
        let all = ids(n);
        let s = generate_split(&all, FRACTIONS[fi], repeat, seed).unwrap();
        prop_assert_eq!(s.labeled_ids.len(), labeled_count(n, FRACTIONS[fi]));
        let l: HashSet<_> = s.labeled_ids.iter().collect();
        let u: HashSet<_> = s.unlabeled_ids.iter().collect();
        prop_assert!(l.is_disjoint(&u));
        prop_assert_eq!(l.len() + u.len(), n);
        prop_assert_eq!(&generate_split(&all, FRACTIONS[fi], repeat, seed).unwrap(), &s);
    }

    #[test]
    fn batches_have_fixed_composition(
        n in 10usize..200,
        fi in 0usize..4,
        half in 1usize..5,
        share_idx in 0usize..3,
        epoch in any::<u64>(),
    ) {
        let s = generate_split(&ids(n), FRACTIONS[fi], 0, 1).unwrap();
        prop_assume!(!s.labeled_ids.is_empty() && !s.unlabeled_ids.is_empty());
        let size = 2 * half;
        let share = [0.5, 1.0, 0.0][share_idx];
        let spec = BatchSpec::new(size, share).unwrap();
        let batches = compose_batches(&s, &spec, epoch).unwrap();
        let nl = spec.labeled_per_batch();
        let labeled: HashSet<_> = s.labeled_ids.iter().cloned().collect();
        let mut seen_l = HashSet::new();
        let mut seen_u = HashSet::new();
        for b in &batches {
            prop_assert_eq!(b.len(), size);
            prop_assert_eq!(b.iter().filter(|i| i.labeled).count(), nl);
            for item in b {
                prop_assert_eq!(item.labeled, labeled.contains(&item.id));
                if item.labeled { seen_l.insert(item.id.clone()); } else { seen_u.insert(item.id.clone()); }
            }
        }
        // Whichever pool sets the epoch length is covered completely.
        let nu = size - nl;
        let by_l = if nl == 0 { 0 } else { s.labeled_ids.len().div_ceil(nl) };
        let by_u = if nu == 0 { 0 } else { s.unlabeled_ids.len().div_ceil(nu) };
        prop_assert_eq!(batches.len(), by_l.max(by_u));
        if by_l >= by_u {
            prop_assert_eq!(seen_l.len(), s.labeled_ids.len());
        }
        if by_u >= by_l {
            prop_assert_eq!(seen_u.len(), s.unlabeled_ids.len());
        }
    }

    #[test]
    fn pck_is_scale_invariant(
        pts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, any::<bool>()), 2..6),
        side in 10.0f64..200.0,
        alpha in 0.01f64..0.5,
        exp in -3i32..4,
    ) {
        let s = 2f64.powi(exp);
        let preds = vec![pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()];
        let gts = vec![pts.iter().map(|p| Keypoint::new(p.2, p.3, p.4)).collect::<Vec<_>>()];
        let b = vec![BBox::new(0.0, 0.0, side, side / 2.0)];
        let base = pck_score(&preds, &gts, &b, alpha).unwrap();
        let preds_s = vec![preds[0].iter().map(|&(x, y)| (x * s, y * s)).collect()];
        let gts_s = vec![gts[0].iter().map(|k| Keypoint::new(k.x * s, k.y * s, k.visible)).collect()];
        let b_s = vec![BBox::new(0.0, 0.0, side * s, side / 2.0 * s)];
        prop_assert_eq!(pck_score(&preds_s, &gts_s, &b_s, alpha).unwrap(), base);
    }

    #[test]
    fn pck_grows_with_alpha(
        pts in proptest::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0), 2..8),
        a in 0.01f64..0.5,
        b in 0.01f64..0.5,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let preds = vec![pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()];
        let gts = vec![pts.iter().map(|p| Keypoint::visible(p.2, p.3)).collect::<Vec<_>>()];
        let bb = vec![BBox::new(0.0, 0.0, 64.0, 64.0)];
        let s_lo = pck_score(&preds, &gts, &bb, lo).unwrap();
        let s_hi = pck_score(&preds, &gts, &bb, hi).unwrap();
        prop_assert!(s_lo.correct <= s_hi.correct);
        prop_assert_eq!(s_lo.total, s_hi.total);
    }

    #[test]
    fn warp_then_inverse_returns_points(
        gamma in 0.0f64..0.2,
        seed in any::<u64>(),
        pts in proptest::collection::vec((0.0f64..128.0, 0.0f64..128.0), 1..10),
    ) {
        let spec = sample_warp(&meta(2, 128), gamma, seed).unwrap();
        let inv = invert_warp(&spec).unwrap();
        let there = warp_points(&pts, &spec);
        let back = warp_points(&there.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(), &inv);
        for (p, q) in pts.iter().zip(&back) {
            prop_assert!((p.0 - q.x).abs() < 1e-6 && (p.1 - q.y).abs() < 1e-6, "{p:?} -> {q:?}");
        }
        let eye = compose(&spec, &inv).unwrap();
        prop_assert!((eye.matrix() - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn render_then_decode_lands_in_the_cell(
        pts in proptest::collection::vec((2.0f64..126.0, 2.0f64..126.0), 2..6),
        sigma in 1.0f64..3.0,
    ) {
        let m = meta(pts.len(), 128);
        let kps: Vec<_> = pts.iter().map(|&(x, y)| Keypoint::visible(x, y)).collect();
        let r = render_heatmaps(&kps, &m, &RenderConfig { sigma, ..RenderConfig::default() }).unwrap();
        prop_assert!(r.off_grid.is_empty());
        for (p, k) in decode_peaks(&r.stack, &m).unwrap().iter().zip(&kps) {
            // Decoding picks the nearest cell centre: off by at most one cell per axis.
            prop_assert!((p.x - k.x).abs() <= 4.0 && (p.y - k.y).abs() <= 4.0, "{p:?} vs {k:?}");
            prop_assert!(p.score > 0.0 && p.score <= 1.0);
        }
    }

    #[test]
    fn invariance_loss_is_a_mean_square(z in proptest::collection::vec(-10.0f64..10.0, 1..40), shift in -5.0f64..5.0) {
        let a = Array1::from(z.clone());
        let b = a.mapv(|v| v + shift);
        prop_assert_eq!(transformation_invariance_loss(&a, &a).unwrap(), 0.0);
        let l = transformation_invariance_loss(&a, &b).unwrap();
        prop_assert!((l - shift * shift).abs() <= 1e-9 * (1.0 + shift * shift));
    }

    #[test]
    fn total_is_the_weighted_sum(parts in proptest::array::uniform4(0.0f64..100.0), w in proptest::array::uniform4(0.0f64..1000.0)) {
        let weights = LossWeights::new(w[0], w[1], w[2], w[3]).unwrap();
        let b = total_loss(parts, weights);
        let expect: f64 = parts.iter().zip(&w).map(|(p, w)| p * w).sum();
        prop_assert!((b.total - expect).abs() <= 1e-9 * expect.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn annotations_round_trip(n in 2usize..6, seed in 0u64..1000, drop in proptest::collection::vec(any::<bool>(), 6)) {
        let unlabeled: Vec<usize> = (0..n).filter(|&i| drop[i]).collect();
        let ds = common::strip_labels(&common::tiny(n, seed), &unlabeled);
        let dir = tempfile::tempdir().unwrap();
        let path = save_annotations(&ds, dir.path()).unwrap();
        let back = load_annotations(&path).unwrap();
        prop_assert_eq!(&back.meta, &ds.meta);
        prop_assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.bbox, b.bbox);
            prop_assert_eq!(a.head_bbox, b.head_bbox);
            prop_assert_eq!(a.labeled, b.labeled);
            prop_assert_eq!(&a.keypoints, &b.keypoints);
            // Pixels are stored as 8-bit PPM.
            let worst = a.pixels.iter().zip(b.pixels.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            prop_assert!(worst <= 0.5 / 255.0 + 1e-6);
        }
        // Saving what was loaded reproduces the annotation file byte for byte.
        let again = tempfile::tempdir().unwrap();
        let p2 = save_annotations(&back, again.path()).unwrap();
        prop_assert_eq!(fs::read(&path).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn artifacts_are_content_addressed(rows in proptest::collection::vec((any::<u32>(), -1e6f64..1e6), 0..20)) {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ra = RunDir::create(a.path(), serde_json::json!({"x": 1})).unwrap();
        let mut rb = RunDir::create(b.path(), serde_json::json!({"x": 1})).unwrap();
        let ea = ra.write_jsonl(ArtifactKind::Metrics, "rows", &rows).unwrap();
        let eb = rb.write_jsonl(ArtifactKind::Metrics, "rows", &rows).unwrap();
        prop_assert_eq!(&ea, &eb);
        let bytes = fs::read(ra.full_path(&ea)).unwrap();
        prop_assert_eq!(sha256_hex(&bytes), ea.sha256.clone());
        prop_assert_eq!(fs::read(ra.manifest_path()).unwrap(), fs::read(rb.manifest_path()).unwrap());
        let back: Vec<(u32, f64)> = kps_core::data_io::persist::read_jsonl(&ra.full_path(&ea)).unwrap();
        prop_assert_eq!(back, rows);
    }
}

#[test]
fn bad_annotation_names_the_record() {
    let ds = common::tiny(3, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = save_annotations(&ds, dir.path()).unwrap();
    let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let id = doc["images"][1]["id"].as_str().unwrap().to_string();
    doc["images"][1]["keypoints"][0][2] = serde_json::json!(0.5);
    fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    match load_annotations(&path) {
        Err(Error::Annotation { record, message }) => {
            assert_eq!(record, id);
            assert!(message.contains("visibility"), "{message}");
        }
        other => panic!("expected an annotation error, got {other:?}"),
    }

    doc["images"][1]["keypoints"][0][2] = serde_json::json!(1.0);
    doc["images"][2]["id"] = serde_json::json!(id.clone());
    fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    assert!(
        matches!(load_annotations(&path), Err(Error::Annotation { record, .. }) if record == id)
    );
}
