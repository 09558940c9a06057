//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `KPS_ACCEPTANCE_ONLY=1,5,11` restricts the run.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kps_core::data_io::persist::read_jsonl;
use kps_core::data_io::synthetic::partition;
use kps_core::data_io::{generate_synthetic, ArtifactKind, RunDir, SyntheticConfig};
use kps_core::datamodel::{
    BBox, Dataset, DatasetMeta, HeatmapKind, HeatmapStack, ImageSample, Keypoint, LossWeights,
};
use kps_core::embedding::{export_embeddings, similarity_gap};
use kps_core::evaluation::{
    aggregate_runs, mean_std, pck_score, pckh_length, pckh_score, ResultsTable,
};
use kps_core::heatmap::{decode_peaks, render_heatmaps, RenderConfig};
use kps_core::losses::{
    equivariance_with_grad, invariance_with_grad, inverse_warp_with_grad,
    semantic_consistency_with_grad, supervised_loss_with_grad, total_loss,
};
use kps_core::nn::repr::representations_backward;
use kps_core::nn::{extract_representations, Backbone, Kcn, KcnConfig, ReferenceCnn};
use kps_core::sampling::{
    compose_batches, generate_split, labeled_count, BatchSpec, ALLOWED_FRACTIONS,
};
use kps_core::training::experiments::{
    initial_backbone, Experiment, RunOutcome, SweepRow, SWEEP_LAMBDA2, SWEEP_LAMBDA34,
};
use kps_core::training::{Method, SampleLosses, TrainConfig, Trainer};
use kps_core::warp::{
    invert_warp, sample_warp, warp_heatmaps, warp_image, warp_points, GridSampler, WarpSpec,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(limit_s: f64, start: Instant) -> (bool, String) {
    let s = start.elapsed().as_secs_f64();
    (s < limit_s, format!("{s:.1}s of {limit_s:.0}s"))
}

fn out_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

// ---------------------------------------------------------------- 1

fn loss_identities() -> Verdict {
    let t0 = Instant::now();
    let ds = generate_synthetic(&SyntheticConfig {
        n_images: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let net = ReferenceCnn::for_meta(&ds.meta, 11).unwrap();
    // Give the zero-initialised head nonzero weights so the check is not vacuous.
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in &mut net.params_mut().tensors {
        for v in &mut t.data {
            *v = rng.random_range(-0.2f32..0.2);
        }
    }
    let id = WarpSpec::identity(ds.meta.input_size);
    let sampler = GridSampler::for_heatmaps(&id, &ds.meta).unwrap();
    let (mut te_max, mut ti_max) = (0.0f64, 0.0f64);
    for s in &ds.samples {
        let a = net.forward(&s.pixels).unwrap();
        let b = net.forward(&warp_image(&s.pixels, &id)).unwrap();
        let (te, _, _) =
            equivariance_with_grad(&b.heatmaps.values, &a.heatmaps.values, &sampler).unwrap();
        let za = extract_representations(&a.features, &a.heatmaps).unwrap();
        let zb = extract_representations(&b.features, &b.heatmaps).unwrap();
        let (ti, _, _) = invariance_with_grad(&za.z, &zb.z).unwrap();
        te_max = te_max.max(te);
        ti_max = ti_max.max(ti);
        assert!(a.heatmaps.values.iter().any(|&v| v != 0.0));
    }
    let mut sc_err = 0.0f64;
    for k in [2usize, 5, 14] {
        let kcn = Kcn::zeros(KcnConfig::new(8, k));
        let reps = extract_representations(
            &Array3::from_elem((8, 4, 4), 0.3),
            &HeatmapStack::new(Array3::from_elem((k, 4, 4), 0.5), HeatmapKind::Predicted),
        )
        .unwrap();
        let (sc, _, _) = semantic_consistency_with_grad(&reps, &kcn).unwrap();
        sc_err = sc_err.max((sc - (k as f64).ln()).abs());
    }
    let mut arith = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let parts: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let w = LossWeights::new(
            rng.random_range(0.0..1e3),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1e3),
            rng.random_range(0.0..1e3),
        )
        .unwrap();
        let b = total_loss(parts, w);
        let expect = w.lambda1 * parts[0]
            + w.lambda2 * parts[1]
            + w.lambda3 * parts[2]
            + w.lambda4 * parts[3];
        arith &= b.total == expect && b.parts() == parts;
    }
    let (fast, time) = within(10.0, t0);
    verdict(
        te_max < 1e-10 && ti_max < 1e-10 && sc_err < 1e-6 && arith && fast,
        format!("TE {te_max:.1e}, TI {ti_max:.1e}, |SC - ln K| {sc_err:.1e}, total arithmetic exact: {arith}; {time}"),
    )
}

// ---------------------------------------------------------------- 2

const FD_EPS: f64 = 1e-6;
const FD_RTOL: f64 = 1e-4;
/// Entries whose analytic and numeric values are both below this are
/// compared absolutely; central differences of an exact zero carry
/// rounding noise around 1e-11.
const FD_ATOL: f64 = 1e-8;

/// Largest violation ratio `|a - n| / (rtol · max(|a|, |n|) + atol)`;
/// values up to 1 pass.
fn fd_check(analytic: &[f64], x: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_EPS;
        let up = f(&probe);
        probe[i] = x[i] - FD_EPS;
        let down = f(&probe);
        probe[i] = x[i];
        let num = (up - down) / (2.0 * FD_EPS);
        let a = analytic[i];
        let ratio = (a - num).abs() / (FD_RTOL * a.abs().max(num.abs()) + FD_ATOL);
        worst = worst.max(ratio);
    }
    worst
}

fn arr3(v: &[f64], shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_vec(shape, v.to_vec()).unwrap()
}

fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

fn flat(a: &Array3<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn grad_meta() -> DatasetMeta {
    DatasetMeta::new(vec!["a".into(), "b".into()], (32, 32)).unwrap()
}

fn gradient_oracle() -> Verdict {
    let t0 = Instant::now();
    let meta = grad_meta();
    let (k, h, w, c) = (2usize, 8usize, 8usize, 6usize);
    let hs = (k, h, w);
    let fs = (c, h, w);
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut note = |name: &'static str, r: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(r);
    };
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);

        // Supervised.
        let pred = random3(&mut rng, hs, 0.0, 1.0);
        let gt = random3(&mut rng, hs, 0.0, 1.0);
        let vis = vec![true, rng.random_bool(0.5)];
        let gt_s = HeatmapStack::new(gt.clone(), HeatmapKind::GroundTruth);
        let sup = |x: &[f64]| {
            let p = HeatmapStack::new(arr3(x, hs), HeatmapKind::Predicted);
            supervised_loss_with_grad(&p, &gt_s, &vis).unwrap().0.value
        };
        let (_, g) = supervised_loss_with_grad(
            &HeatmapStack::new(pred.clone(), HeatmapKind::Predicted),
            &gt_s,
            &vis,
        )
        .unwrap();
        note("sup", fd_check(&flat(&g), &flat(&pred), sup));

        // Semantic consistency through pooling and the classifier.
        let feats = random3(&mut rng, fs, -1.0, 1.0);
        let heat = random3(&mut rng, hs, 0.0, 1.0);
        let mut kcn = Kcn::new(KcnConfig::new(c, k), inst);
        for l in &mut kcn.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let sc_of = |f: &Array3<f64>, hm: &Array3<f64>, kcn: &Kcn| {
            let reps =
                extract_representations(f, &HeatmapStack::new(hm.clone(), HeatmapKind::Predicted))
                    .unwrap();
            semantic_consistency_with_grad(&reps, kcn).unwrap()
        };
        let reps = extract_representations(
            &feats,
            &HeatmapStack::new(heat.clone(), HeatmapKind::Predicted),
        )
        .unwrap();
        let (_, dz, kg) = sc_of(&feats, &heat, &kcn);
        let mut d_f = Array3::zeros(fs);
        let mut d_h = Array3::zeros(hs);
        representations_backward(&reps, &feats, &heat, &dz, &mut d_f, &mut d_h);
        note(
            "sc",
            fd_check(&flat(&d_f), &flat(&feats), |x| {
                sc_of(&arr3(x, fs), &heat, &kcn).0
            }),
        );
        note(
            "sc",
            fd_check(&flat(&d_h), &flat(&heat), |x| {
                sc_of(&feats, &arr3(x, hs), &kcn).0
            }),
        );
        let wshape = kcn.layers[0].weight.dim();
        let wflat: Vec<f64> = kcn.layers[0].weight.iter().copied().collect();
        let kg_w: Vec<f64> = kg.layers[0].weight.iter().copied().collect();
        note(
            "sc",
            fd_check(&kg_w, &wflat, |x| {
                let mut k2 = kcn.clone();
                k2.layers[0].weight = Array2::from_shape_vec(wshape, x.to_vec()).unwrap();
                sc_of(&feats, &heat, &k2).0
            }),
        );
        let bflat = kcn.layers[0].bias.to_vec();
        note(
            "sc",
            fd_check(&kg.layers[0].bias.to_vec(), &bflat, |x| {
                let mut k2 = kcn.clone();
                k2.layers[0].bias = Array1::from_vec(x.to_vec());
                sc_of(&feats, &heat, &k2).0
            }),
        );

        // Equivariance, both arguments.
        let spec = sample_warp(&meta, 0.125, 200 + inst).unwrap();
        let sampler = GridSampler::for_heatmaps(&spec, &meta).unwrap();
        let pw = random3(&mut rng, hs, 0.0, 1.0);
        let rf = random3(&mut rng, hs, 0.0, 1.0);
        let (_, d_pw, d_rf) = equivariance_with_grad(&pw, &rf, &sampler).unwrap();
        note(
            "te",
            fd_check(&flat(&d_pw), &flat(&pw), |x| {
                equivariance_with_grad(&arr3(x, hs), &rf, &sampler)
                    .unwrap()
                    .0
            }),
        );
        note(
            "te",
            fd_check(&flat(&d_rf), &flat(&rf), |x| {
                equivariance_with_grad(&pw, &arr3(x, hs), &sampler)
                    .unwrap()
                    .0
            }),
        );

        // Invariance through pooling on both branches.
        let f2 = random3(&mut rng, fs, -1.0, 1.0);
        let h2 = random3(&mut rng, hs, 0.0, 1.0);
        let ti_of = |fa: &Array3<f64>, ha: &Array3<f64>, fb: &Array3<f64>, hb: &Array3<f64>| {
            let za =
                extract_representations(fa, &HeatmapStack::new(ha.clone(), HeatmapKind::Predicted))
                    .unwrap();
            let zb =
                extract_representations(fb, &HeatmapStack::new(hb.clone(), HeatmapKind::Predicted))
                    .unwrap();
            (invariance_with_grad(&za.z, &zb.z).unwrap(), za, zb)
        };
        let ((_, dza, dzb), za, zb) = ti_of(&feats, &heat, &f2, &h2);
        let mut d_fa = Array3::zeros(fs);
        let mut d_ha = Array3::zeros(hs);
        let mut d_fb = Array3::zeros(fs);
        let mut d_hb = Array3::zeros(hs);
        representations_backward(&za, &feats, &heat, &dza, &mut d_fa, &mut d_ha);
        representations_backward(&zb, &f2, &h2, &dzb, &mut d_fb, &mut d_hb);
        note(
            "ti",
            fd_check(&flat(&d_fa), &flat(&feats), |x| {
                ti_of(&arr3(x, fs), &heat, &f2, &h2).0 .0
            }),
        );
        note(
            "ti",
            fd_check(&flat(&d_ha), &flat(&heat), |x| {
                ti_of(&feats, &arr3(x, hs), &f2, &h2).0 .0
            }),
        );
        note(
            "ti",
            fd_check(&flat(&d_fb), &flat(&f2), |x| {
                ti_of(&feats, &heat, &arr3(x, fs), &h2).0 .0
            }),
        );
        note(
            "ti",
            fd_check(&flat(&d_hb), &flat(&h2), |x| {
                ti_of(&feats, &heat, &f2, &arr3(x, hs)).0 .0
            }),
        );

        // Inverse-warp variant.
        let (_, d_w, d_o) = inverse_warp_with_grad(&pw, &rf, &spec, &meta).unwrap();
        note(
            "elt",
            fd_check(&flat(&d_w), &flat(&pw), |x| {
                inverse_warp_with_grad(&arr3(x, hs), &rf, &spec, &meta)
                    .unwrap()
                    .0
                    .value
            }),
        );
        note(
            "elt",
            fd_check(&flat(&d_o), &flat(&rf), |x| {
                inverse_warp_with_grad(&pw, &arr3(x, hs), &spec, &meta)
                    .unwrap()
                    .0
                    .value
            }),
        );
    }
    let (fast, time) = within(120.0, t0);
    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by_key(|(n, _)| {
        ["sup", "sc", "te", "ti", "elt"]
            .iter()
            .position(|m| m == *n)
    });
    let pass = names.len() == 5 && names.iter().all(|(_, &r)| r <= 1.0) && fast;
    let summary: Vec<String> = names.iter().map(|(n, r)| format!("{n} {r:.1e}")).collect();
    verdict(
        pass,
        format!(
            "20 instances each, worst |a-n|/(1e-4·max+1e-8): {}; {time}",
            summary.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 3

fn geometry_oracle() -> Verdict {
    let t0 = Instant::now();
    let meta = DatasetMeta::new((0..5).map(|i| format!("k{i}")).collect(), (128, 128)).unwrap();
    let render = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut worst_cells, mut worst_rt) = (0usize, 0.0f64, 0.0f64);
    for i in 0..100u64 {
        let spec = sample_warp(&meta, 0.125, 1000 + i).unwrap();
        let inv = invert_warp(&spec).unwrap();
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|_| (rng.random_range(0.0..127.0), rng.random_range(0.0..127.0)))
            .collect();
        let kps: Vec<Keypoint> = pts.iter().map(|&(x, y)| Keypoint::visible(x, y)).collect();
        let warped = warp_points(&pts, &spec);
        let a = decode_peaks(
            &warp_heatmaps(
                &render_heatmaps(&kps, &meta, &render).unwrap().stack,
                &spec,
                &meta,
            )
            .unwrap(),
            &meta,
        )
        .unwrap();
        let wkps: Vec<Keypoint> = warped
            .iter()
            .map(|p| Keypoint::new(p.x, p.y, p.inside))
            .collect();
        let b = decode_peaks(
            &render_heatmaps(&wkps, &meta, &render).unwrap().stack,
            &meta,
        )
        .unwrap();
        for j in 0..5 {
            if !warped[j].inside {
                continue;
            }
            checked += 1;
            let cells = ((a[j].x - b[j].x).abs().max((a[j].y - b[j].y).abs())) / 4.0;
            worst_cells = worst_cells.max(cells);
        }
        let back = warp_points(&warped.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(), &inv);
        for (p, q) in pts.iter().zip(&back) {
            worst_rt = worst_rt.max((p.0 - q.x).abs().max((p.1 - q.y).abs()));
        }
    }
    let (fast, time) = within(60.0, t0);
    verdict(
        worst_cells <= 1.0 && worst_rt < 1e-6 && fast,
        format!("100 warps, {checked} in-bounds keypoints, worst decode gap {worst_cells:.2} cells, worst round trip {worst_rt:.1e} px; {time}"),
    )
}

// ---------------------------------------------------------------- 4

/// Straightforward scorer used as the oracle.
fn brute_pck(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<Keypoint>],
    lengths: &[f64],
    alpha: f64,
) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for i in 0..gts.len() {
        for j in 0..gts[i].len() {
            if !gts[i][j].visible {
                continue;
            }
            total += 1;
            let dx = preds[i][j].0 - gts[i][j].x;
            let dy = preds[i][j].1 - gts[i][j].y;
            if (dx * dx + dy * dy).sqrt() <= alpha * lengths[i] {
                hit += 1;
            }
        }
    }
    (hit, total)
}

fn metric_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut boundary_cases = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let alpha = [0.05, 0.1, 0.25, 0.5][rng.random_range(0..4)];
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut boxes = Vec::new();
        let mut heads = Vec::new();
        for _ in 0..n {
            // With integer coordinates, a side that is a multiple of 40 and a
            // dyadic alpha, 3-4-5 offsets land exactly on the threshold.
            let side = 40.0 * rng.random_range(1..10) as f64;
            let bbox = BBox::new(0.0, 0.0, side, side * rng.random_range(0.5..1.0));
            let head = BBox::new(0.0, 0.0, 30.0 * side / 100.0, 40.0 * side / 100.0);
            let mut p = Vec::new();
            let mut g = Vec::new();
            for _ in 0..k {
                let gx = rng.random_range(0..200) as f64;
                let gy = rng.random_range(0..200) as f64;
                let exact = alpha == 0.25 || alpha == 0.5;
                let (dx, dy) = if exact && rng.random_bool(0.5) {
                    boundary_cases += 1;
                    let t = alpha * side;
                    (0.6 * t, -0.8 * t)
                } else {
                    (rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0))
                };
                p.push((gx + dx, gy + dy));
                g.push(Keypoint::new(gx, gy, rng.random_bool(0.8)));
            }
            preds.push(p);
            gts.push(g);
            boxes.push(bbox);
            heads.push(Some(head));
        }
        let lengths: Vec<f64> = boxes.iter().map(|b| b.w.max(b.h)).collect();
        let (h, t) = brute_pck(&preds, &gts, &lengths, alpha);
        let s = pck_score(&preds, &gts, &boxes, alpha).unwrap();
        let expect = (t > 0).then(|| 100.0 * h as f64 / t as f64);
        if (s.correct, s.total) != (h, t) || s.percent != expect {
            mismatches += 1;
        }
        let hl: Vec<f64> = heads
            .iter()
            .map(|b| b.map_or(0.0, |b| 0.6 * (b.w * b.w + b.h * b.h).sqrt()))
            .collect();
        let (h, t) = brute_pck(&preds, &gts, &hl, alpha);
        let s = pckh_score(&preds, &gts, &heads, alpha).unwrap();
        if (s.correct, s.total) != (h, t) {
            mismatches += 1;
        }
    }
    let threshold = 0.5 * pckh_length(&BBox::new(0.0, 0.0, 30.0, 40.0));
    let (fast, time) = within(30.0, t0);
    verdict(
        mismatches == 0 && threshold == 15.0 && fast,
        format!("1000 cases ({boundary_cases} keypoints on the boundary), {mismatches} mismatches, PCKh threshold for 30x40 head at 0.5 = {threshold}; {time}"),
    )
}

// ---------------------------------------------------------------- 5

fn split_protocol() -> Verdict {
    let t0 = Instant::now();
    let mut bad = Vec::new();
    for n in [97usize, 100, 10000] {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i:05}")).collect();
        for f in ALLOWED_FRACTIONS {
            for r in 0..3 {
                let s = generate_split(&ids, f, r, 9).unwrap();
                let mut all: Vec<&String> = s.labeled_ids.iter().chain(&s.unlabeled_ids).collect();
                all.sort();
                all.dedup();
                if s.labeled_ids.len() != labeled_count(n, f) || all.len() != n || s.len() != n {
                    bad.push(format!("N={n} f={f} r={r}"));
                }
                if s != generate_split(&ids, f, r, 9).unwrap() {
                    bad.push(format!("split not deterministic N={n} f={f}"));
                }
                if f < 1.0 && n <= 100 {
                    for epoch in 0..3 {
                        let b = compose_batches(&s, &BatchSpec::default(), epoch).unwrap();
                        if b != compose_batches(&s, &BatchSpec::default(), epoch).unwrap() {
                            bad.push(format!("batches not deterministic N={n} f={f}"));
                        }
                        if b.iter().any(|batch| {
                            batch.len() != 8 || batch.iter().filter(|i| i.labeled).count() != 4
                        }) {
                            bad.push(format!("batch composition N={n} f={f} epoch={epoch}"));
                        }
                        let seen: std::collections::HashSet<_> = b
                            .iter()
                            .flatten()
                            .filter(|i| !i.labeled)
                            .map(|i| &i.id)
                            .collect();
                        if seen.len() != s.unlabeled_ids.len() {
                            bad.push(format!("unlabeled coverage N={n} f={f}"));
                        }
                    }
                }
            }
        }
    }
    let (fast, time) = within(30.0, t0);
    verdict(
        bad.is_empty() && fast,
        if bad.is_empty() {
            format!("cardinalities exact for 5 fractions x N in {{97, 100, 10000}}, every batch 4+4, deterministic; {time}")
        } else {
            format!("{} problems, first: {}; {time}", bad.len(), bad[0])
        },
    )
}

// ---------------------------------------------------------------- shared desk-scale runs

/// Desk-scale training budget shared by the trained criteria.
fn desk_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 40,
        early_stop_patience: 10,
        batches_per_epoch: Some(50),
        ..TrainConfig::default()
    }
}

struct Desk {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    runs: HashMap<(Method, usize), (RunOutcome, f64)>,
}

impl Desk {
    fn new() -> Self {
        let t0 = Instant::now();
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let (train, val, test) = partition(&ds, 2000, 400).unwrap();
        eprintln!(
            "[acceptance] synthetic data ready in {:.1}s",
            t0.elapsed().as_secs_f64()
        );
        Self {
            train,
            val,
            test,
            runs: HashMap::new(),
        }
    }

    fn experiment(&self, base: TrainConfig) -> Experiment<'_> {
        Experiment {
            train: &self.train,
            val: &self.val,
            test: &self.test,
            base,
            split_seed: 0,
            pl_threshold: 0.5,
        }
    }

    fn run(&mut self, method: Method, repeat: usize) -> &(RunOutcome, f64) {
        if !self.runs.contains_key(&(method, repeat)) {
            let t0 = Instant::now();
            let exp = self.experiment(desk_config());
            let out = exp.run(method, &exp.split(0.05, repeat).unwrap()).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            eprintln!(
                "[acceptance] {method} repeat {repeat}: test PCK {:.2}, best epoch {}, {secs:.0}s",
                out.test_percent(),
                out.best_epoch
            );
            self.runs.insert((method, repeat), (out, secs));
        }
        &self.runs[&(method, repeat)]
    }

    fn scores(&mut self, method: Method, repeats: usize) -> Vec<f64> {
        (0..repeats)
            .map(|r| self.run(method, r).0.test_percent())
            .collect()
    }
}

const SEEDS: usize = 3;

fn semi_supervised_gain(desk: &mut Desk) -> Verdict {
    let full = desk.scores(Method::Full, SEEDS);
    let sup = desk.scores(Method::Supervised, SEEDS);
    let slowest = desk.runs.values().map(|(_, s)| *s).fold(0.0, f64::max);
    let (mf, _) = mean_std(&full);
    let (ms, _) = mean_std(&sup);
    let gain = mf - ms;
    verdict(
        gain >= 3.0 && slowest <= 1800.0,
        format!(
            "test PCK@0.1 over {SEEDS} seeds: full {mf:.2} {full:.1?} vs supervised {ms:.2} {sup:.1?}, gain {gain:+.2} (need >= 3.0); slowest run {slowest:.0}s"
        ),
    )
}

fn ablation_ordering(desk: &mut Desk) -> Verdict {
    let full = desk.scores(Method::Full, SEEDS);
    let sc = desk.scores(Method::ScOnly, SEEDS);
    let sup = desk.scores(Method::Supervised, SEEDS);
    let pooled =
        |a: &[f64], b: &[f64]| ((mean_std(a).1.powi(2) + mean_std(b).1.powi(2)) / 2.0).sqrt();
    let g1 = mean_std(&full).0 - mean_std(&sc).0;
    let g2 = mean_std(&sc).0 - mean_std(&sup).0;
    let (p1, p2) = (pooled(&full, &sc), pooled(&sc, &sup));

    let mut table = ResultsTable::fraction_columns(
        "Unsupervised loss ablation (synthetic, test PCK@0.1)",
        &[0.05],
    );
    let mut all_ran = true;
    for m in Method::ABLATION {
        let repeats = if matches!(m, Method::Full | Method::ScOnly | Method::Supervised) {
            SEEDS
        } else {
            1
        };
        let scores: Vec<_> = (0..repeats)
            .map(|r| desk.run(m, r).0.test.clone())
            .collect();
        all_ran &= scores.iter().all(|s| s.percent.is_some());
        table.push_row(
            m.label(),
            vec![Some(aggregate_runs("pck", 0.1, &scores).unwrap())],
        );
    }
    let md = table.to_markdown();
    std::fs::create_dir_all(out_dir()).unwrap();
    let path = out_dir().join("ablation.md");
    std::fs::write(&path, &md).unwrap();
    let shaped = table.rows.len() == 7 && table.columns == ["5%"];
    verdict(
        g1 >= -p1 && g2 >= -p2 && all_ran && shaped,
        format!(
            "full - SC {g1:+.2} (pooled sd {p1:.2}), SC - supervised {g2:+.2} (pooled sd {p2:.2}); 7-row table at {}",
            path.display()
        ),
    )
}

fn gt_substitution(desk: &mut Desk) -> Verdict {
    let exp = desk.experiment(TrainConfig {
        max_epochs: 2,
        batches_per_epoch: Some(10),
        ..desk_config()
    });
    let split = exp.split(0.05, 0).unwrap();
    let mut trained = Vec::new();
    for on in [true, false] {
        let mut cfg = Method::Full.configure(&exp.base);
        cfg.policy.use_gt_for_labeled = on;
        let out = exp.run_config(Method::Full, &cfg, &split).unwrap();
        let finite = out.steps.iter().all(|s| s.total.is_finite());
        trained.push((finite, out));
    }
    let all_trained = trained
        .iter()
        .all(|(ok, o)| *ok && o.test.percent.is_some());

    // Crafted batch: two labeled and two unlabeled samples, same weights
    // and warps, only the policy differs.
    let view: Vec<ImageSample> = desk.train.samples[..4]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            if i >= 2 {
                s.labeled = false;
                s.keypoints = None;
            }
            s
        })
        .collect();
    let batch: Vec<&ImageSample> = view.iter().collect();
    let backbone = trained[0].1.backbone.clone();
    let mut on_cfg = Method::Full.configure(&desk_config());
    on_cfg.policy.use_gt_for_labeled = true;
    let mut off_cfg = on_cfg.clone();
    off_cfg.policy.use_gt_for_labeled = false;
    let t_on = Trainer::new(backbone.clone(), desk.train.meta.clone(), on_cfg).unwrap();
    let t_off = Trainer::new(backbone, desk.train.meta.clone(), off_cfg).unwrap();
    let (a, _, _) = t_on.compute(&batch, 7).unwrap();
    let (b, _, _) = t_off.compute(&batch, 7).unwrap();
    let bits = |v: Option<f64>| v.map(f64::to_bits);
    let same = |x: &SampleLosses, y: &SampleLosses| {
        bits(x.sc) == bits(y.sc) && bits(x.te) == bits(y.te) && bits(x.ti) == bits(y.ti)
    };
    let unlabeled_equal = a.per_sample[2..]
        .iter()
        .zip(&b.per_sample[2..])
        .all(|(x, y)| same(x, y));
    let labeled_differ = a.per_sample[..2]
        .iter()
        .zip(&b.per_sample[..2])
        .all(|(x, y)| !same(x, y));
    let scores: Vec<String> = trained
        .iter()
        .map(|(_, o)| format!("{:.2}", o.test_percent()))
        .collect();
    verdict(
        all_trained && unlabeled_equal && labeled_differ,
        format!(
            "short runs with/without g/t heatmaps finite (test {}); crafted batch: unlabeled losses bitwise equal {unlabeled_equal}, labeled losses differ {labeled_differ}",
            scores.join(" / ")
        ),
    )
}

fn lambda_sweep(desk: &mut Desk) -> Verdict {
    let t0 = Instant::now();
    let exp = desk.experiment(TrainConfig {
        max_epochs: 2,
        batches_per_epoch: Some(10),
        ..desk_config()
    });
    let split = exp.split(0.05, 0).unwrap();
    let dir = out_dir().join("sweep");
    let _ = std::fs::remove_dir_all(&dir);
    let mut run = RunDir::create(&dir, serde_json::to_value(&exp.base).unwrap()).unwrap();
    let rows = exp
        .lambda_sweep(
            &split,
            &SWEEP_LAMBDA2,
            &SWEEP_LAMBDA34,
            &SWEEP_LAMBDA34,
            |r| {
                eprintln!(
                    "[acceptance] sweep {:?} -> val {:.2}",
                    (r.lambda2, r.lambda3, r.lambda4),
                    r.val_pck
                )
            },
        )
        .unwrap();
    let entry = run
        .write_jsonl(ArtifactKind::Metrics, "sweep", &rows)
        .unwrap();
    let back: Vec<SweepRow> = read_jsonl(&run.full_path(&entry)).unwrap();
    let finite = back.iter().all(|r| r.finite && r.val_pck.is_finite());
    verdict(
        back.len() == 27 && finite,
        format!(
            "{} rows written to {}, all finite: {finite}; {:.0}s",
            back.len(),
            run.full_path(&entry).display(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn representation_clustering(desk: &mut Desk) -> Verdict {
    let trained = desk.run(Method::Full, 0).0.backbone.clone();
    let cfg = Method::Full.configure(&desk_config());
    let mut cfg0 = cfg.clone();
    cfg0.seed = kps_core::training::experiments::run_seed(cfg.seed, 0);
    let untrained = initial_backbone(&desk.train, &cfg0).unwrap();
    let g_trained = similarity_gap(&export_embeddings(&trained, &desk.test).unwrap()).unwrap();
    let g_untrained = similarity_gap(&export_embeddings(&untrained, &desk.test).unwrap()).unwrap();
    verdict(
        g_trained.gap >= 0.05 && g_untrained.gap.abs() < 0.02,
        format!(
            "trained: intra {:.3} inter {:.3} gap {:.3} (need >= 0.05); untrained gap {:.3} (need < 0.02)",
            g_trained.intra, g_trained.inter, g_trained.gap, g_untrained.gap
        ),
    )
}

// ---------------------------------------------------------------- 11

fn kcn_footprint() -> Verdict {
    let n = Kcn::new(KcnConfig::new(64, 14), 0).num_params();
    verdict(n == 910 && n < 1000, format!("C=64, K=14: {n} parameters"))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("KPS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut desk: Option<Desk> = None;
    let mut failed = 0;
    let criteria: [(u32, &str); 11] = [
        (1, "loss identities"),
        (2, "gradient oracle"),
        (3, "geometry oracle"),
        (4, "metric oracle"),
        (5, "split and batch protocol"),
        (6, "semi-supervised gain"),
        (7, "ablation ordering"),
        (8, "g/t heatmap substitution"),
        (9, "loss-weight sweep"),
        (10, "representation clustering"),
        (11, "KCN footprint"),
    ];
    for (id, name) in criteria {
        if !wanted(id) {
            continue;
        }
        let t0 = Instant::now();
        let v = match id {
            1 => loss_identities(),
            2 => gradient_oracle(),
            3 => geometry_oracle(),
            4 => metric_oracle(),
            5 => split_protocol(),
            11 => kcn_footprint(),
            _ => {
                let d = desk.get_or_insert_with(Desk::new);
                match id {
                    6 => semi_supervised_gain(d),
                    7 => ablation_ordering(d),
                    8 => gt_substitution(d),
                    9 => lambda_sweep(d),
                    _ => representation_clustering(d),
                }
            }
        };
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
