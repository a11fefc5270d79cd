//! Tests for decoding, metrics, flip ensembling, and the dataset harness.

use super::*;
use crate::data::{synth_sample, Landmark, SynthConfig};
use crate::net::{build_model, BranchSpec, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn delta_probs(n: usize, h: usize, w: usize, peaks: &[(usize, usize, usize)]) -> Tensor<f64> {
    // Peaked channels get probability 1 at their pixel; the rest of the
    // mass sits in the background channel.
    let mut data = vec![0.0; (n + 1) * h * w];
    for i in 0..h * w {
        data[n * h * w + i] = 1.0;
    }
    for &(k, y, x) in peaks {
        data[(k * h + y) * w + x] = 1.0;
        data[(n * h + y) * w + x] = 0.0;
    }
    Tensor::from_vec(&[n + 1, h, w], data).unwrap()
}

#[test]
fn decode_finds_deltas_and_thresholds_visibility() {
    let probs = delta_probs(3, 48, 48, &[(0, 40, 12), (2, 0, 47)]);
    let pred = decode_heatmaps(&probs, 0.3).unwrap();
    assert_eq!((pred[0].x, pred[0].y), (12.0, 40.0));
    assert!(pred[0].visible && pred[0].confidence == 1.0);
    assert_eq!((pred[2].x, pred[2].y), (47.0, 0.0));
    // Channel 1 never rises above the flat background, so its peak
    // probability is 0 and it decodes invisible.
    assert!(!pred[1].visible);
    assert_eq!(pred[1].confidence, 0.0);

    let uniform = Tensor::filled(&[2, 8, 8], 1.0 / 128.0);
    let pred = decode_heatmaps(&uniform, 0.3).unwrap();
    assert!(!pred[0].visible, "uniform mass below tau is invisible");
}

#[test]
fn decode_matches_brute_force_scan_with_row_major_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (n, h, w) = (5, 13, 17);
    let mut data: Vec<f64> = (0..(n + 1) * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    // Deliberate tie in channel 3: two pixels share the exact maximum.
    for i in 3 * h * w..4 * h * w {
        data[i] = 0.25;
    }
    data[3 * h * w + 5 * w + 9] = 0.75;
    data[3 * h * w + 11 * w + 2] = 0.75;
    let probs = Tensor::from_vec(&[n + 1, h, w], data.clone()).unwrap();
    let pred = decode_heatmaps(&probs, 0.3).unwrap();
    for k in 0..n {
        let plane = &data[k * h * w..(k + 1) * h * w];
        let mut best = 0;
        for i in 0..h * w {
            if plane[i] > plane[best] {
                best = i;
            }
        }
        assert_eq!(pred[k].x as usize, best % w, "channel {k}");
        assert_eq!(pred[k].y as usize, best / w, "channel {k}");
        assert_eq!(pred[k].confidence, plane[best]);
    }
    assert_eq!((pred[3].x, pred[3].y), (9.0, 5.0), "ties go to the first pixel in row-major order");
}

fn gt_with(landmarks: Vec<Landmark>, bbox: (f64, f64, f64, f64)) -> LandmarkAnnotation {
    LandmarkAnnotation { image: "x".into(), bbox, pose: (0.0, 0.0, 0.0), landmarks }
}

fn pred_at(points: &[(f64, f64)]) -> Vec<PredictedLandmark> {
    points
        .iter()
        .map(|&(x, y)| PredictedLandmark { x, y, confidence: 1.0, visible: true })
        .collect()
}

#[test]
fn nme_matches_hand_computations() {
    let tree = DendriticTree::aflw21();
    let protocol = EvalProtocol::default();
    let gt_pts: Vec<Landmark> =
        (0..21).map(|k| Landmark { x: 10.0 + k as f64, y: 20.0, visible: true }).collect();

    // Perfect prediction scores zero.
    let gt = gt_with(gt_pts.clone(), (0.0, 0.0, 100.0, 100.0));
    let exact = pred_at(&gt.landmarks.iter().map(|l| (l.x, l.y)).collect::<Vec<_>>());
    assert_eq!(nme(&exact, &gt, &tree, &protocol).unwrap(), 0.0);

    // One visible point offset by a 3-4-5 triangle in a 100x100 box.
    let mut one = gt_pts.clone();
    for (k, lm) in one.iter_mut().enumerate() {
        lm.visible = k == 0;
    }
    let gt = gt_with(one, (0.0, 0.0, 100.0, 100.0));
    let mut pred = exact.clone();
    pred[0].x += 3.0;
    pred[0].y += 4.0;
    assert!((nme(&pred, &gt, &tree, &protocol).unwrap() - 0.05).abs() < 1e-15);

    // Joint rescaling of predictions, ground truth, and box is invariant.
    let s = 3.7;
    let scaled_gt = gt_with(
        gt.landmarks.iter().map(|l| Landmark { x: l.x * s, y: l.y * s, visible: l.visible }).collect(),
        (0.0, 0.0, 100.0 * s, 100.0 * s),
    );
    let scaled_pred =
        pred.iter().map(|p| PredictedLandmark { x: p.x * s, y: p.y * s, ..*p }).collect::<Vec<_>>();
    let a = nme(&pred, &gt, &tree, &protocol).unwrap();
    let b = nme(&scaled_pred, &scaled_gt, &tree, &protocol).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn interocular_mode_normalizes_by_eye_corner_distance() {
    let tree = DendriticTree::aflw21();
    let protocol = EvalProtocol { normalizer: Normalizer::Interocular, ..Default::default() };
    let mut pts: Vec<Landmark> =
        (0..21).map(|_| Landmark { x: 32.0, y: 32.0, visible: false }).collect();
    // Outer eye corners 30px apart; the single visible landmark is off by 3px.
    pts[6] = Landmark { x: 17.0, y: 32.0, visible: false };
    pts[11] = Landmark { x: 47.0, y: 32.0, visible: false };
    pts[20] = Landmark { x: 32.0, y: 50.0, visible: true };
    let gt = gt_with(pts, (0.0, 0.0, 64.0, 64.0));
    let mut pred = pred_at(&gt.landmarks.iter().map(|l| (l.x, l.y)).collect::<Vec<_>>());
    pred[20].y += 3.0;
    assert!((nme(&pred, &gt, &tree, &protocol).unwrap() - 0.1).abs() < 1e-15);

    // Coincident eye corners make the normalizer degenerate.
    let mut coincident = gt.clone();
    coincident.landmarks[11] = coincident.landmarks[6];
    assert!(nme(&pred, &coincident, &tree, &protocol).is_err());

    // A sample with no visible ground truth cannot be scored.
    let mut blind = gt.clone();
    blind.landmarks[20].visible = false;
    assert!(nme(&pred, &blind, &tree, &EvalProtocol::default()).is_err());
}

#[test]
fn interocular_indices_exist_for_all_shipped_trees() {
    assert_eq!(interocular_indices(&DendriticTree::aflw21()), Some((6, 11)));
    assert_eq!(interocular_indices(&DendriticTree::cofw29()), Some((8, 15)));
    assert_eq!(interocular_indices(&DendriticTree::ibug68()), Some((36, 45)));
}

#[test]
fn ced_failure_and_pose_fraction_follow_hand_cases() {
    let grid: Vec<f64> = (0..=150).map(|i| i as f64 * 0.001).collect();
    let zeros = vec![0.0; 4];
    assert!(ced(&zeros, &grid).iter().all(|&(_, f)| f == 1.0));
    assert_eq!(failure_rate(&zeros, 0.10), 0.0);

    let errors = vec![0.05, 0.15];
    assert_eq!(failure_rate(&errors, 0.10), 0.5);
    let curve = ced(&errors, &grid);
    assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1), "CED is nondecreasing");
    assert_eq!(curve.last().unwrap().1, 1.0, "all errors inside the grid end at 1");
    for &(t, f) in &curve {
        assert!((f + failure_rate(&errors, t) - 1.0).abs() < 1e-15);
    }

    let pose_errors = vec![3.0, 15.0, 15.1, 40.0];
    assert_eq!(pose_fraction(&pose_errors, 15.0), 0.5);
    assert_eq!(pose_axis_error((10.0, -5.0, 2.0), (4.0, -2.0, 2.5)), 6.0);
}

#[test]
fn occlusion_pr_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
    let occluded: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.3)).collect();
    let taus: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let points = occlusion_pr(&scores, &occluded, &taus).unwrap();
    for p in &points {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for (s, &o) in scores.iter().zip(&occluded) {
            match (*s >= p.tau, o) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        assert_eq!(p.precision, tp as f64 / (tp + fp) as f64);
        assert_eq!(p.recall, tp as f64 / (tp + fneg) as f64);
    }

    // A perfect scorer is perfect at every interior threshold.
    let scores: Vec<f64> = occluded.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let points = occlusion_pr(&scores, &occluded, &[0.25, 0.5, 0.75]).unwrap();
    assert!(points.iter().all(|p| p.precision == 1.0 && p.recall == 1.0));

    // Thresholds above a constant score predict no positives and are skipped.
    let constant = vec![0.5; 200];
    let points = occlusion_pr(&constant, &occluded, &[0.2, 0.5, 0.8]).unwrap();
    assert_eq!(points.len(), 2, "tau 0.8 has no predicted positives");
    assert!(points.iter().all(|p| p.tau <= 0.5));

    // All-visible ground truth leaves recall undefined.
    assert!(occlusion_pr(&constant, &vec![false; 200], &[0.5]).is_err());
}

#[test]
fn recall_interpolates_linearly_at_target_precision() {
    let mk = |tau: f64, precision: f64, recall: f64| PrPoint { tau, precision, recall };
    let points = vec![mk(0.2, 0.7, 0.6), mk(0.4, 0.9, 0.2)];
    let r = recall_at_precision(&points, 0.80).unwrap();
    assert!((r - 0.4).abs() < 1e-12, "midpoint of the crossing segment");
    // An exact sweep point wins over interpolation when it has higher recall.
    let points = vec![mk(0.2, 0.7, 0.6), mk(0.3, 0.8, 0.55), mk(0.4, 0.9, 0.2)];
    assert_eq!(recall_at_precision(&points, 0.80), Some(0.55));
    assert_eq!(recall_at_precision(&points, 0.95), None);
}

#[test]
fn visibility_f1_sweep_recovers_a_separating_threshold() {
    let gt = [true, true, true, false, false, true];
    let conf = [0.9, 0.8, 0.7, 0.2, 0.1, 0.95];
    let taus: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let (tau, f1) = best_visibility_tau(&conf, &gt, &taus);
    assert_eq!(f1, 1.0);
    assert!(tau > 0.2 && tau <= 0.7, "any separating threshold is perfect, got {tau}");
}

// ---- model-in-the-loop ------------------------------------------------------

fn tiny_model(seed: u64) -> PCDModel<f64> {
    let cfg = ModelConfig {
        image_size: 32,
        stem_out: 4,
        fire_outs: vec![4, 4],
        branch: BranchSpec { channels: vec![4, 4, 2], squeezes: vec![2, 2, 2] },
        ..ModelConfig::default()
    };
    build_model(&DendriticTree::aflw21(), &cfg, seed).unwrap()
}

fn tiny_sample(index: u64) -> (Tensor<f64>, LandmarkAnnotation) {
    let cfg = SynthConfig { image_size: 32, ..SynthConfig::default() };
    synth_sample(&cfg, index).unwrap()
}

#[test]
fn tta_probs_stay_normalized_and_equivariant() {
    let model = tiny_model(50);
    let (image, _) = tiny_sample(0);
    let (merged, _) = tta_probs(&model, &image, Stage::Coarse).unwrap();
    let (c, h, w) = (22, 32, 32);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..c).map(|k| merged.data()[(k * h + y) * w + x]).sum();
            assert!((s - 1.0).abs() < 1e-6, "merged probs sum to 1 at ({x},{y})");
        }
    }

    // Ensembling the mirrored image gives the mirrored ensemble: flip the
    // input, and the merged maps come back channel-permuted and x-mirrored
    // with yaw and roll negated.
    let (m1, p1) = tta_probs(&model, &image, Stage::Coarse).unwrap();
    let flipped = flip_horizontal(&image).unwrap();
    let (m2, p2) = tta_probs(&model, &flipped, Stage::Coarse).unwrap();
    let tree = model.tree();
    let mut expect = vec![0.0f64; m1.len()];
    for k in 0..c {
        let dst = if k < tree.n() { tree.flip()[k] } else { k };
        expect[dst * h * w..(dst + 1) * h * w].copy_from_slice(&m1.data()[k * h * w..(k + 1) * h * w]);
    }
    let expect = flip_horizontal(&Tensor::from_vec(&[c, h, w], expect).unwrap()).unwrap();
    for (a, b) in m2.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!((p2[0] + p1[0]).abs() < 1e-9 && (p2[2] + p1[2]).abs() < 1e-9);
    assert!((p2[1] - p1[1]).abs() < 1e-9);
}

#[test]
fn tta_on_an_equivariant_model_matches_the_single_pass() {
    // Zeroed weights make every map spatially constant, hence exactly
    // flip-equivariant: the ensemble must then change nothing.
    let mut model = tiny_model(51);
    for p in model.params_mut() {
        if p.name.ends_with(".w") || p.name.ends_with(".b") || p.name.ends_with("beta") {
            p.value.fill(0.0);
        }
    }
    let (image, _) = tiny_sample(1);
    let protocol = EvalProtocol::default();
    let single = predict(&model, &image, &protocol, Stage::Coarse).unwrap();
    let merged = flip_tta(&model, &image, &protocol, Stage::Coarse).unwrap();
    for (a, b) in single.landmarks.iter().zip(&merged.landmarks) {
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert!((a.confidence - b.confidence).abs() < 1e-12);
    }
    assert!((single.pose.0 - merged.pose.0).abs() < 1e-9);
}

#[test]
fn delta_probs_recover_every_visible_landmark() {
    let (_, ann) = tiny_sample(2);
    let peaks: Vec<(usize, usize, usize)> = ann
        .landmarks
        .iter()
        .enumerate()
        .filter(|(_, l)| l.visible)
        .map(|(k, l)| (k, l.y.round() as usize, l.x.round() as usize))
        .collect();
    let probs = delta_probs(21, 32, 32, &peaks);
    let pred = decode_heatmaps(&probs, 0.3).unwrap();
    for (k, lm) in ann.landmarks.iter().enumerate() {
        if lm.visible {
            assert_eq!(pred[k].x, lm.x.round());
            assert_eq!(pred[k].y, lm.y.round());
            assert!(pred[k].visible);
        } else {
            assert!(!pred[k].visible);
        }
    }
}

#[test]
fn manifest_evaluation_is_thread_count_invariant() {
    let model = tiny_model(52);
    let synth = SynthConfig { image_size: 32, seed: 5, ..SynthConfig::default() };
    let mut records = Vec::new();
    for index in 0..8u64 {
        let (_, ann) = synth_sample::<f64>(&synth, index).unwrap();
        records.push(ann);
    }
    let manifest = DatasetManifest {
        tree: "aflw21".into(),
        image_size: 32,
        synth: Some(synth),
        records,
    };
    let protocol = EvalProtocol::default();
    let a = evaluate_manifest(&model, &manifest, &protocol, Stage::Coarse, false, 1).unwrap();
    let b = evaluate_manifest(&model, &manifest, &protocol, Stage::Coarse, false, 4).unwrap();
    assert_eq!(a.sample_nmes, b.sample_nmes, "reduction order ignores thread count");
    assert_eq!(a.mean_nme, b.mean_nme);
    assert_eq!(a.pose_within_15deg, b.pose_within_15deg);
    assert_eq!(a.recall_at_p80, b.recall_at_p80);
    assert_eq!(a.count + a.excluded, 8);
    assert!(a.mean_nme.is_finite() && a.mean_nme > 0.0);
    assert!(a.ced.last().unwrap().1 <= 1.0);

    // TTA path runs end to end and stays finite.
    let t = evaluate_manifest(&model, &manifest, &protocol, Stage::Coarse, true, 2).unwrap();
    assert!(t.mean_nme.is_finite());

    // Tree mismatch is rejected up front.
    let mut wrong = manifest.clone();
    wrong.tree = "cofw29".into();
    assert!(evaluate_manifest(&model, &wrong, &protocol, Stage::Coarse, false, 2).is_err());
}
