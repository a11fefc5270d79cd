//! Tests for the head template, the synthetic generator, manifests, label
//! rasterization, and augmentation geometry.

use super::*;
use crate::loss::LabelMap;
use crate::tree::DendriticTree;

fn test_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("pcd_data_{}_{}", name, std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn template_matches_tree_and_mirrors_exactly() {
    let tree = DendriticTree::aflw21();
    let tpl = head_template();
    assert_eq!(tpl.len(), tree.n());
    for (k, tp) in tpl.iter().enumerate() {
        assert_eq!(tp.name, tree.landmark_name(k), "template order follows the tree");
        // Every frontal normal faces the camera: an unrotated head has no
        // self-occluded landmarks.
        assert!(tp.normal[2] > 0.0, "{}: frontal normal faces away", tp.name);
        let len2: f64 = tp.normal.iter().map(|v| v * v).sum();
        assert!((len2 - 1.0).abs() < 2e-4, "{}: normal not unit length", tp.name);
        // The flip partner is the exact horizontal mirror.
        let m = &tpl[tree.flip()[k]];
        assert_eq!(m.pos, [-tp.pos[0], tp.pos[1], tp.pos[2]]);
        assert_eq!(m.normal, [-tp.normal[0], tp.normal[1], tp.normal[2]]);
    }
}

fn frontal_cfg() -> SynthConfig {
    SynthConfig {
        yaw_range: (0.0, 0.0),
        pitch_range: (0.0, 0.0),
        roll_range: (0.0, 0.0),
        noise: 0.0,
        ..SynthConfig::default()
    }
}

#[test]
fn frontal_sample_projects_the_template_affinely() {
    let cfg = frontal_cfg();
    let (_, ann) = synth_sample::<f64>(&cfg, 0).unwrap();
    assert_eq!(ann.pose, (0.0, 0.0, 0.0));
    assert_eq!(ann.visible_count(), 21, "frontal view occludes nothing");

    // Recover scale and center from three landmarks, then every projected
    // point must satisfy u = cx + s*x, v = cy - s*y up to the 0.01 write
    // precision. Ears span x = -0.74..0.74; the nose center sits at x = 0.
    let tpl = head_template();
    let s = (ann.landmarks[16].x - ann.landmarks[12].x) / (tpl[16].pos[0] - tpl[12].pos[0]);
    let cx = ann.landmarks[14].x;
    let cy = ann.landmarks[20].y + s * tpl[20].pos[1];
    assert!(s >= 0.36 * 64.0 * 0.95 - 0.05 && s <= 0.36 * 64.0 * 1.05 + 0.05, "scale {s}");
    assert!((30.0..=34.0).contains(&cx) && (30.0..=34.0).contains(&cy), "center {cx},{cy}");
    for (k, tp) in tpl.iter().enumerate() {
        let (u, v) = (cx + s * tp.pos[0], cy - s * tp.pos[1]);
        assert!((ann.landmarks[k].x - u).abs() < 0.05, "{}: x {} vs {u}", tp.name, ann.landmarks[k].x);
        assert!((ann.landmarks[k].y - v).abs() < 0.05, "{}: y {} vs {v}", tp.name, ann.landmarks[k].y);
    }
}

#[test]
fn strong_yaw_occludes_the_far_ear() {
    let cfg = SynthConfig { yaw_range: (80.0, 80.0), ..frontal_cfg() };
    for index in 0..5 {
        let (_, ann) = synth_sample::<f64>(&cfg, index).unwrap();
        assert!(!ann.landmarks[16].visible, "r_ear must face away at yaw +80");
        assert!(ann.landmarks[12].visible, "l_ear must face the camera at yaw +80");
        assert!(ann.landmarks[14].visible, "the nose never self-occludes inside the envelope");
    }
}

#[test]
fn generation_is_deterministic_per_seed_and_index() {
    let cfg = SynthConfig::default();
    let (img_a, ann_a) = synth_sample::<f32>(&cfg, 7).unwrap();
    let (img_b, ann_b) = synth_sample::<f32>(&cfg, 7).unwrap();
    assert_eq!(img_a.data(), img_b.data(), "same (seed, index) renders bitwise-equal images");
    assert_eq!(ann_a, ann_b);

    let (img_c, ann_c) = synth_sample::<f32>(&cfg, 8).unwrap();
    assert_ne!(img_a.data(), img_c.data(), "different indices draw different samples");
    assert_ne!(ann_a.pose, ann_c.pose);

    let other = SynthConfig { seed: 1, ..cfg };
    let (img_d, _) = synth_sample::<f32>(&other, 7).unwrap();
    assert_ne!(img_a.data(), img_d.data(), "different seeds draw different samples");
}

#[test]
fn self_occlusion_grows_with_yaw() {
    // Isolate yaw: pitch and roll pinned to zero, 250 samples per band.
    let mut invisible_fraction = [0.0f64; 3];
    for (b, range) in [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)].iter().enumerate() {
        let cfg = SynthConfig { yaw_range: *range, ..frontal_cfg() };
        let mut invisible = 0usize;
        for index in 0..250 {
            let (_, ann) = synth_sample::<f32>(&cfg, index).unwrap();
            invisible += ann.landmarks.len() - ann.visible_count();
        }
        invisible_fraction[b] = invisible as f64 / (250.0 * 21.0);
    }
    assert!(
        invisible_fraction[0] < invisible_fraction[1]
            && invisible_fraction[1] < invisible_fraction[2],
        "occlusion must grow with yaw: {invisible_fraction:?}"
    );
    assert!(invisible_fraction[2] > 0.05, "profile views must hide a meaningful fraction");
}

#[test]
fn visible_synth_landmarks_rasterize_as_positives() {
    let cfg = frontal_cfg();
    let (_, ann) = synth_sample::<f64>(&cfg, 3).unwrap();
    let labels: LabelMap = rasterize_labels(&ann, cfg.image_size).unwrap();
    assert_eq!(labels.positives().len(), ann.visible_count());
    // Each visible landmark's pixel carries its own class.
    for (k, lm) in ann.landmarks.iter().enumerate() {
        if lm.visible {
            let (x, y) = (lm.x.round() as usize, lm.y.round() as usize);
            assert_eq!(labels.class_at(y, x), k);
        }
    }
}

#[test]
fn manifest_round_trips_and_rerenders_images() {
    let cfg = SynthConfig { seed: 11, ..SynthConfig::default() };
    let mut records = Vec::new();
    for index in 0..6u64 {
        let (_, ann) = synth_sample::<f32>(&cfg, index).unwrap();
        records.push(ann);
    }
    let manifest = DatasetManifest {
        tree: "aflw21".to_string(),
        image_size: cfg.image_size,
        synth: Some(cfg.clone()),
        records,
    };
    let dir = test_dir("roundtrip");
    let path = dir.join("train.jsonl");
    manifest.write(&path).unwrap();
    let back = DatasetManifest::read(&path).unwrap();
    assert_eq!(back, manifest, "write/read is lossless");

    let rendered: Tensor<f32> = back.load_image(3).unwrap();
    let (direct, _) = synth_sample::<f32>(&cfg, 3).unwrap();
    assert_eq!(rendered.data(), direct.data(), "manifest re-renders the exact image");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn manifest_read_rejects_inconsistencies() {
    let dir = test_dir("reject");
    let cfg = SynthConfig::default();
    let (_, ann) = synth_sample::<f32>(&cfg, 0).unwrap();
    let record_line = serde_json::to_string(&WireRecord::from(&ann)).unwrap();

    // Header promises two records, file holds one.
    let path = dir.join("short.jsonl");
    std::fs::write(
        &path,
        format!(
            "{}\n{}\n",
            serde_json::to_string(&WireHeader {
                tree: "aflw21".into(),
                image_size: 64,
                count: 2,
                synth: Some(cfg.clone()),
            })
            .unwrap(),
            record_line
        ),
    )
    .unwrap();
    let err = DatasetManifest::read(&path).unwrap_err().to_string();
    assert!(err.contains("promises 2"), "{err}");

    // A synthetic record whose seed disagrees with the embedded generator.
    let path = dir.join("seed.jsonl");
    let other = SynthConfig { seed: 99, ..cfg.clone() };
    let (_, foreign) = synth_sample::<f32>(&other, 0).unwrap();
    let manifest = DatasetManifest {
        tree: "aflw21".into(),
        image_size: 64,
        synth: Some(cfg.clone()),
        records: vec![foreign],
    };
    manifest.write(&path).unwrap();
    assert!(DatasetManifest::read(&path).unwrap_err().to_string().contains("seed"));

    // An external reference must exist on disk next to the manifest.
    let path = dir.join("external.jsonl");
    let mut ext = ann.clone();
    ext.image = "missing.png".to_string();
    let manifest = DatasetManifest {
        tree: "aflw21".into(),
        image_size: 64,
        synth: None,
        records: vec![ext.clone()],
    };
    manifest.write(&path).unwrap();
    assert!(DatasetManifest::read(&path).unwrap_err().to_string().contains("missing.png"));

    // Same record passes once the file exists, but cannot be rendered.
    std::fs::write(dir.join("missing.png"), b"stub").unwrap();
    let back = DatasetManifest::read(&path).unwrap();
    assert!(back.load_image::<f32>(0).unwrap_err().to_string().contains("external"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn pose_normalization_round_trips() {
    assert_eq!(parse_synth_ref("synth:4:17"), Some((4, 17)));
    assert_eq!(parse_synth_ref("faces/img3.png"), None);
    assert_eq!(parse_synth_ref("synth:4"), None);
    let n = normalize_pose_degrees(120.0, -90.0, 45.0);
    assert_eq!(n, [1.0, -1.0, 0.5]);
    assert_eq!(denormalize_pose(n), (120.0, -90.0, 45.0));
}

// ---- augmentation ----------------------------------------------------------

fn sample_pair(index: u64) -> (Tensor<f64>, LandmarkAnnotation) {
    let cfg = SynthConfig { yaw_range: (-40.0, 40.0), ..SynthConfig::default() };
    synth_sample(&cfg, index).unwrap()
}

#[test]
fn identity_augmentation_is_exact() {
    let tree = DendriticTree::aflw21();
    let (img, ann) = sample_pair(0);
    let (img2, ann2) = augment_with(&img, &ann, &tree, &AugmentParams::identity()).unwrap();
    assert_eq!(img.data(), img2.data(), "identity resampling is bitwise exact");
    assert_eq!(ann, ann2);
}

#[test]
fn flip_swaps_partners_and_negates_yaw_and_roll() {
    let tree = DendriticTree::aflw21();
    let (img, ann) = sample_pair(1);
    let (fimg, fann) = augment_with(&img, &ann, &tree, &AugmentParams::flip_only()).unwrap();

    assert_eq!(fann.pose.0, -ann.pose.0);
    assert_eq!(fann.pose.1, ann.pose.1);
    assert_eq!(fann.pose.2, -ann.pose.2);
    let w = 64.0;
    for k in 0..tree.n() {
        let src = &ann.landmarks[tree.flip()[k]];
        assert!((fann.landmarks[k].x - ((w - 1.0) - src.x)).abs() < 1e-9);
        assert!((fann.landmarks[k].y - src.y).abs() < 1e-9);
        assert_eq!(fann.landmarks[k].visible, src.visible);
    }
    // Pixels mirror: column x comes from column 63-x.
    let (c, h, wpx) = (3usize, 64usize, 64usize);
    for ch in 0..c {
        for y in (0..h).step_by(13) {
            for x in 0..wpx {
                let a = fimg.data()[(ch * h + y) * wpx + x];
                let b = img.data()[(ch * h + y) * wpx + (wpx - 1 - x)];
                assert_eq!(a, b);
            }
        }
    }

    // A second flip restores the original exactly.
    let (rimg, rann) = augment_with(&fimg, &fann, &tree, &AugmentParams::flip_only()).unwrap();
    assert_eq!(rimg.data(), img.data());
    assert_eq!(rann.pose, ann.pose);
    for k in 0..tree.n() {
        assert!((rann.landmarks[k].x - ann.landmarks[k].x).abs() < 1e-9);
        assert!((rann.landmarks[k].y - ann.landmarks[k].y).abs() < 1e-9);
        assert_eq!(rann.landmarks[k].visible, ann.landmarks[k].visible);
    }
}

#[test]
fn rotation_turns_the_eye_line_and_compensates_roll() {
    let tree = DendriticTree::aflw21();
    let cfg = frontal_cfg();
    let (img, ann) = synth_sample::<f64>(&cfg, 2).unwrap();
    let beta = 10.0;
    let params = AugmentParams { rotation_deg: beta, ..AugmentParams::identity() };
    let (_, rann) = augment_with(&img, &ann, &tree, &params).unwrap();

    assert!((rann.pose.2 - (ann.pose.2 - beta)).abs() < 1e-9, "roll absorbs the frame rotation");
    // The outer-eye baseline (landmarks 6 -> 11) turns by exactly beta in
    // image coordinates.
    let angle = |a: &LandmarkAnnotation| {
        let (l, r) = (&a.landmarks[6], &a.landmarks[11]);
        (r.y - l.y).atan2(r.x - l.x).to_degrees()
    };
    let turned = angle(&rann) - angle(&ann);
    assert!((turned - beta).abs() < 0.1, "eye line turned {turned}, want {beta}");
}

#[test]
fn crop_rescales_distances_and_keeps_pose() {
    let tree = DendriticTree::aflw21();
    let (img, ann) = sample_pair(3);
    let params = AugmentParams {
        crop_scale: 0.9,
        crop_ox: 0.25,
        crop_oy: 0.75,
        ..AugmentParams::identity()
    };
    let (_, cann) = augment_with(&img, &ann, &tree, &params).unwrap();
    assert_eq!(cann.pose, ann.pose, "a crop does not change head orientation");
    let dist = |a: &LandmarkAnnotation, i: usize, j: usize| {
        let (p, q) = (&a.landmarks[i], &a.landmarks[j]);
        ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
    };
    for (i, j) in [(12, 16), (6, 11), (14, 20)] {
        let ratio = dist(&cann, i, j) / dist(&ann, i, j);
        assert!((ratio - 1.0 / 0.9).abs() < 1e-9, "distances scale by 1/crop_scale");
    }
    // Face box scales the same way.
    assert!((cann.bbox.2 / ann.bbox.2 - 1.0 / 0.9).abs() < 1e-9);
    assert!((cann.bbox.3 / ann.bbox.3 - 1.0 / 0.9).abs() < 1e-9);
}

#[test]
fn augmentation_never_creates_visibility() {
    let tree = DendriticTree::aflw21();
    let (img, ann) = sample_pair(4);
    for seed in 0..40u64 {
        let (_, aug) = augment(&img, &ann, &tree, seed).unwrap();
        assert!(
            aug.visible_count() <= ann.visible_count(),
            "seed {seed} resurrected an occluded landmark"
        );
        for lm in &aug.landmarks {
            if lm.visible {
                let (px, py) = (lm.x.round(), lm.y.round());
                assert!(px >= 0.0 && py >= 0.0 && px < 64.0 && py < 64.0);
            }
        }
    }
}

#[test]
fn random_augmentation_is_deterministic_per_seed() {
    let tree = DendriticTree::aflw21();
    let (img, ann) = sample_pair(5);
    let (img_a, ann_a) = augment(&img, &ann, &tree, 123).unwrap();
    let (img_b, ann_b) = augment(&img, &ann, &tree, 123).unwrap();
    assert_eq!(img_a.data(), img_b.data());
    assert_eq!(ann_a, ann_b);
    let (img_c, _) = augment(&img, &ann, &tree, 124).unwrap();
    assert_ne!(img_a.data(), img_c.data());
}

#[test]
fn augmentation_rejects_bad_parameters() {
    let tree = DendriticTree::aflw21();
    let (img, ann) = sample_pair(6);
    let bad = AugmentParams { crop_scale: 0.3, ..AugmentParams::identity() };
    assert!(augment_with(&img, &ann, &tree, &bad).is_err());
    let bad = AugmentParams { crop_ox: 1.5, ..AugmentParams::identity() };
    assert!(augment_with(&img, &ann, &tree, &bad).is_err());
    let mut short = ann.clone();
    short.landmarks.pop();
    assert!(augment_with(&img, &short, &tree, &AugmentParams::identity()).is_err());
}
