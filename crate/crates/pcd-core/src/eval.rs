//! Heatmap decoding and evaluation: normalized mean error, cumulative
//! error curves, failure and pose-tolerance rates, occlusion
//! precision-recall, and flip test-time augmentation.

use crate::data::{denormalize_pose, DatasetManifest, LandmarkAnnotation};
use crate::error::{Error, Result};
use crate::net::{PCDModel, Stage};
use crate::tensor::{sc, Graph, Scalar, Tensor};
use crate::tree::DendriticTree;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Which ground-truth length normalizes pixel errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    /// `sqrt(w*h)` of the ground-truth face box.
    BboxSize,
    /// Distance between the ground-truth outer eye corners.
    Interocular,
}

/// Evaluation settings shared by all metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub normalizer: Normalizer,
    /// NME above this counts as a failure.
    pub failure_threshold: f64,
    /// Heatmap peak probability below this marks a landmark invisible.
    pub visibility_threshold: f64,
    /// Strictly increasing NME thresholds for the cumulative error curve.
    pub ced_grid: Vec<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            normalizer: Normalizer::BboxSize,
            failure_threshold: 0.10,
            visibility_threshold: 0.3,
            ced_grid: (0..=150).map(|i| i as f64 * 0.001).collect(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.visibility_threshold) || self.visibility_threshold <= 0.0 {
            return Err(Error::config("visibility threshold must lie in (0, 1)"));
        }
        if self.failure_threshold <= 0.0 {
            return Err(Error::config("failure threshold must be positive"));
        }
        if self.ced_grid.is_empty() || self.ced_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("CED grid must be nonempty and strictly increasing"));
        }
        Ok(())
    }
}

/// One decoded landmark: integer-pixel peak location, its probability, and
/// the thresholded visibility call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedLandmark {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub visible: bool,
}

/// Decoded model output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub landmarks: Vec<PredictedLandmark>,
    /// `(yaw, pitch, roll)` in degrees.
    pub pose: (f64, f64, f64),
}

/// Decode per-pixel class probabilities `[N+1, H, W]` into per-landmark
/// peaks. Ties go to the earliest pixel in row-major order; the background
/// channel is ignored.
pub fn decode_heatmaps<F: Scalar>(probs: &Tensor<F>, tau: f64) -> Result<Vec<PredictedLandmark>> {
    let (c, h, w) = match *probs.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::config(format!("expected [N+1,H,W] probs, got {:?}", probs.shape()))),
    };
    if c < 2 {
        return Err(Error::config("probs need at least one landmark channel plus background"));
    }
    let data = probs.data();
    let mut out = Vec::with_capacity(c - 1);
    for k in 0..c - 1 {
        let plane = &data[k * h * w..(k + 1) * h * w];
        let (mut best, mut best_v) = (0usize, plane[0]);
        for (i, &v) in plane.iter().enumerate() {
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        let conf: f64 = num_traits::cast(best_v).unwrap_or(0.0);
        out.push(PredictedLandmark {
            x: (best % w) as f64,
            y: (best / w) as f64,
            confidence: conf,
            visible: conf >= tau,
        });
    }
    Ok(out)
}

/// Indices of the outer eye corners used for interocular normalization.
pub fn interocular_indices(tree: &DendriticTree) -> Option<(usize, usize)> {
    let find = |name: &str| (0..tree.n()).find(|&i| tree.landmark_name(i) == name);
    for (l, r) in [("l_eye_out", "r_eye_out"), ("l_eye_0", "r_eye_3")] {
        if let (Some(a), Some(b)) = (find(l), find(r)) {
            return Some((a, b));
        }
    }
    None
}

/// Normalized mean error: mean over ground-truth-visible landmarks of the
/// pixel distance to the prediction, divided by the protocol's normalizer.
pub fn nme(
    pred: &[PredictedLandmark],
    gt: &LandmarkAnnotation,
    tree: &DendriticTree,
    protocol: &EvalProtocol,
) -> Result<f64> {
    if pred.len() != gt.landmarks.len() {
        return Err(Error::config(format!(
            "prediction has {} landmarks, ground truth {}",
            pred.len(),
            gt.landmarks.len()
        )));
    }
    let norm = match protocol.normalizer {
        Normalizer::BboxSize => (gt.bbox.2 * gt.bbox.3).sqrt(),
        Normalizer::Interocular => {
            let (a, b) = interocular_indices(tree).ok_or_else(|| {
                Error::config(format!("tree '{}' names no outer eye corners", tree.name()))
            })?;
            let (p, q) = (&gt.landmarks[a], &gt.landmarks[b]);
            ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
        }
    };
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::data(format!("degenerate error normalizer {norm}")));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, g) in pred.iter().zip(&gt.landmarks) {
        if g.visible {
            sum += ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::data("no visible ground-truth landmarks to score"));
    }
    Ok(sum / (count as f64 * norm))
}

/// Cumulative error distribution: for each grid threshold, the fraction of
/// errors at or below it.
pub fn ced(errors: &[f64], grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter()
        .map(|&t| {
            let inside = errors.iter().filter(|&&e| e <= t).count();
            (t, inside as f64 / errors.len().max(1) as f64)
        })
        .collect()
}

/// Fraction of errors strictly above the threshold.
pub fn failure_rate(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e > threshold).count() as f64 / errors.len() as f64
}

/// Worst-axis absolute pose error in degrees.
pub fn pose_axis_error(pred: (f64, f64, f64), gt: (f64, f64, f64)) -> f64 {
    (pred.0 - gt.0)
        .abs()
        .max((pred.1 - gt.1).abs())
        .max((pred.2 - gt.2).abs())
}

/// Fraction of samples whose worst-axis pose error is within `tol` degrees.
pub fn pose_fraction(max_axis_errors: &[f64], tol: f64) -> f64 {
    if max_axis_errors.is_empty() {
        return 0.0;
    }
    max_axis_errors.iter().filter(|&&e| e <= tol).count() as f64 / max_axis_errors.len() as f64
}

/// One operating point of the occlusion detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall sweep for occlusion detection. The positive class is
/// `occluded`; a landmark is predicted occluded when its occlusion score
/// reaches the sweep threshold. Thresholds that predict no positives have
/// undefined precision and are skipped.
pub fn occlusion_pr(
    occlusion_score: &[f64],
    gt_occluded: &[bool],
    taus: &[f64],
) -> Result<Vec<PrPoint>> {
    if occlusion_score.len() != gt_occluded.len() {
        return Err(Error::config("score and label lengths differ"));
    }
    if !gt_occluded.iter().any(|&o| o) {
        return Err(Error::data("no occluded landmarks in ground truth; recall is undefined"));
    }
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&s, &occ) in occlusion_score.iter().zip(gt_occluded) {
            let pred = s >= tau;
            match (pred, occ) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        if tp + fp == 0 {
            continue;
        }
        out.push(PrPoint {
            tau,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / (tp + fneg) as f64,
        });
    }
    Ok(out)
}

/// Recall at a target precision, linearly interpolated between adjacent
/// sweep points; when several sweep segments cross the target, the highest
/// interpolated recall is reported. `None` when the sweep never reaches the
/// target precision.
pub fn recall_at_precision(points: &[PrPoint], target: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |r: f64| best = Some(best.map_or(r, |b: f64| b.max(r)));
    for p in points {
        if p.precision == target {
            consider(p.recall);
        }
    }
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (lo, hi) = if a.precision <= b.precision { (a, b) } else { (b, a) };
        if lo.precision < target && target < hi.precision {
            let t = (target - lo.precision) / (hi.precision - lo.precision);
            consider(lo.recall + t * (hi.recall - lo.recall));
        }
    }
    best
}

/// F1 of the visibility call (positive class: visible).
pub fn visibility_f1(pred_visible: &[bool], gt_visible: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred_visible.iter().zip(gt_visible) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fneg == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Sweep visibility thresholds and return `(tau, f1)` of the best F1.
pub fn best_visibility_tau(confidences: &[f64], gt_visible: &[bool], taus: &[f64]) -> (f64, f64) {
    let mut best = (f64::NAN, -1.0);
    for &tau in taus {
        let pred: Vec<bool> = confidences.iter().map(|&c| c >= tau).collect();
        let f1 = visibility_f1(&pred, gt_visible);
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    best
}

// ---- model-in-the-loop evaluation -----------------------------------------

/// Mirror the x axis of a `[C,H,W]` or `[B,C,H,W]` tensor.
pub fn flip_horizontal<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let (rows, w) = match *t.shape() {
        [c, h, w] => (c * h, w),
        [b, c, h, w] => (b * c * h, w),
        _ => return Err(Error::config(format!("cannot mirror shape {:?}", t.shape()))),
    };
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..rows {
        let row = &src[r * w..(r + 1) * w];
        out.extend(row.iter().rev().copied());
    }
    Tensor::from_vec(t.shape(), out)
}

/// One eval-mode forward pass over a single `[3, S, S]` image: per-pixel
/// class probabilities `[N+1, H, W]` and the normalized pose triple.
pub fn forward_probs<F: Scalar>(
    model: &PCDModel<F>,
    image: &Tensor<F>,
    stage: Stage,
) -> Result<(Tensor<F>, [f64; 3])> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::config(format!("expected [3,S,S] image, got {:?}", image.shape()))),
    };
    let mut g = Graph::new();
    let img = g.constant(Tensor::from_vec(&[1, c, h, w], image.data().to_vec())?);
    let out = model.forward_eval(&mut g, img, stage)?;
    let probs = g.channel_softmax(out.logits)?;
    let pv = g.value(probs);
    let (_, pc, ph, pw) = pv.dims4()?;
    let plane = Tensor::from_vec(&[pc, ph, pw], pv.data().to_vec())?;
    let pose = g.value(out.pose).data();
    let mut p = [0.0f64; 3];
    for (dst, &src) in p.iter_mut().zip(pose.iter()) {
        *dst = num_traits::cast(src).unwrap_or(f64::NAN);
    }
    Ok((plane, p))
}

/// Merged probabilities and normalized pose of the flip ensemble: the mean
/// of the straight pass and the mirrored pass with landmark channels
/// permuted back, x re-mirrored, and yaw/roll negated.
pub fn tta_probs<F: Scalar>(
    model: &PCDModel<F>,
    image: &Tensor<F>,
    stage: Stage,
) -> Result<(Tensor<F>, [f64; 3])> {
    let tree = model.tree();
    let (p1, pose1) = forward_probs(model, image, stage)?;
    let flipped = flip_horizontal(image)?;
    let (p2, pose2) = forward_probs(model, &flipped, stage)?;

    let (c, h, w) = match *p1.shape() {
        [c, h, w] => (c, h, w),
        _ => unreachable!("forward_probs returns 3-d probs"),
    };
    let n = tree.n();
    // Route channel k of the mirrored pass to its flip partner; the
    // background channel maps to itself.
    let mut permuted: Vec<F> = vec![F::zero(); p2.len()];
    for k in 0..c {
        let dst = if k < n { tree.flip()[k] } else { k };
        permuted[dst * h * w..(dst + 1) * h * w]
            .copy_from_slice(&p2.data()[k * h * w..(k + 1) * h * w]);
    }
    let unflipped = flip_horizontal(&Tensor::from_vec(&[c, h, w], permuted)?)?;

    let half = sc::<F>(0.5);
    let merged: Vec<F> = p1
        .data()
        .iter()
        .zip(unflipped.data())
        .map(|(&a, &b)| (a + b) * half)
        .collect();
    let pose = [
        0.5 * (pose1[0] - pose2[0]),
        0.5 * (pose1[1] + pose2[1]),
        0.5 * (pose1[2] - pose2[2]),
    ];
    Ok((Tensor::from_vec(&[c, h, w], merged)?, pose))
}

/// Single-pass prediction for one `[3, S, S]` image.
pub fn predict<F: Scalar>(
    model: &PCDModel<F>,
    image: &Tensor<F>,
    protocol: &EvalProtocol,
    stage: Stage,
) -> Result<Prediction> {
    protocol.validate()?;
    let (probs, pose) = forward_probs(model, image, stage)?;
    Ok(Prediction {
        landmarks: decode_heatmaps(&probs, protocol.visibility_threshold)?,
        pose: denormalize_pose(pose),
    })
}

/// Flip-ensemble prediction for one `[3, S, S]` image.
pub fn flip_tta<F: Scalar>(
    model: &PCDModel<F>,
    image: &Tensor<F>,
    protocol: &EvalProtocol,
    stage: Stage,
) -> Result<Prediction> {
    protocol.validate()?;
    let (probs, pose) = tta_probs(model, image, stage)?;
    Ok(Prediction {
        landmarks: decode_heatmaps(&probs, protocol.visibility_threshold)?,
        pose: denormalize_pose(pose),
    })
}

/// Aggregate metrics over one dataset.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Samples that produced an NME.
    pub count: usize,
    /// Samples skipped for having no visible ground truth.
    pub excluded: usize,
    pub mean_nme: f64,
    /// Per-sample NME in record order (excluded samples omitted).
    pub sample_nmes: Vec<f64>,
    /// NME per manifest record, `None` for excluded records.
    pub record_nmes: Vec<Option<f64>>,
    pub failure_rate: f64,
    pub ced: Vec<(f64, f64)>,
    /// Fraction of samples with worst-axis pose error within 15 degrees.
    pub pose_within_15deg: f64,
    /// Occlusion PR sweep; `None` when the set has no occluded landmarks.
    pub occlusion: Option<Vec<PrPoint>>,
    /// Recall where the occlusion sweep crosses precision 0.80.
    pub recall_at_p80: Option<f64>,
    /// Landmark visibility F1 at the protocol threshold.
    pub visibility_f1: f64,
}

struct SampleEval {
    nme: Option<f64>,
    pose_err: f64,
    occ_scores: Vec<f64>,
    gt_occluded: Vec<bool>,
    pred_visible: Vec<bool>,
    gt_visible: Vec<bool>,
}

/// Worker-thread count for per-image fan-out: the available parallelism,
/// capped at 8 and by the `PCD_THREADS` environment variable when set.
pub fn worker_threads() -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get().min(8)).unwrap_or(1);
    match std::env::var("PCD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => cores.min(cap),
        _ => cores,
    }
}

/// Evaluate a model over every record of a manifest. Per-image work fans
/// out over `threads` workers; aggregation follows record order, so the
/// summary is independent of thread count.
pub fn evaluate_manifest<F: Scalar>(
    model: &PCDModel<F>,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
    stage: Stage,
    tta: bool,
    threads: usize,
) -> Result<EvalSummary> {
    protocol.validate()?;
    if manifest.tree != model.tree().name() {
        return Err(Error::config(format!(
            "manifest tree '{}' does not match model tree '{}'",
            manifest.tree,
            model.tree().name()
        )));
    }
    if threads == 0 {
        return Err(Error::config("need at least one evaluation thread"));
    }
    let tree = model.tree();
    let n_rec = manifest.records.len();
    if n_rec == 0 {
        return Err(Error::data("manifest holds no records"));
    }

    let next = AtomicUsize::new(0);
    let run_one = |idx: usize| -> Result<SampleEval> {
        let gt = &manifest.records[idx];
        let image: Tensor<F> = manifest.load_image(idx)?;
        let pred = if tta {
            flip_tta(model, &image, protocol, stage)?
        } else {
            predict(model, &image, protocol, stage)?
        };
        let nme_val = if gt.visible_count() == 0 {
            None
        } else {
            Some(nme(&pred.landmarks, gt, tree, protocol)?)
        };
        Ok(SampleEval {
            nme: nme_val,
            pose_err: pose_axis_error(pred.pose, gt.pose),
            occ_scores: pred.landmarks.iter().map(|l| 1.0 - l.confidence).collect(),
            gt_occluded: gt.landmarks.iter().map(|l| !l.visible).collect(),
            pred_visible: pred.landmarks.iter().map(|l| l.visible).collect(),
            gt_visible: gt.landmarks.iter().map(|l| l.visible).collect(),
        })
    };

    let mut results: Vec<(usize, Result<SampleEval>)> = Vec::with_capacity(n_rec);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..threads.min(n_rec) {
            handles.push(scope.spawn(|| {
                let mut local: Vec<(usize, Result<SampleEval>)> = Vec::new();
                loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= n_rec {
                        break;
                    }
                    local.push((idx, run_one(idx)));
                }
                local
            }));
        }
        for h in handles {
            results.extend(h.join().expect("evaluation worker panicked"));
        }
    });
    results.sort_by_key(|(i, _)| *i);

    // Sequential reduction in record order.
    let mut sample_nmes = Vec::new();
    let mut record_nmes = Vec::with_capacity(n_rec);
    let mut excluded = 0usize;
    let mut pose_errors = Vec::with_capacity(n_rec);
    let (mut occ_scores, mut gt_occluded) = (Vec::new(), Vec::new());
    let (mut pred_visible, mut gt_visible) = (Vec::new(), Vec::new());
    for (_, slot) in results {
        let s = slot?;
        record_nmes.push(s.nme);
        match s.nme {
            Some(e) => sample_nmes.push(e),
            None => excluded += 1,
        }
        pose_errors.push(s.pose_err);
        occ_scores.extend(s.occ_scores);
        gt_occluded.extend(s.gt_occluded);
        pred_visible.extend(s.pred_visible);
        gt_visible.extend(s.gt_visible);
    }
    if sample_nmes.is_empty() {
        return Err(Error::data("no sample produced a score; every record lacks visible points"));
    }

    let mean_nme = sample_nmes.iter().sum::<f64>() / sample_nmes.len() as f64;
    let taus: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let occlusion = match occlusion_pr(&occ_scores, &gt_occluded, &taus) {
        Ok(points) => Some(points),
        Err(Error::Data(_)) => None,
        Err(e) => return Err(e),
    };
    let recall_at_p80 = occlusion.as_deref().and_then(|p| recall_at_precision(p, 0.80));
    Ok(EvalSummary {
        count: sample_nmes.len(),
        excluded,
        mean_nme,
        failure_rate: failure_rate(&sample_nmes, protocol.failure_threshold),
        ced: ced(&sample_nmes, &protocol.ced_grid),
        pose_within_15deg: pose_fraction(&pose_errors, 15.0),
        occlusion,
        recall_at_p80,
        visibility_f1: visibility_f1(&pred_visible, &gt_visible),
        sample_nmes,
        record_nmes,
    })
}

#[cfg(test)]
mod tests;
