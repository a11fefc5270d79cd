//! SGD training with a step-decay schedule and offline hard example mining.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, normalize_pose_degrees, rasterize_labels, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate_manifest, EvalProtocol};
use crate::loss::{build_mask, mask_entries};
use crate::net::{PCDModel, Stage};
use crate::tensor::{sc, Graph, MaskEntry, Parameter, Scalar, Tensor};
use crate::tree::DendriticTree;

/// Sentinel for `lr_drop_every` that keeps the learning rate constant.
pub const NO_LR_DROP: usize = usize::MAX;

/// Histogram bin width used to pick the hard-example threshold.
pub const MINING_BIN_WIDTH: f64 = 0.005;

/// Parameter-name prefixes that make up the refinement stack.
const FINE_PREFIXES: [&str; 4] = ["fine.", "fkp.", "fcond.", "fbr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs per phase; mining adds a second phase of the same length.
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate drops ([`NO_LR_DROP`] disables them).
    pub lr_drop_every: usize,
    /// The rate is divided by this at every drop.
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub keypoint_weight: f64,
    pub pose_weight: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
    /// Randomly crop, flip, and rotate each sample draw.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            base_lr: 0.01,
            lr_drop_every: 3,
            lr_drop_factor: 10.0,
            momentum: 0.95,
            keypoint_weight: 1.0,
            pose_weight: 1.0,
            grad_clip: 10.0,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base learning rate must be positive and finite"));
        }
        if self.lr_drop_every == 0 {
            return Err(Error::config("learning-rate drop interval must be at least 1"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config("learning-rate drop factor must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        for (name, w) in [
            ("keypoint weight", self.keypoint_weight),
            ("pose weight", self.pose_weight),
            ("gradient clip", self.grad_clip),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative and finite")));
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based) under the step-decay schedule.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.lr_drop_every == NO_LR_DROP {
        return cfg.base_lr;
    }
    cfg.base_lr * cfg.lr_drop_factor.powi(-((epoch / cfg.lr_drop_every) as i32))
}

/// Per-parameter velocity buffers for momentum SGD.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &[Parameter<F>]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One momentum update: `v <- m*v - lr*g`, `theta <- theta + v`.
///
/// Frozen parameters are skipped entirely; a non-finite gradient on a
/// trainable parameter aborts the step.
pub fn sgd_step<F: Scalar>(
    params: &mut [Parameter<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::config(format!(
            "optimizer holds {} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let (m, step) = (sc::<F>(momentum), sc::<F>(lr));
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        if v.shape() != p.value.shape() {
            return Err(Error::config(format!(
                "velocity shape {:?} does not match parameter {} {:?}",
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in parameter {}", p.name)));
        }
        let grad = p.grad.data();
        let theta = p.value.data_mut();
        let vel = v.data_mut();
        for i in 0..theta.len() {
            vel[i] = m * vel[i] - step * grad[i];
            theta[i] = theta[i] + vel[i];
        }
    }
    Ok(())
}

/// Rescale trainable gradients so their global L2 norm is at most
/// `max_norm` (zero disables). Returns the pre-clip norm.
pub fn clip_gradients<F: Scalar>(params: &mut [Parameter<F>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.iter().filter(|p| p.trainable) {
        for &g in p.grad.data() {
            let g: f64 = num_traits::cast(g).unwrap_or(f64::NAN);
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm.is_finite() && norm > max_norm {
        let s = sc::<F>(max_norm / norm);
        for p in params.iter_mut().filter(|p| p.trainable) {
            for g in p.grad.data_mut() {
                *g = *g * s;
            }
        }
    }
    norm
}

/// Hard/easy split of the training set from per-sample errors.
///
/// Errors are binned at `bin_width`; the threshold is the center of the
/// tallest bin (ties go to the lower bin), and samples strictly above it
/// are hard. The two sets partition the input.
#[derive(Debug, Clone)]
pub struct HardMiningState {
    pub errors: Vec<f64>,
    pub bin_width: f64,
    pub threshold: f64,
    pub hard: Vec<usize>,
    pub easy: Vec<usize>,
}

impl HardMiningState {
    pub fn from_errors(errors: &[f64], bin_width: f64) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::config("cannot mine an empty error list"));
        }
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::config("bin width must be positive and finite"));
        }
        let mut hist: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
        for &e in errors {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::data(format!("invalid sample error {e}")));
            }
            *hist.entry((e / bin_width).floor() as u64).or_insert(0) += 1;
        }
        let (&mode_bin, _) = hist
            .iter()
            .max_by_key(|(bin, count)| (**count, std::cmp::Reverse(**bin)))
            .expect("histogram is nonempty");
        let threshold = (mode_bin as f64 + 0.5) * bin_width;
        let (mut hard, mut easy) = (Vec::new(), Vec::new());
        for (i, &e) in errors.iter().enumerate() {
            if e > threshold {
                hard.push(i);
            } else {
                easy.push(i);
            }
        }
        Ok(HardMiningState { errors: errors.to_vec(), bin_width, threshold, hard, easy })
    }

    /// True when one of the sets is empty and mixed batches are impossible.
    pub fn is_degenerate(&self) -> bool {
        self.hard.is_empty() || self.easy.is_empty()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    /// 1 = uniform sampling, 2 = mined half-hard batches.
    pub phase: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub keypoint_loss: f64,
    pub pose_loss: f64,
    pub val_nme: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MiningReport {
    pub threshold: f64,
    pub hard: usize,
    pub easy: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub mining: Option<MiningReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Add a second phase that oversamples hard examples.
    pub mining: bool,
    /// When false the pose network is frozen and the pose loss disabled.
    pub pose_labels: bool,
    /// Spend the keypoint loss on every pixel instead of the sparse mask.
    pub plain_softmax: bool,
    /// Held-out set scored after every epoch.
    pub val: Option<&'a DatasetManifest>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { mining: false, pose_labels: true, plain_softmax: false, val: None }
    }
}

/// Train the coarse stage on `manifest`.
///
/// Runs `cfg.epochs` uniformly shuffled epochs; with mining enabled, scores
/// every training sample, splits it hard/easy, and runs `cfg.epochs` more
/// with half-hard batches (the schedule restarts). Deterministic for a
/// fixed seed and thread-independent.
pub fn train<F: Scalar>(
    model: &mut PCDModel<F>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compat(model, manifest)?;
    if let Some(v) = opts.val {
        check_compat(model, v)?;
    }
    if !opts.pose_labels {
        model.set_trainable_by_prefix("pose.", false);
    }
    let mut sess = Session::new(model, manifest, cfg, Stage::Coarse, opts);
    for epoch in 0..cfg.epochs {
        sess.run_uniform_epoch(1, epoch)?;
    }
    let mining = if opts.mining { Some(sess.run_mining_phase(Stage::Coarse)?) } else { None };
    Ok(sess.into_report(mining))
}

/// Train the refinement stack with the coarse network frozen.
///
/// Every parameter outside the refinement stack is frozen (running
/// statistics included), so the coarse network is bit-identical afterward.
/// Mining thresholds come from the frozen network's own errors.
pub fn train_fine_stage<F: Scalar>(
    model: &mut PCDModel<F>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.config().with_fine_stage {
        return Err(Error::config("model was built without a refinement stage"));
    }
    check_compat(model, manifest)?;
    if let Some(v) = opts.val {
        check_compat(model, v)?;
    }
    for p in model.params_mut() {
        let fine = FINE_PREFIXES.iter().any(|pre| p.name.starts_with(pre));
        let stat = p.name.ends_with(".rmean") || p.name.ends_with(".rvar");
        p.trainable = fine && !stat;
    }
    let mut sess = Session::new(model, manifest, cfg, Stage::Fine, opts);
    let mining = if opts.mining {
        // The frozen coarse predictions rank the samples.
        Some(sess.run_mining_phase(Stage::Coarse)?)
    } else {
        for epoch in 0..cfg.epochs {
            sess.run_uniform_epoch(1, epoch)?;
        }
        None
    };
    Ok(sess.into_report(mining))
}

fn check_compat<F: Scalar>(model: &PCDModel<F>, manifest: &DatasetManifest) -> Result<()> {
    if manifest.tree != model.tree().name() {
        return Err(Error::config(format!(
            "manifest landmark layout '{}' does not match the model's '{}'",
            manifest.tree,
            model.tree().name()
        )));
    }
    if manifest.image_size != model.config().image_size {
        return Err(Error::config(format!(
            "manifest image size {} does not match the model's {}",
            manifest.image_size,
            model.config().image_size
        )));
    }
    if manifest.records.is_empty() {
        return Err(Error::config("manifest has no records"));
    }
    Ok(())
}

fn eval_threads() -> usize {
    crate::eval::worker_threads()
}

struct BatchStats {
    total: f64,
    keypoint: f64,
    pose: f64,
    samples: usize,
}

struct Session<'a, F: Scalar> {
    model: &'a mut PCDModel<F>,
    manifest: &'a DatasetManifest,
    cfg: &'a TrainConfig,
    stage: Stage,
    pose_weight: f64,
    plain_softmax: bool,
    val: Option<&'a DatasetManifest>,
    tree: DendriticTree,
    state: OptimizerState<F>,
    logs: Vec<EpochLog>,
    warnings: Vec<String>,
}

impl<'a, F: Scalar> Session<'a, F> {
    fn new(
        model: &'a mut PCDModel<F>,
        manifest: &'a DatasetManifest,
        cfg: &'a TrainConfig,
        stage: Stage,
        opts: &TrainOptions<'a>,
    ) -> Self {
        let tree = model.tree().clone();
        let state = OptimizerState::new(model.params());
        let pose_weight = if opts.pose_labels { cfg.pose_weight } else { 0.0 };
        Session {
            model,
            manifest,
            cfg,
            stage,
            pose_weight,
            plain_softmax: opts.plain_softmax,
            val: opts.val,
            tree,
            state,
            logs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Epoch RNG; the stream encodes (phase, epoch) so draws never overlap.
    fn epoch_rng(&self, phase: usize, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(phase as u64 * 1_000_000 + epoch as u64);
        rng
    }

    fn run_uniform_epoch(&mut self, phase: usize, epoch: usize) -> Result<()> {
        let mut rng = self.epoch_rng(phase, epoch);
        let mut order: Vec<usize> = (0..self.manifest.records.len()).collect();
        order.shuffle(&mut rng);
        self.run_epoch(phase, epoch, &order, &mut rng)
    }

    /// Score the training set, split it hard/easy, and run the mined phase.
    fn run_mining_phase(&mut self, scoring_stage: Stage) -> Result<MiningReport> {
        let errors = self.per_record_errors(scoring_stage)?;
        let mining = HardMiningState::from_errors(&errors, MINING_BIN_WIDTH)?;
        let report = MiningReport {
            threshold: mining.threshold,
            hard: mining.hard.len(),
            easy: mining.easy.len(),
        };
        if mining.is_degenerate() {
            self.warnings.push(format!(
                "hard-example mining is degenerate ({} hard, {} easy); falling back to uniform sampling",
                mining.hard.len(),
                mining.easy.len()
            ));
            for epoch in 0..self.cfg.epochs {
                self.run_uniform_epoch(2, epoch)?;
            }
        } else {
            for epoch in 0..self.cfg.epochs {
                let mut rng = self.epoch_rng(2, epoch);
                let order = self.mined_order(&mining, &mut rng);
                self.run_epoch(2, epoch, &order, &mut rng)?;
            }
        }
        Ok(report)
    }

    /// NME per training record; records that cannot be scored count as 0.
    fn per_record_errors(&mut self, stage: Stage) -> Result<Vec<f64>> {
        let protocol = EvalProtocol::default();
        match evaluate_manifest(self.model, self.manifest, &protocol, stage, false, eval_threads()) {
            Ok(s) => Ok(s.record_nmes.iter().map(|r| r.unwrap_or(0.0)).collect()),
            Err(Error::Data(_)) => Ok(vec![0.0; self.manifest.records.len()]),
            Err(e) => Err(e),
        }
    }

    /// Batch order for a mined epoch: each batch leads with hard samples.
    ///
    /// The larger set is consumed through a reshuffled cursor so every
    /// member appears before any repeats; the smaller set is drawn with
    /// replacement.
    fn mined_order(&self, mining: &HardMiningState, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let hard_slots = b.div_ceil(2);
        let steps = self.manifest.records.len().div_ceil(b);
        let (larger, smaller, larger_is_hard) = if mining.hard.len() >= mining.easy.len() {
            (&mining.hard, &mining.easy, true)
        } else {
            (&mining.easy, &mining.hard, false)
        };
        let mut pool = larger.clone();
        pool.shuffle(rng);
        let mut cursor = 0usize;
        let mut order = Vec::with_capacity(steps * b);
        for _ in 0..steps {
            for slot in 0..b {
                let want_hard = slot < hard_slots;
                let idx = if want_hard == larger_is_hard {
                    if cursor == pool.len() {
                        pool.shuffle(rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    pool[cursor - 1]
                } else {
                    smaller[rng.gen_range(0..smaller.len())]
                };
                order.push(idx);
            }
        }
        order
    }

    fn run_epoch(
        &mut self,
        phase: usize,
        epoch: usize,
        order: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let lr = lr_at(self.cfg, epoch);
        let (mut total, mut keypoint, mut pose) = (0.0, 0.0, 0.0);
        let mut samples = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            if let Some(st) = self.run_batch(chunk, lr, rng, &mut skipped)? {
                total += st.total * st.samples as f64;
                keypoint += st.keypoint * st.samples as f64;
                pose += st.pose * st.samples as f64;
                samples += st.samples;
            }
        }
        if skipped > 0 {
            self.warnings.push(format!(
                "phase {phase} epoch {epoch}: skipped {skipped} sample draws whose rounded landmarks collide"
            ));
        }
        if samples == 0 {
            return Err(Error::data(format!(
                "phase {phase} epoch {epoch}: every sample draw was skipped"
            )));
        }
        let val_nme = match self.val {
            Some(v) => {
                let protocol = EvalProtocol::default();
                let summary =
                    evaluate_manifest(self.model, v, &protocol, self.stage, false, eval_threads())?;
                Some(summary.mean_nme)
            }
            None => None,
        };
        self.logs.push(EpochLog {
            phase,
            epoch,
            lr,
            train_loss: total / samples as f64,
            keypoint_loss: keypoint / samples as f64,
            pose_loss: pose / samples as f64,
            val_nme,
        });
        Ok(())
    }

    /// One optimizer step over `indices`. Returns `None` when every sample
    /// in the batch was skipped.
    fn run_batch(
        &mut self,
        indices: &[usize],
        lr: f64,
        rng: &mut ChaCha8Rng,
        skipped: &mut usize,
    ) -> Result<Option<BatchStats>> {
        let s = self.manifest.image_size;
        let mut images: Vec<F> = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut entries: Vec<MaskEntry> = Vec::new();
        let mut poses: Vec<F> = Vec::with_capacity(indices.len() * 3);
        let mut kept = 0usize;
        for &idx in indices {
            // Draw both seeds up front so the stream layout is stable.
            let aug_seed = rng.gen::<u64>();
            let mask_seed = rng.gen::<u64>();
            let image = self.manifest.load_image::<F>(idx)?;
            let rec = &self.manifest.records[idx];
            let (image, ann) = if self.cfg.augment {
                augment(&image, rec, &self.tree, aug_seed)?
            } else {
                (image, rec.clone())
            };
            let labels = match rasterize_labels(&ann, s) {
                Ok(l) => l,
                Err(Error::Data(_)) => {
                    *skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if self.plain_softmax {
                for y in 0..labels.h() {
                    for x in 0..labels.w() {
                        entries.push(MaskEntry { b: kept, y, x, class: labels.class_at(y, x) });
                    }
                }
            } else {
                let mask = build_mask(&labels, mask_seed);
                entries.extend(mask_entries(&labels, &mask, kept)?);
            }
            images.extend_from_slice(image.data());
            let p = normalize_pose_degrees(ann.pose.0, ann.pose.1, ann.pose.2);
            poses.extend(p.iter().map(|&x| sc::<F>(x)));
            kept += 1;
        }
        if kept == 0 {
            return Ok(None);
        }

        let mut g = Graph::new();
        let input = g.constant(Tensor::from_vec(&[kept, 3, s, s], images)?);
        let out = self.model.forward_train(&mut g, input, self.stage)?;
        let ce = g.masked_cross_entropy(out.logits, &entries)?;
        let pl = g.half_squared_distance(out.pose, Tensor::from_vec(&[kept, 3], poses)?)?;
        let ce_w = g.scale(ce, sc::<F>(self.cfg.keypoint_weight));
        let pl_w = g.scale(pl, sc::<F>(self.pose_weight));
        let loss = g.add(ce_w, pl_w)?;
        g.backward(loss)?;

        let stats = BatchStats {
            total: num_traits::cast(g.value(loss).item()).unwrap_or(f64::NAN),
            keypoint: num_traits::cast(g.value(ce).item()).unwrap_or(f64::NAN),
            pose: num_traits::cast(g.value(pl).item()).unwrap_or(f64::NAN),
            samples: kept,
        };
        self.model.zero_grads();
        self.model.accumulate_grads(&g);
        clip_gradients(self.model.params_mut(), self.cfg.grad_clip);
        sgd_step(self.model.params_mut(), &mut self.state, lr, self.cfg.momentum)?;
        Ok(Some(stats))
    }

    fn into_report(self, mining: Option<MiningReport>) -> TrainReport {
        TrainReport { epochs: self.logs, mining, warnings: self.warnings }
    }
}
