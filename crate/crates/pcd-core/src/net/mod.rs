//! The two-network conditioned landmark model.
//!
//! A pose backbone regresses 3D head pose; its features gate the keypoint
//! backbone's features through an elementwise product. Per-landmark
//! deconvolution branches decode the gated features into one response map
//! each, plus a background branch; responses exchange one round of messages
//! along the landmark tree through small learned edge convolutions, and the
//! stacked maps form the heatmap logits. An optional fine stage re-reads the
//! image together with a learned function of the coarse probabilities
//! through a second backbone and branch set.

mod checkpoint;
mod surgery;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint};
pub use surgery::network_surgery;

use crate::error::{Error, Result};
use crate::tensor::{sc, Graph, Parameter, Scalar, Tensor, Var};
use crate::tree::DendriticTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One squeeze/expand module: 1×1 squeeze, then parallel 1×1 and 3×3
/// expansions whose concatenation is the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireSpec {
    pub squeeze: usize,
    pub expand1: usize,
    pub expand3: usize,
}

impl FireSpec {
    /// Derive a module from its output width: squeeze to a quarter
    /// (minimum 2), split the expansion evenly.
    pub fn for_out(out: usize) -> Self {
        FireSpec { squeeze: (out / 4).max(2), expand1: out / 2, expand3: out - out / 2 }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1 + self.expand3
    }

    fn validate(&self) -> Result<()> {
        if self.squeeze == 0 || self.expand1 == 0 || self.expand3 == 0 {
            return Err(Error::config("fire module channels must be positive"));
        }
        Ok(())
    }
}

/// Feature extractor: stride-2 3×3 stem, fire modules, 2×2 max pools after
/// the first two fire modules. Output stride is fixed at 8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem_out: usize,
    pub fires: Vec<FireSpec>,
    /// Indices of fire modules followed by a 2×2 max pool.
    pub pool_after: Vec<usize>,
}

impl BackboneSpec {
    pub fn with_fire_outs(in_channels: usize, stem_out: usize, fire_outs: &[usize]) -> Self {
        BackboneSpec {
            in_channels,
            stem_out,
            fires: fire_outs.iter().map(|&o| FireSpec::for_out(o)).collect(),
            pool_after: vec![0, 1],
        }
    }

    pub fn out_stride(&self) -> usize {
        2 << self.pool_after.len()
    }

    pub fn out_channels(&self) -> usize {
        self.fires.last().map(FireSpec::out_channels).unwrap_or(self.stem_out)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_out == 0 {
            return Err(Error::config("backbone stem channels must be positive"));
        }
        if self.fires.len() < 2 {
            return Err(Error::config("backbone needs at least two fire modules"));
        }
        for f in &self.fires {
            f.validate()?;
        }
        for &p in &self.pool_after {
            if p >= self.fires.len() {
                return Err(Error::config("pool position past the last fire module"));
            }
        }
        Ok(())
    }
}

/// Per-landmark decoder: three [stride-2 transposed conv → 1×1 squeeze]
/// stages followed by a final 1×1 down to one response channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub channels: Vec<usize>,
    pub squeezes: Vec<usize>,
}

impl Default for BranchSpec {
    fn default() -> Self {
        BranchSpec { channels: vec![32, 16, 8], squeezes: vec![16, 8, 4] }
    }
}

impl BranchSpec {
    fn validate(&self, out_stride: usize) -> Result<()> {
        if self.channels.len() != self.squeezes.len() {
            return Err(Error::config("branch channels/squeezes length mismatch"));
        }
        if self.channels.iter().chain(&self.squeezes).any(|&c| c == 0) {
            return Err(Error::config("branch channels must be positive"));
        }
        if 1 << self.channels.len() != out_stride {
            return Err(Error::config(format!(
                "branch has {} upsample stages but backbone output stride is {}",
                self.channels.len(),
                out_stride
            )));
        }
        Ok(())
    }

    /// Double the last two stages (both transposed-conv and squeeze widths);
    /// used by the wider-decoder variant and by network surgery.
    pub(crate) fn widened(&self) -> BranchSpec {
        let mut w = self.clone();
        let n = w.channels.len();
        for i in n.saturating_sub(2)..n {
            w.channels[i] *= 2;
            w.squeezes[i] *= 2;
        }
        w
    }
}

/// Build-time configuration. Channel counts are overridable; structure
/// (two backbones, conditioning product, per-node branches, one message
/// pass) is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_out: usize,
    pub fire_outs: Vec<usize>,
    pub branch: BranchSpec,
    /// Gate keypoint features with the pose features. Off builds two
    /// independent networks (ablation arm).
    pub conditioning: bool,
    /// Double the last two branch stages at build time.
    pub more_filters: bool,
    /// Build the fine localization stage alongside the coarse one.
    pub with_fine_stage: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            stem_out: 16,
            fire_outs: vec![16, 16, 32, 32],
            branch: BranchSpec::default(),
            conditioning: true,
            more_filters: false,
            with_fine_stage: false,
        }
    }
}

/// Edge-convolution kernel size for a given input resolution: scales a
/// 14-pixel receptive field at 224 down to the working size, floored at 3
/// and forced odd so padding can preserve shape.
pub fn edge_kernel_size(image_size: usize) -> usize {
    let k = ((14.0 * image_size as f64 / 224.0).round() as usize).max(3);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Carries a model grown onto a larger tree: the original tree the branch
/// set belongs to, and for every target node the source branch it reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryInfo {
    pub source_tree: String,
    pub source_n: usize,
    pub split_map: Vec<usize>,
}

/// Which heatmap head a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

/// Handles into the graph for one forward pass.
pub struct ForwardOut {
    /// Heatmap logits, `[B, N+1, H, W]`.
    pub logits: Var,
    /// Pose prediction, `[B, 3]`, in normalized units.
    pub pose: Var,
}

/// The assembled model: a flat parameter store plus the structural
/// metadata needed to replay the forward pass.
#[derive(Debug, Clone)]
pub struct PCDModel<F: Scalar> {
    tree: DendriticTree,
    cfg: ModelConfig,
    /// Effective branch widths (after the wider-decoder option and any
    /// surgery widening).
    branch: BranchSpec,
    surgery: Option<SurgeryInfo>,
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

/// Batch-norm statistics source for a single normalization site.
pub enum BnPass<'a, F: Scalar> {
    Train { running_mean: &'a mut Tensor<F>, running_var: &'a mut Tensor<F>, momentum: f64 },
    Eval { running_mean: &'a Tensor<F>, running_var: &'a Tensor<F> },
}

/// Gate keypoint features with a learned transform of the pose features:
/// `kp ⊙ BN(ReLU(conv(pose)))`. Gradients flow into both feature inputs.
pub fn condition_on_pose<F: Scalar>(
    g: &mut Graph<F>,
    kp_feat: Var,
    pose_feat: Var,
    conv_w: Var,
    gamma: Var,
    beta: Var,
    bn: BnPass<'_, F>,
) -> Result<Var> {
    let (_, _, kh, kw) = g.value(kp_feat).dims4()?;
    let (_, _, ph, pw) = g.value(pose_feat).dims4()?;
    if (kh, kw) != (ph, pw) {
        return Err(Error::config(format!(
            "condition_on_pose: spatial mismatch {}x{} vs {}x{}",
            kh, kw, ph, pw
        )));
    }
    let c = g.conv2d(pose_feat, conv_w, None, 1, 0)?;
    let r = g.relu(c);
    let n = match bn {
        BnPass::Train { running_mean, running_var, momentum } => {
            g.batch_norm_train(r, gamma, beta, running_mean, running_var, momentum)?
        }
        BnPass::Eval { running_mean, running_var } => {
            g.batch_norm_eval(r, gamma, beta, running_mean, running_var)?
        }
    };
    g.multiply(kp_feat, n)
}

/// One simultaneous message pass over the tree: `H_i = R_i + Σ_j f_{j→i}(R_j)`
/// for every neighbor j of i, all messages computed from the pre-pass
/// responses. `edge_convs` pairs (weight, bias) follow
/// `tree.directed_edges()` order; kernels must be odd-sized.
pub fn message_pass<F: Scalar>(
    g: &mut Graph<F>,
    responses: &[Var],
    tree: &DendriticTree,
    edge_convs: &[(Var, Option<Var>)],
) -> Result<Vec<Var>> {
    if responses.len() != tree.n() {
        return Err(Error::config(format!(
            "message_pass: {} responses for a {}-node tree",
            responses.len(),
            tree.n()
        )));
    }
    let directed = tree.directed_edges();
    if edge_convs.len() != directed.len() {
        return Err(Error::config(format!(
            "message_pass: {} edge convolutions for {} directed edges",
            edge_convs.len(),
            directed.len()
        )));
    }
    for &r in responses {
        let (_, c, _, _) = g.value(r).dims4()?;
        if c != 1 {
            return Err(Error::config("message_pass: responses must be single-channel"));
        }
    }
    let mut out: Vec<Var> = responses.to_vec();
    for (e, &(src, dst)) in directed.iter().enumerate() {
        let (w, b) = edge_convs[e];
        let k = g.value(w).shape()[2];
        let msg = g.conv2d(responses[src], w, b, 1, (k - 1) / 2)?;
        out[dst] = g.add(out[dst], msg)?;
    }
    Ok(out)
}

// ---- construction ------------------------------------------------------

struct Registrar<F: Scalar> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Registrar<F> {
    fn new(seed: u64) -> Self {
        Registrar { params: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add(&mut self, name: String, value: Tensor<F>, trainable: bool) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        let mut p = Parameter::new(name, value);
        p.trainable = trainable;
        self.params.push(p);
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sc(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).expect("shape/data consistent")
    }

    /// He fan-in initialized convolution weight `[co, ci, k, k]`.
    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, bias: bool) {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = self.normal(&[co, ci, k, k], std);
        self.add(format!("{name}.w"), w, true);
        if bias {
            self.add(format!("{name}.b"), Tensor::zeros(&[co]), true);
        }
    }

    /// Transposed-convolution weight `[ci, co, k, k]`.
    fn tconv(&mut self, name: &str, ci: usize, co: usize, k: usize) {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = self.normal(&[ci, co, k, k], std);
        self.add(format!("{name}.w"), w, true);
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), Tensor::filled(&[c], F::one()), true);
        self.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true);
        self.add(format!("{prefix}.rmean"), Tensor::zeros(&[c]), false);
        self.add(format!("{prefix}.rvar"), Tensor::filled(&[c], F::one()), false);
    }

    fn linear(&mut self, name: &str, co: usize, ci: usize) {
        let std = (2.0 / ci as f64).sqrt();
        let w = self.normal(&[co, ci], std);
        self.add(format!("{name}.w"), w, true);
        self.add(format!("{name}.b"), Tensor::zeros(&[co]), true);
    }

    fn backbone(&mut self, prefix: &str, spec: &BackboneSpec) {
        self.conv(&format!("{prefix}.stem.conv"), spec.stem_out, spec.in_channels, 3, false);
        self.bn(&format!("{prefix}.stem.bn"), spec.stem_out);
        let mut in_ch = spec.stem_out;
        for (i, fire) in spec.fires.iter().enumerate() {
            let p = format!("{prefix}.fire{i}");
            self.conv(&format!("{p}.squeeze"), fire.squeeze, in_ch, 1, false);
            self.bn(&format!("{p}.squeeze.bn"), fire.squeeze);
            self.conv(&format!("{p}.e1"), fire.expand1, fire.squeeze, 1, false);
            self.conv(&format!("{p}.e3"), fire.expand3, fire.squeeze, 3, false);
            self.bn(&format!("{p}.out.bn"), fire.out_channels());
            in_ch = fire.out_channels();
        }
    }

    fn branch(&mut self, prefix: &str, in_ch: usize, spec: &BranchSpec) {
        let mut cur = in_ch;
        for (j, (&ch, &sq)) in spec.channels.iter().zip(&spec.squeezes).enumerate() {
            self.tconv(&format!("{prefix}.t{j}"), cur, ch, 2);
            self.bn(&format!("{prefix}.t{j}.bn"), ch);
            self.conv(&format!("{prefix}.s{j}"), sq, ch, 1, false);
            self.bn(&format!("{prefix}.s{j}.bn"), sq);
            cur = sq;
        }
        self.conv(&format!("{prefix}.out"), 1, cur, 1, true);
    }
}

/// Construct an initialized model. Deterministic for a given seed: the
/// same seed yields bit-identical parameters.
pub fn build_model<F: Scalar>(
    tree: &DendriticTree,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<PCDModel<F>> {
    if cfg.image_size < 32 {
        return Err(Error::config("image size must be at least 32"));
    }
    let branch = if cfg.more_filters { cfg.branch.widened() } else { cfg.branch.clone() };
    let pose_spec = BackboneSpec::with_fire_outs(3, cfg.stem_out, &cfg.fire_outs);
    pose_spec.validate()?;
    branch.validate(pose_spec.out_stride())?;
    if cfg.image_size % pose_spec.out_stride() != 0 {
        return Err(Error::config(format!(
            "image size {} not divisible by output stride {}",
            cfg.image_size,
            pose_spec.out_stride()
        )));
    }
    let n = tree.n();
    let mut r = Registrar::<F>::new(seed);
    let feat = pose_spec.out_channels();

    r.backbone("pose", &pose_spec);
    r.linear("pose.head", 3, feat);
    if cfg.conditioning {
        r.conv("cond.conv", feat, feat, 1, false);
        r.bn("cond.bn", feat);
    }
    r.backbone("kp", &pose_spec);
    for i in 0..n {
        r.branch(&format!("br{i}"), feat, &branch);
    }
    r.branch("brbg", feat, &branch);
    let ek = edge_kernel_size(cfg.image_size);
    for (src, dst) in tree.directed_edges() {
        r.conv(&format!("edge.{src}to{dst}"), 1, 1, ek, true);
    }
    if cfg.with_fine_stage {
        r.conv("fine.res.c1", n + 1, n + 1, 1, true);
        r.conv("fine.res.c2", n + 1, n + 1, 3, true);
        let fine_spec = BackboneSpec::with_fire_outs(3 + n + 1, cfg.stem_out, &cfg.fire_outs);
        r.backbone("fkp", &fine_spec);
        if cfg.conditioning {
            r.conv("fcond.conv", feat, feat, 1, false);
            r.bn("fcond.bn", feat);
        }
        for i in 0..n {
            r.branch(&format!("fbr{i}"), feat, &branch);
        }
        r.branch("fbrbg", feat, &branch);
    }

    Ok(PCDModel {
        tree: tree.clone(),
        cfg: cfg.clone(),
        branch,
        surgery: None,
        params: r.params,
        index: r.index,
    })
}

// ---- forward -----------------------------------------------------------

/// Per-pass context threading the graph, parameter store, and batch-norm
/// statistics handling through the layer helpers.
struct Pass<'a, F: Scalar> {
    g: &'a mut Graph<F>,
    params: &'a [Parameter<F>],
    index: &'a HashMap<String, usize>,
    training: bool,
    bn_updates: &'a mut Vec<(usize, Tensor<F>)>,
}

impl<F: Scalar> Pass<'_, F> {
    fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let i = self.idx(name)?;
        Ok(self.g.param(i, self.params))
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = if bias { Some(self.p(&format!("{name}.b"))?) } else { None };
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        // A frozen layer normalizes with its running statistics and stops
        // updating them, so frozen subnets stay bit-identical under training.
        let ig = self.idx(&format!("{prefix}.gamma"))?;
        let live = self.training && self.params[ig].trainable;
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let irm = self.idx(&format!("{prefix}.rmean"))?;
        let irv = self.idx(&format!("{prefix}.rvar"))?;
        if live {
            let mut rm = self.params[irm].value.clone();
            let mut rv = self.params[irv].value.clone();
            let y = self.g.batch_norm_train(x, gamma, beta, &mut rm, &mut rv, 0.1)?;
            self.bn_updates.push((irm, rm));
            self.bn_updates.push((irv, rv));
            Ok(y)
        } else {
            self.g.batch_norm_eval(x, gamma, beta, &self.params[irm].value, &self.params[irv].value)
        }
    }

    fn conv_bn_relu(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let c = self.conv(x, name, stride, pad, false)?;
        let b = self.bn(c, &format!("{name}.bn"))?;
        Ok(self.g.relu(b))
    }

    fn backbone(&mut self, x: Var, prefix: &str, spec: &BackboneSpec) -> Result<Var> {
        let mut cur = {
            let c = self.conv(x, &format!("{prefix}.stem.conv"), 2, 1, false)?;
            let b = self.bn(c, &format!("{prefix}.stem.bn"))?;
            self.g.relu(b)
        };
        for i in 0..spec.fires.len() {
            let p = format!("{prefix}.fire{i}");
            let s = self.conv_bn_relu(cur, &format!("{p}.squeeze"), 1, 0)?;
            let e1 = self.conv(s, &format!("{p}.e1"), 1, 0, false)?;
            let e3 = self.conv(s, &format!("{p}.e3"), 1, 1, false)?;
            let cat = self.g.concat_channels(&[e1, e3])?;
            let b = self.bn(cat, &format!("{p}.out.bn"))?;
            cur = self.g.relu(b);
            if spec.pool_after.contains(&i) {
                cur = self.g.max_pool2(cur)?;
            }
        }
        Ok(cur)
    }

    /// Branch trunk: everything up to (not including) the final 1×1.
    fn branch_features(&mut self, x: Var, prefix: &str, spec: &BranchSpec) -> Result<Var> {
        let mut cur = x;
        for j in 0..spec.channels.len() {
            let w = self.p(&format!("{prefix}.t{j}.w"))?;
            let t = self.g.transposed_conv2d(cur, w, None, 2, 0)?;
            let b = self.bn(t, &format!("{prefix}.t{j}.bn"))?;
            let r = self.g.relu(b);
            cur = self.conv_bn_relu(r, &format!("{prefix}.s{j}"), 1, 0)?;
        }
        Ok(cur)
    }

    fn branch_response(&mut self, x: Var, prefix: &str, spec: &BranchSpec) -> Result<Var> {
        let feats = self.branch_features(x, prefix, spec)?;
        self.conv(feats, &format!("{prefix}.out"), 1, 0, true)
    }

    fn conditioned(&mut self, kp: Var, pose: Var, prefix: &str) -> Result<Var> {
        let ig = self.idx(&format!("{prefix}.bn.gamma"))?;
        let live = self.training && self.params[ig].trainable;
        let w = self.p(&format!("{prefix}.conv.w"))?;
        let gamma = self.p(&format!("{prefix}.bn.gamma"))?;
        let beta = self.p(&format!("{prefix}.bn.beta"))?;
        let irm = self.idx(&format!("{prefix}.bn.rmean"))?;
        let irv = self.idx(&format!("{prefix}.bn.rvar"))?;
        if live {
            let mut rm = self.params[irm].value.clone();
            let mut rv = self.params[irv].value.clone();
            let y = condition_on_pose(
                self.g,
                kp,
                pose,
                w,
                gamma,
                beta,
                BnPass::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 },
            )?;
            self.bn_updates.push((irm, rm));
            self.bn_updates.push((irv, rv));
            Ok(y)
        } else {
            condition_on_pose(
                self.g,
                kp,
                pose,
                w,
                gamma,
                beta,
                BnPass::Eval {
                    running_mean: &self.params[irm].value,
                    running_var: &self.params[irv].value,
                },
            )
        }
    }
}

impl<F: Scalar> PCDModel<F> {
    pub fn tree(&self) -> &DendriticTree {
        &self.tree
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn surgery_info(&self) -> Option<&SurgeryInfo> {
        self.surgery.as_ref()
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar parameter count (including batch-norm running stats).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One-line structural summary; distinct toggles that change the
    /// parameter set produce distinct counts, and the flags disambiguate
    /// the rest.
    pub fn signature(&self) -> String {
        format!(
            "tree={} n={} params={} conditioning={} more_filters={} fine={} surgery={}",
            self.tree.name(),
            self.tree.n(),
            self.param_count(),
            self.cfg.conditioning,
            self.cfg.more_filters,
            self.cfg.with_fine_stage,
            self.surgery.as_ref().map(|s| s.source_tree.as_str()).unwrap_or("none"),
        )
    }

    /// Forward pass during training: batch-norm sites use batch statistics
    /// and fold them into the running estimates.
    pub fn forward_train(&mut self, g: &mut Graph<F>, image: Var, stage: Stage) -> Result<ForwardOut> {
        let mut updates = Vec::new();
        let out = self.forward_core(g, image, stage, true, &mut updates)?;
        for (i, t) in updates {
            self.params[i].value = t;
        }
        Ok(out)
    }

    /// Forward pass for inference: batch-norm sites read running statistics
    /// and the model stays immutable (safe to share across threads).
    pub fn forward_eval(&self, g: &mut Graph<F>, image: Var, stage: Stage) -> Result<ForwardOut> {
        let mut updates = Vec::new();
        self.forward_core(g, image, stage, false, &mut updates)
    }

    fn forward_core(
        &self,
        g: &mut Graph<F>,
        image: Var,
        stage: Stage,
        training: bool,
        bn_updates: &mut Vec<(usize, Tensor<F>)>,
    ) -> Result<ForwardOut> {
        let (_, ic, ih, iw) = g.value(image).dims4()?;
        if ic != 3 || ih != self.cfg.image_size || iw != self.cfg.image_size {
            return Err(Error::config(format!(
                "forward: expected [B,3,{0},{0}] image, got [{1},{2},{3}]",
                self.cfg.image_size, ic, ih, iw
            )));
        }
        if matches!(stage, Stage::Fine) && !self.cfg.with_fine_stage {
            return Err(Error::config("forward: model was built without a fine stage"));
        }
        let spec = BackboneSpec::with_fire_outs(3, self.cfg.stem_out, &self.cfg.fire_outs);
        // The fine stage always trains on top of a frozen trunk, so its
        // training passes keep the coarse normalization in eval mode:
        // running statistics of the trunk must not drift while only the
        // fine parameters learn.
        let coarse_training = training && matches!(stage, Stage::Coarse);
        let mut pass =
            Pass { g, params: &self.params, index: &self.index, training: coarse_training, bn_updates };

        let pose_feat = pass.backbone(image, "pose", &spec)?;
        let pooled = pass.g.global_avg_pool(pose_feat)?;
        let pw = pass.p("pose.head.w")?;
        let pb = pass.p("pose.head.b")?;
        let pose = pass.g.linear(pooled, pw, pb)?;

        let kp_feat = pass.backbone(image, "kp", &spec)?;
        let cond = if self.cfg.conditioning {
            pass.conditioned(kp_feat, pose_feat, "cond")?
        } else {
            kp_feat
        };

        let coarse_logits = self.coarse_head(&mut pass, cond)?;
        let logits = match stage {
            Stage::Coarse => coarse_logits,
            Stage::Fine => {
                pass.training = training;
                let probs = pass.g.channel_softmax(coarse_logits)?;
                let r1 = pass.conv(probs, "fine.res.c1", 1, 0, true)?;
                let r1 = pass.g.relu(r1);
                let r2 = pass.conv(r1, "fine.res.c2", 1, 1, true)?;
                let fused = pass.g.add(probs, r2)?;
                let fine_in = pass.g.concat_channels(&[image, fused])?;
                let fine_spec = BackboneSpec::with_fire_outs(
                    3 + self.tree.n() + 1,
                    self.cfg.stem_out,
                    &self.cfg.fire_outs,
                );
                let fkp = pass.backbone(fine_in, "fkp", &fine_spec)?;
                let fcond = if self.cfg.conditioning {
                    pass.conditioned(fkp, pose_feat, "fcond")?
                } else {
                    fkp
                };
                let mut maps = Vec::with_capacity(self.tree.n() + 1);
                for i in 0..self.tree.n() {
                    maps.push(pass.branch_response(fcond, &format!("fbr{i}"), &self.branch)?);
                }
                maps.push(pass.branch_response(fcond, "fbrbg", &self.branch)?);
                pass.g.concat_channels(&maps)?
            }
        };
        Ok(ForwardOut { logits, pose })
    }

    /// Coarse branch set, message pass, and channel stack on top of the
    /// (conditioned) keypoint features.
    fn coarse_head(&self, pass: &mut Pass<'_, F>, cond: Var) -> Result<Var> {
        let n = self.tree.n();
        let responses: Vec<Var> = match &self.surgery {
            None => {
                let mut rs = Vec::with_capacity(n);
                for i in 0..n {
                    rs.push(pass.branch_response(cond, &format!("br{i}"), &self.branch)?);
                }
                rs
            }
            Some(info) => {
                // Source branch trunks, computed once per referenced branch,
                // then per-target 1x1 heads.
                let mut trunk: HashMap<usize, Var> = HashMap::new();
                let mut rs = Vec::with_capacity(n);
                for (t, &s) in info.split_map.iter().enumerate() {
                    let feats = match trunk.get(&s) {
                        Some(&v) => v,
                        None => {
                            let v =
                                pass.branch_features(cond, &format!("br{s}"), &self.branch)?;
                            trunk.insert(s, v);
                            v
                        }
                    };
                    rs.push(pass.conv(feats, &format!("head.t{t}"), 1, 0, true)?);
                }
                rs
            }
        };
        let bg = pass.branch_response(cond, "brbg", &self.branch)?;

        let directed = self.tree.directed_edges();
        let mut edge_convs = Vec::with_capacity(directed.len());
        for (src, dst) in &directed {
            let w = pass.p(&format!("edge.{src}to{dst}.w"))?;
            let b = pass.p(&format!("edge.{src}to{dst}.b"))?;
            edge_convs.push((w, Some(b)));
        }
        let passed = message_pass(pass.g, &responses, &self.tree, &edge_convs)?;

        let mut maps = passed;
        maps.push(bg);
        pass.g.concat_channels(&maps)
    }

    /// Add each parameter's gradient from the graph into its accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph<F>) {
        g.accumulate_param_grads(&mut self.params);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Mark every parameter with the given name prefix frozen (or thawed).
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub(crate) fn from_parts(
        tree: DendriticTree,
        cfg: ModelConfig,
        branch: BranchSpec,
        surgery: Option<SurgeryInfo>,
        params: Vec<Parameter<F>>,
        index: HashMap<String, usize>,
    ) -> Self {
        PCDModel { tree, cfg, branch, surgery, params, index }
    }

    /// Effective per-landmark decoder spec (widened when `more_filters` is
    /// set in the config).
    pub fn branch_spec(&self) -> &BranchSpec {
        &self.branch
    }
}
