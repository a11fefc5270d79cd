//! Line-based `key = value` run settings with a canonical serialized form.

use pcd_core::data::SynthConfig;
use pcd_core::eval::{EvalProtocol, Normalizer};
use pcd_core::net::{BranchSpec, ModelConfig};
use pcd_core::train::{TrainConfig, NO_LR_DROP};
use pcd_core::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Merged settings for one command run: architecture, training schedule,
/// synthesis ranges, evaluation protocol, file paths, and ablation toggles.
/// Every field has a default, a config file overrides fields by dotted key,
/// and command-line flags override the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tree: String,
    pub image_size: usize,
    pub stem_out: usize,
    pub fire_outs: Vec<usize>,
    pub branch_channels: Vec<usize>,
    pub branch_squeezes: Vec<usize>,
    pub conditioning: bool,
    pub more_filters: bool,
    pub with_fine_stage: bool,
    pub train: TrainConfig,
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
    pub blob_sigma: f64,
    pub noise: f64,
    pub synth_seed: u64,
    pub protocol: Normalizer,
    pub failure_threshold: f64,
    pub visibility_tau: f64,
    pub mining: bool,
    pub plain_softmax: bool,
    pub tta: bool,
    pub pose_labels: bool,
    pub fine_stage: bool,
    pub train_manifest: String,
    pub val_manifest: String,
    pub checkpoint: String,
    pub init: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let synth = SynthConfig::default();
        let proto = EvalProtocol::default();
        RunConfig {
            tree: "aflw21".to_string(),
            image_size: model.image_size,
            stem_out: model.stem_out,
            fire_outs: model.fire_outs,
            branch_channels: model.branch.channels,
            branch_squeezes: model.branch.squeezes,
            conditioning: model.conditioning,
            more_filters: model.more_filters,
            with_fine_stage: model.with_fine_stage,
            train: TrainConfig::default(),
            yaw: synth.yaw_range,
            pitch: synth.pitch_range,
            roll: synth.roll_range,
            blob_sigma: synth.blob_sigma,
            noise: synth.noise,
            synth_seed: synth.seed,
            protocol: proto.normalizer,
            failure_threshold: proto.failure_threshold,
            visibility_tau: proto.visibility_threshold,
            mining: false,
            plain_softmax: false,
            tta: false,
            pose_labels: true,
            fine_stage: false,
            train_manifest: String::new(),
            val_manifest: String::new(),
            checkpoint: String::new(),
            init: String::new(),
        }
    }
}

fn bad(line: usize, key: &str, what: &str) -> Error {
    Error::config(format!("line {line}: invalid value for '{key}': {what}"))
}

fn parse_bool(v: &str, line: usize, key: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, key, "expected true or false")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, key, "not a number"))
}

fn parse_list(v: &str, line: usize, key: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> =
        v.split(',').map(|s| parse_num(s.trim(), line, key)).collect();
    let items = items?;
    if items.is_empty() {
        return Err(bad(line, key, "empty list"));
    }
    Ok(items)
}

fn parse_pair(v: &str, line: usize, key: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(bad(line, key, "expected two comma-separated numbers"));
    }
    Ok((parse_num(parts[0], line, key)?, parse_num(parts[1], line, key)?))
}

fn list_str(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse settings text: one `key = value` per line, `#` comments, blank
    /// lines ignored. Unknown keys are rejected with their line number.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.trim();
            if stripped.is_empty() || stripped.starts_with('#') {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line}: expected 'key = value'")))?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    /// Read and parse a settings file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config '{}': {e}", p.display()))
                })?;
                RunConfig::parse(&text)
            }
        }
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        match key {
            "tree" => self.tree = v.to_string(),
            "image_size" => self.image_size = parse_num(v, line, key)?,
            "model.stem_out" => self.stem_out = parse_num(v, line, key)?,
            "model.fire_outs" => self.fire_outs = parse_list(v, line, key)?,
            "model.branch_channels" => self.branch_channels = parse_list(v, line, key)?,
            "model.branch_squeezes" => self.branch_squeezes = parse_list(v, line, key)?,
            "model.conditioning" => self.conditioning = parse_bool(v, line, key)?,
            "model.more_filters" => self.more_filters = parse_bool(v, line, key)?,
            "model.with_fine_stage" => self.with_fine_stage = parse_bool(v, line, key)?,
            "train.epochs" => self.train.epochs = parse_num(v, line, key)?,
            "train.batch_size" => self.train.batch_size = parse_num(v, line, key)?,
            "train.base_lr" => self.train.base_lr = parse_num(v, line, key)?,
            // 0 means "never drop" and round-trips as 0.
            "train.lr_drop_every" => {
                let n: usize = parse_num(v, line, key)?;
                self.train.lr_drop_every = if n == 0 { NO_LR_DROP } else { n };
            }
            "train.lr_drop_factor" => self.train.lr_drop_factor = parse_num(v, line, key)?,
            "train.momentum" => self.train.momentum = parse_num(v, line, key)?,
            "train.keypoint_weight" => self.train.keypoint_weight = parse_num(v, line, key)?,
            "train.pose_weight" => self.train.pose_weight = parse_num(v, line, key)?,
            "train.grad_clip" => self.train.grad_clip = parse_num(v, line, key)?,
            "train.augment" => self.train.augment = parse_bool(v, line, key)?,
            "train.seed" => self.train.seed = parse_num(v, line, key)?,
            "synth.yaw" => self.yaw = parse_pair(v, line, key)?,
            "synth.pitch" => self.pitch = parse_pair(v, line, key)?,
            "synth.roll" => self.roll = parse_pair(v, line, key)?,
            "synth.blob_sigma" => self.blob_sigma = parse_num(v, line, key)?,
            "synth.noise" => self.noise = parse_num(v, line, key)?,
            "synth.seed" => self.synth_seed = parse_num(v, line, key)?,
            "eval.protocol" => {
                self.protocol = match v {
                    "bbox" => Normalizer::BboxSize,
                    "interocular" => Normalizer::Interocular,
                    _ => return Err(bad(line, key, "expected bbox or interocular")),
                }
            }
            "eval.failure_threshold" => self.failure_threshold = parse_num(v, line, key)?,
            "eval.visibility_tau" => self.visibility_tau = parse_num(v, line, key)?,
            "run.mining" => self.mining = parse_bool(v, line, key)?,
            "run.plain_softmax" => self.plain_softmax = parse_bool(v, line, key)?,
            "run.tta" => self.tta = parse_bool(v, line, key)?,
            "run.pose_labels" => self.pose_labels = parse_bool(v, line, key)?,
            "run.fine_stage" => self.fine_stage = parse_bool(v, line, key)?,
            "paths.train_manifest" => self.train_manifest = v.to_string(),
            "paths.val_manifest" => self.val_manifest = v.to_string(),
            "paths.checkpoint" => self.checkpoint = v.to_string(),
            "paths.init" => self.init = v.to_string(),
            _ => return Err(Error::config(format!("line {line}: unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical form: every key in a fixed order, current values, one per
    /// line. `serialize` is a fixed point: `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("tree", self.tree.clone());
        kv("image_size", self.image_size.to_string());
        kv("model.stem_out", self.stem_out.to_string());
        kv("model.fire_outs", list_str(&self.fire_outs));
        kv("model.branch_channels", list_str(&self.branch_channels));
        kv("model.branch_squeezes", list_str(&self.branch_squeezes));
        kv("model.conditioning", self.conditioning.to_string());
        kv("model.more_filters", self.more_filters.to_string());
        kv("model.with_fine_stage", self.with_fine_stage.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.base_lr", self.train.base_lr.to_string());
        let drop = if self.train.lr_drop_every == NO_LR_DROP { 0 } else { self.train.lr_drop_every };
        kv("train.lr_drop_every", drop.to_string());
        kv("train.lr_drop_factor", self.train.lr_drop_factor.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.keypoint_weight", self.train.keypoint_weight.to_string());
        kv("train.pose_weight", self.train.pose_weight.to_string());
        kv("train.grad_clip", self.train.grad_clip.to_string());
        kv("train.augment", self.train.augment.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("synth.yaw", format!("{},{}", self.yaw.0, self.yaw.1));
        kv("synth.pitch", format!("{},{}", self.pitch.0, self.pitch.1));
        kv("synth.roll", format!("{},{}", self.roll.0, self.roll.1));
        kv("synth.blob_sigma", self.blob_sigma.to_string());
        kv("synth.noise", self.noise.to_string());
        kv("synth.seed", self.synth_seed.to_string());
        let proto = match self.protocol {
            Normalizer::BboxSize => "bbox",
            Normalizer::Interocular => "interocular",
        };
        kv("eval.protocol", proto.to_string());
        kv("eval.failure_threshold", self.failure_threshold.to_string());
        kv("eval.visibility_tau", self.visibility_tau.to_string());
        kv("run.mining", self.mining.to_string());
        kv("run.plain_softmax", self.plain_softmax.to_string());
        kv("run.tta", self.tta.to_string());
        kv("run.pose_labels", self.pose_labels.to_string());
        kv("run.fine_stage", self.fine_stage.to_string());
        for (k, v) in [
            ("paths.train_manifest", &self.train_manifest),
            ("paths.val_manifest", &self.val_manifest),
            ("paths.checkpoint", &self.checkpoint),
            ("paths.init", &self.init),
        ] {
            if !v.is_empty() {
                kv(k, v.clone());
            }
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            stem_out: self.stem_out,
            fire_outs: self.fire_outs.clone(),
            branch: BranchSpec {
                channels: self.branch_channels.clone(),
                squeezes: self.branch_squeezes.clone(),
            },
            conditioning: self.conditioning,
            more_filters: self.more_filters,
            with_fine_stage: self.with_fine_stage,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            yaw_range: self.yaw,
            pitch_range: self.pitch,
            roll_range: self.roll,
            blob_sigma: self.blob_sigma,
            noise: self.noise,
            seed: self.synth_seed,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            normalizer: self.protocol,
            failure_threshold: self.failure_threshold,
            visibility_threshold: self.visibility_tau,
            ..EvalProtocol::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_canonical_form() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn a_sparse_file_parses_onto_defaults_and_reaches_a_fixed_point() {
        let text = "# training tweaks\n\ntrain.base_lr = 0.05\nmodel.conditioning = false\n\
                    synth.yaw = -45, 45\npaths.init = warm.ckpt\ntrain.lr_drop_every = 0\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.base_lr, 0.05);
        assert!(!cfg.conditioning);
        assert_eq!(cfg.yaw, (-45.0, 45.0));
        assert_eq!(cfg.init, "warm.ckpt");
        assert_eq!(cfg.train.lr_drop_every, NO_LR_DROP);
        assert_eq!(cfg.fire_outs, vec![16, 16, 32, 32]);

        let canon = cfg.serialize();
        assert_eq!(RunConfig::parse(&canon).unwrap().serialize(), canon);
        assert!(canon.contains("train.lr_drop_every = 0"));
        assert!(canon.contains("paths.init = warm.ckpt"));
        assert!(!canon.contains("paths.checkpoint"));
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected_with_line_numbers() {
        let err = RunConfig::parse("train.epochs = 3\nbogus.key = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("bogus.key"), "{err}");

        let err = RunConfig::parse("just words\n").unwrap_err();
        assert!(err.to_string().contains("expected 'key = value'"), "{err}");

        for bad in [
            "train.epochs = many",
            "model.fire_outs = ",
            "model.conditioning = yes",
            "synth.yaw = 10",
            "eval.protocol = euclidean",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn derived_core_configs_carry_the_shared_image_size() {
        let mut cfg = RunConfig::default();
        cfg.image_size = 96;
        cfg.visibility_tau = 0.4;
        assert_eq!(cfg.model_config().image_size, 96);
        assert_eq!(cfg.synth_config().image_size, 96);
        assert_eq!(cfg.eval_protocol().visibility_threshold, 0.4);
        assert_eq!(cfg.eval_protocol().ced_grid.len(), 151);
    }
}
