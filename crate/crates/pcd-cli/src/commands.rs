//! Subcommand implementations behind the argument surface in `main`.

use crate::config::RunConfig;
use crate::{Cli, Cmd, Common, ProtocolArg, StageArg};
use pcd_core::check::{gradient_suite, suite_passed};
use pcd_core::data::{synth_sample, DatasetManifest};
use pcd_core::eval::{
    best_visibility_tau, decode_heatmaps, evaluate_manifest, forward_probs, tta_probs,
    worker_threads, EvalSummary, Normalizer,
};
use pcd_core::net::{
    build_model, checkpoint_dtype, load_checkpoint, save_checkpoint, PCDModel, Stage,
};
use pcd_core::tensor::Scalar;
use pcd_core::train::{train, train_fine_stage, TrainOptions};
use pcd_core::tree::DendriticTree;
use pcd_core::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { common, count, name } => cmd_synth(&common, count, name),
        Cmd::Train {
            common,
            data,
            val,
            init,
            checkpoint,
            mining,
            no_conditioning,
            plain_softmax,
            fine_stage,
            more_filters,
            no_pose_labels,
            epochs,
        } => {
            let flags = TrainFlags {
                data,
                val,
                init,
                checkpoint,
                mining,
                no_conditioning,
                plain_softmax,
                fine_stage,
                more_filters,
                no_pose_labels,
                epochs,
            };
            cmd_train(&common, flags)
        }
        Cmd::Eval { common, checkpoint, data, tta, protocol, stage, calibrate_tau } => {
            cmd_eval(&common, checkpoint, data, tta, protocol, stage, calibrate_tau)
        }
        Cmd::Gradcheck { common } => cmd_gradcheck(&common),
        Cmd::Plot { common, tables, labels } => cmd_plot(&common, &tables, labels),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref())
}

fn set_path(slot: &mut String, flag: Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = p.display().to_string();
    }
}

// ---------------------------------------------------------------- synth --

fn cmd_synth(common: &Common, count: usize, name: Option<String>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.synth_seed = seed;
    }
    if count == 0 {
        return Err(Error::config("count must be positive"));
    }
    if cfg.tree != "aflw21" {
        return Err(Error::config(format!(
            "the generator produces aflw21 annotations; tree '{}' is unsupported",
            cfg.tree
        )));
    }
    let synth = cfg.synth_config();
    synth.validate()?;

    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let (_, ann) = synth_sample::<f32>(&synth, i as u64)?;
        records.push(ann);
    }
    let manifest = DatasetManifest {
        tree: cfg.tree.clone(),
        image_size: synth.image_size,
        synth: Some(synth.clone()),
        records,
    };
    std::fs::create_dir_all(&common.out)?;
    let file = name.unwrap_or_else(|| format!("synth-s{}-n{}.jsonl", synth.seed, count));
    let path = common.out.join(file);
    manifest.write(&path)?;
    println!(
        "wrote {count} records (tree {}, {}px, seed {}) to {}",
        cfg.tree,
        synth.image_size,
        synth.seed,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train --

struct TrainFlags {
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    init: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    mining: bool,
    no_conditioning: bool,
    plain_softmax: bool,
    fine_stage: bool,
    more_filters: bool,
    no_pose_labels: bool,
    epochs: Option<usize>,
}

fn cmd_train(common: &Common, flags: TrainFlags) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.mining |= flags.mining;
    cfg.plain_softmax |= flags.plain_softmax;
    cfg.fine_stage |= flags.fine_stage;
    cfg.more_filters |= flags.more_filters;
    if flags.no_conditioning {
        cfg.conditioning = false;
    }
    if flags.no_pose_labels {
        cfg.pose_labels = false;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    set_path(&mut cfg.train_manifest, flags.data);
    set_path(&mut cfg.val_manifest, flags.val);
    set_path(&mut cfg.init, flags.init);
    set_path(&mut cfg.checkpoint, flags.checkpoint);

    if cfg.train_manifest.is_empty() {
        return Err(Error::config("no training manifest: pass --data or set paths.train_manifest"));
    }
    let manifest = DatasetManifest::read(Path::new(&cfg.train_manifest))?;
    let val = match cfg.val_manifest.is_empty() {
        true => None,
        false => Some(DatasetManifest::read(Path::new(&cfg.val_manifest))?),
    };

    let mut model: PCDModel<f32> = if cfg.init.is_empty() {
        let tree = DendriticTree::by_name(&cfg.tree)?;
        build_model(&tree, &cfg.model_config(), cfg.train.seed)?
    } else {
        if flags.no_conditioning || flags.more_filters {
            return Err(Error::config(
                "--no-conditioning and --more-filters only apply when building a fresh model; \
                 the checkpoint passed via --init pins the architecture",
            ));
        }
        load_checkpoint(Path::new(&cfg.init))?
    };
    if cfg.fine_stage {
        if cfg.init.is_empty() {
            return Err(Error::config("--fine-stage needs a trained start: pass --init"));
        }
        if !model.config().with_fine_stage {
            return Err(Error::config(
                "checkpoint was built without the fine stage; train the coarse stage with \
                 model.with_fine_stage = true first",
            ));
        }
    }

    println!("model: {}", model.signature());
    println!(
        "loss: {}",
        if cfg.plain_softmax {
            "plain softmax over all pixels"
        } else {
            "masked softmax over sampled pixels"
        }
    );
    if !cfg.pose_labels {
        println!("pose: labels absent, pose network frozen");
    }
    if cfg.fine_stage {
        println!("stage: fine (coarse network frozen, mined batches)");
    } else if cfg.mining {
        println!("mining: hard-example phase follows the uniform epochs");
    }

    let opts = TrainOptions {
        mining: cfg.mining,
        pose_labels: cfg.pose_labels,
        plain_softmax: cfg.plain_softmax,
        val: val.as_ref(),
    };
    let report = if cfg.fine_stage {
        train_fine_stage(&mut model, &manifest, &cfg.train, &opts)?
    } else {
        train(&mut model, &manifest, &cfg.train, &opts)?
    };

    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for e in &report.epochs {
        let val_s = e.val_nme.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!(
            "phase {} epoch {:>3}  lr {:<8}  loss {:.5}  kp {:.5}  pose {:.5}  val nme {}",
            e.phase, e.epoch, e.lr, e.train_loss, e.keypoint_loss, e.pose_loss, val_s
        );
    }
    if let Some(m) = &report.mining {
        println!("mining split: threshold {:.4}, {} hard / {} easy", m.threshold, m.hard, m.easy);
    }

    std::fs::create_dir_all(&common.out)?;
    // The effective settings after flag overrides, for exact reruns.
    std::fs::write(common.out.join("run-config.txt"), cfg.serialize())?;
    let log_path = common.out.join("train-log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for e in &report.epochs {
        let line = serde_json::to_string(e).map_err(|e| Error::data(e.to_string()))?;
        writeln!(log, "{line}")?;
    }
    if let Some(m) = &report.mining {
        let line = serde_json::to_string(m).map_err(|e| Error::data(e.to_string()))?;
        writeln!(log, "{line}")?;
    }
    log.flush()?;

    let ckpt_path = match cfg.checkpoint.is_empty() {
        true => common.out.join("model.ckpt"),
        false => PathBuf::from(&cfg.checkpoint),
    };
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &ckpt_path)?;
    println!("saved checkpoint to {}", ckpt_path.display());
    Ok(())
}

// ----------------------------------------------------------------- eval --

fn cmd_eval(
    common: &Common,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    tta: bool,
    protocol: Option<ProtocolArg>,
    stage: StageArg,
    calibrate_tau: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.tta |= tta;
    if let Some(p) = protocol {
        cfg.protocol = match p {
            ProtocolArg::Bbox => Normalizer::BboxSize,
            ProtocolArg::Interocular => Normalizer::Interocular,
        };
    }
    set_path(&mut cfg.checkpoint, checkpoint);
    set_path(&mut cfg.val_manifest, data);
    if cfg.checkpoint.is_empty() {
        return Err(Error::config("no checkpoint: pass --checkpoint or set paths.checkpoint"));
    }
    if cfg.val_manifest.is_empty() {
        return Err(Error::config("no manifest: pass --data or set paths.val_manifest"));
    }

    let ckpt = PathBuf::from(&cfg.checkpoint);
    match checkpoint_dtype(&ckpt)?.as_str() {
        "f32" => eval_with::<f32>(&cfg, &ckpt, common, stage, calibrate_tau),
        "f64" => eval_with::<f64>(&cfg, &ckpt, common, stage, calibrate_tau),
        other => Err(Error::data(format!("unsupported checkpoint dtype '{other}'"))),
    }
}

/// Metrics summary printed by `eval`; field order is the print order.
#[derive(Serialize)]
struct SummaryOut {
    nme_mean: f64,
    failure_rate: f64,
    pose_frac_15deg: f64,
    recall_at_p80: Option<f64>,
    visibility_f1: f64,
    count: usize,
    excluded: usize,
    stage: &'static str,
    tta: bool,
}

fn eval_with<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    common: &Common,
    stage: StageArg,
    calibrate_tau: bool,
) -> Result<()> {
    let model: PCDModel<F> = load_checkpoint(ckpt)?;
    let manifest = DatasetManifest::read(Path::new(&cfg.val_manifest))?;
    let stage = match stage {
        StageArg::Auto => {
            if model.config().with_fine_stage {
                Stage::Fine
            } else {
                Stage::Coarse
            }
        }
        StageArg::Coarse => Stage::Coarse,
        StageArg::Fine => {
            if !model.config().with_fine_stage {
                return Err(Error::config("checkpoint was built without the fine stage"));
            }
            Stage::Fine
        }
    };
    let stage_name = match stage {
        Stage::Coarse => "coarse",
        Stage::Fine => "fine",
    };
    println!("model: {}", model.signature());

    let protocol = cfg.eval_protocol();
    let summary = evaluate_manifest(&model, &manifest, &protocol, stage, cfg.tta, worker_threads())?;
    let out = SummaryOut {
        nme_mean: summary.mean_nme,
        failure_rate: summary.failure_rate,
        pose_frac_15deg: summary.pose_within_15deg,
        recall_at_p80: summary.recall_at_p80,
        visibility_f1: summary.visibility_f1,
        count: summary.count,
        excluded: summary.excluded,
        stage: stage_name,
        tta: cfg.tta,
    };
    let text = serde_json::to_string_pretty(&out).map_err(|e| Error::data(e.to_string()))?;
    println!("{text}");

    std::fs::create_dir_all(&common.out)?;
    let ced_path = common.out.join("ced.csv");
    std::fs::write(&ced_path, ced_table(&summary))?;
    println!("wrote CED table to {}", ced_path.display());

    if calibrate_tau {
        let (tau, f1, n) = calibrate(&model, &manifest, stage, cfg.tta)?;
        println!("calibrated visibility tau = {tau} (F1 {f1:.4} over {n} landmarks)");
    }
    Ok(())
}

fn ced_table(summary: &EvalSummary) -> String {
    let mut csv = String::from("threshold,fraction\n");
    for (t, f) in &summary.ced {
        let _ = writeln!(csv, "{t},{f}");
    }
    csv
}

/// Sweep visibility thresholds over every landmark of the set and return
/// the F1-best `(tau, f1, landmarks)`.
fn calibrate<F: Scalar>(
    model: &PCDModel<F>,
    manifest: &DatasetManifest,
    stage: Stage,
    tta: bool,
) -> Result<(f64, f64, usize)> {
    let mut confidences = Vec::new();
    let mut gt_visible = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        let image = manifest.load_image::<F>(i)?;
        let (probs, _) = match tta {
            true => tta_probs(model, &image, stage)?,
            false => forward_probs(model, &image, stage)?,
        };
        // The threshold argument only gates the visibility call, not the
        // reported confidence; 0.5 is a placeholder.
        for (lm, gt) in decode_heatmaps(&probs, 0.5)?.iter().zip(&rec.landmarks) {
            confidences.push(lm.confidence);
            gt_visible.push(gt.visible);
        }
    }
    let taus: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let (tau, f1) = best_visibility_tau(&confidences, &gt_visible, &taus);
    Ok((tau, f1, confidences.len()))
}

// ------------------------------------------------------------ gradcheck --

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let start = std::time::Instant::now();
    let checks = gradient_suite(seed)?;
    for c in &checks {
        println!("{}: {}", c.name, c.report);
    }
    let ok = suite_passed(&checks);
    println!(
        "gradient suite: {} ({} checks, seed {seed}, {:.2}s)",
        if ok { "PASS" } else { "FAIL" },
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if !ok {
        return Err(Error::numeric("gradient suite failed"));
    }
    Ok(())
}

// ----------------------------------------------------------------- plot --

fn cmd_plot(common: &Common, tables: &[PathBuf], labels: Option<String>) -> Result<()> {
    let labels: Vec<String> = match labels {
        Some(s) => {
            let parts: Vec<String> = s.split(',').map(|p| p.trim().to_string()).collect();
            if parts.len() != tables.len() {
                return Err(Error::config(format!(
                    "{} labels for {} tables",
                    parts.len(),
                    tables.len()
                )));
            }
            parts
        }
        None => tables
            .iter()
            .map(|p| p.file_stem().map_or("curve".into(), |s| s.to_string_lossy().into_owned()))
            .collect(),
    };
    let mut curves = Vec::new();
    for (path, label) in tables.iter().zip(labels) {
        curves.push((label, read_ced_table(path)?));
    }
    std::fs::create_dir_all(&common.out)?;
    let svg_path = common.out.join("ced.svg");
    std::fs::write(&svg_path, ced_svg(&curves))?;
    println!("wrote {} curves to {}", curves.len(), svg_path.display());
    Ok(())
}

fn read_ced_table(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("threshold,fraction") {
        return Err(Error::data(format!(
            "{}: expected header 'threshold,fraction'",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t, f) = line
            .split_once(',')
            .ok_or_else(|| Error::data(format!("{}: bad row {}", path.display(), i + 2)))?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::data(format!("{}: bad number in row {}", path.display(), i + 2)))
        };
        rows.push((parse(t)?, parse(f)?));
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Render labeled CED curves as a self-contained SVG: axes with ticks, one
/// polyline per curve, and a legend in the upper-left free corner.
fn ced_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 440.0);
    let (left, right, top, bottom) = (72.0, 612.0, 22.0, 384.0);
    let x_max = curves
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.0))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let x = |t: f64| left + t / x_max * (right - left);
    let y = |f: f64| bottom - f * (bottom - top);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"##
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="white"/>"##);

    // Grid and ticks: five x divisions, four y divisions.
    for i in 0..=5 {
        let t = x_max * i as f64 / 5.0;
        let px = x(t);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{top}" x2="{px:.1}" y2="{bottom}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            s,
            r##"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{t:.3}</text>"##,
            bottom + 18.0
        );
    }
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let py = y(f);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{right}" y2="{py:.1}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{f:.2}</text>"##,
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"##
    );
    let _ =
        writeln!(s, r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"##);
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">normalized error threshold</text>"##,
        (left + right) / 2.0,
        bottom + 40.0
    );
    let _ = writeln!(
        s,
        r##"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">fraction of images</text>"##,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );

    for (ci, (label, rows)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let points: Vec<String> =
            rows.iter().map(|&(t, f)| format!("{:.1},{:.1}", x(t), y(f))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"##,
            points.join(" ")
        );
        let ly = top + 16.0 + ci as f64 * 18.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2.5"/>"##,
            left + 14.0,
            left + 42.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}">{}</text>"##,
            left + 48.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
