//! Dataset plumbing: landmark annotations, line-delimited dataset
//! manifests, the canonical 3D head template, synthetic sample generation,
//! label rasterization, and train-time augmentation.

mod augment;
mod raster;
mod synth;

pub use augment::{augment, augment_with, AugmentParams};
pub use raster::rasterize_labels;
pub use synth::{synth_sample, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

/// One landmark observation in pixel coordinates. Invisible landmarks keep
/// their (projected or stale) coordinates; consumers must gate on the flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Ground truth for one face image: where it is, how the head is oriented,
/// and where each landmark sits.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkAnnotation {
    /// Image reference: a file path or a `synth:<seed>:<index>` virtual id.
    pub image: String,
    /// Face box `(x, y, w, h)` in pixels.
    pub bbox: (f64, f64, f64, f64),
    /// `(yaw, pitch, roll)` in degrees.
    pub pose: (f64, f64, f64),
    pub landmarks: Vec<Landmark>,
}

impl LandmarkAnnotation {
    pub fn visible_count(&self) -> usize {
        self.landmarks.iter().filter(|l| l.visible).count()
    }

    /// Ground-truth visibility as a 0/1 vector.
    pub fn visibility_vector<F: Scalar>(&self) -> Vec<F> {
        self.landmarks
            .iter()
            .map(|l| if l.visible { F::one() } else { F::zero() })
            .collect()
    }
}

/// Pose targets in normalized units: yaw scaled by its wider range.
pub fn normalize_pose_degrees(yaw: f64, pitch: f64, roll: f64) -> [f64; 3] {
    [yaw / 120.0, pitch / 90.0, roll / 90.0]
}

/// Inverse of [`normalize_pose_degrees`].
pub fn denormalize_pose(p: [f64; 3]) -> (f64, f64, f64) {
    (p[0] * 120.0, p[1] * 90.0, p[2] * 90.0)
}

// ---- manifest ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireHeader {
    tree: String,
    image_size: usize,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthConfig>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    image: String,
    bbox: [f64; 4],
    pose: [f64; 3],
    landmarks: Vec<[f64; 3]>,
}

impl From<&LandmarkAnnotation> for WireRecord {
    fn from(a: &LandmarkAnnotation) -> Self {
        WireRecord {
            image: a.image.clone(),
            bbox: [a.bbox.0, a.bbox.1, a.bbox.2, a.bbox.3],
            pose: [a.pose.0, a.pose.1, a.pose.2],
            landmarks: a
                .landmarks
                .iter()
                .map(|l| [l.x, l.y, if l.visible { 1.0 } else { 0.0 }])
                .collect(),
        }
    }
}

impl From<WireRecord> for LandmarkAnnotation {
    fn from(w: WireRecord) -> Self {
        LandmarkAnnotation {
            image: w.image,
            bbox: (w.bbox[0], w.bbox[1], w.bbox[2], w.bbox[3]),
            pose: (w.pose[0], w.pose[1], w.pose[2]),
            landmarks: w
                .landmarks
                .into_iter()
                .map(|l| Landmark { x: l[0], y: l[1], visible: l[2] != 0.0 })
                .collect(),
        }
    }
}

/// An ordered dataset: a tree name, the common image size, and one
/// annotation per record. Synthetic datasets carry their generator config
/// so `synth:` image references can be re-rendered on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub tree: String,
    pub image_size: usize,
    pub synth: Option<SynthConfig>,
    pub records: Vec<LandmarkAnnotation>,
}

impl DatasetManifest {
    /// Write as line-delimited records under a one-line header.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = WireHeader {
            tree: self.tree.clone(),
            image_size: self.image_size,
            count: self.records.len(),
            synth: self.synth.clone(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", serde_json::to_string(&header).map_err(enc_err)?)?;
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(&WireRecord::from(r)).map_err(enc_err)?)?;
        }
        Ok(())
    }

    /// Read and validate a manifest: record count matches the header,
    /// landmark counts match the named tree, boxes are positive, visible
    /// landmarks round into the image, and referenced image files exist
    /// (synth references are validated against the embedded generator).
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::data("manifest is empty"))??;
        let header: WireHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::data(format!("header: {e}")))?;
        let tree = crate::tree::DendriticTree::by_name(&header.tree)?;
        if let Some(cfg) = &header.synth {
            if cfg.image_size != header.image_size {
                return Err(Error::data("generator image size disagrees with manifest header"));
            }
        }
        let mut records = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let w: WireRecord = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("record {i}: {e}")))?;
            let ann = LandmarkAnnotation::from(w);
            validate_record(&ann, i, tree.n(), header.image_size, header.synth.as_ref(), path)?;
            records.push(ann);
        }
        if records.len() != header.count {
            return Err(Error::data(format!(
                "header promises {} records, found {}",
                header.count,
                records.len()
            )));
        }
        Ok(DatasetManifest {
            tree: header.tree,
            image_size: header.image_size,
            synth: header.synth,
            records,
        })
    }

    /// Render or load the image tensor for one record. Synthetic references
    /// re-render deterministically; external files are not decoded here.
    pub fn load_image<F: Scalar>(&self, idx: usize) -> Result<Tensor<F>> {
        let rec = self
            .records
            .get(idx)
            .ok_or_else(|| Error::config(format!("record {idx} out of range")))?;
        match parse_synth_ref(&rec.image) {
            Some((seed, index)) => {
                let cfg = self.synth.as_ref().ok_or_else(|| {
                    Error::data("synthetic reference in a manifest without a generator config")
                })?;
                if seed != cfg.seed {
                    return Err(Error::data(format!(
                        "record {idx} names seed {seed}, generator uses {}",
                        cfg.seed
                    )));
                }
                let (img, _) = synth_sample::<F>(cfg, index)?;
                Ok(img)
            }
            None => Err(Error::data(format!(
                "record {idx} references external image '{}'; only synthetic references render",
                rec.image
            ))),
        }
    }
}

fn enc_err(e: serde_json::Error) -> Error {
    Error::data(format!("manifest encode: {e}"))
}

fn validate_record(
    ann: &LandmarkAnnotation,
    i: usize,
    n: usize,
    image_size: usize,
    synth: Option<&SynthConfig>,
    manifest_path: &Path,
) -> Result<()> {
    if ann.landmarks.len() != n {
        return Err(Error::data(format!(
            "record {i} has {} landmarks, tree needs {n}",
            ann.landmarks.len()
        )));
    }
    if ann.bbox.2 <= 0.0 || ann.bbox.3 <= 0.0 {
        return Err(Error::data(format!("record {i} has a degenerate face box")));
    }
    for (k, lm) in ann.landmarks.iter().enumerate() {
        if lm.visible {
            let (px, py) = (lm.x.round(), lm.y.round());
            if px < 0.0 || py < 0.0 || px >= image_size as f64 || py >= image_size as f64 {
                return Err(Error::data(format!(
                    "record {i}: visible landmark {k} at ({}, {}) leaves the {image_size}px image",
                    lm.x, lm.y
                )));
            }
        }
    }
    match parse_synth_ref(&ann.image) {
        Some((seed, _)) => {
            let cfg = synth.ok_or_else(|| {
                Error::data(format!("record {i} is synthetic but the manifest has no generator"))
            })?;
            if seed != cfg.seed {
                return Err(Error::data(format!("record {i} seed mismatch")));
            }
        }
        None => {
            // External reference: resolve relative to the manifest.
            let p = Path::new(&ann.image);
            let full = if p.is_absolute() {
                p.to_path_buf()
            } else {
                manifest_path.parent().unwrap_or(Path::new(".")).join(p)
            };
            if !full.exists() {
                return Err(Error::data(format!(
                    "record {i} references missing image '{}'",
                    ann.image
                )));
            }
        }
    }
    Ok(())
}

/// Parse a `synth:<seed>:<index>` reference.
pub fn parse_synth_ref(image: &str) -> Option<(u64, u64)> {
    let rest = image.strip_prefix("synth:")?;
    let (seed, index) = rest.split_once(':')?;
    Some((seed.parse().ok()?, index.parse().ok()?))
}

// ---- head template -------------------------------------------------------

/// One template landmark: canonical position and outward surface normal.
#[derive(Debug, Clone)]
pub struct TemplatePoint {
    pub name: String,
    pub pos: [f64; 3],
    pub normal: [f64; 3],
}

static TEMPLATE: OnceLock<Vec<TemplatePoint>> = OnceLock::new();

/// The canonical 21-point head template (see `data/template_aflw21.txt`).
pub fn head_template() -> &'static [TemplatePoint] {
    TEMPLATE.get_or_init(|| {
        parse_template(include_str!("../../data/template_aflw21.txt"))
            .expect("shipped template parses")
    })
}

fn parse_template(text: &str) -> Result<Vec<TemplatePoint>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(Error::data(format!("template line {}: want 7 fields", ln + 1)));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::data(format!("template line {}: bad number '{s}'", ln + 1)))
        };
        out.push(TemplatePoint {
            name: parts[0].to_string(),
            pos: [f(parts[1])?, f(parts[2])?, f(parts[3])?],
            normal: [f(parts[4])?, f(parts[5])?, f(parts[6])?],
        });
    }
    Ok(out)
}

/// Row-major 3×3 rotation from yaw/pitch/roll in degrees: roll about the
/// camera axis, applied after pitch (x-axis), applied after yaw (y-axis).
pub fn rotation_matrix(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sx, cx) = pitch_deg.to_radians().sin_cos();
    let (sz, cz) = roll_deg.to_radians().sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&rx, &ry))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn mat_apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[cfg(test)]
mod tests;
