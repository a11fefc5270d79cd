//! Synthetic face-like sample generation.
//!
//! Each sample rotates the canonical head template by a random pose, weak-
//! perspective projects it, and renders a colored Gaussian blob per visible
//! landmark over a soft background. A global shading gradient tied to yaw
//! and pitch makes pose recoverable from appearance alone, and blob colors
//! are mirror-symmetric so a horizontal flip produces a plausible face of
//! the opposite yaw. Landmarks whose rotated surface normal faces away
//! from the camera are self-occluded and annotated invisible.

use super::{head_template, mat_apply, rotation_matrix, Landmark, LandmarkAnnotation};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator configuration. Pose ranges are degrees; defaults keep yaw
/// dominant (profile-to-profile) with moderate pitch and roll, inside the
/// head-pose envelope the model's normalized targets assume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    /// Gaussian blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Additive uniform noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            yaw_range: (-90.0, 90.0),
            pitch_range: (-30.0, 30.0),
            roll_range: (-30.0, 30.0),
            blob_sigma: 1.6,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::config("image size must be at least 32"));
        }
        let ranges = [
            ("yaw", self.yaw_range, 120.0),
            ("pitch", self.pitch_range, 90.0),
            ("roll", self.roll_range, 90.0),
        ];
        for (name, (lo, hi), cap) in ranges {
            if lo > hi {
                return Err(Error::config(format!("{name} range is inverted")));
            }
            if lo < -cap || hi > cap {
                return Err(Error::config(format!(
                    "{name} range exceeds the ±{cap}° envelope"
                )));
            }
        }
        if self.blob_sigma <= 0.0 {
            return Err(Error::config("blob sigma must be positive"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise level cannot be negative"));
        }
        Ok(())
    }
}

/// Mirror-symmetric landmark colors: each left/right pair shares a color
/// (as a real face does), distinct across facial structures.
const PALETTE: [[f64; 3]; 21] = [
    [0.85, 0.35, 0.10], // brow outer
    [0.95, 0.75, 0.10], // brow center
    [0.60, 0.85, 0.15], // brow inner
    [0.60, 0.85, 0.15],
    [0.95, 0.75, 0.10],
    [0.85, 0.35, 0.10],
    [0.10, 0.80, 0.80], // eye outer
    [0.15, 0.35, 0.95], // eye center
    [0.45, 0.15, 0.90], // eye inner
    [0.45, 0.15, 0.90],
    [0.15, 0.35, 0.95],
    [0.10, 0.80, 0.80],
    [0.90, 0.10, 0.55], // ear
    [0.10, 0.65, 0.30], // nose side
    [0.95, 0.15, 0.15], // nose center
    [0.10, 0.65, 0.30],
    [0.90, 0.10, 0.55],
    [0.80, 0.55, 0.85], // mouth corner
    [0.55, 0.30, 0.10], // mouth center
    [0.80, 0.55, 0.85],
    [0.75, 0.85, 0.95], // chin
];

/// Deterministically render sample `index` of the stream `cfg.seed`.
/// Annotation coordinates, pose, and box are written at fixed (0.01)
/// precision so manifests round-trip exactly.
pub fn synth_sample<F: Scalar>(
    cfg: &SynthConfig,
    index: u64,
) -> Result<(Tensor<F>, LandmarkAnnotation)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let size = cfg.image_size;
    let sizef = size as f64;

    let unif = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let yaw = unif(&mut rng, cfg.yaw_range);
    let pitch = unif(&mut rng, cfg.pitch_range);
    let roll = unif(&mut rng, cfg.roll_range);
    let rot = rotation_matrix(yaw, pitch, roll);

    let scale = 0.36 * sizef * (1.0 + 0.05 * rng.gen_range(-1.0..1.0));
    let cx = sizef / 2.0 + rng.gen_range(-2.0..2.0);
    let cy = sizef / 2.0 + rng.gen_range(-2.0..2.0);

    let template = head_template();
    let round2 = |v: f64| (v * 100.0).round() / 100.0;
    let mut landmarks = Vec::with_capacity(template.len());
    let mut exact = Vec::with_capacity(template.len());
    let (mut min_u, mut max_u, mut min_v, mut max_v) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for tp in template {
        let p = mat_apply(&rot, tp.pos);
        let n = mat_apply(&rot, tp.normal);
        let u = cx + scale * p[0];
        let v = cy - scale * p[1];
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
        exact.push((u, v));
        landmarks.push(Landmark { x: round2(u), y: round2(v), visible: n[2] >= 0.0 });
    }
    let pad = 0.12;
    let (bw, bh) = (max_u - min_u, max_v - min_v);
    let bbox = (
        round2(min_u - pad * bw),
        round2(min_v - pad * bh),
        round2(bw * (1.0 + 2.0 * pad)),
        round2(bh * (1.0 + 2.0 * pad)),
    );

    // Per-channel background basis and per-landmark blob amplitudes are
    // drawn before the pixel loop so the draw order is layout-independent.
    let mut base = [[0.0f64; 3]; 3]; // per channel: level, x-gradient, y-gradient
    for ch in base.iter_mut() {
        ch[0] = 0.30 + 0.10 * rng.gen_range(0.0..1.0);
        ch[1] = 0.15 * rng.gen_range(-1.0..1.0);
        ch[2] = 0.15 * rng.gen_range(-1.0..1.0);
    }
    let amps: Vec<f64> = (0..template.len()).map(|_| 0.50 + 0.15 * rng.gen_range(0.0..1.0)).collect();

    let mut img = vec![0.0f64; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            let yn = (y as f64 + 0.5) / sizef - 0.5;
            for x in 0..size {
                let xn = (x as f64 + 0.5) / sizef - 0.5;
                img[(c * size + y) * size + x] = base[c][0] + base[c][1] * xn + base[c][2] * yn;
            }
        }
    }

    let sigma = cfg.blob_sigma * scale / (0.36 * sizef);
    let reach = (4.0 * sigma).ceil() as isize;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (k, &(u, v)) in exact.iter().enumerate() {
        if !landmarks[k].visible {
            continue;
        }
        let (ui, vi) = (u.round() as isize, v.round() as isize);
        for y in (vi - reach).max(0)..=(vi + reach).min(size as isize - 1) {
            for x in (ui - reach).max(0)..=(ui + reach).min(size as isize - 1) {
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                let w = amps[k] * (-d2 * inv2s2).exp();
                for c in 0..3 {
                    img[(c as usize * size + y as usize) * size + x as usize] +=
                        w * PALETTE[k][c as usize];
                }
            }
        }
    }

    // Pose-tied shading: brightness tilts horizontally with yaw and
    // vertically with pitch. The yaw term negates exactly under a
    // horizontal mirror, matching the flipped pose annotation.
    let (syaw, spitch) = (yaw.to_radians().sin(), pitch.to_radians().sin());
    let mut data: Vec<F> = Vec::with_capacity(img.len());
    for c in 0..3 {
        for y in 0..size {
            let yn = (y as f64 + 0.5) / sizef - 0.5;
            for x in 0..size {
                let xn = (x as f64 + 0.5) / sizef - 0.5;
                let shade = 1.0 + 0.45 * syaw * xn + 0.30 * spitch * yn;
                let v = img[(c * size + y) * size + x] * shade + cfg.noise * rng.gen_range(-1.0..1.0);
                data.push(sc(v.clamp(0.0, 1.0)));
            }
        }
    }

    let ann = LandmarkAnnotation {
        image: format!("synth:{}:{}", cfg.seed, index),
        bbox,
        pose: (round2(yaw), round2(pitch), round2(roll)),
        landmarks,
    };
    Ok((Tensor::from_vec(&[3, size, size], data)?, ann))
}
