//! Train-time augmentation: crop, horizontal flip, in-plane rotation.
//!
//! All three steps compose into one affine map; the image is resampled
//! bilinearly through the inverse map (edge-clamped) and landmark
//! coordinates go through the forward map. A flip permutes landmark
//! identities with the tree's flip permutation and negates yaw and roll;
//! an in-plane rotation by β subtracts β from roll. Landmarks pushed out
//! of frame become invisible; invisible landmarks never return.

use super::{Landmark, LandmarkAnnotation};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};
use crate::tree::DendriticTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One concrete augmentation. `crop_ox`/`crop_oy` position the crop window
/// within the available slack as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop_scale: f64,
    pub crop_ox: f64,
    pub crop_oy: f64,
    pub flip: bool,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { crop_scale: 1.0, crop_ox: 0.0, crop_oy: 0.0, flip: false, rotation_deg: 0.0 }
    }

    /// Flip only; crop and rotation stay neutral.
    pub fn flip_only() -> Self {
        AugmentParams { flip: true, ..Self::identity() }
    }

    fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.crop_scale) {
            return Err(Error::config("crop scale must lie in [0.5, 1.0]"));
        }
        if !(0.0..=1.0).contains(&self.crop_ox) || !(0.0..=1.0).contains(&self.crop_oy) {
            return Err(Error::config("crop offsets are fractions in [0, 1]"));
        }
        Ok(())
    }
}

/// 2D affine map `p ↦ A·p + t` over pixel-index coordinates.
#[derive(Debug, Clone, Copy)]
struct Affine {
    a: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn identity() -> Self {
        Affine { a: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    /// self ∘ inner (inner runs first).
    fn after(&self, inner: &Affine) -> Affine {
        let mut a = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                a[i][j] = self.a[i][0] * inner.a[0][j] + self.a[i][1] * inner.a[1][j];
            }
        }
        let t = self.apply(inner.t);
        Affine { a, t }
    }

    fn inverse(&self) -> Affine {
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Affine { a: inv, t }
    }
}

/// Apply a fixed augmentation to an image/annotation pair.
pub fn augment_with<F: Scalar>(
    image: &Tensor<F>,
    ann: &LandmarkAnnotation,
    tree: &DendriticTree,
    params: &AugmentParams,
) -> Result<(Tensor<F>, LandmarkAnnotation)> {
    params.validate()?;
    let shape = image.shape();
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::config(format!("augment expects [C,H,W], got {shape:?}"))),
    };
    if ann.landmarks.len() != tree.n() {
        return Err(Error::config(format!(
            "annotation has {} landmarks, tree needs {}",
            ann.landmarks.len(),
            tree.n()
        )));
    }
    let (wf, hf) = (w as f64, h as f64);

    // Forward map: crop, then flip, then rotation about the image center.
    let side_x = params.crop_scale * wf;
    let side_y = params.crop_scale * hf;
    let ox = params.crop_ox * (wf - side_x);
    let oy = params.crop_oy * (hf - side_y);
    let s = 1.0 / params.crop_scale;
    let crop = Affine { a: [[s, 0.0], [0.0, s]], t: [(0.5 - ox) * s - 0.5, (0.5 - oy) * s - 0.5] };

    let flip = if params.flip {
        Affine { a: [[-1.0, 0.0], [0.0, 1.0]], t: [wf - 1.0, 0.0] }
    } else {
        Affine::identity()
    };

    let (sb, cb) = params.rotation_deg.to_radians().sin_cos();
    let (ccx, ccy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
    let rot = Affine {
        a: [[cb, -sb], [sb, cb]],
        t: [ccx - cb * ccx + sb * ccy, ccy - sb * ccx - cb * ccy],
    };

    let fwd = rot.after(&flip.after(&crop));
    let inv = fwd.inverse();

    // Resample the image through the inverse map, edge-clamped bilinear.
    let mut out: Vec<F> = Vec::with_capacity(c * h * w);
    let src = image.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = inv.apply([x as f64, y as f64]);
                let fx = p[0].clamp(0.0, wf - 1.0);
                let fy = p[1].clamp(0.0, hf - 1.0);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let v00: f64 = num_traits::cast(plane[y0 * w + x0]).unwrap_or(0.0);
                let v01: f64 = num_traits::cast(plane[y0 * w + x1]).unwrap_or(0.0);
                let v10: f64 = num_traits::cast(plane[y1 * w + x0]).unwrap_or(0.0);
                let v11: f64 = num_traits::cast(plane[y1 * w + x1]).unwrap_or(0.0);
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v01 * tx * (1.0 - ty)
                    + v10 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                out.push(sc(v));
            }
        }
    }
    let out_img = Tensor::from_vec(&[c, h, w], out)?;

    // Landmarks: optional identity permutation swap, then the coordinate
    // map, then visibility against the frame.
    let n = tree.n();
    let mut landmarks = Vec::with_capacity(n);
    for k in 0..n {
        let src_k = if params.flip { tree.flip()[k] } else { k };
        let lm = ann.landmarks[src_k];
        let p = fwd.apply([lm.x, lm.y]);
        let in_frame = p[0].round() >= 0.0
            && p[1].round() >= 0.0
            && p[0].round() < wf
            && p[1].round() < hf;
        landmarks.push(Landmark { x: p[0], y: p[1], visible: lm.visible && in_frame });
    }

    // Face box: axis-aligned hull of the transformed corners.
    let (bx, by, bw, bh) = ann.bbox;
    let corners = [
        fwd.apply([bx, by]),
        fwd.apply([bx + bw, by]),
        fwd.apply([bx, by + bh]),
        fwd.apply([bx + bw, by + bh]),
    ];
    let min_x = corners.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);

    let (yaw, pitch, roll) = ann.pose;
    let (yaw, roll) = if params.flip { (-yaw, -roll) } else { (yaw, roll) };
    let roll = roll - params.rotation_deg;

    let out_ann = LandmarkAnnotation {
        image: ann.image.clone(),
        bbox: (min_x, min_y, max_x - min_x, max_y - min_y),
        pose: (yaw, pitch, roll),
        landmarks,
    };
    Ok((out_img, out_ann))
}

/// Sample and apply a random augmentation: crop scale 0.9–1.0 at a random
/// position, flip with probability ½, rotation within ±20°. Deterministic
/// per seed.
pub fn augment<F: Scalar>(
    image: &Tensor<F>,
    ann: &LandmarkAnnotation,
    tree: &DendriticTree,
    seed: u64,
) -> Result<(Tensor<F>, LandmarkAnnotation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams {
        crop_scale: rng.gen_range(0.9..1.0),
        crop_ox: rng.gen_range(0.0..1.0),
        crop_oy: rng.gen_range(0.0..1.0),
        flip: rng.gen_bool(0.5),
        rotation_deg: rng.gen_range(-20.0..20.0),
    };
    augment_with(image, ann, tree, &params)
}
