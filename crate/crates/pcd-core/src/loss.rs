//! Training losses: masked softmax classification over heatmap logits with
//! its pixel-sampling mask, Euclidean pose regression, and class-weighted
//! visibility regression.
//!
//! The classification loss reads only a sparse pixel mask: every positive
//! (landmark) pixel, half of the pooled 4-neighborhood around positives,
//! and a small random draw of the remaining background. Gradients vanish
//! exactly at unmasked pixels.

use crate::error::{Error, Result};
use crate::tensor::{sc, Graph, MaskEntry, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Floor on the number of background pixels drawn into a mask. At small
/// resolutions the proportional draw rounds to ~1 pixel, too few to learn
/// the background class.
pub const MIN_BG: usize = 16;
/// Fraction of the pooled neighbor set kept (floored).
pub const NEIGHBOR_KEEP: f64 = 0.5;
/// Fraction of remaining background pixels drawn (rounded).
pub const BG_FRACTION: f64 = 0.00025;

/// Per-pixel class assignment: classes `0..n` are landmarks, `n` is
/// background. Each landmark occupies at most one pixel; invisible
/// landmarks are absent (background everywhere).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    n: usize,
    classes: Vec<u16>,
}

impl LabelMap {
    /// All-background map.
    pub fn background(h: usize, w: usize, n: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::config("label map must be non-empty"));
        }
        if n + 1 > u16::MAX as usize {
            return Err(Error::config("too many landmark classes"));
        }
        Ok(LabelMap { h, w, n, classes: vec![n as u16; h * w] })
    }

    /// Build from per-landmark pixel positions (`None` = invisible).
    /// Two landmarks on the same pixel is a data error; resolve collisions
    /// upstream before building the map.
    pub fn from_points(h: usize, w: usize, points: &[Option<(usize, usize)>]) -> Result<Self> {
        let mut map = Self::background(h, w, points.len())?;
        for (k, pt) in points.iter().enumerate() {
            if let Some((y, x)) = *pt {
                if y >= h || x >= w {
                    return Err(Error::data(format!(
                        "landmark {k} at ({y},{x}) outside {h}x{w} map"
                    )));
                }
                let idx = y * w + x;
                if map.classes[idx] != map.n as u16 {
                    return Err(Error::data(format!(
                        "landmarks {} and {k} collide at pixel ({y},{x})",
                        map.classes[idx]
                    )));
                }
                map.classes[idx] = k as u16;
            }
        }
        Ok(map)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Landmark class count (background excluded).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn background_class(&self) -> usize {
        self.n
    }

    pub fn class_at(&self, y: usize, x: usize) -> usize {
        self.classes[y * self.w + x] as usize
    }

    /// Landmark pixels as (class, y, x), in class order.
    pub fn positives(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = self
            .classes
            .iter()
            .enumerate()
            .filter(|&(_, &c)| (c as usize) < self.n)
            .map(|(i, &c)| (c as usize, i / self.w, i % self.w))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Boolean pixel mask drawn for one label map; remembers the seed that
/// produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    h: usize,
    w: usize,
    seed: u64,
    selected: Vec<bool>,
}

impl LossMask {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_selected(&self, y: usize, x: usize) -> bool {
        self.selected[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Selected pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.selected
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s)
            .map(move |(i, _)| (i / self.w, i % self.w))
    }
}

/// Keep the first `k` elements of a Fisher-Yates partial shuffle; the
/// order of `pool` must already be deterministic.
fn draw_without_replacement(pool: &mut Vec<usize>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Draw the training-pixel mask for one label map. Deterministic for a
/// given (labels, seed) pair. Selects every positive pixel, a floored 50%
/// of the pooled in-bounds 4-neighborhood of the positives (positives
/// excluded from the pool), and `max(MIN_BG, round(0.025% of it))` of the
/// background that remains after removing the whole neighbor pool.
pub fn build_mask(labels: &LabelMap, seed: u64) -> LossMask {
    let (h, w) = (labels.h, labels.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut role = vec![0u8; h * w]; // 0 bg pool, 1 positive, 2 neighbor pool
    for (_, y, x) in labels.positives() {
        role[y * w + x] = 1;
    }
    let mut neighbor_pool: Vec<usize> = Vec::new();
    for (_, y, x) in labels.positives() {
        let push = |yy: isize, xx: isize, pool: &mut Vec<usize>, role: &mut [u8]| {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                let idx = yy as usize * w + xx as usize;
                if role[idx] == 0 {
                    role[idx] = 2;
                    pool.push(idx);
                }
            }
        };
        let (y, x) = (y as isize, x as isize);
        push(y - 1, x, &mut neighbor_pool, &mut role);
        push(y + 1, x, &mut neighbor_pool, &mut role);
        push(y, x - 1, &mut neighbor_pool, &mut role);
        push(y, x + 1, &mut neighbor_pool, &mut role);
    }
    neighbor_pool.sort_unstable();

    let mut selected = vec![false; h * w];
    for (i, &r) in role.iter().enumerate() {
        if r == 1 {
            selected[i] = true;
        }
    }
    let k_nbr = (NEIGHBOR_KEEP * neighbor_pool.len() as f64).floor() as usize;
    for i in draw_without_replacement(&mut neighbor_pool, k_nbr, &mut rng) {
        selected[i] = true;
    }

    let mut bg_pool: Vec<usize> =
        (0..h * w).filter(|&i| role[i] == 0).collect();
    let k_bg = ((BG_FRACTION * bg_pool.len() as f64).round() as usize).max(MIN_BG);
    for i in draw_without_replacement(&mut bg_pool, k_bg, &mut rng) {
        selected[i] = true;
    }

    LossMask { h, w, seed, selected }
}

/// Masked pixels of one sample as graph mask entries, carrying each
/// pixel's class from the label map.
pub fn mask_entries(labels: &LabelMap, mask: &LossMask, b: usize) -> Result<Vec<MaskEntry>> {
    if (labels.h, labels.w) != (mask.h, mask.w) {
        return Err(Error::config(format!(
            "label map {}x{} vs mask {}x{}",
            labels.h, labels.w, mask.h, mask.w
        )));
    }
    Ok(mask
        .pixels()
        .map(|(y, x)| MaskEntry { b, y, x, class: labels.class_at(y, x) })
        .collect())
}

/// Masked softmax cross-entropy over one sample's heatmap logits
/// `[1, N+1, H, W]`: mean over masked pixels of −log softmax at the
/// pixel's class. Gradients are exactly zero at unmasked pixels.
pub fn mask_softmax_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    labels: &LabelMap,
    mask: &LossMask,
) -> Result<Var> {
    let (b, c, h, w) = g.value(logits).dims4()?;
    if b != 1 {
        return Err(Error::config("mask_softmax_loss takes a single sample; batch via mask_entries"));
    }
    if c != labels.n + 1 || h != labels.h || w != labels.w {
        return Err(Error::config(format!(
            "logits [{},{},{}] do not match a {}-class {}x{} label map",
            c, h, w, labels.n, labels.h, labels.w
        )));
    }
    let entries = mask_entries(labels, mask, 0)?;
    g.masked_cross_entropy(logits, &entries)
}

/// Euclidean pose loss `½‖pred − target‖²` with its gradient
/// `pred − target`. Inputs are 3-vectors in normalized units.
pub fn pose_euclidean_loss<F: Scalar>(pred: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if pred.len() != 3 || target.len() != 3 {
        return Err(Error::config("pose vectors have 3 components"));
    }
    let grad: Vec<F> = pred.iter().zip(target).map(|(&p, &t)| p - t).collect();
    let half = sc::<F>(0.5);
    let loss = grad.iter().map(|&d| d * d).sum::<F>() * half;
    Ok((loss, grad))
}

/// Class-weighted visibility regression: visible ground truth weighs
/// 0.23, invisible 0.77 (the observed class frequencies, inverted onto
/// the minority class). Returns the loss and its gradient in the
/// predictions.
pub fn visibility_weighted_loss<F: Scalar>(pred: &[F], gt: &[F]) -> Result<(F, Vec<F>)> {
    if pred.len() != gt.len() {
        return Err(Error::config(format!(
            "visibility vectors differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (w_vis, w_inv) = (sc::<F>(0.23), sc::<F>(0.77));
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        if g != F::zero() && g != F::one() {
            return Err(Error::config("ground-truth visibility must be 0 or 1"));
        }
        let wgt = if g == F::one() { w_vis } else { w_inv };
        let d = p - g;
        loss = loss + wgt * d * d;
        grad.push(sc::<F>(2.0) * wgt * d);
    }
    Ok((loss, grad))
}

/// Per-landmark weights for driving the visibility loss through the
/// graph's weighted sum-of-squares op.
pub fn visibility_weights<F: Scalar>(gt: &[F]) -> Result<Vec<F>> {
    gt.iter()
        .map(|&g| {
            if g == F::one() {
                Ok(sc::<F>(0.23))
            } else if g == F::zero() {
                Ok(sc::<F>(0.77))
            } else {
                Err(Error::config("ground-truth visibility must be 0 or 1"))
            }
        })
        .collect()
}
