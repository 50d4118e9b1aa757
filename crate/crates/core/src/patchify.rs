//! Shifted patchify: two positive views per image built from the same patch
//! grid, each patch independently augmented and then translated inside its
//! own window in one of eight directions with zero fill.
//!
//! Patch `j` of the query view and patch `j` of the key view form a positive
//! pair. The mask plan decides which patches the query encoder never sees.

use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PatchGrid;

/// The eight compass directions a patch's content can move in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    E,
    W,
    N,
    S,
    NE,
    NW,
    SE,
    SW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::E,
        Direction::W,
        Direction::N,
        Direction::S,
        Direction::NE,
        Direction::NW,
        Direction::SE,
        Direction::SW,
    ];

    /// Unit step `(dx, dy)`; `+x` is right, `+y` is down.
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::E => (1, 0),
            Direction::W => (-1, 0),
            Direction::N => (0, -1),
            Direction::S => (0, 1),
            Direction::NE => (1, -1),
            Direction::NW => (-1, -1),
            Direction::SE => (1, 1),
            Direction::SW => (-1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftVector {
    pub direction: Direction,
    pub magnitude: usize,
}

impl ShiftVector {
    pub fn identity() -> Self {
        Self { direction: Direction::E, magnitude: 0 }
    }

    /// Pixel offset `(dx, dy)` applied to the content.
    pub fn offset(&self) -> (isize, isize) {
        let (dx, dy) = self.direction.step();
        (dx * self.magnitude as isize, dy * self.magnitude as isize)
    }
}

/// One view of an image: shifted patches, the shifts used, and which pixels
/// still carry content.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedView {
    pub patches: Vec<Array3<f64>>,
    pub shifts: Vec<ShiftVector>,
    pub valid_mask: Vec<Array2<bool>>,
}

impl ShiftedView {
    /// View that is just the source patches, unshifted.
    pub fn unshifted(grid: &PatchGrid) -> Self {
        let s = grid.patch_size();
        Self {
            patches: grid.patches().to_vec(),
            shifts: vec![ShiftVector::identity(); grid.len()],
            valid_mask: vec![Array2::from_elem((s, s), true); grid.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Patch indices hidden from the query encoder, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked_indices: Vec<usize>,
    pub ratio: f64,
    pub grid_len: usize,
}

impl MaskPlan {
    pub fn none(grid_len: usize) -> Self {
        Self { masked_indices: Vec::new(), ratio: 0.0, grid_len }
    }

    pub fn masked_count(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked_indices.binary_search(&index).is_ok()
    }

    /// Indices the query encoder sees, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.grid_len).filter(|j| !self.is_masked(*j)).collect()
    }
}

/// Per-patch photometric augmentation and shift settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip.
    pub flip_probability: f64,
    /// Brightness/contrast/saturation factors are drawn from `[1 - j, 1 + j]`.
    pub color_jitter_strength: f64,
    pub blur_probability: f64,
    /// Gaussian sigma range in pixels.
    pub blur_sigma_range: (f64, f64),
    /// Largest shift magnitude. `0` turns shifting off.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            color_jitter_strength: 0.4,
            blur_probability: 0.2,
            blur_sigma_range: (0.1, 1.0),
            max_shift: 8,
        }
    }
}

impl AugmentConfig {
    /// No augmentation and no shift.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            color_jitter_strength: 0.0,
            blur_probability: 0.0,
            blur_sigma_range: (0.0, 0.0),
            max_shift: 0,
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        for (name, p) in [("flip_probability", self.flip_probability), ("blur_probability", self.blur_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.color_jitter_strength >= 0.0 && self.color_jitter_strength < 1.0) {
            return Err(Error::Config("color_jitter_strength must lie in [0, 1)".into()));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Config("blur_sigma_range must be an ordered nonnegative pair".into()));
        }
        if self.max_shift >= patch_size {
            return Err(Error::Config(format!(
                "max_shift {} must be below patch size {patch_size}",
                self.max_shift
            )));
        }
        Ok(())
    }
}

/// Draws a direction uniformly from the eight and a magnitude uniformly from
/// `[1, max_shift]`.
pub fn sample_shift<R: Rng + ?Sized>(rng: &mut R, max_shift: usize) -> Result<ShiftVector> {
    if max_shift < 1 {
        return Err(Error::Config("max_shift must be at least 1".into()));
    }
    let direction = Direction::ALL[rng.random_range(0..8)];
    let magnitude = rng.random_range(1..=max_shift);
    Ok(ShiftVector { direction, magnitude })
}

/// Translates the patch content inside its `s × s` window. Vacated pixels
/// become zero and are flagged invalid; content pushed out is dropped.
pub fn apply_shift(patch: ArrayView3<f64>, shift: ShiftVector) -> Result<(Array3<f64>, Array2<bool>)> {
    let (h, w, c) = patch.dim();
    if shift.magnitude >= h.min(w) && shift.magnitude > 0 {
        return Err(Error::Shift { magnitude: shift.magnitude, patch_size: h.min(w) });
    }
    let (dx, dy) = shift.offset();
    let mut out = Array3::zeros((h, w, c));
    let mut valid = Array2::from_elem((h, w), false);
    let ys = (dy.max(0) as usize)..((h as isize + dy.min(0)) as usize);
    let xs = (dx.max(0) as usize)..((w as isize + dx.min(0)) as usize);
    for y in ys {
        let sy = (y as isize - dy) as usize;
        for x in xs.clone() {
            let sx = (x as isize - dx) as usize;
            for ch in 0..c {
                out[[y, x, ch]] = patch[[sy, sx, ch]];
            }
            valid[[y, x]] = true;
        }
    }
    Ok((out, valid))
}

/// Mirrors a patch left to right.
pub fn hflip(patch: ArrayView3<f64>) -> Array3<f64> {
    let (h, w, c) = patch.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| patch[[y, w - 1 - x, ch]])
}

fn color_jitter(patch: &mut Array3<f64>, brightness: f64, contrast: f64, saturation: f64) {
    let (h, w, c) = patch.dim();
    patch.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    let mut gray = Array2::zeros((h, w));
    let mut px = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = patch[[y, x, ch]];
            }
            gray[[y, x]] = crate::image::luma(&px);
        }
    }
    let mean = gray.mean().unwrap_or(0.0);
    patch.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    if c >= 3 {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    px[ch] = patch[[y, x, ch]];
                }
                let g = crate::image::luma(&px);
                for ch in 0..3 {
                    patch[[y, x, ch]] = (g + (px[ch] - g) * saturation).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn gaussian_blur(patch: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return patch.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = patch.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * patch[[y, clampi(x as isize + k as isize - radius, w), ch]])
                    .sum();
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * tmp[[clampi(y as isize + k as isize - radius, h), x, ch]])
                    .sum::<f64>();
            }
        }
    }
    out
}

/// Flip, then color jitter, then blur, each by its own sampled decision.
/// Output is clamped to `[0, 1]`.
pub fn augment_patch<R: Rng + ?Sized>(patch: ArrayView3<f64>, rng: &mut R, cfg: &AugmentConfig) -> Array3<f64> {
    let mut out = if rng.random::<f64>() < cfg.flip_probability { hflip(patch) } else { patch.to_owned() };
    let j = cfg.color_jitter_strength;
    if j > 0.0 {
        let b = rng.random_range(1.0 - j..=1.0 + j);
        let c = rng.random_range(1.0 - j..=1.0 + j);
        let s = rng.random_range(1.0 - j..=1.0 + j);
        color_jitter(&mut out, b, c, s);
    }
    if rng.random::<f64>() < cfg.blur_probability {
        let (lo, hi) = cfg.blur_sigma_range;
        let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        out = gaussian_blur(&out, sigma);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

fn one_view<R: Rng + ?Sized>(grid: &PatchGrid, rng: &mut R, cfg: &AugmentConfig) -> Result<ShiftedView> {
    let mut view = ShiftedView {
        patches: Vec::with_capacity(grid.len()),
        shifts: Vec::with_capacity(grid.len()),
        valid_mask: Vec::with_capacity(grid.len()),
    };
    for patch in grid.patches() {
        let augmented = augment_patch(patch.view(), rng, cfg);
        let shift = if cfg.max_shift == 0 { ShiftVector::identity() } else { sample_shift(rng, cfg.max_shift)? };
        let (shifted, valid) = apply_shift(augmented.view(), shift)?;
        view.patches.push(shifted);
        view.shifts.push(shift);
        view.valid_mask.push(valid);
    }
    Ok(view)
}

/// Builds the query and key views from the same source grid, with
/// independent augmentation and independent shifts per patch per view.
pub fn make_views<R: Rng + ?Sized>(
    grid: &PatchGrid,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(ShiftedView, ShiftedView)> {
    cfg.validate(grid.patch_size())?;
    let q = one_view(grid, rng, cfg)?;
    let k = one_view(grid, rng, cfg)?;
    Ok((q, k))
}

/// Samples `round(ratio * G)` distinct patch indices uniformly.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, grid_len: usize, ratio: f64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * grid_len as f64).round() as usize;
    let mut masked_indices = sample(rng, grid_len, count).into_vec();
    masked_indices.sort_unstable();
    Ok(MaskPlan { masked_indices, ratio, grid_len })
}
