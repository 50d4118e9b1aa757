//! Image and patch-grid representations plus the Shannon-entropy oracle.
//!
//! Entropy is measured on the grayscale intensity histogram (luma weights
//! 0.299/0.587/0.114, equal-width bins on `[0, 1]` with the right edge folded
//! into the last bin). It supplies both the masked-entropy targets and the
//! generator self-check for the synthetic corpus.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// Default histogram resolution for entropy targets.
pub const DEFAULT_BINS: usize = 256;

/// An `H × W × C` intensity grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidInput(format!("zero-sized image {h}x{w}x{c}")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { data: Array3::zeros((height, width, channels)) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Converts to an 8-bit RGB raster (grayscale images are replicated).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, c) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.data[[y as usize, x as usize, ch.min(c - 1)]];
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self { data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Non-overlapping `s × s` patches of an image in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: Vec<Array3<f64>>,
    patch_size: usize,
    grid_rows: usize,
    grid_cols: usize,
    channels: usize,
}

impl PatchGrid {
    /// Builds a grid from already-cut patches; all must be `s × s × C`.
    pub fn from_patches(
        patches: Vec<Array3<f64>>,
        patch_size: usize,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<Self> {
        if patches.len() != grid_rows * grid_cols || patches.is_empty() {
            return Err(Error::Shape(format!(
                "{} patches for a {grid_rows}x{grid_cols} grid",
                patches.len()
            )));
        }
        let channels = patches[0].dim().2;
        if patches.iter().any(|p| p.dim() != (patch_size, patch_size, channels)) {
            return Err(Error::Shape("patches differ in shape".into()));
        }
        Ok(Self { patches, patch_size, grid_rows, grid_cols, channels })
    }

    pub fn patches(&self) -> &[Array3<f64>] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    /// Side length `P` of a square grid, if the grid is square.
    pub fn grid_side(&self) -> Option<usize> {
        (self.grid_rows == self.grid_cols).then_some(self.grid_rows)
    }

    /// `(row, col)` of patch `index` in the grid.
    pub fn origin_index(&self, index: usize) -> (usize, usize) {
        (index / self.grid_cols, index % self.grid_cols)
    }

    /// Stitches the patches back into a full image.
    pub fn reassemble(&self) -> ImageTensor {
        let s = self.patch_size;
        let mut data = Array3::zeros((self.grid_rows * s, self.grid_cols * s, self.channels));
        for (j, patch) in self.patches.iter().enumerate() {
            let (r, c) = self.origin_index(j);
            data.slice_mut(s![r * s..(r + 1) * s, c * s..(c + 1) * s, ..]).assign(patch);
        }
        ImageTensor { data }
    }
}

/// Shannon entropy of an intensity histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyValue {
    pub bits: f64,
    pub normalized: f64,
}

fn decode_rgb(path: &Path) -> Result<image::RgbImage> {
    let decode_err = |e: &dyn std::fmt::Display| Error::Decode { path: path.to_path_buf(), reason: e.to_string() };
    let decoded = image::ImageReader::open(path)
        .map_err(|e| decode_err(&e))?
        .with_guessed_format()
        .map_err(|e| decode_err(&e))?
        .decode()
        .map_err(|e| decode_err(&e))?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::InvalidInput(format!("{} has zero area", path.display())));
    }
    Ok(decoded.to_rgb8())
}

/// Decodes a raster file and resizes it to `target_size × target_size` RGB.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageTensor> {
    if target_size == 0 {
        return Err(Error::InvalidInput("target size must be positive".into()));
    }
    let mut rgb = decode_rgb(path)?;
    let t = target_size as u32;
    if rgb.dimensions() != (t, t) {
        rgb = image::imageops::resize(&rgb, t, t, FilterType::Triangle);
    }
    Ok(ImageTensor::from_rgb8(&rgb))
}

/// Decodes a raster file at its native size.
pub fn load_image_any_size(path: &Path) -> Result<ImageTensor> {
    Ok(ImageTensor::from_rgb8(&decode_rgb(path)?))
}

/// Cuts an image into row-major `patch_size × patch_size` patches.
pub fn to_patch_grid(img: &ImageTensor, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = img.data.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch size {patch_size}"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let s = patch_size;
    let patches = (0..rows * cols)
        .map(|j| {
            let (r, col) = (j / cols, j % cols);
            img.data.slice(s![r * s..(r + 1) * s, col * s..(col + 1) * s, ..]).to_owned()
        })
        .collect();
    Ok(PatchGrid { patches, patch_size, grid_rows: rows, grid_cols: cols, channels: c })
}

/// Grayscale intensity of one pixel given its channel values.
#[inline]
pub fn luma(pixel: &[f64]) -> f64 {
    match pixel.len() {
        1 => pixel[0],
        n if n >= 3 => 0.299 * pixel[0] + 0.587 * pixel[1] + 0.114 * pixel[2],
        n => pixel.iter().sum::<f64>() / n as f64,
    }
}

#[inline]
fn bucket(gray: f64, bins: usize) -> usize {
    ((gray * bins as f64) as usize).min(bins - 1)
}

/// Histogram of grayscale intensities into `bins` equal-width buckets.
pub fn gray_histogram(pixels: ArrayView3<f64>, bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    let (h, w, c) = pixels.dim();
    let mut px = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = pixels[[y, x, ch]];
            }
            hist[bucket(luma(&px), bins)] += 1;
        }
    }
    hist
}

/// Shannon entropy (bits) of a count histogram; empty buckets contribute zero.
pub fn histogram_entropy(hist: &[u64]) -> EntropyValue {
    let total: u64 = hist.iter().sum();
    let max_bits = (hist.len() as f64).log2();
    if total == 0 {
        return EntropyValue { bits: 0.0, normalized: 0.0 };
    }
    let n = total as f64;
    let bits = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0);
    EntropyValue { bits, normalized: if max_bits > 0.0 { bits / max_bits } else { 0.0 } }
}

/// Entropy of a patch's grayscale histogram.
pub fn patch_entropy(patch: ArrayView3<f64>, bins: usize) -> Result<EntropyValue> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("bins must be >= 2, got {bins}")));
    }
    Ok(histogram_entropy(&gray_histogram(patch, bins)))
}

/// Entropy of the whole image's grayscale histogram.
pub fn image_entropy(img: &ImageTensor, bins: usize) -> Result<EntropyValue> {
    patch_entropy(img.data.view(), bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>())).unwrap()
    }

    /// Independent oracle: explicit per-bucket counting without shared helpers.
    fn oracle_entropy(patch: &Array3<f64>, bins: usize) -> f64 {
        let (h, w, _) = patch.dim();
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        for y in 0..h {
            for x in 0..w {
                let g = 0.299 * patch[[y, x, 0]] + 0.587 * patch[[y, x, 1]] + 0.114 * patch[[y, x, 2]];
                let mut b = (g * bins as f64).floor() as usize;
                if b >= bins {
                    b = bins - 1;
                }
                *counts.entry(b).or_default() += 1;
            }
        }
        let n = (h * w) as f64;
        counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln() / std::f64::consts::LN_2).sum()
    }

    #[test]
    fn patch_count_for_224_and_32() {
        let grid = to_patch_grid(&ImageTensor::zeros(224, 224, 3), 32).unwrap();
        assert_eq!(grid.len(), 49);
        assert_eq!(grid.patches()[0].dim(), (32, 32, 3));
        assert_eq!(grid.grid_side(), Some(7));
    }

    #[test]
    fn non_divisible_is_shape_error() {
        let err = to_patch_grid(&ImageTensor::zeros(224, 224, 3), 33).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn reassembly_identity_64_by_16() {
        let img = random_image(64, 64, 3, 5);
        let grid = to_patch_grid(&img, 16).unwrap();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid.reassemble(), img);
        assert_eq!(grid.origin_index(5), (1, 1));
    }

    #[test]
    fn constant_patch_has_zero_entropy() {
        let p = Array3::from_elem((8, 8, 3), 0.37);
        let e = patch_entropy(p.view(), 256).unwrap();
        assert_eq!(e.bits, 0.0);
        assert_eq!(e.normalized, 0.0);
    }

    #[test]
    fn two_levels_give_one_bit() {
        let p = Array3::from_shape_fn((8, 8, 3), |(y, _, _)| if y < 4 { 0.1 } else { 0.9 });
        assert_eq!(patch_entropy(p.view(), 256).unwrap().bits, 1.0);
    }

    #[test]
    fn all_256_levels_give_eight_bits() {
        let p = Array3::from_shape_fn((16, 16, 3), |(y, x, _)| (y * 16 + x) as f64 / 255.0);
        let e = patch_entropy(p.view(), 256).unwrap();
        assert!((e.bits - 8.0).abs() < 1e-12);
        assert!((e.normalized - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_patches_match_counting_oracle() {
        for seed in 0..20 {
            let img = random_image(16, 16, 3, seed);
            for bins in [2, 7, 64, 256] {
                let e = patch_entropy(img.data().view(), bins).unwrap();
                assert!((e.bits - oracle_entropy(img.data(), bins)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bins_below_two_rejected() {
        let p = Array3::from_elem((2, 2, 1), 0.5);
        assert!(patch_entropy(p.view(), 1).is_err());
    }

    #[test]
    fn whole_image_entropy_matches_single_patch() {
        let img = random_image(16, 16, 3, 9);
        let grid = to_patch_grid(&img, 16).unwrap();
        assert_eq!(
            image_entropy(&img, 256).unwrap(),
            patch_entropy(grid.patches()[0].view(), 256).unwrap()
        );
        assert_eq!(image_entropy(&ImageTensor::zeros(32, 32, 3), 256).unwrap().bits, 0.0);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 1), 1.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 1), f64::NAN)).is_err());
        assert!(ImageTensor::new(Array3::zeros((0, 2, 1))).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(rows in 1usize..5, cols in 1usize..5, s in 1usize..6, seed in 0u64..1000) {
            let img = random_image(rows * s, cols * s, 3, seed);
            let grid = to_patch_grid(&img, s).unwrap();
            prop_assert_eq!(grid.len(), rows * cols);
            prop_assert_eq!(grid.reassemble(), img);
        }

        #[test]
        fn entropy_is_permutation_invariant_and_bounded(seed in 0u64..1000, bins in 2usize..300) {
            let img = random_image(6, 6, 3, seed);
            let e = patch_entropy(img.data().view(), bins).unwrap();
            prop_assert!(e.normalized >= 0.0 && e.normalized <= 1.0 + 1e-12);
            let mut pixels: Vec<[f64; 3]> = img
                .data()
                .outer_iter()
                .flat_map(|row| row.outer_iter().map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>())
                .collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 77);
            rand::seq::SliceRandom::shuffle(pixels.as_mut_slice(), &mut rng);
            let shuffled = Array3::from_shape_fn((6, 6, 3), |(y, x, c)| pixels[y * 6 + x][c]);
            let e2 = patch_entropy(shuffled.view(), bins).unwrap();
            prop_assert!((e.bits - e2.bits).abs() < 1e-12);
        }
    }
}
