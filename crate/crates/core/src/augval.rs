//! Background-consistency check for augmented images.
//!
//! Hand regions are masked out of both images of a pair and the remaining
//! background is compared with SSIM; pairs scoring below the threshold are
//! discarded.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{read_rgb, BBox, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
    pub window_size: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            dynamic_range: 255.0,
            k1: 0.01,
            k2: 0.03,
            window_size: 11,
            sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::config("ssim.k1/k2", "must be positive"));
        }
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::config("ssim.window_size", "must be odd and at least 3"));
        }
        if !(self.sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::config("ssim.sigma", "sigma and dynamic_range must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let taps: Vec<f64> = (0..self.window_size)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / sum).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugvalConfig {
    pub ssim: SsimParams,
    /// Pairs scoring strictly below this are discarded.
    pub threshold: f64,
    /// Per-side dilation of hand boxes, as a fraction of the box size.
    pub margin: f64,
}

impl Default for AugvalConfig {
    fn default() -> Self {
        AugvalConfig {
            ssim: SsimParams::default(),
            threshold: 0.95,
            margin: 0.15,
        }
    }
}

impl AugvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must lie in [-1, 1]"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin", "must be non-negative"));
        }
        Ok(())
    }
}

/// Single-channel f64 image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayF64 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayF64 {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayF64 { width, height, data }
    }

    /// Rec. 601 luma.
    pub fn luminance(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        GrayF64::new(img.width() as usize, img.height() as usize, data)
    }
}

/// Per-pixel boolean mask, `true` where masked.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&m| m).count() as f64 / self.data.len() as f64
    }

    /// Marks every pixel whose center lies in one of the boxes.
    pub fn from_boxes(width: usize, height: usize, boxes: &[BBox]) -> Self {
        let mut mask = Mask::empty(width, height);
        for b in boxes {
            let x0 = (b.x_min - 0.5).ceil().max(0.0) as usize;
            let y0 = (b.y_min - 0.5).ceil().max(0.0) as usize;
            let x1 = ((b.x_max - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
            let y1 = ((b.y_max - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    mask.data[y * width + x] = true;
                }
            }
        }
        mask
    }

    /// Summed-area table with a zero border, `(w+1) x (h+1)`.
    fn integral(&self) -> Vec<u32> {
        let (w, h) = (self.width, self.height);
        let mut s = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += self.data[y * w + x] as u32;
                s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
            }
        }
        s
    }
}

/// Fills dilated hand boxes with mid-gray and returns the mask used.
pub fn mask_hand_regions(image: &RgbImage, hands: &[BBox], margin: f64, dynamic_range: f64) -> (RgbImage, Mask) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let boxes: Vec<BBox> = hands.iter().map(|b| b.dilate(margin).clamp(w as f64, h as f64)).collect();
    let mask = Mask::from_boxes(w, h, &boxes);
    let mut out = image.clone();
    let gray = (dynamic_range / 2.0).round().clamp(0.0, 255.0) as u8;
    for (i, px) in out.pixels_mut().enumerate() {
        if mask.data[i] {
            *px = Rgb([gray; 3]);
        }
    }
    (out, mask)
}

fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = row[x..x + n].iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += horiz[(y + i) * ow + x] * kv;
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over every window that lies fully inside the image and, when a
/// mask is given, contains no masked pixel.
pub fn ssim(a: &GrayF64, b: &GrayF64, params: &SsimParams, ignore: Option<&Mask>) -> Result<f64> {
    params.validate()?;
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h, n) = (a.width, a.height, params.window_size);
    if w < n || h < n {
        return Err(Error::DimensionMismatch(format!("{w}x{h} image is smaller than the {n}x{n} window")));
    }
    if let Some(m) = ignore {
        if m.width != w || m.height != h {
            return Err(Error::DimensionMismatch("mask size differs from image size".into()));
        }
    }
    let k = params.kernel();
    let aa: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(&a.data, w, h, &k);
    let (mu_b, _, _) = filter_valid(&b.data, w, h, &k);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &k);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &k);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &k);
    let integral = ignore.map(|m| m.integral());
    let (c1, c2) = (params.c1(), params.c2());

    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if let Some(s) = &integral {
                let stride = w + 1;
                let masked = s[(y + n) * stride + x + n] + s[y * stride + x] - s[y * stride + x + n] - s[(y + n) * stride + x];
                if masked > 0 {
                    continue;
                }
            }
            let i = y * ow + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::AllWindowsMasked);
    }
    Ok((sum / count as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub image_id: String,
    pub ssim: f64,
    pub kept: bool,
    pub masked_fraction: f64,
}

pub fn validate_pair(
    image_id: &str,
    original: &RgbImage,
    augmented: &RgbImage,
    hands: &[BBox],
    config: &AugvalConfig,
) -> Result<PairVerdict> {
    config.validate()?;
    if original.dimensions() != augmented.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "{image_id}: original {:?} vs augmented {:?}",
            original.dimensions(),
            augmented.dimensions()
        )));
    }
    let range = config.ssim.dynamic_range;
    let (orig_m, mask) = mask_hand_regions(original, hands, config.margin, range);
    let (aug_m, _) = mask_hand_regions(augmented, hands, config.margin, range);
    let masked_fraction = mask.masked_fraction();
    if masked_fraction >= 1.0 {
        return Err(Error::DegenerateMask);
    }
    let score = ssim(&GrayF64::luminance(&orig_m), &GrayF64::luminance(&aug_m), &config.ssim, Some(&mask))?;
    Ok(PairVerdict {
        image_id: image_id.to_string(),
        ssim: score,
        kept: score >= config.threshold,
        masked_fraction,
    })
}

#[derive(Clone, Debug)]
pub struct AugPair {
    pub image_id: String,
    pub original: RgbImage,
    pub augmented: RgbImage,
    pub hands: Vec<BBox>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pairs: Vec<PairVerdict>,
    /// Fraction of pairs kept; `null` when there are no pairs.
    pub keep_rate: Option<f64>,
}

impl ValidationReport {
    fn from_verdicts(mut pairs: Vec<PairVerdict>) -> Self {
        pairs.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let keep_rate = if pairs.is_empty() {
            None
        } else {
            Some(pairs.iter().filter(|p| p.kept).count() as f64 / pairs.len() as f64)
        };
        ValidationReport { pairs, keep_rate }
    }

    pub fn kept_ids(&self) -> Vec<&str> {
        self.pairs.iter().filter(|p| p.kept).map(|p| p.image_id.as_str()).collect()
    }
}

/// Validates every pair; the report is ordered by image id.
pub fn filter_dataset(pairs: &[AugPair], config: &AugvalConfig) -> Result<ValidationReport> {
    let verdicts = pairs
        .par_iter()
        .map(|p| validate_pair(&p.image_id, &p.original, &p.augmented, &p.hands, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationReport::from_verdicts(verdicts))
}

/// Loads originals and augmentations by file name from two directories and
/// returns the report plus the dataset restricted to kept images.
pub fn filter_directories(
    dataset: &Dataset,
    original_dir: &Path,
    augmented_dir: &Path,
    config: &AugvalConfig,
) -> Result<(ValidationReport, Dataset)> {
    config.validate()?;
    let verdicts = dataset
        .images
        .par_iter()
        .map(|r| {
            let name = Path::new(&r.rgb_path).file_name().unwrap_or_default();
            let original = read_rgb(&original_dir.join(name))?;
            let augmented = read_rgb(&augmented_dir.join(name))?;
            let hands: Vec<BBox> = r.hands.iter().map(|h| h.bbox).collect();
            validate_pair(&r.image_id, &original, &augmented, &hands, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ValidationReport::from_verdicts(verdicts);
    let kept: std::collections::HashSet<&str> = report.kept_ids().into_iter().collect();
    let filtered = Dataset {
        categories: dataset.categories.clone(),
        images: dataset.images.iter().filter(|r| kept.contains(r.image_id.as_str())).cloned().collect(),
        split: dataset.split.clone(),
    };
    Ok((report, filtered))
}

pub const GLOVE_YELLOW: Rgb<u8> = Rgb([236, 204, 40]);

/// Stand-in for a glove-adding generator: paints the hand boxes yellow and,
/// optionally, adds strong noise to the background.
pub fn mock_augment(original: &RgbImage, hands: &[BBox], corrupt_background: bool) -> RgbImage {
    let (w, h) = (original.width() as usize, original.height() as usize);
    let inside = Mask::from_boxes(w, h, hands);
    let mut out = original.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x61_75_67);
    for (i, px) in out.pixels_mut().enumerate() {
        if inside.data[i] {
            let t = ((i % w) + (i / w)) % 7;
            let shade = 0.85 + 0.02 * t as f64;
            *px = Rgb(GLOVE_YELLOW.0.map(|c| (c as f64 * shade) as u8));
        } else if corrupt_background {
            for c in px.0.iter_mut() {
                let v = *c as i32 + rng.gen_range(-90..=90);
                *c = v.clamp(0, 255) as u8;
            }
        }
    }
    out
}
