//! In-memory training and evaluation samples.

use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;

use crate::annotations::{read_gray16, read_rgb, resolve_asset, Dataset, Gray16Image, ImageRecord};
use crate::error::{Error, Result};
use crate::synthgen::RenderedScene;

#[derive(Clone, Debug)]
pub struct Sample {
    pub record: ImageRecord,
    pub rgb: RgbImage,
    /// Inverse depth scaled to the full u16 range.
    pub depth: Option<Gray16Image>,
    /// Instance mask holding `id + 1` per pixel.
    pub mask: Option<Gray16Image>,
}

impl Sample {
    pub fn from_scene(scene: &RenderedScene) -> Sample {
        Sample {
            record: scene.record.clone(),
            rgb: scene.rgb.clone(),
            depth: Some(scene.depth.clone()),
            mask: Some(scene.instance_mask.clone()),
        }
    }

    /// Membership test for one instance, if a mask is present.
    pub fn instance_mask(&self, id: u64) -> Option<impl Fn(usize, usize) -> bool + '_> {
        let m = self.mask.as_ref()?;
        let key = (id + 1) as u16;
        Some(move |x: usize, y: usize| m.get_pixel(x as u32, y as u32)[0] == key)
    }

    pub fn depth_target(&self) -> Option<Vec<f64>> {
        self.depth.as_ref().map(|d| d.pixels().map(|p| p[0] as f64 / 65535.0).collect())
    }
}

/// Loads the images of a split file, resolving assets relative to it.
pub fn load_samples(dataset: &Dataset, split_file: &Path) -> Result<Vec<Sample>> {
    dataset
        .images
        .par_iter()
        .map(|r| {
            let rgb = read_rgb(&resolve_asset(split_file, &r.rgb_path))?;
            if rgb.width() != r.width || rgb.height() != r.height {
                return Err(Error::DimensionMismatch(format!(
                    "{}: image is {}x{}, record says {}x{}",
                    r.rgb_path,
                    rgb.width(),
                    rgb.height(),
                    r.width,
                    r.height
                )));
            }
            let depth = r.depth_path.as_ref().map(|p| read_gray16(&resolve_asset(split_file, p))).transpose()?;
            let mask = r.mask_path.as_ref().map(|p| read_gray16(&resolve_asset(split_file, p))).transpose()?;
            Ok(Sample { record: r.clone(), rgb, depth, mask })
        })
        .collect()
}

/// Samples for a set of freshly rendered scenes.
pub fn samples_from_scenes(scenes: &[RenderedScene]) -> Vec<Sample> {
    scenes.iter().map(Sample::from_scene).collect()
}
