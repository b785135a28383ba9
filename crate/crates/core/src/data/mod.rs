//! Tiles: single-object image crops with mask, box and labels.
//!
//! Images are stored channel-major (`3 × size × size`, values in `[0, 1]`),
//! masks row-major with one byte per pixel (0 or 1).

mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, load_dataset_with, write_dataset, ManifestEntry, MANIFEST_FILE};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with, random_crop, render_scene, ClassProfile, Scene,
    SyntheticProfile,
};

use crate::boxlabels::BoxAnnotation;

pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub size: usize,
    /// `3 × size × size`, channel-major.
    pub image: Vec<f32>,
    /// `size × size`, 1 on the object.
    pub mask: Vec<u8>,
    pub bbox: BoxAnnotation,
    pub class_label: usize,
    pub box_label: Option<usize>,
}

impl Tile {
    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| m as f32).collect()
    }
}

/// Tight bounding box of the nonzero pixels of a `width × height` mask.
pub fn tight_bbox(mask: &[u8], width: usize, height: usize) -> Option<BoxAnnotation> {
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                rows = (rows.0.min(y), rows.1.max(y));
                cols = (cols.0.min(x), cols.1.max(x));
            }
        }
    }
    (rows.0 != usize::MAX).then(|| {
        BoxAnnotation::new(
            cols.0 as f64,
            rows.0 as f64,
            (cols.1 - cols.0 + 1) as f64,
            (rows.1 - rows.0 + 1) as f64,
        )
    })
}

/// How pixel values are rescaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageNormalization {
    /// Min-Max over all pixels and channels of each image.
    #[default]
    PerImage,
    /// One Min-Max range over the whole dataset.
    PerDataset,
}

/// Min-Max over all values jointly; a constant image maps to zeros.
pub fn normalize_image(image: &[f32]) -> Vec<f32> {
    let (lo, hi) = value_range(image.iter().copied());
    rescale(image, lo, hi)
}

fn value_range(values: impl Iterator<Item = f32>) -> (f32, f32) {
    values.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn rescale(image: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    if hi > lo {
        // Computed in f64 so the extremes land exactly on 0 and 1.
        let (lo, span) = (lo as f64, (hi - lo) as f64);
        image
            .iter()
            .map(|&v| (((v as f64) - lo) / span).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        vec![0.0; image.len()]
    }
}

/// Normalizes raw images in place.
pub fn normalize_images(images: &mut [Vec<f32>], mode: ImageNormalization) {
    match mode {
        ImageNormalization::PerImage => {
            for img in images.iter_mut() {
                *img = normalize_image(img);
            }
        }
        ImageNormalization::PerDataset => {
            let (lo, hi) = value_range(images.iter().flatten().copied());
            for img in images.iter_mut() {
                *img = rescale(img, lo, hi);
            }
        }
    }
}
