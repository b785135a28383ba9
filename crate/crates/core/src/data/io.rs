//! Dataset directories.
//!
//! ```text
//! DIR/manifest.json      [{"image": "images/000000.png", "class": 0,
//!                          "box": [x, y, w, h], "mask": "masks/000000.png"}, ...]
//! DIR/images/*.png       square RGB (other PNG color types are converted)
//! DIR/masks/*.png        optional; any nonzero pixel is foreground
//! ```
//!
//! Paths are relative to `DIR`. Boxes are in pixels with `(x, y)` the top-left
//! corner; fractional boxes snap outward to whole pixels. Without a mask the
//! filled box rectangle is used.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{normalize_images, tight_bbox, ImageNormalization, Tile, CHANNELS, NUM_CLASSES};
use crate::boxlabels::BoxAnnotation;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// Writes PNG images, PNG masks and the manifest.
pub fn write_dataset(dir: &Path, tiles: &[Tile]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(tiles.len());
    for (i, t) in tiles.iter().enumerate() {
        let image = format!("images/{i:06}.png");
        let mask = format!("masks/{i:06}.png");
        let s = t.size as u32;
        let plane = t.size * t.size;
        let rgb: Vec<u8> = (0..plane)
            .flat_map(|p| (0..CHANNELS).map(move |c| (c, p)))
            .map(|(c, p)| (t.image[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        save(&dir.join(&image), image::RgbImage::from_raw(s, s, rgb))?;
        let gray: Vec<u8> = t.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
        save(&dir.join(&mask), image::GrayImage::from_raw(s, s, gray))?;
        entries.push(ManifestEntry {
            image,
            class: t.class_label,
            bbox: t.bbox.as_array(),
            mask: Some(mask),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn save<P>(path: &Path, img: Option<image::ImageBuffer<P, Vec<u8>>>) -> Result<()>
where
    P: image::PixelWithColorType<Subpixel = u8>,
{
    img.expect("buffer length matches tile size")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads a dataset with per-image normalization.
pub fn load_dataset(dir: &Path) -> Result<Vec<Tile>> {
    load_dataset_with(dir, ImageNormalization::PerImage)
}

pub fn load_dataset_with(dir: &Path, normalization: ImageNormalization) -> Result<Vec<Tile>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let parse_error = |msg: String| Error::Parse {
        path: manifest_path.clone(),
        msg,
    };
    let values: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| parse_error(e.to_string()))?;
    if values.is_empty() {
        return Err(parse_error("manifest lists no samples".into()));
    }

    let mut tiles = Vec::with_capacity(values.len());
    let mut images = Vec::with_capacity(values.len());
    for (i, value) in values.into_iter().enumerate() {
        let entry: ManifestEntry = serde_json::from_value(value)
            .map_err(|e| parse_error(format!("sample #{i}: {e}")))?;
        let sample = format!("#{i} ({})", entry.image);
        let invalid = |msg: String| Error::Validation {
            sample: sample.clone(),
            msg,
        };
        let expected_size = tiles.first().map(|t: &Tile| t.size);
        let (size, image) = read_rgb(&dir.join(&entry.image))?;
        if expected_size.is_some_and(|s| s != size) {
            return Err(invalid(format!(
                "image is {size}×{size}, other samples are {0}×{0}",
                expected_size.unwrap_or_default()
            )));
        }
        if entry.class >= NUM_CLASSES {
            return Err(invalid(format!(
                "class {} outside 0..{NUM_CLASSES}",
                entry.class
            )));
        }
        let bbox = snap_box(entry.bbox, size).map_err(invalid)?;
        let mask = match &entry.mask {
            Some(rel) => {
                let mask = read_mask(&dir.join(rel), size).map_err(|e| match e {
                    Error::Shape { msg, .. } => invalid(msg),
                    other => other,
                })?;
                match tight_bbox(&mask, size, size) {
                    Some(tight) if tight == bbox => mask,
                    Some(tight) => {
                        return Err(invalid(format!(
                            "mask extent {:?} differs from box {:?}",
                            tight.as_array(),
                            bbox.as_array()
                        )))
                    }
                    None => return Err(invalid("mask is empty".into())),
                }
            }
            None => rectangle_mask(&bbox, size),
        };
        images.push(image);
        tiles.push(Tile {
            size,
            image: Vec::new(),
            mask,
            bbox,
            class_label: entry.class,
            box_label: None,
        });
    }
    normalize_images(&mut images, normalization);
    for (t, img) in tiles.iter_mut().zip(images) {
        t.image = img;
    }
    Ok(tiles)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: PathBuf::from(path),
        source,
    })
}

/// Square RGB image as channel-major raw values in `[0, 1]`.
fn read_rgb(path: &Path) -> Result<(usize, Vec<f32>)> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h || w == 0 {
        return Err(Error::Validation {
            sample: path.display().to_string(),
            msg: format!("image must be square, got {w}×{h}"),
        });
    }
    let plane = (w * h) as usize;
    let mut out = vec![0.0f32; CHANNELS * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..CHANNELS {
            out[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok((w as usize, out))
}

fn read_mask(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = open(path)?.to_luma8();
    if img.dimensions() != (size as u32, size as u32) {
        let (w, h) = img.dimensions();
        return Err(Error::shape(
            "load_dataset",
            format!("mask is {w}×{h}, image is {size}×{size}"),
        ));
    }
    Ok(img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect())
}

fn snap_box([x, y, w, h]: [f64; 4], size: usize) -> std::result::Result<BoxAnnotation, String> {
    if !(w > 0.0 && h > 0.0) || [x, y, w, h].iter().any(|v| !v.is_finite()) {
        return Err(format!("box {:?} needs positive finite width and height", [x, y, w, h]));
    }
    let raw = BoxAnnotation::new(x, y, w, h);
    if !raw.fits_within(size as f64, size as f64) {
        return Err(format!("box {:?} exceeds the {size}×{size} image", [x, y, w, h]));
    }
    let (x0, y0) = (x.floor(), y.floor());
    Ok(BoxAnnotation::new(x0, y0, raw.right().ceil() - x0, raw.bottom().ceil() - y0))
}

fn rectangle_mask(b: &BoxAnnotation, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in b.y as usize..b.bottom() as usize {
        mask[y * size + b.x as usize..y * size + b.right() as usize].fill(1);
    }
    mask
}
