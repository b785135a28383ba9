//! Synthetic aerial tiles: one textured rotated ellipse on a grass-like field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize_images, tight_bbox, ImageNormalization, Tile, CHANNELS};
use crate::boxlabels::BoxAnnotation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    /// Ellipse area as a fraction of the tile area.
    pub area_fraction: (f64, f64),
    /// Major over minor axis.
    pub aspect: (f64, f64),
    pub color: [f32; 3],
    pub texture: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProfile {
    pub classes: [ClassProfile; 3],
    pub background: [f32; 3],
    pub background_texture: f32,
    /// Per-tile multiplicative brightness jitter, `1 ± value`.
    pub brightness_jitter: f32,
    /// Objects lie horizontally, tilted by up to this many degrees.
    pub max_tilt_degrees: f64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            classes: [
                // small, near-square
                ClassProfile {
                    area_fraction: (0.03, 0.06),
                    aspect: (1.0, 1.25),
                    color: [0.62, 0.45, 0.28],
                    texture: 0.06,
                },
                // large, elongated
                ClassProfile {
                    area_fraction: (0.10, 0.20),
                    aspect: (1.8, 2.4),
                    color: [0.42, 0.28, 0.18],
                    texture: 0.06,
                },
                // small, elongated
                ClassProfile {
                    area_fraction: (0.03, 0.06),
                    aspect: (1.8, 2.6),
                    color: [0.30, 0.27, 0.25],
                    texture: 0.10,
                },
            ],
            background: [0.34, 0.46, 0.24],
            background_texture: 0.08,
            brightness_jitter: 0.15,
            max_tilt_degrees: 15.0,
        }
    }
}

impl SyntheticProfile {
    /// Checks that every class fits inside a `tile_size` tile with a 1 px margin.
    pub fn validate(&self, tile_size: usize) -> Result<()> {
        let tile_area = (tile_size * tile_size) as f64;
        for (c, p) in self.classes.iter().enumerate() {
            let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo > 0.0 && hi.is_finite();
            if !ordered(p.area_fraction) || !ordered(p.aspect) || p.aspect.0 < 1.0 {
                return Err(Error::Config(format!(
                    "class {c}: area and aspect ranges must be positive, ordered, aspect ≥ 1"
                )));
            }
            let (a_max, _) = semi_axes(p.area_fraction.1 * tile_area, p.aspect.1);
            let extent = (2.0 * a_max).ceil() as usize + 1;
            if extent + 2 > tile_size {
                return Err(Error::Config(format!(
                    "class {c}: objects up to {extent} px do not fit a {tile_size} px tile"
                )));
            }
            let (_, b_min) = semi_axes(p.area_fraction.0 * tile_area, p.aspect.1);
            if b_min < 1.0 {
                return Err(Error::Config(format!(
                    "class {c}: objects are too thin to render at tile size {tile_size}"
                )));
            }
        }
        Ok(())
    }
}

/// Semi-major and semi-minor axes of an ellipse with the given area and aspect.
fn semi_axes(area: f64, aspect: f64) -> (f64, f64) {
    let b = (area / (std::f64::consts::PI * aspect)).sqrt();
    (aspect * b, b)
}

/// A rendered scene larger than a tile, holding one object.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`, channel-major.
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub bbox: BoxAnnotation,
    pub class_label: usize,
}

/// Renders a `2·tile_size` square scene with one object of `class_label` at its center.
pub fn render_scene(
    profile: &SyntheticProfile,
    class_label: usize,
    tile_size: usize,
    rng: &mut impl Rng,
) -> Result<Scene> {
    let p = profile
        .classes
        .get(class_label)
        .ok_or_else(|| Error::Config(format!("no synthetic profile for class {class_label}")))?;
    let size = 2 * tile_size;
    let area = rng.gen_range(p.area_fraction.0..=p.area_fraction.1) * (tile_size * tile_size) as f64;
    let aspect = rng.gen_range(p.aspect.0..=p.aspect.1);
    let (a, b) = semi_axes(area, aspect);
    let tilt = profile.max_tilt_degrees.to_radians();
    let theta = if tilt > 0.0 { rng.gen_range(-tilt..=tilt) } else { 0.0 };
    let (sin, cos) = theta.sin_cos();
    let cx = size as f64 / 2.0 + rng.gen_range(-0.5..0.5);
    let cy = size as f64 / 2.0 + rng.gen_range(-0.5..0.5);

    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                mask[y * size + x] = 1;
            }
        }
    }
    let bbox = tight_bbox(&mask, size, size)
        .ok_or_else(|| Error::Config(format!("class {class_label}: rendered object is empty")))?;

    // Smooth field variation from two random plane waves.
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.05..0.2);
            (angle.cos() * freq, angle.sin() * freq, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let bright = 1.0 + rng.gen_range(-profile.brightness_jitter..=profile.brightness_jitter);

    let plane = size * size;
    let mut image = vec![0.0f32; CHANNELS * plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (base, amp, scale) = if mask[i] == 1 {
                (p.color, p.texture, bright)
            } else {
                let smooth: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                (profile.background, profile.background_texture, 1.0 + 0.05 * smooth as f32)
            };
            let shade = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
            for c in 0..CHANNELS {
                let jitter = if amp > 0.0 { rng.gen_range(-amp..=amp) * 0.3 } else { 0.0 };
                image[c * plane + i] = (base[c] * scale + shade + jitter).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Scene {
        width: size,
        height: size,
        image,
        mask,
        bbox,
        class_label,
    })
}

/// Cuts a `tile_size` tile at a uniformly drawn offset that keeps the whole
/// box inside the tile with at least one pixel of margin.
pub fn random_crop(scene: &Scene, tile_size: usize, seed: u64) -> Result<Tile> {
    let b = &scene.bbox;
    let (bx, by) = (b.x as usize, b.y as usize);
    let (bw, bh) = (b.w as usize, b.h as usize);
    let range = |start: usize, extent: usize, limit: usize| {
        let lo = (start + extent + 1).saturating_sub(tile_size);
        let hi = start.checked_sub(1)?.min(limit.checked_sub(tile_size)?);
        (lo <= hi).then_some((lo, hi))
    };
    let crop_error = || {
        Error::Config(format!(
            "crop: object {bw}×{bh} at ({bx}, {by}) cannot fit a {tile_size} px tile with margin"
        ))
    };
    let (x_lo, x_hi) = range(bx, bw, scene.width).ok_or_else(crop_error)?;
    let (y_lo, y_hi) = range(by, bh, scene.height).ok_or_else(crop_error)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(x_lo..=x_hi);
    let y0 = rng.gen_range(y_lo..=y_hi);

    let plane = scene.width * scene.height;
    let mut image = Vec::with_capacity(CHANNELS * tile_size * tile_size);
    for c in 0..CHANNELS {
        for y in y0..y0 + tile_size {
            let row = c * plane + y * scene.width;
            image.extend_from_slice(&scene.image[row + x0..row + x0 + tile_size]);
        }
    }
    let mut mask = Vec::with_capacity(tile_size * tile_size);
    for y in y0..y0 + tile_size {
        let row = y * scene.width;
        mask.extend_from_slice(&scene.mask[row + x0..row + x0 + tile_size]);
    }
    Ok(Tile {
        size: tile_size,
        image,
        mask,
        bbox: BoxAnnotation::new((bx - x0) as f64, (by - y0) as f64, b.w, b.h),
        class_label: scene.class_label,
        box_label: None,
    })
}

/// `3 · n_per_class` tiles with the default profile and per-image normalization.
pub fn generate_synthetic(n_per_class: usize, tile_size: usize, seed: u64) -> Result<Vec<Tile>> {
    generate_synthetic_with(
        &SyntheticProfile::default(),
        n_per_class,
        tile_size,
        seed,
        ImageNormalization::PerImage,
    )
}

/// Tiles are ordered with classes interleaved (0, 1, 2, 0, 1, 2, …). Each
/// sample draws from its own RNG stream, so the output does not depend on
/// scheduling.
pub fn generate_synthetic_with(
    profile: &SyntheticProfile,
    n_per_class: usize,
    tile_size: usize,
    seed: u64,
    normalization: ImageNormalization,
) -> Result<Vec<Tile>> {
    if n_per_class == 0 {
        return Err(Error::Usage("n_per_class must be at least 1".into()));
    }
    profile.validate(tile_size)?;
    let n_classes = profile.classes.len();
    let mut tiles = (0..n_per_class * n_classes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = render_scene(profile, i % n_classes, tile_size, &mut rng)?;
            random_crop(&scene, tile_size, rng.gen())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut images: Vec<Vec<f32>> = tiles.iter_mut().map(|t| std::mem::take(&mut t.image)).collect();
    normalize_images(&mut images, normalization);
    for (t, img) in tiles.iter_mut().zip(images) {
        t.image = img;
    }
    Ok(tiles)
}
