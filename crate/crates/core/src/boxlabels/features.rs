use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `(x, y)` being the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Whether the box lies inside a `width × height` image.
    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Number of geometry features used for clustering.
pub const FEATURE_COUNT: usize = 4;

/// Names of the clustering features, in vector order.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = ["area", "ss", "w", "h"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxFeatures {
    pub area: f64,
    /// Symmetric squareness `1 − min(w/h, h/w)`: 0 for a square box.
    pub ss: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxFeatures {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [self.area, self.ss, self.w, self.h]
    }
}

pub fn symmetric_squareness(w: f64, h: f64) -> f64 {
    1.0 - (w / h).min(h / w)
}

pub fn compute_features(b: &BoxAnnotation) -> Result<BoxFeatures> {
    if !(b.w > 0.0 && b.h > 0.0) || !b.w.is_finite() || !b.h.is_finite() {
        return Err(Error::Annotation {
            id: format!("box(x={}, y={}, w={}, h={})", b.x, b.y, b.w, b.h),
            msg: "width and height must be positive".into(),
        });
    }
    Ok(BoxFeatures {
        area: b.w * b.h,
        ss: symmetric_squareness(b.w, b.h),
        w: b.w,
        h: b.h,
    })
}

/// Per-feature `(min, max)` learned from a fit set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; FEATURE_COUNT],
    pub max: [f64; FEATURE_COUNT],
}

pub fn fit_minmax(features: &[BoxFeatures]) -> Result<NormStats> {
    if features.is_empty() {
        return Err(Error::Usage("cannot fit min-max statistics on zero boxes".into()));
    }
    let mut min = [f64::INFINITY; FEATURE_COUNT];
    let mut max = [f64::NEG_INFINITY; FEATURE_COUNT];
    for f in features {
        for (i, v) in f.to_array().into_iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    Ok(NormStats { min, max })
}

/// `(x − min) / (max − min)` clamped to `[0, 1]`; a constant feature maps to 0.
pub fn minmax_scale(x: f64, min: f64, max: f64) -> f64 {
    if max > min {
        ((x - min) / (max - min)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn apply_minmax(f: &BoxFeatures, stats: &NormStats) -> [f64; FEATURE_COUNT] {
    let raw = f.to_array();
    std::array::from_fn(|i| minmax_scale(raw[i], stats.min[i], stats.max[i]))
}
