//! Discrete box labels from bounding-box geometry.
//!
//! Each box is described by (area, symmetric squareness, width, height).
//! Features are Min-Max normalized with statistics from the fit set and
//! clustered with K-means; the cluster index is the box label.

mod features;
mod kmeans;

use serde::{Deserialize, Serialize};

pub use features::{
    apply_minmax, compute_features, fit_minmax, minmax_scale, symmetric_squareness, BoxAnnotation,
    BoxFeatures, NormStats, FEATURE_COUNT, FEATURE_NAMES,
};
pub use kmeans::{elbow_suggest, kmeans_assign, kmeans_fit, wcss, wcss_curve, KMeansModel, Point, MAX_ITERATIONS};

use crate::error::Result;

/// Cluster count used by the labeling pipeline.
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_RESTARTS: usize = 10;

/// Frozen normalization plus clustering: everything needed to label a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabeler {
    pub norm: NormStats,
    pub kmeans: KMeansModel,
    pub seed: u64,
}

impl BoxLabeler {
    pub fn fit(boxes: &[BoxAnnotation], k: usize, seed: u64, restarts: usize) -> Result<Self> {
        let features = boxes
            .iter()
            .map(compute_features)
            .collect::<Result<Vec<_>>>()?;
        let norm = fit_minmax(&features)?;
        let points: Vec<Point> = features.iter().map(|f| apply_minmax(f, &norm)).collect();
        let kmeans = kmeans_fit(&points, k, seed, restarts)?;
        Ok(Self { norm, kmeans, seed })
    }

    pub fn normalized(&self, b: &BoxAnnotation) -> Result<Point> {
        Ok(apply_minmax(&compute_features(b)?, &self.norm))
    }

    pub fn label(&self, b: &BoxAnnotation) -> Result<usize> {
        Ok(kmeans_assign(&self.kmeans, &self.normalized(b)?))
    }

    pub fn label_all(&self, boxes: &[BoxAnnotation]) -> Result<Vec<usize>> {
        boxes.iter().map(|b| self.label(b)).collect()
    }
}

/// Normalized feature vectors for a set of boxes, with statistics fit on the same set.
pub fn normalized_points(boxes: &[BoxAnnotation]) -> Result<(NormStats, Vec<Point>)> {
    let features = boxes
        .iter()
        .map(compute_features)
        .collect::<Result<Vec<_>>>()?;
    let norm = fit_minmax(&features)?;
    let points = features.iter().map(|f| apply_minmax(f, &norm)).collect();
    Ok((norm, points))
}
