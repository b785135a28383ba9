//! Lloyd's K-means with k-means++ seeding over normalized box features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FEATURE_COUNT;
use crate::error::{Error, Result};

pub type Point = [f64; FEATURE_COUNT];

pub const MAX_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Point>,
    /// Within-cluster sum of squared distances at convergence.
    pub wcss: f64,
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Point], p: &Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
pub fn kmeans_assign(model: &KMeansModel, point: &Point) -> usize {
    nearest(&model.centroids, point).0
}

pub fn wcss(centroids: &[Point], points: &[Point]) -> f64 {
    points.iter().map(|p| nearest(centroids, p).1).sum()
}

fn kmeans_plus_plus(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Runs Lloyd iterations from `centroids` until assignments stop changing.
fn lloyd(points: &[Point], mut centroids: Vec<Point>) -> (Vec<Point>, f64) {
    let k = centroids.len();
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let j = nearest(&centroids, p).0;
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut sums = vec![[0.0; FEATURE_COUNT]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }

        // Empty clusters take the point farthest from its own centroid.
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assignment[a]]);
                    let db = sq_dist(&points[b], &centroids[assignment[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(i) = far {
                counts[assignment[i]] -= 1;
                assignment[i] = j;
                counts[j] = 1;
                centroids[j] = points[i];
            }
        }
    }
    let total = wcss(&centroids, points);
    (centroids, total)
}

fn check(points: &[Point], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Usage(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Usage("k-means input contains non-finite values".into()));
    }
    Ok(())
}

/// Best of `restarts` k-means++ seeded Lloyd runs, plus any `extra_inits`.
fn fit_with(
    points: &[Point],
    k: usize,
    seed: u64,
    restarts: usize,
    extra_inits: Vec<Vec<Point>>,
) -> Result<KMeansModel> {
    check(points, k)?;
    let mut best: Option<(Vec<Point>, f64)> = None;
    let mut consider = |candidate: (Vec<Point>, f64)| {
        if best.as_ref().is_none_or(|b| candidate.1 < b.1) {
            best = Some(candidate);
        }
    };
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        consider(lloyd(points, kmeans_plus_plus(points, k, &mut rng)));
    }
    for init in extra_inits {
        consider(lloyd(points, init));
    }
    let (centroids, wcss) = best.expect("at least one run");
    Ok(KMeansModel { k, centroids, wcss })
}

/// K-means with k-means++ seeding; keeps the lowest-WCSS of `restarts` runs
/// (ties keep the earliest restart).
pub fn kmeans_fit(points: &[Point], k: usize, seed: u64, restarts: usize) -> Result<KMeansModel> {
    fit_with(points, k, seed, restarts, Vec::new())
}

/// `(k, wcss)` for `k = 1..=k_max`.
///
/// Each `k > 1` also tries the `k − 1` solution plus the worst-fit point as a
/// starting point, which makes the curve non-increasing.
pub fn wcss_curve(points: &[Point], k_max: usize, seed: u64, restarts: usize) -> Result<Vec<(usize, f64)>> {
    if k_max == 0 || k_max > points.len() {
        return Err(Error::Usage(format!(
            "k_max must lie in 1..={}, got {k_max}",
            points.len()
        )));
    }
    let mut curve = Vec::with_capacity(k_max);
    let mut previous: Option<KMeansModel> = None;
    for k in 1..=k_max {
        let extra = previous
            .as_ref()
            .map(|prev| {
                let worst = points
                    .iter()
                    .max_by(|a, b| {
                        nearest(&prev.centroids, a)
                            .1
                            .total_cmp(&nearest(&prev.centroids, b).1)
                    })
                    .copied()
                    .expect("nonempty");
                let mut init = prev.centroids.clone();
                init.push(worst);
                vec![init]
            })
            .unwrap_or_default();
        let model = fit_with(points, k, seed, restarts, extra)?;
        curve.push((k, model.wcss));
        previous = Some(model);
    }
    Ok(curve)
}

/// Interior `k` maximizing the discrete second difference of WCSS.
///
/// `None` when the curve has fewer than three points.
pub fn elbow_suggest(curve: &[(usize, f64)]) -> Option<usize> {
    if curve.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if best.is_none_or(|(_, b)| second > b) {
            best = Some((w[1].0, second));
        }
    }
    best.map(|(k, _)| k)
}
