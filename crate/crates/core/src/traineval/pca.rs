use serde::Serialize;

use crate::error::{Error, Result};

/// One exported point; `pc2` is absent when the data spans a single direction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaRow {
    pub id: usize,
    pub pc1: f64,
    pub pc2: Option<f64>,
    pub class_label: usize,
    pub box_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaExport {
    pub rows: Vec<PcaRow>,
    /// Unit principal axes, at most two.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalue of each axis.
    pub explained_variance: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Eigenvalues (descending) and unit eigenvectors of a symmetric matrix,
/// by cyclic Jacobi rotations.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

/// Flips `v` so its first component that is not numerically zero is positive.
fn fix_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Projects centred embeddings onto the top two axes of their sample covariance.
pub fn pca_export(
    embeddings: &[Vec<f64>],
    class_labels: &[usize],
    box_labels: &[Option<usize>],
) -> Result<PcaExport> {
    let n = embeddings.len();
    if n < 3 {
        return Err(Error::Usage(format!("PCA needs at least 3 embeddings, got {n}")));
    }
    if class_labels.len() != n || box_labels.len() != n {
        return Err(Error::Usage("one class and box label per embedding required".into()));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Usage("embeddings must share a nonzero dimension".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let tol = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut components = Vec::new();
    let mut explained = Vec::new();
    for (value, mut vector) in values.into_iter().zip(vectors).take(2) {
        if value > tol {
            fix_sign(&mut vector);
            components.push(vector);
            explained.push(value);
        }
    }
    let mut warnings = Vec::new();
    if components.len() < 2 {
        warnings.push(format!(
            "embeddings span {} direction(s) with nonzero variance; missing components are left empty",
            components.len()
        ));
    }
    let project = |row: &[f64], k: usize| -> Option<f64> {
        components.get(k).map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum())
    };
    let rows = centred
        .iter()
        .enumerate()
        .map(|(id, row)| PcaRow {
            id,
            pc1: project(row, 0).unwrap_or(0.0),
            pc2: project(row, 1),
            class_label: class_labels[id],
            box_label: box_labels[id],
        })
        .collect();
    Ok(PcaExport {
        rows,
        components,
        explained_variance: explained,
        warnings,
    })
}
