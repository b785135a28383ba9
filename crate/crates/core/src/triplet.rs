//! Triplet mining and the class, box, and combined multi-annotation losses.
//!
//! All three losses share one hinge: for a triplet `(a, p, n)` over embeddings
//! `f`, `max(d(f(a), f(p)) − d(f(a), f(n)) + margin, 0)`, averaged over the
//! mined triplets. The class and box variants differ only in which label
//! vector defines positives and negatives; the combined loss weighs them as
//! `(1 − λ)·class + λ·box`. Each term mines its own triplets.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    SquaredEuclidean,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Every valid triplet in the batch.
    BatchAll,
    /// Per anchor, its farthest positive and nearest negative.
    BatchHard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight of the box-label term in [`matl_loss`].
    pub lambda: f64,
    pub distance: Distance,
    pub mining: Mining,
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 0.25,
            distance: Distance::SquaredEuclidean,
            mining: Mining::BatchAll,
            normalize_embeddings: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("loss.margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "loss.lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Triplets into one batch, sorted lexicographically.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSet {
    triplets: Vec<Triplet>,
}

impl TripletSet {
    /// Checks every triplet against `labels`.
    pub fn new(mut triplets: Vec<Triplet>, labels: &[usize]) -> Result<Self> {
        for t in &triplets {
            let in_range = [t.anchor, t.positive, t.negative]
                .iter()
                .all(|&i| i < labels.len());
            if !in_range
                || t.anchor == t.positive
                || labels[t.anchor] != labels[t.positive]
                || labels[t.anchor] == labels[t.negative]
            {
                return Err(Error::Usage(format!("invalid triplet {t:?} for labels")));
            }
        }
        triplets.sort_unstable();
        Ok(Self { triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter()
    }

    pub fn as_tuples(&self) -> Vec<(usize, usize, usize)> {
        self.triplets
            .iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect()
    }
}

/// Mines triplets from a labelled batch.
///
/// `distances` is the row-major `N×N` embedding distance matrix, required for
/// [`Mining::BatchHard`] and ignored otherwise. A batch without any valid
/// triplet yields an empty set.
pub fn mine_triplets(labels: &[usize], mining: Mining, distances: Option<&[f64]>) -> Result<TripletSet> {
    let n = labels.len();
    let mut triplets = Vec::new();
    match mining {
        Mining::BatchAll => {
            for a in 0..n {
                for p in 0..n {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for (neg, &l) in labels.iter().enumerate() {
                        if l != labels[a] {
                            triplets.push(Triplet {
                                anchor: a,
                                positive: p,
                                negative: neg,
                            });
                        }
                    }
                }
            }
        }
        Mining::BatchHard => {
            let d = distances
                .ok_or_else(|| Error::Usage("batch_hard mining needs embedding distances".into()))?;
            if d.len() != n * n {
                return Err(Error::Dimension {
                    op: "mine_triplets",
                    axis: 0,
                    expected: n * n,
                    got: d.len(),
                });
            }
            for a in 0..n {
                let row = &d[a * n..(a + 1) * n];
                let mut hardest_pos: Option<usize> = None;
                let mut hardest_neg: Option<usize> = None;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    if labels[j] == labels[a] {
                        if hardest_pos.is_none_or(|p| row[j] > row[p]) {
                            hardest_pos = Some(j);
                        }
                    } else if hardest_neg.is_none_or(|q| row[j] < row[q]) {
                        hardest_neg = Some(j);
                    }
                }
                if let (Some(p), Some(q)) = (hardest_pos, hardest_neg) {
                    triplets.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: q,
                    });
                }
            }
        }
    }
    TripletSet::new(triplets, labels)
}

/// Pairwise distances between the rows of a 2-D tensor.
pub fn pairwise_distances<T: Scalar>(embeddings: &Tensor<T>, distance: Distance) -> Vec<f64> {
    let n = embeddings.shape()[0];
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let sq: f64 = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            out[i * n + j] = match distance {
                Distance::SquaredEuclidean => sq,
                Distance::Euclidean => sq.sqrt(),
            };
        }
    }
    out
}

fn prepare<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, cfg: &LossConfig) -> Result<Var> {
    if tape.value(embeddings).ndim() != 2 {
        return Err(Error::shape("triplet_loss", "embeddings must be (N, D)"));
    }
    if cfg.normalize_embeddings {
        tape.l2_normalize_rows(embeddings)
    } else {
        Ok(embeddings)
    }
}

fn distance_between<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    distance: Distance,
) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let d = tape.sum_last_axis(sq)?;
    Ok(match distance {
        Distance::SquaredEuclidean => d,
        Distance::Euclidean => tape.sqrt(d, T::from_f64_lossy(1e-12)),
    })
}

/// Mean hinge over `triplets`; an empty set gives a constant zero.
pub fn triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    triplets: &TripletSet,
    cfg: &LossConfig,
) -> Result<Var> {
    let e = prepare(tape, embeddings, cfg)?;
    triplet_loss_prepared(tape, e, triplets, cfg)
}

fn triplet_loss_prepared<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    triplets: &TripletSet,
    cfg: &LossConfig,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let rows = tape.value(e).shape()[0];
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor.max(t.positive).max(t.negative) >= rows)
    {
        return Err(Error::Usage(format!("triplet {t:?} out of range for {rows} embeddings")));
    }
    let anchors: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let positives: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let negatives: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let ea = tape.gather_rows(e, &anchors)?;
    let ep = tape.gather_rows(e, &positives)?;
    let en = tape.gather_rows(e, &negatives)?;
    let d_ap = distance_between(tape, ea, ep, cfg.distance)?;
    let d_an = distance_between(tape, ea, en, cfg.distance)?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, T::from_f64_lossy(cfg.margin));
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Triplet loss with positives and negatives defined by `labels`.
pub fn label_triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let rows = tape.value(embeddings).shape()[0];
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "triplet_loss",
            axis: 0,
            expected: rows,
            got: labels.len(),
        });
    }
    let e = prepare(tape, embeddings, cfg)?;
    let triplets = match cfg.mining {
        Mining::BatchAll => mine_triplets(labels, Mining::BatchAll, None)?,
        Mining::BatchHard => {
            let d = pairwise_distances(tape.value(e), cfg.distance);
            mine_triplets(labels, Mining::BatchHard, Some(&d))?
        }
    };
    triplet_loss_prepared(tape, e, &triplets, cfg)
}

pub fn class_triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    y_class: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    label_triplet_loss(tape, embeddings, y_class, cfg)
}

pub fn box_triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    y_box: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    label_triplet_loss(tape, embeddings, y_box, cfg)
}

/// `(1 − λ)·class_triplet_loss + λ·box_triplet_loss` with `λ = cfg.lambda`.
pub fn matl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    y_class: &[usize],
    y_box: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if y_class.len() != y_box.len() {
        return Err(Error::Dimension {
            op: "matl_loss",
            axis: 0,
            expected: y_class.len(),
            got: y_box.len(),
        });
    }
    let class = class_triplet_loss(tape, embeddings, y_class, cfg)?;
    let boxes = box_triplet_loss(tape, embeddings, y_box, cfg)?;
    let lambda = T::from_f64_lossy(cfg.lambda);
    let class = tape.scale(class, T::one() - lambda);
    let boxes = tape.scale(boxes, lambda);
    tape.add(class, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())
            .unwrap()
    }

    #[test]
    fn batch_all_enumeration() {
        let set = mine_triplets(&[0, 0, 1], Mining::BatchAll, None).unwrap();
        assert_eq!(set.as_tuples(), vec![(0, 1, 2), (1, 0, 2)]);
        assert!(mine_triplets(&[0, 1, 2], Mining::BatchAll, None).unwrap().is_empty());
    }

    #[test]
    fn batch_all_count_matches_brute_force() {
        let labels = [0, 0, 1, 1];
        let mut expected = 0;
        for a in 0..4 {
            for p in 0..4 {
                for n in 0..4 {
                    if a != p && labels[a] == labels[p] && labels[a] != labels[n] {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(expected, 8);
        assert_eq!(mine_triplets(&labels, Mining::BatchAll, None).unwrap().len(), 8);
    }

    #[test]
    fn batch_hard_picks_extremes() {
        // 1-D embeddings at 0, 1, 3 (label 0) and 2, 10 (label 1)
        let e = emb(&[&[0.0], &[1.0], &[3.0], &[2.0], &[10.0]]);
        let d = pairwise_distances(&e, Distance::Euclidean);
        let set = mine_triplets(&[0, 0, 0, 1, 1], Mining::BatchHard, Some(&d)).unwrap();
        assert_eq!(
            set.as_tuples(),
            vec![(0, 2, 3), (1, 2, 3), (2, 0, 3), (3, 4, 1), (4, 3, 2)]
        );
        assert!(mine_triplets(&[0, 0, 1], Mining::BatchHard, None).is_err());
    }

    #[test]
    fn invalid_triplets_are_rejected() {
        let t = Triplet {
            anchor: 0,
            positive: 0,
            negative: 1,
        };
        assert!(TripletSet::new(vec![t], &[0, 1]).is_err());
    }

    fn loss_of(e: Tensor<f64>, triplets: &[(usize, usize, usize)], labels: &[usize], cfg: &LossConfig) -> f64 {
        let set = TripletSet::new(
            triplets
                .iter()
                .map(|&(anchor, positive, negative)| Triplet {
                    anchor,
                    positive,
                    negative,
                })
                .collect(),
            labels,
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = tape.param(e);
        let l = triplet_loss(&mut tape, v, &set, cfg).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn hinge_examples() {
        let euclid = LossConfig {
            distance: Distance::Euclidean,
            ..LossConfig::default()
        };
        // d(a,p)=0, d(a,n)=2, margin 1
        let e = emb(&[&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(loss_of(e, &[(0, 1, 2)], &[0, 0, 1], &euclid), 0.0);
        // d(a,p)=1, d(a,n)=1, margin 0.5
        let e = emb(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let half = LossConfig {
            margin: 0.5,
            ..euclid.clone()
        };
        assert!((loss_of(e, &[(0, 1, 2)], &[0, 0, 1], &half) - 0.5).abs() < 1e-12);
        // collapsed embeddings
        let e = emb(&[&[0.3, 0.3], &[0.3, 0.3], &[0.3, 0.3]]);
        assert_eq!(loss_of(e, &[(0, 1, 2), (1, 0, 2)], &[0, 0, 1], &LossConfig::default()), 1.0);
    }

    #[test]
    fn empty_triplets_give_zero_and_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let v = tape.param(emb(&[&[1.0], &[2.0], &[3.0]]));
        let l = class_triplet_loss(&mut tape, v, &[0, 1, 2], &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matl_weights_component_losses() {
        let e = emb(&[&[0.0, 0.1], &[0.5, 0.0], &[0.2, 0.9], &[1.0, 1.0], &[0.4, 0.4]]);
        let y_class = [0, 0, 1, 1, 2];
        let y_box = [0, 1, 0, 1, 1];
        let cfg = LossConfig::default().with_lambda(0.25);
        let mut tape = Tape::<f64>::new();
        let v = tape.param(e);
        let c = class_triplet_loss(&mut tape, v, &y_class, &cfg).unwrap();
        let b = box_triplet_loss(&mut tape, v, &y_box, &cfg).unwrap();
        let m = matl_loss(&mut tape, v, &y_class, &y_box, &cfg).unwrap();
        let expected = 0.75 * tape.value(c).item() + 0.25 * tape.value(b).item();
        assert!((tape.value(m).item() - expected).abs() < 1e-12);
        assert!(matl_loss(&mut tape, v, &y_class, &y_box[..4], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig::default().with_lambda(1.5).validate().is_err());
        let neg = LossConfig {
            margin: -0.1,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
