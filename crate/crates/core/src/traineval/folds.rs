use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

// Distinct RNG streams so the split and the folds never share draws.
const SPLIT_STREAM: u64 = 1 << 40;
const FOLD_STREAM: u64 = 2 << 40;

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

/// Splits indices into `k` folds preserving class proportions.
///
/// Each class is shuffled, then dealt round-robin with one counter shared by
/// all classes, so fold sizes differ by at most one as well.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let groups = by_class(labels);
    if let Some((c, members)) = groups.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::Config(format!(
            "class {c} has {} samples, fewer than the {k} folds",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(FOLD_STREAM);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut members in groups.into_values() {
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified two-way split; returns `(selected, rest)`, each sorted.
///
/// Each class contributes `round(n_c · fraction)` samples to the selected
/// part, clamped so both parts keep at least one sample of the class.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let (mut selected, mut rest) = (Vec::new(), Vec::new());
    for (c, mut members) in by_class(labels) {
        if members.len() < 2 {
            return Err(Error::Config(format!("class {c} needs at least 2 samples to split")));
        }
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1);
        selected.extend_from_slice(&members[..take]);
        rest.extend_from_slice(&members[take..]);
    }
    selected.sort_unstable();
    rest.sort_unstable();
    Ok((selected, rest))
}
