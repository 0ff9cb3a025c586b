use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::DatasetManifest;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// One cross-validation fold. The three id lists are disjoint and together
/// cover the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Largest-remainder apportionment of `total` items over `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Stratified k-fold split with a stratified validation hold-out carved from
/// each fold's training pool.
///
/// Each class is shuffled and dealt round-robin over the folds, continuing
/// the deal position across classes so fold sizes stay balanced. Id lists
/// are returned in dataset order.
pub fn stratified_kfold(
    ds: &DatasetManifest,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidValue {
            key: "k".into(),
            msg: "need at least 2 folds".into(),
        });
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidValue {
            key: "val_fraction".into(),
            msg: "must lie in [0, 1)".into(),
        });
    }
    let classes = 2;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in ds.subjects.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::TooFewSubjects(format!(
                "class {c} has {} subjects, need at least {k}",
                members.len()
            )));
        }
    }

    let mut fold_of = vec![0usize; ds.subjects.len()];
    let mut deal = 0usize;
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64])));
        for idx in shuffled {
            fold_of[idx] = deal % k;
            deal += 1;
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let pool: Vec<usize> = (0..ds.subjects.len()).filter(|&i| fold_of[i] != f).collect();
        let pool_by_class: Vec<Vec<usize>> = (0..classes)
            .map(|c| {
                pool.iter()
                    .copied()
                    .filter(|&i| ds.subjects[i].label == c)
                    .collect()
            })
            .collect();
        let weights: Vec<f64> = pool_by_class.iter().map(|m| m.len() as f64).collect();
        let val_total = (val_fraction * pool.len() as f64).round() as usize;
        let quotas = apportion(val_total, &weights);

        let mut is_val = vec![false; ds.subjects.len()];
        for (c, members) in pool_by_class.iter().enumerate() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[1000 + f as u64, c as u64],
            )));
            for &i in shuffled.iter().take(quotas[c]) {
                is_val[i] = true;
            }
        }

        let id = |i: usize| ds.subjects[i].id.clone();
        folds.push(FoldSplit {
            fold_index: f,
            train_ids: pool.iter().copied().filter(|&i| !is_val[i]).map(id).collect(),
            val_ids: pool.iter().copied().filter(|&i| is_val[i]).map(id).collect(),
            test_ids: (0..ds.subjects.len())
                .filter(|&i| fold_of[i] == f)
                .map(id)
                .collect(),
        });
    }
    Ok(folds)
}
