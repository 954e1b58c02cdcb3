use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageproc::AugmentSpec;
use crate::ClassLabel;

/// Fraction of each fold's training pool held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

/// Index lists into the dataset for one fold, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[ClassLabel]) -> [Vec<usize>; 3] {
    let mut out: [Vec<usize>; 3] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        out[l.index()].push(i);
    }
    out
}

fn n_val(pool: usize) -> usize {
    (pool as f64 * VAL_FRACTION).round() as usize
}

/// Stratified k-fold split. Each class is shuffled and dealt round-robin
/// into the k test folds; the remaining samples of that class form the
/// training pool, of which `round(20%)` go to validation.
pub fn make_folds(labels: &[ClassLabel], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dealt: Vec<[Vec<usize>; 3]> = vec![Default::default(); k];
    for (c, mut members) in by_class(labels).into_iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::invalid(format!(
                "class {} has {} samples, fewer than {k} folds",
                ClassLabel::ALL[c],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, idx) in members.into_iter().enumerate() {
            dealt[j % k][c].push(idx);
        }
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..3 {
            test.extend(&dealt[f][c]);
            // Pool in dealing order of the other folds.
            let pool: Vec<usize> = (0..k).filter(|&o| o != f).flat_map(|o| dealt[o][c].iter().copied()).collect();
            let nv = n_val(pool.len());
            val.extend(&pool[..nv]);
            train.extend(&pool[nv..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        folds.push(FoldSplit {
            fold_id: f,
            train,
            val,
            test,
        });
    }
    Ok(folds)
}

/// Stratified single split: `round(val_fraction * n_c)` of each class to
/// validation, the rest to training.
pub fn holdout_split(labels: &[ClassLabel], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut members in by_class(labels) {
        members.shuffle(&mut rng);
        let nv = (members.len() as f64 * val_fraction).round() as usize;
        val.extend(&members[..nv]);
        train.extend(&members[nv..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Copies per training image so classes end up near `7 * n_max` each:
/// `round(7 * n_max / n_i)`, zero for empty classes.
pub fn balance_factors(counts: &[usize]) -> Vec<usize> {
    let n_max = counts.iter().copied().max().unwrap_or(0);
    counts
        .iter()
        .map(|&n| if n == 0 { 0 } else { (7.0 * n_max as f64 / n as f64).round() as usize })
        .collect()
}

/// One training sample: a dataset index and the augmentation to apply.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedItem {
    pub index: usize,
    pub spec: AugmentSpec,
}

/// Expands the training indices of each class by its balance factor.
/// Replica 0 of every image is the unmodified original; the others carry an
/// augmentation sampled from the allowed rotations and translations.
pub fn balance_augment(train_by_class: &[Vec<usize>], seed: u64) -> Vec<AugmentedItem> {
    let counts: Vec<usize> = train_by_class.iter().map(Vec::len).collect();
    let factors = balance_factors(&counts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.iter().zip(&factors).map(|(n, f)| n * f).sum());
    for (members, &f) in train_by_class.iter().zip(&factors) {
        for &index in members {
            out.push(AugmentedItem {
                index,
                spec: AugmentSpec::IDENTITY,
            });
            for _ in 1..f {
                out.push(AugmentedItem {
                    index,
                    spec: AugmentSpec::sample(rng.random()),
                });
            }
        }
    }
    out
}

/// Splits `indices` by their labels.
pub fn group_by_class(indices: &[usize], labels: &[ClassLabel]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); 3];
    for &i in indices {
        out[labels[i].index()].push(i);
    }
    out
}
