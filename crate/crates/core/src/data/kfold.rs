use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};

/// One cross-validation fold: indices for training and validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Stratified k-fold over positions `0..labels.len()`.
///
/// Each class is shuffled and dealt round-robin across folds; the dealing
/// position carries over between classes so fold sizes stay balanced too.
pub fn stratified_kfold_labels(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k >= 2, got {k}")));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = RngStream::new(seed, stream_id("kfold", &[k as u64]));
    let mut fold_of = vec![0usize; labels.len()];
    let mut next = 0usize;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Parameter(format!(
                "class {class} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for &i in &members {
            fold_of[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok((0..k)
        .map(|f| Fold {
            train: (0..labels.len()).filter(|&i| fold_of[i] != f).collect(),
            valid: (0..labels.len()).filter(|&i| fold_of[i] == f).collect(),
        })
        .collect())
}

/// Stratified k-fold over the dataset's train pool (every non-test bag).
/// Returned indices refer to `dataset.bags`.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let pool = dataset.train_pool();
    let folds = stratified_kfold_labels(&dataset.labels(&pool), k, seed)?;
    Ok(folds
        .into_iter()
        .map(|f| Fold {
            train: f.train.iter().map(|&i| pool[i]).collect(),
            valid: f.valid.iter().map(|&i| pool[i]).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class_counts(labels: &[usize], idx: &[usize]) -> (usize, usize) {
        let ones = idx.iter().filter(|&&i| labels[i] == 1).count();
        (idx.len() - ones, ones)
    }

    #[test]
    fn exact_divisibility() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        for fold in stratified_kfold_labels(&labels, 5, 3).unwrap() {
            assert_eq!(class_counts(&labels, &fold.valid), (10, 10));
            assert_eq!(fold.train.len(), 80);
        }
    }

    #[test]
    fn uneven_classes() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 52)).collect();
        for fold in stratified_kfold_labels(&labels, 5, 8).unwrap() {
            let (c0, c1) = class_counts(&labels, &fold.valid);
            assert!(c0 == 10 || c0 == 11, "class 0 count {c0}");
            assert!(c1 == 9 || c1 == 10, "class 1 count {c1}");
        }
    }

    #[test]
    fn too_few_members() {
        let labels = vec![0, 0, 0, 1, 1];
        assert!(matches!(stratified_kfold_labels(&labels, 3, 0), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn folds_partition_the_pool(
            labels in proptest::collection::vec(0usize..3, 30..120),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let folds = match stratified_kfold_labels(&labels, k, seed) {
                Ok(f) => f,
                Err(_) => return Ok(()),
            };
            let mut seen = vec![0usize; labels.len()];
            for f in &folds {
                for &i in &f.valid { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.valid.len(), labels.len());
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            // per-class counts differ by at most one across folds
            for class in 0..3 {
                let counts: Vec<usize> = folds.iter()
                    .map(|f| f.valid.iter().filter(|&&i| labels[i] == class).count())
                    .collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
            prop_assert_eq!(&folds, &stratified_kfold_labels(&labels, k, seed).unwrap());
        }
    }
}
