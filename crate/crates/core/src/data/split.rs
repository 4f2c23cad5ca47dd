//! Patient-level k-fold splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Record;
use crate::error::{Error, Result};

/// Record indices of one fold, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles patients with `seed` and deals them round-robin into `k`
/// validation groups, so fold sizes differ by at most one patient.
pub fn kfold_split(records: &[Record], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Validation(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_patient.entry(r.patient_id.as_str()).or_default().push(i);
    }
    if by_patient.len() < k {
        return Err(Error::Validation(format!("{} patients cannot fill {k} folds", by_patient.len())));
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; records.len()];
    for (n, p) in patients.iter().enumerate() {
        for &i in &by_patient[p] {
            fold_of[i] = n % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..records.len()).partition(|&i| fold_of[i] == f);
            Fold { train, val }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn records(sizes: &[usize]) -> Vec<Record> {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| {
                (0..n).map(move |k| Record {
                    image_id: format!("{p}_{k}"),
                    patient_id: format!("p{p}"),
                    target: 0,
                    path: Default::default(),
                })
            })
            .collect()
    }

    #[test]
    fn ten_patients_five_folds() {
        let recs = records(&[1, 2, 3, 1, 2, 3, 1, 2, 3, 4]);
        for fold in kfold_split(&recs, 5, 9).unwrap() {
            let patients: BTreeSet<&str> = fold.val.iter().map(|&i| recs[i].patient_id.as_str()).collect();
            assert_eq!(patients.len(), 2);
        }
        assert!(kfold_split(&recs, 11, 0).is_err());
        assert!(kfold_split(&recs, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn patient_level_partition(sizes in prop::collection::vec(1usize..6, 5..30), k in 2usize..6, seed: u64) {
            let recs = records(&sizes);
            let folds = kfold_split(&recs, k, seed).unwrap();
            let mut covered = vec![0; recs.len()];
            let mut counts = Vec::new();
            for fold in &folds {
                for &i in &fold.val {
                    covered[i] += 1;
                }
                prop_assert_eq!(fold.train.len() + fold.val.len(), recs.len());
                let val: BTreeSet<&str> = fold.val.iter().map(|&i| recs[i].patient_id.as_str()).collect();
                let train: BTreeSet<&str> = fold.train.iter().map(|&i| recs[i].patient_id.as_str()).collect();
                prop_assert!(val.is_disjoint(&train));
                counts.push(val.len());
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}
