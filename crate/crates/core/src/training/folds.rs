//! Subject-level k-fold cross-validation plans.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;

/// Fold index of every subject, per dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Subjects per dataset in each split of one fold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: BTreeMap<String, Vec<String>>,
    pub validation: BTreeMap<String, Vec<String>>,
    pub test: BTreeMap<String, Vec<String>>,
}

impl FoldSplit {
    pub fn count(split: &BTreeMap<String, Vec<String>>) -> usize {
        split.values().map(Vec::len).sum()
    }
}

/// Shuffles each dataset's subjects with a per-dataset seeded stream and
/// deals them round-robin into `k` folds.
pub fn kfold_split(subjects: &BTreeMap<String, Vec<String>>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut assignments = BTreeMap::new();
    for (i, (dataset, ids)) in subjects.iter().enumerate() {
        if ids.len() < k {
            return Err(Error::Config(format!("dataset {dataset} has {} subjects, fewer than k = {k}", ids.len())));
        }
        let mut shuffled = ids.clone();
        shuffled.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        shuffled.shuffle(&mut rng);
        let folds = shuffled.into_iter().enumerate().map(|(j, id)| (id, j % k)).collect();
        assignments.insert(dataset.clone(), folds);
    }
    Ok(FoldPlan { k, assignments })
}

impl FoldPlan {
    /// Fold `f`: test = fold f, validation = fold (f + 1) mod k, train = rest.
    pub fn split(&self, fold: usize) -> Result<FoldSplit> {
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range 0..{}", self.k)));
        }
        let val_fold = (fold + 1) % self.k;
        let mut out = FoldSplit::default();
        for (dataset, subjects) in &self.assignments {
            for (id, &f) in subjects {
                let target = if f == fold {
                    &mut out.test
                } else if f == val_fold {
                    &mut out.validation
                } else {
                    &mut out.train
                };
                target.entry(dataset.clone()).or_default().push(id.clone());
            }
        }
        Ok(out)
    }
}
