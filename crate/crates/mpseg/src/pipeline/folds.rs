//! 5-fold cross-validation splits with a 60:20:20 train/val/test rotation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    pub folds: Vec<FoldIds>,
}

/// Deterministic 5-fold rotation over a seeded shuffle: the shuffled
/// cohort is cut into 5 contiguous blocks; fold f tests on block f,
/// validates on block f+1 (mod 5), trains on the rest. Every subject is
/// tested exactly once and the proportions are 60:20:20 up to rounding.
pub fn make_folds(subject_ids: &[String], seed: u64) -> Result<FoldSplit> {
    let n = subject_ids.len();
    if n < N_FOLDS {
        return Err(Error::data(format!(
            "cross-validation needs at least {N_FOLDS} subjects, got {n}"
        )));
    }
    // sort before shuffling so the split depends on the id set, not the
    // manifest order
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        return Err(Error::data("duplicate subject ids in the cohort"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let bound = |b: usize| b * n / N_FOLDS;
    let block = |b: usize| &ids[bound(b)..bound(b + 1)];
    let mut folds = Vec::with_capacity(N_FOLDS);
    for f in 0..N_FOLDS {
        let test = block(f).to_vec();
        let val = block((f + 1) % N_FOLDS).to_vec();
        let mut train = Vec::with_capacity(n - test.len() - val.len());
        for b in 0..N_FOLDS {
            if b != f && b != (f + 1) % N_FOLDS {
                train.extend_from_slice(block(b));
            }
        }
        folds.push(FoldIds { train, val, test });
    }
    Ok(FoldSplit { seed, folds })
}
