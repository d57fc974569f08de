//! Video-level k-fold assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// video id → fold index.
    pub assignments: BTreeMap<String, usize>,
}

/// Train/validation videos of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldView {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Shuffles the sorted video ids with `seed` and deals them round-robin into
/// `k` folds, so fold sizes differ by at most one.
pub fn kfold_split(video_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let unique: BTreeSet<&String> = video_ids.iter().collect();
    if unique.len() != video_ids.len() {
        return Err(Error::Fold("duplicate video ids".into()));
    }
    if k < 2 {
        return Err(Error::Fold(format!("k = {k} leaves no validation set; need k >= 2")));
    }
    if k > unique.len() {
        return Err(Error::Fold(format!("k = {k} exceeds the {} available videos", unique.len())));
    }
    let mut order: Vec<&String> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order.into_iter().enumerate().map(|(i, v)| (v.clone(), i % k)).collect();
    Ok(FoldSplit { k, seed, assignments })
}

impl FoldSplit {
    pub fn view(&self, fold: usize) -> Result<FoldView> {
        if fold >= self.k {
            return Err(Error::Fold(format!("fold {fold} out of range for k = {}", self.k)));
        }
        let (validation, train) = self
            .assignments
            .iter()
            .map(|(v, &f)| (v.clone(), f))
            .partition::<Vec<_>, _>(|(_, f)| *f == fold);
        Ok(FoldView {
            fold,
            train: train.into_iter().map(|(v, _)| v).collect(),
            validation: validation.into_iter().map(|(v, _)| v).collect(),
        })
    }

    pub fn views(&self) -> Vec<FoldView> {
        (0..self.k).map(|f| self.view(f).expect("fold in range")).collect()
    }
}
