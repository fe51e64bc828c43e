//! Stratified k-fold splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Organ, Sample};
use crate::error::{invalid, Result};

/// Anything carrying a stratification label.
pub trait Labeled {
    type Label: Ord + Clone;
    fn label(&self) -> Self::Label;
}

impl Labeled for Sample {
    type Label = Organ;
    fn label(&self) -> Organ {
        self.organ
    }
}

impl Labeled for Organ {
    type Label = Organ;
    fn label(&self) -> Organ {
        *self
    }
}

/// `k` disjoint folds of indices into the original collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn val(&self, fold: usize) -> Result<&[usize]> {
        match self.folds.get(fold) {
            Some(f) => Ok(f),
            None => invalid(format!("fold {fold} out of range for k={}", self.k())),
        }
    }

    /// Every index outside `fold`, ascending.
    pub fn train(&self, fold: usize) -> Result<Vec<usize>> {
        self.val(fold)?;
        let mut t: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        t.sort_unstable();
        Ok(t)
    }
}

/// Splits `items` into `k` folds with every label spread as evenly as possible.
///
/// Items of each label are shuffled with `seed` and dealt round-robin, the
/// dealing cursor carrying over between labels so fold sizes also differ by at
/// most one. Each fold is sorted.
pub fn stratified_kfold<T: Labeled>(items: &[T], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return invalid(format!("k-fold needs k >= 2, got {k}"));
    }
    let mut groups: BTreeMap<T::Label, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(item.label()).or_default().push(i);
    }
    if let Some(small) = groups.values().find(|g| g.len() < k) {
        return invalid(format!("a label has {} items, fewer than k={k}", small.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0;
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            folds[cursor % k].push(i);
            cursor += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}
