//! Patient-level train/validation/test partitioning.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::types::{rng_stream, Label};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_patients: BTreeSet<String>,
    pub folds: Vec<BTreeSet<String>>,
    pub seed: u64,
}

/// Which partition a patient belongs to for one fold's run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl SplitPlan {
    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    /// Training and validation patients for fold `k`: validation is fold `k`,
    /// training is every other fold.
    pub fn fold_partition(&self, k: usize) -> (BTreeSet<String>, BTreeSet<String>) {
        let val = self.folds[k].clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        (train, val)
    }

    pub fn partition_of(&self, patient_id: &str, fold: usize) -> Option<Partition> {
        if self.test_patients.contains(patient_id) {
            Some(Partition::Test)
        } else if self.folds.get(fold)?.contains(patient_id) {
            Some(Partition::Validation)
        } else if self.folds.iter().any(|f| f.contains(patient_id)) {
            Some(Partition::Train)
        } else {
            None
        }
    }

    /// Check the leakage guard: partitions pairwise disjoint and every manifest
    /// patient assigned exactly once.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let mut owner: BTreeMap<&str, String> = BTreeMap::new();
        let parts = std::iter::once(("test".to_string(), &self.test_patients)).chain(
            self.folds
                .iter()
                .enumerate()
                .map(|(k, f)| (format!("fold {k}"), f)),
        );
        for (name, set) in parts {
            for pid in set {
                if let Some(prev) = owner.insert(pid.as_str(), name.clone()) {
                    return Err(Error::Leakage(format!(
                        "patient {pid} assigned to both {prev} and {name}"
                    )));
                }
            }
        }
        if let Some(pid) = manifest
            .patients
            .keys()
            .find(|p| !owner.contains_key(p.as_str()))
        {
            return Err(Error::Leakage(format!("patient {pid} is not assigned")));
        }
        if let Some(extra) = owner.keys().find(|p| !manifest.patients.contains_key(**p)) {
            return Err(Error::Leakage(format!("unknown patient {extra} in plan")));
        }
        Ok(())
    }
}

/// Stratified patient-level split: a held-out test set with both classes,
/// the remainder dealt into `n_folds` near-equal folds.
pub fn split_patients(
    manifest: &DatasetManifest,
    test_fraction: f64,
    n_folds: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if manifest.patients.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    if n_folds < 2 {
        return Err(Error::InvalidSplit(format!("need at least 2 folds, got {n_folds}")));
    }

    let mut rng = rng_stream(seed, "split");
    let mut test = BTreeSet::new();
    let mut folds = vec![BTreeSet::new(); n_folds];
    let mut deal = 0usize;
    for label in Label::ALL {
        // BTreeMap iteration gives a stable order before shuffling.
        let mut ids: Vec<&str> = manifest.patients_with_label(label);
        ids.shuffle(&mut rng);
        let n_test = ((ids.len() as f64 * test_fraction).round() as usize).max(1);
        if ids.len() < n_test + n_folds {
            return Err(Error::InvalidSplit(format!(
                "{} {label} patient(s) cannot fill a test set and {n_folds} folds with both classes",
                ids.len()
            )));
        }
        let (held, rest) = ids.split_at(n_test);
        test.extend(held.iter().map(|s| s.to_string()));
        for pid in rest {
            folds[deal % n_folds].insert(pid.to_string());
            deal += 1;
        }
    }
    Ok(SplitPlan {
        test_patients: test,
        folds,
        seed,
    })
}
