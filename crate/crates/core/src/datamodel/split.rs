use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Session};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Train, Fold::Val, Fold::Test];

    pub fn index(self) -> usize {
        match self {
            Fold::Train => 0,
            Fold::Val => 1,
            Fold::Test => 2,
        }
    }
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        })
    }
}

impl std::str::FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "val" | "validation" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            other => Err(Error::invalid(format!("unknown fold {other:?}"))),
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

/// Subject-level fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Fold>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    pub fn fold_of(&self, subject_id: &str) -> Option<Fold> {
        self.assignment.get(subject_id).copied()
    }

    pub fn subjects_in(&self, fold: Fold) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        self.assignment.values().for_each(|f| c[f.index()] += 1);
        c
    }

    /// Sessions of `manifest` whose subject is in `fold`, in manifest order.
    pub fn sessions_in<'m>(&self, manifest: &'m Manifest, fold: Fold) -> Vec<&'m Session> {
        manifest
            .sessions
            .iter()
            .filter(|s| self.fold_of(&s.subject_id) == Some(fold))
            .collect()
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`, then a repair
/// pass that moves one item at a time from the largest fold (lowest index on
/// ties) into any empty fold. Remainder ties go to the lower index.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    // tolerate products like 0.15 * 40 = 5.999999999999999
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let rem = [0, 1, 2].map(|i| (quotas[i] - counts[i] as f64).max(0.0));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    let mut left = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    if n >= 3 {
        while let Some(empty) = (0..3).find(|&i| counts[i] == 0) {
            let donor = (0..3).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }
    counts
}

/// Shuffles the sorted subject list with `seed` and deals it into folds of
/// the sizes given by [`apportion`].
pub fn make_splits(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be positive")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} sum to {total}, not 1")));
    }
    let mut subjects = manifest.subjects();
    if subjects.len() < 3 {
        return Err(Error::invalid(format!(
            "subject-independent splitting needs at least 3 subjects, found {}",
            subjects.len()
        )));
    }
    let counts = apportion(subjects.len(), ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut assignment = BTreeMap::new();
    let mut it = subjects.into_iter();
    for fold in Fold::ALL {
        for subject in it.by_ref().take(counts[fold.index()]) {
            assignment.insert(subject, fold);
        }
    }
    Ok(SplitAssignment {
        assignment,
        seed,
        ratios,
    })
}
