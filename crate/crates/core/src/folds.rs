//! Leave-one-supertrial-out, leave-one-user-out and leave-one-score-in
//! partitions over a trial registry.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TrialMeta;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FoldError {
    #[error("subject {0} has fewer than 2 repetitions")]
    InsufficientRepetitions(String),
    #[error("at least 2 subjects are required")]
    TooFewSubjects,
    #[error("no trial has score {0} among its first three OSATS entries")]
    EmptyTrain(u8),
    #[error("fold {0} has an empty test set")]
    EmptyTest(String),
    #[error("LOSI score must lie in 1..=5, got {0}")]
    BadScore(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Loso,
    Louo,
    Losi,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loso" => Some(Self::Loso),
            "louo" => Some(Self::Louo),
            "losi" => Some(Self::Losi),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Loso => "LOSO",
            Self::Louo => "LOUO",
            Self::Losi => "LOSI",
        })
    }
}

/// Test-bucket key for LOSI folds: a homogeneous score `m` or the mixed rest.
pub const OTHER_BUCKET: &str = "other";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub name: String,
    pub scheme: Scheme,
    /// Repetition index, 1-based subject index in sorted order, or LOSI score.
    pub fold_key: u32,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// LOSI only: homogeneous triples `[m, m, m]` keyed by `m`, plus "other".
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub buckets: BTreeMap<String, Vec<String>>,
}

fn sorted(registry: &[TrialMeta]) -> Vec<&TrialMeta> {
    let mut v: Vec<&TrialMeta> = registry.iter().collect();
    v.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    v
}

fn split(
    name: String,
    scheme: Scheme,
    fold_key: u32,
    trials: &[&TrialMeta],
    is_test: impl Fn(&TrialMeta) -> bool,
) -> FoldSpec {
    let (test, train): (Vec<&&TrialMeta>, Vec<&&TrialMeta>) =
        trials.iter().partition(|m| is_test(m));
    FoldSpec {
        name,
        scheme,
        fold_key,
        train: train.into_iter().map(|m| m.trial_id.clone()).collect(),
        test: test.into_iter().map(|m| m.trial_id.clone()).collect(),
        buckets: BTreeMap::new(),
    }
}

/// One fold per repetition index; subjects missing that repetition simply
/// contribute no test trial.
pub fn loso_folds(registry: &[TrialMeta]) -> Result<Vec<FoldSpec>, FoldError> {
    let trials = sorted(registry);
    let mut reps_by_subject: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for m in &trials {
        reps_by_subject
            .entry(&m.subject_id)
            .or_default()
            .insert(m.repetition);
    }
    if let Some((s, _)) = reps_by_subject.iter().find(|(_, r)| r.len() < 2) {
        return Err(FoldError::InsufficientRepetitions(s.to_string()));
    }
    let reps: BTreeSet<u32> = trials.iter().map(|m| m.repetition).collect();
    Ok(reps
        .into_iter()
        .map(|r| {
            split(format!("LOSO-{r}"), Scheme::Loso, r, &trials, |m| {
                m.repetition == r
            })
        })
        .filter(|f| !f.train.is_empty())
        .collect())
}

pub fn louo_folds(registry: &[TrialMeta]) -> Result<Vec<FoldSpec>, FoldError> {
    let trials = sorted(registry);
    let subjects: BTreeSet<&str> = trials.iter().map(|m| m.subject_id.as_str()).collect();
    if subjects.len() < 2 {
        return Err(FoldError::TooFewSubjects);
    }
    Ok(subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            split(
                format!("LOUO-{s}"),
                Scheme::Louo,
                i as u32 + 1,
                &trials,
                |m| m.subject_id == s,
            )
        })
        .collect())
}

/// LOSI train membership: `n` appears among the first three OSATS scores.
pub fn losi_member(osats: &[u8], n: u8) -> bool {
    osats[..3].contains(&n)
}

pub fn losi_folds(registry: &[TrialMeta], n: u8) -> Result<FoldSpec, FoldError> {
    if !(1..=5).contains(&n) {
        return Err(FoldError::BadScore(n));
    }
    let trials = sorted(registry);
    let mut fold = split(format!("LOSI-{n}"), Scheme::Losi, n as u32, &trials, |m| {
        !losi_member(&m.osats, n)
    });
    if fold.train.is_empty() {
        return Err(FoldError::EmptyTrain(n));
    }
    for m in trials.iter().filter(|m| !losi_member(&m.osats, n)) {
        let key = match m.osats[..3] {
            [a, b, c] if a == b && b == c => a.to_string(),
            _ => OTHER_BUCKET.to_string(),
        };
        fold.buckets
            .entry(key)
            .or_default()
            .push(m.trial_id.clone());
    }
    Ok(fold)
}

/// All folds for a scheme; LOSI yields one fold per score with a non-empty
/// train set and a non-empty test set.
pub fn make_folds(
    scheme: Scheme,
    registry: &[TrialMeta],
    losi_n: Option<u8>,
) -> Result<Vec<FoldSpec>, FoldError> {
    let folds = match scheme {
        Scheme::Loso => loso_folds(registry)?,
        Scheme::Louo => louo_folds(registry)?,
        Scheme::Losi => match losi_n {
            Some(n) => vec![losi_folds(registry, n)?],
            None => (1..=5)
                .filter_map(|n| losi_folds(registry, n).ok())
                .collect(),
        },
    };
    if let Some(f) = folds.iter().find(|f| f.test.is_empty()) {
        return Err(FoldError::EmptyTest(f.name.clone()));
    }
    Ok(folds)
}
