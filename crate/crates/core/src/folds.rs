//! Subject-independent cross-validation folds.
//!
//! Fold 0 is the manifest's own train/val partition. Folds 1..=5 split the
//! training subjects into five bins and validate on one bin each.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const GENERATED_FOLDS: usize = 5;
pub const TOTAL_FOLDS: usize = GENERATED_FOLDS + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_trials: Vec<String>,
    pub val_trials: Vec<String>,
    pub seed: u64,
}

fn subjects_by_split(entries: &[ManifestEntry], split: Split) -> BTreeMap<&str, Vec<&str>> {
    let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.split == split) {
        out.entry(e.subject_id.as_str()).or_default().push(e.trial_id.as_str());
    }
    out
}

/// Builds fold 0 plus five generated folds. Subjects are shuffled by `seed`
/// and each goes to the bin with the fewest trials so far (lowest index on
/// ties). Bins may be empty when there are fewer than five subjects.
pub fn build_folds(entries: &[ManifestEntry], seed: u64) -> Result<Vec<FoldSpec>> {
    let train = subjects_by_split(entries, Split::Train);
    let val = subjects_by_split(entries, Split::Val);
    if let Some(s) = train.keys().find(|s| val.contains_key(*s)) {
        return Err(Error::Data(format!(
            "subject `{s}` has trials in both the train and val splits"
        )));
    }
    let mut subjects: Vec<&str> = train.keys().copied().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bins: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); GENERATED_FOLDS];
    let mut load = [0usize; GENERATED_FOLDS];
    for s in subjects {
        let k = (0..GENERATED_FOLDS).min_by_key(|&k| (load[k], k)).unwrap();
        load[k] += train[s].len();
        bins[k].insert(s);
    }

    let labelled: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split != Split::Test).collect();
    let ids = |pred: &dyn Fn(&ManifestEntry) -> bool| -> Vec<String> {
        labelled
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.trial_id.clone())
            .collect()
    };
    let mut folds = vec![FoldSpec {
        fold_index: 0,
        train_trials: ids(&|e| e.split == Split::Train),
        val_trials: ids(&|e| e.split == Split::Val),
        seed,
    }];
    for (k, bin) in bins.iter().enumerate() {
        let in_bin = |e: &ManifestEntry| e.split == Split::Train && bin.contains(e.subject_id.as_str());
        folds.push(FoldSpec {
            fold_index: k + 1,
            train_trials: ids(&|e| !in_bin(e)),
            val_trials: ids(&in_bin),
            seed,
        });
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    FoldCount {
        got: usize,
    },
    FoldIndex {
        position: usize,
        index: usize,
    },
    SubjectOverlap {
        fold: usize,
        subject: String,
    },
    UnknownTrial {
        fold: usize,
        trial: String,
    },
    EmptyPartition {
        fold: usize,
        partition: &'static str,
    },
    FoldZeroMismatch {
        partition: &'static str,
    },
    /// A training trial that no generated fold validates on.
    MissingTrial {
        trial: String,
    },
    DuplicateValidation {
        trial: String,
        folds: Vec<usize>,
    },
    /// A generated fold validating on a trial outside the original train split.
    ForeignValidation {
        fold: usize,
        trial: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FoldCount { got } => write!(f, "expected {TOTAL_FOLDS} folds, got {got}"),
            Violation::FoldIndex { position, index } => {
                write!(f, "fold at position {position} has index {index}")
            }
            Violation::SubjectOverlap { fold, subject } => {
                write!(f, "fold {fold}: subject `{subject}` is in both train and val")
            }
            Violation::UnknownTrial { fold, trial } => {
                write!(f, "fold {fold}: trial `{trial}` is not in the manifest")
            }
            Violation::EmptyPartition { fold, partition } => {
                write!(f, "fold {fold}: {partition} partition is empty")
            }
            Violation::FoldZeroMismatch { partition } => {
                write!(f, "fold 0 {partition} trials differ from the manifest split")
            }
            Violation::MissingTrial { trial } => {
                write!(f, "training trial `{trial}` is validated by no generated fold")
            }
            Violation::DuplicateValidation { trial, folds } => {
                write!(f, "trial `{trial}` is validated by folds {folds:?}")
            }
            Violation::ForeignValidation { fold, trial } => {
                write!(f, "fold {fold}: validates on `{trial}` from outside the train split")
            }
        }
    }
}

/// Checks every fold invariant against the manifest; empty means valid.
pub fn audit_folds(folds: &[FoldSpec], entries: &[ManifestEntry]) -> Vec<Violation> {
    let mut out = Vec::new();
    if folds.len() != TOTAL_FOLDS {
        out.push(Violation::FoldCount { got: folds.len() });
    }
    let by_id: HashMap<&str, &ManifestEntry> = entries.iter().map(|e| (e.trial_id.as_str(), e)).collect();
    for (pos, fold) in folds.iter().enumerate() {
        if fold.fold_index != pos {
            out.push(Violation::FoldIndex {
                position: pos,
                index: fold.fold_index,
            });
        }
        let k = fold.fold_index;
        let mut subjects = |ids: &[String]| -> BTreeSet<String> {
            ids.iter()
                .filter_map(|t| match by_id.get(t.as_str()) {
                    Some(e) => Some(e.subject_id.clone()),
                    None => {
                        out.push(Violation::UnknownTrial {
                            fold: k,
                            trial: t.clone(),
                        });
                        None
                    }
                })
                .collect()
        };
        let train = subjects(&fold.train_trials);
        let val = subjects(&fold.val_trials);
        for s in train.intersection(&val) {
            out.push(Violation::SubjectOverlap {
                fold: k,
                subject: s.clone(),
            });
        }
        if fold.train_trials.is_empty() {
            out.push(Violation::EmptyPartition {
                fold: k,
                partition: "train",
            });
        }
        if fold.val_trials.is_empty() {
            out.push(Violation::EmptyPartition {
                fold: k,
                partition: "val",
            });
        }
    }
    let split_ids = |split: Split| -> BTreeSet<&str> {
        entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.trial_id.as_str())
            .collect()
    };
    let original_train = split_ids(Split::Train);
    fn as_set(v: &[String]) -> BTreeSet<&str> {
        v.iter().map(String::as_str).collect()
    }
    if let Some(f0) = folds.first().filter(|f| f.fold_index == 0) {
        if as_set(&f0.train_trials) != original_train {
            out.push(Violation::FoldZeroMismatch { partition: "train" });
        }
        if as_set(&f0.val_trials) != split_ids(Split::Val) {
            out.push(Violation::FoldZeroMismatch { partition: "val" });
        }
    }
    let mut validated: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for fold in folds.iter().filter(|f| f.fold_index != 0) {
        for t in &fold.val_trials {
            if !original_train.contains(t.as_str()) {
                out.push(Violation::ForeignValidation {
                    fold: fold.fold_index,
                    trial: t.clone(),
                });
            }
            validated.entry(t.as_str()).or_default().push(fold.fold_index);
        }
    }
    for t in &original_train {
        match validated.get(t) {
            None => out.push(Violation::MissingTrial { trial: t.to_string() }),
            Some(ks) if ks.len() > 1 => out.push(Violation::DuplicateValidation {
                trial: t.to_string(),
                folds: ks.clone(),
            }),
            _ => {}
        }
    }
    out
}

pub fn write_folds(path: &Path, folds: &[FoldSpec]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(folds).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_folds(path: &Path) -> Result<Vec<FoldSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_folds(&text, &path.display().to_string())
}

pub fn parse_folds(text: &str, context: &str) -> Result<Vec<FoldSpec>> {
    serde_json::from_str(text).map_err(|e| Error::Json {
        context: context.to_string(),
        source: e,
    })
}
