//! The preprocessed store: one record file per trial plus `folds.json`.

use std::path::Path;

use crate::datapipe::{record_path, TrialRecord};
use crate::error::Result;
use crate::folds::FoldSpec;
use crate::train::FoldData;

pub fn load_records(store: &Path, trial_ids: &[String]) -> Result<Vec<TrialRecord>> {
    trial_ids
        .iter()
        .map(|id| TrialRecord::load(&record_path(store, id)))
        .collect()
}

/// Loads and normalizes the trials of one fold.
pub fn fold_data(store: &Path, fold: &FoldSpec) -> Result<FoldData> {
    FoldData::new(
        load_records(store, &fold.train_trials)?,
        load_records(store, &fold.val_trials)?,
    )
}
