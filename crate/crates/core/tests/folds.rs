use std::collections::BTreeSet;

use afusion_core::datapipe::{ManifestEntry, Split, TrialPaths};
use afusion_core::folds::{audit_folds, build_folds, parse_folds, read_folds, write_folds, Violation};
use proptest::prelude::*;

fn entry(trial: &str, subject: &str, split: Split) -> ManifestEntry {
    ManifestEntry {
        trial_id: trial.into(),
        subject_id: subject.into(),
        split,
        fps: 30.0,
        paths: TrialPaths {
            frames_dir: "f".into(),
            wav: "a.wav".into(),
            words_csv: "w.csv".into(),
            linguistic_bin: "l.bin".into(),
            annotation_csv: Some("a.csv".into()),
        },
    }
}

/// `trials[s]` trials for training subject `s`, plus two val subjects.
fn manifest(trials: &[usize]) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for (s, &k) in trials.iter().enumerate() {
        for t in 0..k {
            out.push(entry(&format!("tr{s}_{t}"), &format!("s{s}"), Split::Train));
        }
    }
    out.push(entry("va0", "v0", Split::Val));
    out.push(entry("va1", "v1", Split::Val));
    out.push(entry("te0", "x0", Split::Test));
    out
}

#[test]
fn ten_single_trial_subjects_fill_five_pairs() {
    let m = manifest(&[1; 10]);
    let folds = build_folds(&m, 7).unwrap();
    assert_eq!(folds.len(), 6);
    assert!(audit_folds(&folds, &m).is_empty());
    for f in &folds[1..] {
        assert_eq!(f.val_trials.len(), 2);
        assert!(f.train_trials.contains(&"va0".to_string()));
        assert!(!f.train_trials.contains(&"te0".to_string()));
    }
    let mut validated: Vec<&String> = folds[1..].iter().flat_map(|f| &f.val_trials).collect();
    validated.sort();
    validated.dedup();
    assert_eq!(validated.len(), 10);
}

#[test]
fn fold_zero_is_the_manifest_partition() {
    let m = manifest(&[2, 1, 3]);
    let f0 = &build_folds(&m, 0).unwrap()[0];
    assert_eq!(f0.val_trials, ["va0", "va1"]);
    assert_eq!(f0.train_trials, ["tr0_0", "tr0_1", "tr1_0", "tr2_0", "tr2_1", "tr2_2"]);
}

#[test]
fn same_seed_same_folds() {
    let m = manifest(&[1, 2, 3, 1, 2, 1, 1, 4]);
    assert_eq!(build_folds(&m, 11).unwrap(), build_folds(&m, 11).unwrap());
}

#[test]
fn subject_in_train_and_val_is_rejected() {
    let mut m = manifest(&[1, 1]);
    m.push(entry("leak", "s0", Split::Val));
    assert!(build_folds(&m, 0).is_err());
}

#[test]
fn audit_names_injected_faults() {
    let m = manifest(&[1; 10]);
    let mut folds = build_folds(&m, 3).unwrap();
    assert!(audit_folds(&folds, &m).is_empty());

    let moved = folds[2].val_trials[0].clone();
    let subject = m.iter().find(|e| e.trial_id == moved).unwrap().subject_id.clone();
    folds[2].train_trials.push(moved.clone());
    let v = audit_folds(&folds, &m);
    assert!(v.contains(&Violation::SubjectOverlap { fold: 2, subject }), "{v:?}");

    let mut folds = build_folds(&m, 3).unwrap();
    let dropped = folds[4].val_trials.pop().unwrap();
    let v = audit_folds(&folds, &m);
    assert!(v.contains(&Violation::MissingTrial { trial: dropped }), "{v:?}");

    let mut folds = build_folds(&m, 3).unwrap();
    folds[0].val_trials.push("ghost".into());
    let v = audit_folds(&folds, &m);
    assert!(v.contains(&Violation::UnknownTrial {
        fold: 0,
        trial: "ghost".into()
    }));
    assert!(v.contains(&Violation::FoldZeroMismatch { partition: "val" }));

    let mut folds = build_folds(&m, 3).unwrap();
    folds.pop();
    assert!(audit_folds(&folds, &m).contains(&Violation::FoldCount { got: 5 }));
}

#[test]
fn folds_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(&[1, 2, 1, 1, 1, 3]);
    let folds = build_folds(&m, 5).unwrap();
    let path = dir.path().join("folds.json");
    write_folds(&path, &folds).unwrap();
    assert_eq!(read_folds(&path).unwrap(), folds);
    assert!(parse_folds("[{\"fold_index\": 0}]", "x").is_err());
    assert!(parse_folds("not json", "x").is_err());
}

proptest! {
    #[test]
    fn generated_folds_partition_training_subjects(
        trials in prop::collection::vec(1usize..5, 1..30),
        seed in any::<u64>(),
    ) {
        let m = manifest(&trials);
        let folds = build_folds(&m, seed).unwrap();
        let violations = audit_folds(&folds, &m);
        // fewer than five subjects leaves some bins empty; nothing else may fail
        let only_empty_bins = violations
            .iter()
            .all(|v| matches!(v, Violation::EmptyPartition { partition: "val", .. }));
        prop_assert!(only_empty_bins, "{:?}", violations);
        if trials.len() >= 5 {
            prop_assert!(violations.is_empty());
        }

        let subject = |t: &str| m.iter().find(|e| e.trial_id == t).unwrap().subject_id.clone();
        for f in &folds {
            let tr: BTreeSet<String> = f.train_trials.iter().map(|t| subject(t)).collect();
            let va: BTreeSet<String> = f.val_trials.iter().map(|t| subject(t)).collect();
            prop_assert!(tr.is_disjoint(&va));
        }

        let sizes: Vec<usize> = folds[1..].iter().map(|f| f.val_trials.len()).collect();
        let max_per_subject = *trials.iter().max().unwrap();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        prop_assert!(spread <= max_per_subject, "{:?}", sizes);
    }
}
