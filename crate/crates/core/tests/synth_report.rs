use afusion_core::datapipe::{parse_manifest, preprocess_trial, Split};
use afusion_core::report::{ReportCell, ResultTable};
use afusion_core::synth::{generate, SynthSpec};

fn small() -> SynthSpec {
    SynthSpec {
        trials: 3,
        subjects: 3,
        val_subjects: 1,
        test_trials: 1,
        n_frames: 120,
        linguistic_dim: 32,
        ..SynthSpec::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = generate(&small(), a.path()).unwrap();
    let sb = generate(&small(), b.path()).unwrap();
    assert_eq!(sa.sentinel_rows, sb.sentinel_rows);
    assert_eq!(sa.missing_frames, sb.missing_frames);
    for (ea, eb) in sa.entries.iter().zip(&sb.entries) {
        for (pa, pb) in [
            (&ea.paths.wav, &eb.paths.wav),
            (&ea.paths.words_csv, &eb.paths.words_csv),
        ] {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
        let ra = preprocess_trial(ea).unwrap();
        let rb = preprocess_trial(eb).unwrap();
        assert_eq!(ra.encode(), rb.encode());
    }
}

#[test]
fn manifest_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(&small(), dir.path()).unwrap();
    let parsed = parse_manifest(&std::fs::read_to_string(&s.manifest).unwrap(), "manifest").unwrap();
    assert_eq!(parsed.len(), 4);
    let splits: Vec<Split> = parsed.iter().map(|e| e.split).collect();
    assert_eq!(splits, [Split::Train, Split::Train, Split::Val, Split::Test]);
    assert!(parsed[3].paths.annotation_csv.is_none());
    let test = preprocess_trial(&s.entries[3]).unwrap();
    assert!(test.mask.iter().all(|&m| !m));
}

#[test]
fn different_seed_different_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = generate(&small(), a.path()).unwrap();
    let sb = generate(&SynthSpec { seed: 9, ..small() }, b.path()).unwrap();
    assert_ne!(
        std::fs::read(&sa.entries[0].paths.wav).unwrap(),
        std::fs::read(&sb.entries[0].paths.wav).unwrap()
    );
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(
        &SynthSpec {
            val_subjects: 3,
            ..small()
        },
        dir.path()
    )
    .is_err());
    assert!(generate(
        &SynthSpec {
            lengths: Some(vec![100]),
            ..small()
        },
        dir.path()
    )
    .is_err());
}

fn cell(method: &str, fold: usize, v: f64, a: f64) -> ReportCell {
    ReportCell {
        method: method.into(),
        fold,
        valence: v,
        arousal: a,
    }
}

#[test]
fn table_rows_columns_and_means() {
    let t = ResultTable::new(&[
        cell("LFAN", 0, 0.5, 0.25),
        cell("LFAN", 2, 0.7, 0.35),
        cell("CAN", 0, 0.6, 0.4),
    ]);
    assert_eq!(t.folds, [0, 2]);
    let csv = t.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "emotion,method,fold0,fold2,mean");
    assert_eq!(lines[1], "valence,CAN,0.600,-,0.600");
    assert_eq!(lines[2], "valence,LFAN,0.500,0.700,0.600");
    assert_eq!(lines[3], "arousal,CAN,0.400,-,0.400");
    assert_eq!(lines[4], "arousal,LFAN,0.250,0.350,0.300");

    let text = t.to_text();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(2).unwrap().contains("0.700"));
}
