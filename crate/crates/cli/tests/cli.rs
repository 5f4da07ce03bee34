use std::path::Path;
use std::process::{Command, Output};

fn afusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afusion")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = afusion(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--n-frames", "320", "--linguistic-dim", "32"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(afusion(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(afusion(&["train", "--model", "nope"]).status.code(), Some(1));
    assert_eq!(afusion(&["train", "--set", "window=0"]).status.code(), Some(1));
    assert_eq!(afusion(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let folds = dir.path().join("absent.json");
    let out = afusion(&["train", "--folds-file", p(&folds), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn preprocess_is_idempotent_and_isolates_bad_trials() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    let manifest = data.join("manifest.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = ok(&["preprocess", "--manifest", p(&manifest), "--out", p(&a)]);
    assert!(summary.contains("4 ok, 0 failed"), "{summary}");
    ok(&["preprocess", "--manifest", p(&manifest), "--out", p(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in &names {
        assert_eq!(
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap(),
            "{n:?}"
        );
    }

    // drop one trial's audio; the others are still written
    let wav = walk_find(&data, "audio.wav");
    std::fs::remove_file(&wav).unwrap();
    let c = dir.path().join("c");
    let out = afusion(&["preprocess", "--manifest", p(&manifest), "--out", p(&c)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 ok, 1 failed"));
    let atrc = std::fs::read_dir(&c)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "atrc"));
    assert_eq!(atrc.count(), 3);
}

fn walk_find(dir: &Path, name: &str) -> std::path::PathBuf {
    let mut stack = vec![dir.to_path_buf()];
    let mut found = Vec::new();
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == name) {
                found.push(path);
            }
        }
    }
    found.sort();
    found.remove(0)
}

#[test]
fn train_predict_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(
        &data,
        &[
            "--trials",
            "6",
            "--subjects",
            "6",
            "--test-trials",
            "1",
            "--lengths",
            "320,320,320,320,320,320,250",
        ],
    );
    let manifest = data.join("manifest.jsonl");
    let store = dir.path().join("store");
    ok(&["preprocess", "--manifest", p(&manifest), "--out", p(&store)]);

    let runs = dir.path().join("runs");
    let log = ok(&[
        "train",
        "--store",
        p(&store),
        "--out",
        p(&runs),
        "--model",
        "lfan",
        "--modalities",
        "visual,audio",
        "--fold",
        "0",
        "--seeds",
        "0",
        "--max-epoch",
        "2",
        "--set",
        "warmup_epochs=1",
    ]);
    assert!(log.contains("fold 0"), "{log}");
    let ckpt = runs.join("lfan/fold0/seed0/checkpoint.ackp");
    assert!(ckpt.exists());
    assert!(runs.join("lfan/fold0/selection.json").exists());

    let preds = dir.path().join("preds");
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--store",
        p(&store),
        "--out",
        p(&preds),
    ]);
    let mut files: Vec<_> = std::fs::read_dir(&preds).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 7);
    let text = std::fs::read_to_string(files.last().unwrap()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,valence,arousal"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 250);
    for (i, r) in rows.iter().enumerate() {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        for v in &f[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    let csv = dir.path().join("table.csv");
    let table = ok(&["report", p(&runs), "--csv", p(&csv)]);
    assert!(table.contains("LFAN"), "{table}");
    let csv = std::fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("emotion,method,fold0,mean"), "{csv}");

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_ne!(afusion(&["report", p(&empty)]).status.code(), Some(0));
}
