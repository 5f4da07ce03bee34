//! End-to-end acceptance checks, one line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use afusion_core::config::RunConfig;
use afusion_core::datapipe::{assemble_batch, enumerate_windows, BatchSpec};
use afusion_core::folds::{audit_folds, build_folds};
use afusion_core::metrics::ccc;
use afusion_core::model::{FusionKind, Modality, ModelGraph};
use afusion_core::synth::SynthSpec;
use afusion_core::train::{
    evaluate_records, predict_records, read_epoch_log, run_fold, write_epoch_log, Checkpoint, FoldData, Trainer,
};
use afusion_core::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    events, flat, pairwise_oracle, pick, plateau_then_jump, rising, scheduler_oracle, scheduler_trace, synth_records,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// CAN over visual and audio with a learning rate and patience suited to a
/// corpus of a few hundred frames.
fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = FusionKind::Can;
    c.modalities = vec![Modality::Visual, Modality::Audio];
    c.leader = Modality::Visual;
    c.lr = 1e-3;
    c.batch = 2;
    c.patience = 30;
    c.validate().unwrap();
    c
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let results = verify::run_all(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = |model: bool| {
        results
            .iter()
            .filter(|r| r.name.contains("model") == model)
            .map(|r| r.max_error)
            .fold(0.0, f64::max)
    };
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let enough = results.iter().all(|r| r.instances >= 5);
    let (ops, models) = (results.len() - 2, 2);
    outcome(
        failed.is_empty() && enough && secs < 120.0,
        format!(
            "{ops} operators max err {:.1e} (< 1e-4), {models} composed models max err {:.1e} (< 1e-3), \
             {:.1}s; failed: {failed:?}",
            worst(false),
            worst(true),
            secs
        ),
    )
}

fn ccc_oracle_equivalence() -> Outcome {
    let fixed = ccc(&[0.1, 0.5, -0.3], &[0.1, 0.5, -0.3]).unwrap() == 1.0
        && ccc(&[0.4, 0.4, 0.4], &[0.1, 0.5, -0.3]).unwrap() == 0.0
        && ccc(&[1.0, -1.0], &[-1.0, 1.0]).unwrap() == -1.0;
    let x = [0.0, 1.0, 2.0, 3.0];
    let y = [1.0, 2.0, 3.0, 5.0];
    let derived = ccc(&x, &y).unwrap();
    let derived_ok = (derived - pairwise_oracle(&x, &y)).abs() < 1e-10 && derived == 0.65;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=500);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|v| rng.gen_range(-0.8..0.8) * v + rng.gen_range(-0.3..0.3))
            .collect();
        worst = worst.max((ccc(&a, &b).unwrap() - pairwise_oracle(&a, &b)).abs());
    }
    outcome(
        fixed && derived_ok && worst < 1e-10,
        format!("fixed examples {fixed}, derived pair {derived} ({derived_ok}), 100 random pairs max diff {worst:.1e}"),
    )
}

fn scheduler_trace_matches() -> Outcome {
    let mut mismatched = Vec::new();
    for (name, vals) in [
        ("rising", rising()),
        ("flat", flat()),
        ("plateau-then-jump", plateau_then_jump()),
    ] {
        if scheduler_trace(&vals) != scheduler_oracle(&vals) {
            mismatched.push(name);
        }
    }
    let trace = scheduler_trace(&flat());
    let (decays, unfreezes) = events(&trace);
    let ladder = decays[..3] == [11, 17, 23] && trace[23].decade == 3;
    let unfreeze = unfreezes.first() == Some(&(28, 2)) && trace[28].decade == 0;
    let last = trace.last().unwrap();
    let early_stop = last.stop && last.epoch == 96 && last.epoch < 99;
    outcome(
        mismatched.is_empty() && ladder && unfreeze && early_stop,
        format!(
            "oracle mismatches {mismatched:?}; decays {decays:?}; unfreezes {unfreezes:?}; stop after epoch {}",
            last.epoch
        ),
    )
}

fn overfit_smoke(dir: &Path) -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        trials: 2,
        subjects: 2,
        val_subjects: 1,
        n_frames: 600,
        fps: 25.0,
        ..SynthSpec::default()
    };
    let (_, records) = synth_records(&spec, dir);
    let data = FoldData::new(records.clone(), records).unwrap();
    let mut config = small_config();
    config.max_epoch = 200;
    let mut trainer = Trainer::new(config.clone(), &data, 0, 0).unwrap();
    let mut reached = None;
    while !trainer.is_done() {
        let log = trainer.run_epoch().unwrap();
        if log.val_ccc_valence >= 0.9 && log.val_ccc_arousal >= 0.9 {
            reached = Some(log.epoch);
            break;
        }
    }
    let fit = evaluate_records(&trainer.model, &config, &data.train).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        reached.is_some() && fit.ccc_valence >= 0.9 && fit.ccc_arousal >= 0.9 && secs < 600.0,
        format!(
            "train CCC valence {:.3} arousal {:.3} at epoch {} (limit 200), {secs:.0}s",
            fit.ccc_valence,
            fit.ccc_arousal,
            reached.map_or("-".into(), |e| e.to_string())
        ),
    )
}

fn generalization(dir: &Path) -> Outcome {
    let spec = SynthSpec {
        trials: 8,
        subjects: 8,
        val_subjects: 2,
        n_frames: 400,
        seed: 1,
        ..SynthSpec::default()
    };
    let (summary, records) = synth_records(&spec, dir);
    let folds = build_folds(&summary.entries, 0).unwrap();
    let mut config = small_config();
    config.max_epoch = 30;
    let mut scores = Vec::new();
    for fold in &folds[1..] {
        let data = FoldData::new(pick(&records, &fold.train_trials), pick(&records, &fold.val_trials)).unwrap();
        let (report, _) = run_fold(&config, &data, fold.fold_index, 0, None).unwrap();
        scores.push(report.best.unwrap().mean_ccc);
    }
    let above = scores.iter().filter(|&&s| s > 0.5).count();
    let shown: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
    outcome(
        above >= 4,
        format!(
            "validation mean CCC per generated fold [{}]; {above}/5 above 0.5",
            shown.join(", ")
        ),
    )
}

/// Rows whose annotation line holds the sentinel in either column, read
/// straight from the file.
fn sentinel_rows_in_file(path: &Path) -> Vec<usize> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .enumerate()
        .filter(|(_, l)| l.split(',').any(|v| v.trim().parse::<f64>().unwrap() == -5.0))
        .map(|(i, _)| i)
        .collect()
}

fn pipeline_invariants(dir: &Path) -> Outcome {
    let lengths = vec![250, 650, 530, 180, 710, 455];
    let spec = SynthSpec {
        trials: 6,
        subjects: 6,
        val_subjects: 1,
        lengths: Some(lengths.clone()),
        fps: 30.0,
        sentinel_runs: 2,
        missing_frames: 3,
        ..SynthSpec::default()
    };
    let (summary, records) = synth_records(&spec, dir);
    let mut problems = Vec::new();
    let (mut sentinels, mut missing) = (0, 0);
    for (k, (entry, rec)) in summary.entries.iter().zip(&records).enumerate() {
        if rec.n != lengths[k] || rec.check().is_err() {
            problems.push(format!("{}: length {} vs {}", rec.trial_id, rec.n, lengths[k]));
        }
        let in_file = sentinel_rows_in_file(entry.paths.annotation_csv.as_ref().unwrap());
        let masked: Vec<usize> = (0..rec.n).filter(|&i| !rec.mask[i]).collect();
        if masked != in_file || in_file != summary.sentinel_rows[k] {
            problems.push(format!("{}: masked rows differ from sentinel rows", rec.trial_id));
        }
        sentinels += in_file.len();
        for &f in &summary.missing_frames[k] {
            if rec.frame(f).iter().any(|&b| b != 0) {
                problems.push(format!("{}: missing frame {f} is not zero", rec.trial_id));
            }
        }
        missing += rec.missing_frames;
    }

    let config = RunConfig::default();
    let spec_all = BatchSpec {
        modalities: config.modalities.clone(),
        window_len: 300,
        audio_patch: config.audio_patch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut windows_seen = 0;
    for eval in [false, true] {
        let refs = enumerate_windows(&records, 300, 200, eval).unwrap();
        for chunk in refs.chunks(12) {
            let b = assemble_batch(&records, chunk, &spec_all, !eval, &mut rng).unwrap();
            let rows = chunk.len() * 300;
            let visual_ok = b.input.visual.as_ref().is_some_and(|v| v.shape()[0] == rows);
            if b.input.steps != 300 || b.labels.len() != rows * 2 || b.mask.len() != rows || !visual_ok {
                problems.push("a window is not 300 steps".into());
            }
            windows_seen += chunk.len();
        }
    }

    let model = ModelGraph::<f32>::new(config.model_config(), 0).unwrap();
    let preds = predict_records(&model, &config, &records).unwrap();
    for (rec, p) in records.iter().zip(&preds) {
        if p.len() != rec.n * 2 {
            problems.push(format!(
                "{}: stitched {} frames, expected {}",
                rec.trial_id,
                p.len() / 2,
                rec.n
            ));
        }
    }

    let violations = audit_folds(&build_folds(&summary.entries, 0).unwrap(), &summary.entries);
    let pass = problems.is_empty() && violations.is_empty() && sentinels > 0 && missing > 0;
    outcome(
        pass,
        format!(
            "6 trials (N {lengths:?}), {sentinels} sentinel rows all masked, {missing} missing frames zeroed, \
             {windows_seen} windows of 300 steps, stitched lengths match N, {} fold violations; problems {problems:?}",
            violations.len()
        ),
    )
}

fn determinism_and_persistence(dir: &Path) -> Outcome {
    let spec = SynthSpec {
        trials: 2,
        subjects: 2,
        val_subjects: 1,
        n_frames: 600,
        seed: 2,
        ..SynthSpec::default()
    };
    let (summary, records) = synth_records(&spec, &dir.join("corpus"));
    let fold = &build_folds(&summary.entries, 0).unwrap()[0];
    let data = FoldData::new(pick(&records, &fold.train_trials), pick(&records, &fold.val_trials)).unwrap();
    let mut config = small_config();
    config.max_epoch = 8;
    config.warmup_epochs = 2;
    config.patience = 1;

    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    let (_, logs_a) = run_fold(&config, &data, 0, 0, Some(&a)).unwrap();
    run_fold(&config, &data, 0, 0, Some(&b)).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let identical_runs =
        read(&a, "epochs.csv") == read(&b, "epochs.csv") && read(&a, "checkpoint.ackp") == read(&b, "checkpoint.ackp");

    let bytes = read(&a, "checkpoint.ackp");
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let round_trip = ckpt.encode() == bytes && Checkpoint::decode(&ckpt.encode()).unwrap() == ckpt;

    // interrupt after three epochs, leaving the files an epoch-end save leaves
    std::fs::create_dir_all(&c).unwrap();
    let mut t = Trainer::new(config.clone(), &data, 0, 0).unwrap();
    let mut partial = Vec::new();
    for _ in 0..3 {
        partial.push(t.run_epoch().unwrap());
        write_epoch_log(&c.join("epochs.csv"), &partial).unwrap();
        t.checkpoint().save(&c.join("checkpoint.ackp")).unwrap();
    }
    let (_, logs_c) = run_fold(&config, &data, 0, 0, Some(&c)).unwrap();
    let resumed = logs_c == logs_a
        && read_epoch_log(&c.join("epochs.csv")).unwrap() == logs_a
        && read(&c, "checkpoint.ackp") == bytes;
    let decays = logs_a.iter().filter(|l| l.lr_decayed).count();
    outcome(
        identical_runs && round_trip && resumed,
        format!(
            "{} epochs ({decays} decays): repeat runs identical {identical_runs}, checkpoint round trip {round_trip}, \
             resumed trace equal {resumed}",
            logs_a.len()
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let sub = |name: &str| root.path().join(name);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("CCC oracle equivalence", Box::new(ccc_oracle_equivalence)),
        ("scheduler trace", Box::new(scheduler_trace_matches)),
        ("overfit smoke test", Box::new(move || overfit_smoke(&sub("overfit")))),
        (
            "generalization sanity",
            Box::new(move || generalization(&sub("generalization"))),
        ),
        (
            "pipeline invariants",
            Box::new(move || pipeline_invariants(&sub("pipeline"))),
        ),
        (
            "determinism and persistence",
            Box::new(move || determinism_and_persistence(&sub("determinism"))),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {} {name}: {} [{:.1}s] {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
