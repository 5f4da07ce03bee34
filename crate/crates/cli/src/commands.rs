use std::path::Path;

use afusion_core::config::{FoldSelection, RunConfig};
use afusion_core::datapipe::{preprocess_trial, read_manifest, record_path, TrialRecord};
use afusion_core::folds::{audit_folds, build_folds, read_folds, write_folds, TOTAL_FOLDS};
use afusion_core::fsutil::write_atomic;
use afusion_core::fusion::clamp_prediction;
use afusion_core::model::{Modality, ModelGraph};
use afusion_core::report::{ReportCell, ResultTable};
use afusion_core::store;
use afusion_core::synth::{generate, SynthSpec};
use afusion_core::train::{predict_records, run_dir, run_fold, select_best, write_json, Checkpoint, Selection};
use afusion_core::verify;
use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use crate::{Cli, Command, GradcheckArgs, PredictArgs, PreprocessArgs, ReportArgs, SynthArgs, TrainArgs};

/// A bad command line or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || c.downcast_ref::<afusion_core::Error>()
                .is_some_and(|e| e.is_validation())
    });
    if validation {
        1
    } else {
        2
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("AFUSION_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("AFUSION_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let results: Vec<_> = entries
        .par_iter()
        .map(|e| -> afusion_core::Result<TrialRecord> {
            let rec = preprocess_trial(e)?;
            rec.save(&record_path(&a.out, &e.trial_id))?;
            Ok(rec)
        })
        .collect();
    let (mut ok, mut frames, mut masked, mut missing) = (0, 0, 0, 0);
    let mut failed = 0;
    for (e, r) in entries.iter().zip(&results) {
        match r {
            Ok(rec) => {
                ok += 1;
                frames += rec.n;
                masked += rec.masked_frames();
                missing += rec.missing_frames;
            }
            Err(err) => {
                failed += 1;
                eprintln!("trial {}: {err}", e.trial_id);
            }
        }
    }
    let folds = build_folds(&entries, a.fold_seed)?;
    for v in audit_folds(&folds, &entries) {
        eprintln!("warning: folds: {v}");
    }
    write_folds(&a.out.join("folds.json"), &folds)?;
    println!("trials: {ok} ok, {failed} failed; frames: {frames}; masked frames: {masked}; missing images: {missing}");
    if failed > 0 {
        bail!("{failed} of {} trials failed", entries.len());
    }
    Ok(())
}

fn build_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        c.apply_text(&text)?;
    }
    let mut set = |k: &str, v: Option<&str>| -> Result<()> {
        if let Some(v) = v {
            c.set(k, v)?;
        }
        Ok(())
    };
    set("model", a.model.as_deref())?;
    set("modalities", a.modalities.as_deref())?;
    set("leader", a.leader.as_deref())?;
    set("fold", a.fold.as_deref())?;
    set("seeds", a.seeds.as_deref())?;
    set("lr", a.lr.as_deref())?;
    set("max_epoch", a.max_epoch.as_deref())?;
    if let Some(s) = &a.store {
        c.store = s.clone();
        c.folds_file = s.join("folds.json");
    }
    if let Some(f) = &a.folds_file {
        c.folds_file = f.clone();
    }
    if let Some(o) = &a.out {
        c.out = o.clone();
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v)?;
    }
    if c.modalities.len() == 1 {
        c.leader = c.modalities[0];
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = build_config(&a)?;
    let folds = read_folds(&config.folds_file)?;
    let selected: Vec<usize> = match config.fold {
        FoldSelection::All => (0..TOTAL_FOLDS).collect(),
        FoldSelection::One(k) => vec![k],
    };
    let model = config.model.to_string();
    for k in selected {
        let spec = folds
            .iter()
            .find(|f| f.fold_index == k)
            .ok_or_else(|| anyhow!("fold {k} is not in {}", config.folds_file.display()))?;
        let data = store::fold_data(&config.store, spec).with_context(|| format!("loading fold {k}"))?;
        let runs = config
            .seeds
            .par_iter()
            .map(|&seed| {
                let dir = run_dir(&config.out, &model, k, seed);
                run_fold(&config, &data, k, seed, Some(&dir))
                    .map(|(r, _)| r)
                    .with_context(|| format!("fold {k} seed {seed}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let sel = select_best(&model, k, runs)?;
        write_json(
            &config.out.join(&model).join(format!("fold{k}")).join("selection.json"),
            &sel,
        )?;
        for r in &sel.runs {
            let b = r.best.map_or((f64::NAN, f64::NAN), |b| (b.ccc_valence, b.ccc_arousal));
            println!(
                "{model} fold {k} seed {}: epochs {}, best val CCC valence {:.4} arousal {:.4}",
                r.seed, r.epochs, b.0, b.1
            );
        }
        println!(
            "{model} fold {k}: selected seed {} ({:.4})",
            sel.best_seed, sel.best_score
        );
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let config = RunConfig::from_text(&ckpt.config_text)?;
    let mut model = ModelGraph::<f32>::new(config.model_config(), ckpt.seed)?;
    ckpt.restore_params(&mut model.store)?;
    let entries = read_manifest(&a.manifest)?;
    for e in &entries {
        let path = record_path(&a.store, &e.trial_id);
        let mut rec = TrialRecord::load(&path)
            .with_context(|| format!("trial {} has no preprocessed record; run preprocess first", e.trial_id))?;
        if config.modalities.contains(&Modality::Linguistic) && rec.linguistic_dim != config.linguistic_dim {
            return Err(UsageError(format!(
                "trial {}: checkpoint requires {}-dim linguistic features, record has {}",
                e.trial_id, config.linguistic_dim, rec.linguistic_dim
            ))
            .into());
        }
        if config.modalities.contains(&Modality::Visual) && rec.missing_frames == rec.n {
            return Err(UsageError(format!(
                "trial {}: checkpoint requires visual input, but no frame images exist",
                e.trial_id
            ))
            .into());
        }
        ckpt.normalizer.apply(&mut rec)?;
        let pred = predict_records(&model, &config, std::slice::from_ref(&rec))?.remove(0);
        let mut csv = String::from("frame,valence,arousal\n");
        for (i, p) in pred.chunks_exact(2).enumerate() {
            csv.push_str(&format!(
                "{i},{:.6},{:.6}\n",
                clamp_prediction(f64::from(p[0])),
                clamp_prediction(f64::from(p[1]))
            ));
        }
        write_atomic(&a.out.join(format!("{}.csv", e.trial_id)), csv.as_bytes())?;
    }
    println!("wrote predictions for {} trials to {}", entries.len(), a.out.display());
    Ok(())
}

fn collect_cells(root: &Path, cells: &mut Vec<ReportCell>) -> Result<()> {
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry?;
        if entry.file_name() != "selection.json" {
            continue;
        }
        let text = std::fs::read_to_string(entry.path())?;
        let sel: Selection =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", entry.path().display()))?;
        let best = sel
            .runs
            .iter()
            .find(|r| r.seed == sel.best_seed)
            .and_then(|r| r.best)
            .ok_or_else(|| anyhow!("{}: selected run has no validation result", entry.path().display()))?;
        cells.push(ReportCell {
            method: sel.method.to_uppercase(),
            fold: sel.fold,
            valence: best.ccc_valence,
            arousal: best.ccc_arousal,
        });
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut cells = Vec::new();
    for root in &a.runs {
        collect_cells(root, &mut cells)?;
    }
    if cells.is_empty() {
        bail!("no completed runs (selection.json) found");
    }
    let table = ResultTable::new(&cells);
    print!("{}", table.to_text());
    if let Some(p) = &a.csv {
        write_atomic(p, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        trials: a.trials,
        subjects: a.subjects,
        val_subjects: a.val_subjects,
        test_trials: a.test_trials,
        n_frames: a.n_frames,
        n_jitter: a.n_jitter,
        lengths: a.lengths,
        fps: a.fps,
        sentinel_runs: a.sentinel_runs,
        missing_frames: a.missing_frames,
        linguistic_dim: a.linguistic_dim,
        seed: a.seed,
    };
    let summary = generate(&spec, &a.out)?;
    println!(
        "wrote {} trials; manifest {}",
        summary.entries.len(),
        summary.manifest.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = verify::run_all(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict} {:<24} instances {} max rel err {:.3e} (tolerance {:.0e})",
            r.name, r.instances, r.max_error, r.tolerance
        );
        if r.redrawn > 0 {
            println!("     {:<24} {} draws near a relu kink redrawn", "", r.redrawn);
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
