//! The epoch loop: batches, CCC loss, Adam, scheduler, best-state reload.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::datapipe::{
    assemble_batch, enumerate_windows, stitch_predictions, BatchSpec, Normalizer, TrialRecord, WindowBatch, WindowRef,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{ccc, ccc_loss, masked_eval, CccReport};
use crate::model::ModelGraph;
use crate::seq_blocks::ForwardCtx;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::optim::Adam;
use super::scheduler::{Scheduler, TickOutcome};

/// Normalized training and validation records of one fold.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub train: Vec<TrialRecord>,
    pub val: Vec<TrialRecord>,
    pub normalizer: Normalizer,
}

impl FoldData {
    /// Fits normalization on `train` and applies it to both partitions.
    pub fn new(train: Vec<TrialRecord>, val: Vec<TrialRecord>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(format!(
                "empty partition: {} training and {} validation trials",
                train.len(),
                val.len()
            )));
        }
        let normalizer = Normalizer::fit(&train.iter().collect::<Vec<_>>())?;
        Self::with_normalizer(train, val, normalizer)
    }

    pub fn with_normalizer(
        mut train: Vec<TrialRecord>,
        mut val: Vec<TrialRecord>,
        normalizer: Normalizer,
    ) -> Result<Self> {
        for r in train.iter_mut().chain(val.iter_mut()) {
            normalizer.apply(r)?;
        }
        Ok(FoldData { train, val, normalizer })
    }
}

/// One row of `epochs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub phase: String,
    /// Peak learning rate used during the epoch.
    pub lr: f64,
    pub unfrozen_groups: u8,
    pub batches: usize,
    pub train_loss: f64,
    pub train_ccc_valence: f64,
    pub train_ccc_arousal: f64,
    pub val_ccc_valence: f64,
    pub val_ccc_arousal: f64,
    pub val_ccc_mean: f64,
    pub best: f64,
    pub improved: bool,
    pub lr_decayed: bool,
    pub unfroze: u8,
    pub plateau_counter: u32,
    pub early_stop_counter: u32,
    pub stop: bool,
}

pub fn write_epoch_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("epoch log: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("epoch log: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn batch_spec(config: &RunConfig) -> BatchSpec {
    BatchSpec {
        modalities: config.modalities.clone(),
        window_len: config.window,
        audio_patch: config.audio_patch,
    }
}

/// Stitched `[n, 2]` raw predictions for every record, evaluated without
/// augmentation or dropout.
pub fn predict_records(model: &ModelGraph<f32>, config: &RunConfig, records: &[TrialRecord]) -> Result<Vec<Vec<f32>>> {
    let spec = batch_spec(config);
    let windows = enumerate_windows(records, config.window, config.hop, true)?;
    let mut outputs: Vec<Vec<(WindowRef, Vec<f32>)>> = vec![Vec::new(); records.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(config.batch) {
        let batch = assemble_batch(records, chunk, &spec, false, &mut rng)?;
        let mut tape = Tape::<f32>::new();
        let p = model.store.bind(&mut tape, 0);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let out = model.forward(&mut tape, &p, &batch.input, &mut ctx)?;
        let pred = tape.value(out.prediction).data();
        let per = config.window * 2;
        for (i, wr) in chunk.iter().enumerate() {
            outputs[wr.trial].push((*wr, pred[i * per..(i + 1) * per].to_vec()));
        }
    }
    records
        .iter()
        .zip(&outputs)
        .map(|(r, outs)| {
            let views: Vec<_> = outs.iter().map(|(w, o)| (w.window, o.as_slice())).collect();
            stitch_predictions(&views, r.n, config.window, 2)
        })
        .collect()
}

/// CCC over the annotated frames of all records concatenated.
pub fn evaluate_records(model: &ModelGraph<f32>, config: &RunConfig, records: &[TrialRecord]) -> Result<CccReport> {
    let preds = predict_records(model, config, records)?;
    let mut p = Vec::new();
    let mut t = Vec::new();
    let mut m = Vec::new();
    for (r, pr) in records.iter().zip(&preds) {
        p.extend(pr.iter().map(|&v| f64::from(v)));
        t.extend(r.labels.iter().map(|&v| f64::from(v)));
        m.extend_from_slice(&r.mask);
    }
    masked_eval(&p, &t, &m)
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub fold: usize,
    pub seed: u64,
    pub model: ModelGraph<f32>,
    pub adam: Adam,
    pub scheduler: Scheduler,
    pub best: Option<CccReport>,
    best_params: Vec<Tensor<f32>>,
    data: &'a FoldData,
    train_windows: Vec<WindowRef>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a FoldData, fold: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = ModelGraph::new(config.model_config(), seed)?;
        let train_windows = enumerate_windows(&data.train, config.window, config.hop, false)?;
        Ok(Trainer {
            adam: Adam::new(config.adam_config()),
            scheduler: Scheduler::new(config.scheduler_config())?,
            best: None,
            best_params: model.store.values(),
            model,
            config,
            fold,
            seed,
            data,
            train_windows,
        })
    }

    /// Continues a run from its last epoch-end checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &'a FoldData) -> Result<Self> {
        let config = RunConfig::from_text(&ckpt.config_text)?;
        if ckpt.normalizer != data.normalizer {
            return Err(Error::Data(
                "fold data normalization differs from the checkpoint's".into(),
            ));
        }
        let mut t = Trainer::new(config, data, ckpt.fold, ckpt.seed)?;
        ckpt.restore_params(&mut t.model.store)?;
        t.best_params = t.model.store.values();
        t.adam = ckpt.optimizer.clone();
        t.scheduler = ckpt.scheduler.clone();
        t.best = ckpt.best;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            fold: self.fold,
            seed: self.seed,
            tensors: Checkpoint::tensors_from(&self.model.store),
            optimizer: self.adam.clone(),
            scheduler: self.scheduler.clone(),
            normalizer: self.data.normalizer.clone(),
            best: self.best,
        }
    }

    pub fn is_done(&self) -> bool {
        self.scheduler.stopped
    }

    /// Parameters of the best validation epoch so far.
    pub fn best_params(&self) -> &[Tensor<f32>] {
        &self.best_params
    }

    fn train_step(
        &mut self,
        batch: &WindowBatch,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(f64, Vec<f32>, Vec<f32>)>> {
        let rows = batch.valid_rows();
        if rows.len() < 2 {
            return Ok(None);
        }
        let group = self.scheduler.current_group;
        let mut tape = Tape::<f32>::new();
        let p = self.model.store.bind(&mut tape, group);
        let mut ctx = ForwardCtx { training: true, rng };
        let out = self.model.forward(&mut tape, &p, &batch.input, &mut ctx)?;
        let total = batch.input.batch * batch.input.steps;
        let flat = tape.reshape(out.prediction, &[total, 2])?;
        let pred = tape.gather_rows(flat, &rows)?;
        let target: Vec<f32> = rows
            .iter()
            .flat_map(|&r| [batch.labels[2 * r], batch.labels[2 * r + 1]])
            .collect();
        let tv = tape.constant(Tensor::new(vec![rows.len(), 2], target.clone())?);
        let loss = ccc_loss(&mut tape, pred, tv)?;
        tape.backward(loss)?;
        self.model.store.zero_grad();
        self.model.store.accumulate_grads(&tape, &p);
        self.adam.step(&mut self.model.store, group, lr)?;
        Ok(Some((
            f64::from(tape.scalar(loss)),
            tape.value(pred).data().to_vec(),
            target,
        )))
    }

    /// Runs one epoch of training and validation and feeds the scheduler.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        if self.scheduler.stopped {
            return Err(Error::SchedulerStopped);
        }
        let epoch = self.scheduler.epoch;
        let phase = self.scheduler.phase();
        let group = self.scheduler.current_group;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(epoch));
        let mut order = self.train_windows.clone();
        order.shuffle(&mut rng);
        let spec = batch_spec(&self.config);
        let n_batches = order.len().div_ceil(self.config.batch);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        let (mut tp, mut tt) = (Vec::new(), Vec::new());
        let mut peak_lr: f64 = 0.0;
        for (b, chunk) in order.chunks(self.config.batch).enumerate() {
            let lr = self.scheduler.batch_lr(b, n_batches);
            peak_lr = peak_lr.max(lr);
            let batch = assemble_batch(&self.data.train, chunk, &spec, true, &mut rng)?;
            if let Some((loss, p, t)) = self.train_step(&batch, lr, &mut rng)? {
                loss_sum += loss;
                steps += 1;
                tp.extend(p);
                tt.extend(t);
            }
        }
        let column = |v: &[f32], d: usize| v.iter().skip(d).step_by(2).map(|&x| f64::from(x)).collect::<Vec<_>>();
        let train_ccc = |d| {
            if tp.len() >= 4 {
                ccc(&column(&tp, d), &column(&tt, d)).unwrap_or(0.0)
            } else {
                0.0
            }
        };
        let val = evaluate_records(&self.model, &self.config, &self.data.val)?;
        let monitored = self.config.monitor.pick(&val);
        let TickOutcome {
            improved,
            decayed,
            unfrozen,
            stop,
        } = self.scheduler.tick(monitored)?;
        if improved {
            self.best_params = self.model.store.values();
            self.best = Some(val);
        }
        self.model.store.set_values(&self.best_params)?;
        Ok(EpochLog {
            epoch,
            phase: phase.name().to_string(),
            lr: peak_lr,
            unfrozen_groups: group,
            batches: steps,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            train_ccc_valence: train_ccc(0),
            train_ccc_arousal: train_ccc(1),
            val_ccc_valence: val.ccc_valence,
            val_ccc_arousal: val.ccc_arousal,
            val_ccc_mean: val.mean_ccc,
            best: self.scheduler.best,
            improved,
            lr_decayed: decayed,
            unfroze: unfrozen.unwrap_or(0),
            plateau_counter: self.scheduler.counter,
            early_stop_counter: self.scheduler.early_stop_counter,
            stop,
        })
    }
}

/// Outcome of one (fold, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fold: usize,
    pub seed: u64,
    pub epochs: u32,
    pub best_epoch: Option<u32>,
    pub best: Option<CccReport>,
    /// Monitored validation score of the best epoch.
    pub best_score: f64,
}

/// Directory of one (model, fold, seed) run.
pub fn run_dir(out: &Path, model: &str, fold: usize, seed: u64) -> std::path::PathBuf {
    out.join(model).join(format!("fold{fold}")).join(format!("seed{seed}"))
}

/// Trains until the scheduler stops, writing `config.txt`, `epochs.csv`
/// and `checkpoint.ackp` after every epoch and `report.json` at the end.
/// An existing checkpoint in `dir` is resumed.
pub fn run_fold(
    config: &RunConfig,
    data: &FoldData,
    fold: usize,
    seed: u64,
    dir: Option<&Path>,
) -> Result<(RunReport, Vec<EpochLog>)> {
    let ckpt_path = dir.map(|d| d.join("checkpoint.ackp"));
    let log_path = dir.map(|d| d.join("epochs.csv"));
    let (mut trainer, mut logs) = match (&ckpt_path, &log_path) {
        (Some(c), Some(l)) if c.exists() && l.exists() => {
            let ckpt = Checkpoint::load(c)?;
            let mut logs = read_epoch_log(l)?;
            logs.truncate(ckpt.scheduler.epoch as usize);
            (Trainer::from_checkpoint(&ckpt, data)?, logs)
        }
        _ => (Trainer::new(config.clone(), data, fold, seed)?, Vec::new()),
    };
    if let Some(d) = dir {
        write_atomic(&d.join("config.txt"), trainer.config.to_text().as_bytes())?;
    }
    while !trainer.is_done() {
        let row = trainer.run_epoch()?;
        log::info!(
            "fold {fold} seed {seed} epoch {} {} lr {:.3e} val {:.4} best {:.4}",
            row.epoch,
            row.phase,
            row.lr,
            row.val_ccc_mean,
            row.best
        );
        logs.push(row);
        if let (Some(c), Some(l)) = (&ckpt_path, &log_path) {
            write_epoch_log(l, &logs)?;
            trainer.checkpoint().save(c)?;
        }
    }
    let report = RunReport {
        fold,
        seed,
        epochs: trainer.scheduler.epoch,
        best_epoch: trainer.scheduler.best_epoch,
        best: trainer.best,
        best_score: trainer.scheduler.best,
    };
    if let Some(d) = dir {
        write_json(&d.join("report.json"), &report)?;
    }
    Ok((report, logs))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// The seed sweep's winner for one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: String,
    pub fold: usize,
    pub best_seed: u64,
    pub best_score: f64,
    pub runs: Vec<RunReport>,
}

/// Highest monitored validation score; the earliest seed wins ties.
pub fn select_best(method: &str, fold: usize, runs: Vec<RunReport>) -> Result<Selection> {
    let best = runs
        .iter()
        .fold(None::<&RunReport>, |acc, r| match acc {
            Some(a) if a.best_score >= r.best_score => Some(a),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Data(format!("fold {fold}: no runs to select from")))?;
    Ok(Selection {
        method: method.to_string(),
        fold,
        best_seed: best.seed,
        best_score: best.best_score,
        runs: runs.clone(),
    })
}
