//! Turning trial windows into model inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, ModelInput};
use crate::tensor::Tensor;

use super::audio::MEL_BANDS;
use super::augment::{crop_frame, CropParams, FeatureStats, CROP};
use super::record::TrialRecord;
use super::windows::Window;

/// Normalization statistics fitted on a training partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// A single scalar over all log-mel values.
    pub logmel: FeatureStats,
    /// Per dimension.
    pub linguistic: FeatureStats,
}

impl Normalizer {
    pub fn fit(train: &[&TrialRecord]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("cannot fit normalization on an empty partition".into()))?;
        let dim = first.linguistic_dim;
        if let Some(r) = train.iter().find(|r| r.linguistic_dim != dim) {
            return Err(Error::Data(format!(
                "trial `{}` has linguistic dim {}, expected {dim}",
                r.trial_id, r.linguistic_dim
            )));
        }
        Ok(Normalizer {
            logmel: FeatureStats::fit(train.iter().map(|r| r.logmel.as_slice()), 1),
            linguistic: FeatureStats::fit(train.iter().map(|r| r.linguistic.as_slice()), dim),
        })
    }

    pub fn apply(&self, rec: &mut TrialRecord) -> Result<()> {
        if rec.linguistic_dim != self.linguistic.dim() {
            return Err(Error::Data(format!(
                "trial `{}` has linguistic dim {}, statistics have {}",
                rec.trial_id,
                rec.linguistic_dim,
                self.linguistic.dim()
            )));
        }
        self.logmel.apply(&mut rec.logmel);
        self.linguistic.apply(&mut rec.linguistic);
        Ok(())
    }
}

/// A window of a particular trial in a list of records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub trial: usize,
    pub window: Window,
}

/// Windows of every record, in record order.
pub fn enumerate_windows(records: &[TrialRecord], len: usize, hop: usize, eval_mode: bool) -> Result<Vec<WindowRef>> {
    let mut out = Vec::new();
    for (trial, r) in records.iter().enumerate() {
        for window in super::windows::make_windows(r.n, len, hop, eval_mode)? {
            out.push(WindowRef { trial, window });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BatchSpec {
    pub modalities: Vec<Modality>,
    pub window_len: usize,
    /// Spectrogram rows per audio patch, centered on the frame.
    pub audio_patch: usize,
}

#[derive(Debug)]
pub struct WindowBatch {
    pub input: ModelInput<f32>,
    /// `[B, W, 2]`.
    pub labels: Vec<f32>,
    /// `[B, W]`: annotated and not padding.
    pub mask: Vec<bool>,
    pub windows: Vec<WindowRef>,
    pub crops: Vec<CropParams>,
}

impl WindowBatch {
    /// Flat indices of the `[B * W]` rows that count toward loss and metric.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

fn audio_patch(rec: &TrialRecord, frame: usize, patch: usize, out: &mut [f32]) {
    let half = patch / 2;
    for col in 0..patch {
        let row = (frame + col).saturating_sub(half).min(rec.n - 1);
        let src = &rec.logmel[row * MEL_BANDS..(row + 1) * MEL_BANDS];
        for (band, &v) in src.iter().enumerate() {
            out[band * patch + col] = v;
        }
    }
}

/// Gathers windows into one batch. Records must already be normalized.
pub fn assemble_batch<R: Rng + ?Sized>(
    records: &[TrialRecord],
    windows: &[WindowRef],
    spec: &BatchSpec,
    training: bool,
    rng: &mut R,
) -> Result<WindowBatch> {
    let (b, w) = (windows.len(), spec.window_len);
    if b == 0 {
        return Err(Error::invalid("assemble_batch", "no windows"));
    }
    if spec.audio_patch == 0 {
        return Err(Error::invalid("assemble_batch", "audio patch must be positive"));
    }
    let has = |m| spec.modalities.contains(&m);
    let frame_len = 3 * CROP * CROP;
    let patch_len = MEL_BANDS * spec.audio_patch;
    let ling_dim = records.first().map_or(0, |r| r.linguistic_dim);
    let mut visual = has(Modality::Visual).then(|| vec![0.0f32; b * w * frame_len]);
    let mut audio = has(Modality::Audio).then(|| vec![0.0f32; b * w * patch_len]);
    let mut ling = has(Modality::Linguistic).then(|| vec![0.0f32; b * w * ling_dim]);
    let mut labels = vec![0.0f32; b * w * 2];
    let mut mask = vec![false; b * w];
    let mut crops = Vec::with_capacity(b);
    for (i, wr) in windows.iter().enumerate() {
        let rec = records
            .get(wr.trial)
            .ok_or_else(|| Error::invalid("assemble_batch", format!("trial index {} out of range", wr.trial)))?;
        let win = wr.window;
        if win.valid > w || win.start + win.valid > rec.n {
            return Err(Error::invalid(
                "assemble_batch",
                format!(
                    "window {win:?} does not fit trial `{}` of {} frames",
                    rec.trial_id, rec.n
                ),
            ));
        }
        if rec.linguistic_dim != ling_dim {
            return Err(Error::Data(format!(
                "trial `{}` has a different linguistic dim",
                rec.trial_id
            )));
        }
        let frames = win.start..win.start + win.valid;
        let base = i * w;
        for (t, f) in frames.clone().enumerate() {
            labels[(base + t) * 2..(base + t) * 2 + 2].copy_from_slice(&rec.labels[f * 2..f * 2 + 2]);
            mask[base + t] = rec.mask[f];
        }
        // One draw per window whether or not the visual branch is on.
        let crop = if training {
            CropParams::random(rng)
        } else {
            CropParams::center()
        };
        crops.push(crop);
        if let Some(v) = visual.as_mut() {
            for (t, f) in frames.clone().enumerate() {
                crop_frame(
                    rec.frame(f),
                    crop,
                    &mut v[(base + t) * frame_len..(base + t + 1) * frame_len],
                );
            }
        }
        if let Some(a) = audio.as_mut() {
            for (t, f) in frames.clone().enumerate() {
                audio_patch(
                    rec,
                    f,
                    spec.audio_patch,
                    &mut a[(base + t) * patch_len..(base + t + 1) * patch_len],
                );
            }
        }
        if let Some(l) = ling.as_mut() {
            l[base * ling_dim..(base + win.valid) * ling_dim]
                .copy_from_slice(&rec.linguistic[win.start * ling_dim..(win.start + win.valid) * ling_dim]);
        }
    }
    let input = ModelInput {
        batch: b,
        steps: w,
        visual: visual.map(|v| Tensor::new(vec![b * w, 3, CROP, CROP], v)).transpose()?,
        audio: audio
            .map(|a| Tensor::new(vec![b * w, 1, MEL_BANDS, spec.audio_patch], a))
            .transpose()?,
        linguistic: ling.map(|l| Tensor::new(vec![b, w, ling_dim], l)).transpose()?,
    };
    Ok(WindowBatch {
        input,
        labels,
        mask,
        windows: windows.to_vec(),
        crops,
    })
}
