//! Synthetic corpora in the exact on-disk formats, with labels that are
//! smooth functions of signals planted in every modality.
//!
//! Valence sets frame brightness, arousal sets the amplitude of a
//! subject-specific tone over broadband noise, and both leak into a few
//! linguistic dimensions.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::audio::SAMPLE_RATE;
use crate::datapipe::formats::{encode_linguistic, manifest_line, FeatureMatrix, ManifestEntry, Split, TrialPaths};
use crate::datapipe::hop_samples;
use crate::datapipe::record::{frame_file_name, FRAME_SIDE};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Linguistic dimensions carrying valence; the next block carries arousal.
pub const PLANTED_DIMS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub trials: usize,
    pub subjects: usize,
    /// Subjects (the last ones) whose trials form the val split.
    pub val_subjects: usize,
    /// Extra unlabelled trials in the test split.
    pub test_trials: usize,
    pub n_frames: usize,
    /// Lengths vary uniformly by up to this many frames either way.
    pub n_jitter: usize,
    /// Explicit per-trial lengths, overriding `n_frames` and `n_jitter`.
    pub lengths: Option<Vec<usize>>,
    pub fps: f64,
    /// Runs of sentinel rows per labelled trial.
    pub sentinel_runs: usize,
    /// Frame images deleted per trial.
    pub missing_frames: usize,
    pub linguistic_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            trials: 4,
            subjects: 4,
            val_subjects: 1,
            test_trials: 0,
            n_frames: 400,
            n_jitter: 0,
            lengths: None,
            fps: 25.0,
            sentinel_runs: 1,
            missing_frames: 2,
            linguistic_dim: 768,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.trials == 0 || self.subjects == 0 {
            return bad("synthetic corpus needs at least one trial and one subject");
        }
        if self.subjects > self.trials {
            return bad("more subjects than trials");
        }
        if self.val_subjects >= self.subjects && self.subjects > 1 {
            return bad("val_subjects must leave at least one training subject");
        }
        if self.n_jitter >= self.n_frames {
            return bad("n_jitter must be smaller than n_frames");
        }
        if let Some(l) = &self.lengths {
            if l.len() != self.trials + self.test_trials || l.contains(&0) {
                return bad("lengths must give a positive length for every trial");
            }
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.linguistic_dim < 2 * PLANTED_DIMS {
            return bad("linguistic_dim too small for the planted dimensions");
        }
        Ok(())
    }
}

/// Latent valence/arousal trajectory of one trial.
#[derive(Clone, Debug)]
struct Latent {
    periods: [f64; 4],
    phases: [f64; 4],
}

impl Latent {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut periods = [0.0; 4];
        let mut phases = [0.0; 4];
        for i in 0..4 {
            periods[i] = if i % 2 == 0 {
                rng.gen_range(6.0..14.0)
            } else {
                rng.gen_range(2.0..5.0)
            };
            phases[i] = rng.gen_range(0.0..2.0 * PI);
        }
        Latent { periods, phases }
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let w = |i: usize| (2.0 * PI * t / self.periods[i] + self.phases[i]).sin();
        (0.6 * w(0) + 0.25 * w(1), 0.6 * w(2) + 0.25 * w(3))
    }
}

/// Appearance and voice of one subject.
#[derive(Clone, Debug)]
struct Subject {
    id: String,
    texture: Vec<f64>,
    tint: [f64; 3],
    tone_hz: f64,
}

impl Subject {
    fn draw(index: usize, rng: &mut ChaCha8Rng) -> Self {
        let (fx, fy, gx, gy) = (
            rng.gen_range(1.0..4.0),
            rng.gen_range(1.0..4.0),
            rng.gen_range(2.0..6.0),
            rng.gen_range(2.0..6.0),
        );
        let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let s = FRAME_SIDE as f64;
        let texture = (0..FRAME_SIDE * FRAME_SIDE)
            .map(|i| {
                let (x, y) = ((i % FRAME_SIDE) as f64 / s, (i / FRAME_SIDE) as f64 / s);
                let a = (2.0 * PI * (fx * x + fy * y) + p1).sin();
                let b = (2.0 * PI * (gx * x - gy * y) + p2).sin();
                0.5 * (a + b) / 2.0
            })
            .collect();
        let tint = [
            rng.gen_range(0.8..1.2),
            rng.gen_range(0.8..1.2),
            rng.gen_range(0.8..1.2),
        ];
        Subject {
            id: format!("subj{index:03}"),
            texture,
            tint,
            tone_hz: rng.gen_range(300.0..1500.0),
        }
    }
}

/// What was written, for audits.
#[derive(Clone, Debug, Default)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Sentinel row indices per labelled trial, in manifest order.
    pub sentinel_rows: Vec<Vec<usize>>,
    pub missing_frames: Vec<Vec<usize>>,
}

fn frame_jpeg(subject: &Subject, valence: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let brightness = 0.5 + 0.3 * valence;
    let mut img = image::RgbImage::new(FRAME_SIDE as u32, FRAME_SIDE as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let base = brightness + 0.25 * subject.texture[i];
        for c in 0..3 {
            let v = base * subject.tint[c] + rng.gen_range(-0.03..0.03);
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, 95)
        .encode_image(&img)
        .map_err(|e| Error::Data(format!("jpeg encoding: {e}")))?;
    Ok(buf)
}

fn wav_bytes(samples: &[f32]) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cur = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cur, spec).map_err(|e| Error::Audio(e.to_string()))?;
        for &s in samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                .map_err(|e| Error::Audio(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Audio(e.to_string()))?;
    }
    Ok(cur.into_inner())
}

/// Plain writes: the corpus is regenerable, so no per-file sync.
fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a corpus under `out` with `manifest.jsonl` at its root.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subjects: Vec<Subject> = (0..spec.subjects).map(|i| Subject::draw(i, &mut rng)).collect();
    let hop = hop_samples(spec.fps)?;
    let mut summary = SynthSummary {
        manifest: out.join("manifest.jsonl"),
        ..Default::default()
    };
    let mut manifest = String::new();
    let total = spec.trials + spec.test_trials;
    for k in 0..total {
        let labelled = k < spec.trials;
        // Trial k belongs to subject k mod S, so every subject gets a trial.
        let subject = &subjects[k % spec.subjects];
        let subject_index = k % spec.subjects;
        let split = if !labelled {
            Split::Test
        } else if spec.subjects > 1 && subject_index >= spec.subjects - spec.val_subjects {
            Split::Val
        } else {
            Split::Train
        };
        let n = match &spec.lengths {
            Some(l) => l[k],
            None if spec.n_jitter > 0 => spec.n_frames - spec.n_jitter + rng.gen_range(0..=2 * spec.n_jitter),
            None => spec.n_frames,
        };
        let latent = Latent::draw(&mut rng);
        let trial_id = format!("trial{k:03}");
        let rel = PathBuf::from("trials").join(&trial_id);
        let dir = out.join(&rel);
        let labels: Vec<(f64, f64)> = (0..n).map(|i| latent.at(i as f64 / spec.fps)).collect();

        // The last frame always exists so unlabelled trials keep their length.
        let missing: Vec<usize> = if spec.missing_frames > 0 && n > spec.missing_frames + 1 {
            let mut m = sample(&mut rng, n - 1, spec.missing_frames).into_vec();
            m.sort_unstable();
            m
        } else {
            Vec::new()
        };
        for (i, &(v, _)) in labels.iter().enumerate() {
            let jpeg = frame_jpeg(subject, v, &mut rng)?;
            if missing.binary_search(&i).is_err() {
                write(&dir.join("frames").join(frame_file_name(i)), &jpeg)?;
            }
        }

        let len = (n - 1) * hop + crate::datapipe::audio::WINDOW_SAMPLES;
        let samples: Vec<f32> = (0..len)
            .map(|s| {
                let t = s as f64 / f64::from(SAMPLE_RATE);
                let (_, a) = latent.at(t);
                let amp = 0.03 + 0.4 * (a + 1.0) / 2.0;
                let noise = amp * rng.gen_range(-0.5..0.5);
                (amp * (2.0 * PI * subject.tone_hz * t).sin() + noise) as f32
            })
            .collect();
        write(&dir.join("audio.wav"), &wav_bytes(&samples)?)?;

        let duration = n as f64 / spec.fps;
        let mut words = String::from("word,start_sec,end_sec\n");
        let mut feats = Vec::new();
        let mut rows = 0;
        let mut t = rng.gen_range(0.0..0.3);
        loop {
            let dur = rng.gen_range(0.25..0.8);
            if t + dur > duration {
                break;
            }
            let (v, a) = latent.at(t + dur / 2.0);
            words.push_str(&format!("w{},{:.3},{:.3}\n", rng.gen_range(0..500), t, t + dur));
            for d in 0..spec.linguistic_dim {
                let planted = match d / PLANTED_DIMS {
                    0 => 2.0 * v,
                    1 => 2.0 * a,
                    _ => 0.0,
                };
                feats.push((planted + rng.gen_range(-0.5..0.5)) as f32);
            }
            rows += 1;
            t += dur + rng.gen_range(0.05..0.5);
            // Word times are written with millisecond precision.
            t = (t * 1000.0).ceil() / 1000.0;
        }
        write(&dir.join("words.csv"), words.as_bytes())?;
        let matrix = FeatureMatrix {
            rows,
            cols: spec.linguistic_dim,
            data: feats,
        };
        write(&dir.join("linguistic.bin"), &encode_linguistic(&matrix))?;

        let annotation = if labelled {
            let mut sentinel = vec![None::<usize>; n];
            for _ in 0..spec.sentinel_runs {
                let run = rng.gen_range(5..=20).min(n);
                let start = rng.gen_range(0..=n - run);
                // Column 0, 1, or both.
                let which = rng.gen_range(0..3usize);
                sentinel[start..start + run].iter_mut().for_each(|s| *s = Some(which));
            }
            let mut text = String::from("valence,arousal\n");
            for (i, &(v, a)) in labels.iter().enumerate() {
                let (v, a) = match sentinel[i] {
                    Some(0) => (-5.0, a),
                    Some(1) => (v, -5.0),
                    Some(_) => (-5.0, -5.0),
                    None => (v, a),
                };
                text.push_str(&format!("{v:.6},{a:.6}\n"));
            }
            write(&dir.join("annotation.csv"), text.as_bytes())?;
            summary
                .sentinel_rows
                .push((0..n).filter(|&i| sentinel[i].is_some()).collect());
            Some(rel.join("annotation.csv"))
        } else {
            None
        };
        summary.missing_frames.push(missing);

        let entry = ManifestEntry {
            trial_id,
            subject_id: subject.id.clone(),
            split,
            fps: spec.fps,
            paths: TrialPaths {
                frames_dir: rel.join("frames"),
                wav: rel.join("audio.wav"),
                words_csv: rel.join("words.csv"),
                linguistic_bin: rel.join("linguistic.bin"),
                annotation_csv: annotation,
            },
        };
        manifest.push_str(&manifest_line(&entry));
        manifest.push('\n');
        summary.entries.push(entry.resolve(out));
    }
    write_atomic(&summary.manifest, manifest.as_bytes())?;
    Ok(summary)
}
