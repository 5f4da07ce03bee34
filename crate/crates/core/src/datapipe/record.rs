//! Synchronized per-trial records and their binary container.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

use super::align::{align_words_to_frames, fit_length, word_spans};
use super::audio::{extract_logmel, read_wav_file, MEL_BANDS, SAMPLE_RATE};
use super::formats::{decode_linguistic, parse_annotations, parse_words, ManifestEntry, Split};

/// Stored frame edge length before cropping.
pub const FRAME_SIDE: usize = 48;
pub const FRAME_LEN: usize = 3 * FRAME_SIDE * FRAME_SIDE;

pub const RECORD_MAGIC: &[u8; 4] = b"ATRC";
pub const RECORD_VERSION: u32 = 1;

/// Every modality of one trial on a common grid of `n` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub subject_id: String,
    pub split: Split,
    pub fps: f64,
    pub n: usize,
    /// `[n, 3, 48, 48]` RGB bytes; all zero where the frame image is missing.
    pub visual: Vec<u8>,
    /// `[n, MEL_BANDS]`.
    pub logmel: Vec<f32>,
    pub linguistic_dim: usize,
    /// `[n, linguistic_dim]`.
    pub linguistic: Vec<f32>,
    /// `[n, 2]` valence, arousal; sentinel rows keep the sentinel.
    pub labels: Vec<f32>,
    pub mask: Vec<bool>,
    pub missing_frames: usize,
}

impl TrialRecord {
    pub fn masked_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n;
        let ok = n > 0
            && self.visual.len() == n * FRAME_LEN
            && self.logmel.len() == n * MEL_BANDS
            && self.linguistic_dim > 0
            && self.linguistic.len() == n * self.linguistic_dim
            && self.labels.len() == n * 2
            && self.mask.len() == n;
        if !ok {
            return Err(Error::Data(format!(
                "trial `{}`: per-frame arrays do not share length {n}",
                self.trial_id
            )));
        }
        Ok(())
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        &self.visual[i * FRAME_LEN..(i + 1) * FRAME_LEN]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(RECORD_MAGIC);
        w.u32(RECORD_VERSION);
        w.string(&self.trial_id);
        w.string(&self.subject_id);
        w.u8(match self.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        });
        w.f64(self.fps);
        w.u64(self.n as u64);
        w.u32(FRAME_SIDE as u32);
        w.u32(MEL_BANDS as u32);
        w.u32(self.linguistic_dim as u32);
        w.u64(self.missing_frames as u64);
        w.bytes(&self.visual);
        w.f32s(&self.logmel);
        w.f32s(&self.linguistic);
        w.f32s(&self.labels);
        w.bytes(&self.mask.iter().map(|&m| u8::from(m)).collect::<Vec<_>>());
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("trial record", bytes);
        r.magic(RECORD_MAGIC)?;
        let version = r.u32("version")?;
        if version != RECORD_VERSION {
            return Err(r.error(format!("unsupported record version {version}")));
        }
        let trial_id = r.string("trial id")?;
        let subject_id = r.string("subject id")?;
        let split = match r.u8("split")? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            other => return Err(r.error(format!("unknown split tag {other}"))),
        };
        let fps = r.f64("fps")?;
        if !(fps.is_finite() && fps > 0.0) {
            return Err(r.error(format!("fps {fps} is not positive")));
        }
        let n = r.len("frame count")?;
        if n == 0 {
            return Err(r.error("zero frames"));
        }
        let side = r.u32("frame side")? as usize;
        let bands = r.u32("mel bands")? as usize;
        if side != FRAME_SIDE || bands != MEL_BANDS {
            return Err(r.error(format!(
                "frame side {side} / mel bands {bands}, expected {FRAME_SIDE} / {MEL_BANDS}"
            )));
        }
        let linguistic_dim = r.u32("linguistic dim")? as usize;
        if linguistic_dim == 0 {
            return Err(r.error("zero linguistic dim"));
        }
        let missing_frames = r.len("missing frame count")?;
        let count = |a: usize, b: usize, r: &Reader| a.checked_mul(b).ok_or_else(|| r.error("array size overflows"));
        let visual = r.bytes(count(n, FRAME_LEN, &r)?, "visual")?;
        let logmel = r.f32s(count(n, MEL_BANDS, &r)?, "logmel")?;
        let linguistic = r.f32s(count(n, linguistic_dim, &r)?, "linguistic")?;
        let labels = r.f32s(count(n, 2, &r)?, "labels")?;
        let mask_start = r.offset();
        let mask = r
            .bytes(n, "mask")?
            .into_iter()
            .enumerate()
            .map(|(i, b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Decode {
                    what: "trial record",
                    offset: mask_start + i,
                    msg: format!("mask byte {b} is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(TrialRecord {
            trial_id,
            subject_id,
            split,
            fps,
            n,
            visual,
            logmel,
            linguistic_dim,
            linguistic,
            labels,
            mask,
            missing_frames,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Name of frame `i` (0-based) inside a frames directory.
pub fn frame_file_name(i: usize) -> String {
    format!("{:05}.jpg", i + 1)
}

/// Highest frame number present in `dir`, i.e. the raw video length.
pub fn count_frames(dir: &Path) -> Result<usize> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".jpg") {
            if let Ok(k) = stem.parse::<usize>() {
                n = n.max(k);
            }
        }
    }
    Ok(n)
}

/// Loads frames `0..n` as `[n, 3, 48, 48]` bytes, leaving missing frames
/// zero. Returns the buffer and the number of missing frames.
pub fn load_frames(dir: &Path, n: usize) -> Result<(Vec<u8>, usize)> {
    let mut buf = vec![0u8; n * FRAME_LEN];
    let mut missing = 0;
    for i in 0..n {
        let path = dir.join(frame_file_name(i));
        if !path.exists() {
            missing += 1;
            continue;
        }
        let img = image::open(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let mut rgb = img.to_rgb8();
        if rgb.width() as usize != FRAME_SIDE || rgb.height() as usize != FRAME_SIDE {
            rgb = image::imageops::resize(
                &rgb,
                FRAME_SIDE as u32,
                FRAME_SIDE as u32,
                image::imageops::FilterType::Triangle,
            );
        }
        let out = &mut buf[i * FRAME_LEN..(i + 1) * FRAME_LEN];
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * FRAME_SIDE * FRAME_SIDE + p] = px[c];
            }
        }
    }
    Ok((buf, missing))
}

fn open_text(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufReader::new(f))
}

/// Reads every input of one manifest entry and aligns it to the frame grid.
///
/// The frame count comes from the annotation rows when present, otherwise
/// from the frames directory.
pub fn preprocess_trial(entry: &ManifestEntry) -> Result<TrialRecord> {
    let p = &entry.paths;
    let (n, labels, mask) = match &p.annotation_csv {
        Some(path) => {
            let a = parse_annotations(open_text(path)?, &path.display().to_string())?;
            (a.len(), a.labels, a.mask)
        }
        None => {
            let n = count_frames(&p.frames_dir)?;
            (n, vec![0.0; 2 * n], vec![false; n])
        }
    };
    if n == 0 {
        return Err(Error::Data(format!("trial `{}` has no frames", entry.trial_id)));
    }
    let (visual, missing_frames) = load_frames(&p.frames_dir, n)?;
    let samples = read_wav_file(&p.wav)?;
    let (_, logmel) = extract_logmel(&samples, SAMPLE_RATE, entry.fps)?;
    let logmel = fit_length(&logmel, MEL_BANDS, n)?;
    let words = parse_words(open_text(&p.words_csv)?, &p.words_csv.display().to_string())?;
    let bytes = std::fs::read(&p.linguistic_bin).map_err(|e| Error::io(&p.linguistic_bin, e))?;
    let features = decode_linguistic(&bytes)?;
    let spans = word_spans(&words, &features)?;
    let linguistic = align_words_to_frames(&spans, n, entry.fps, features.cols)?;
    let rec = TrialRecord {
        trial_id: entry.trial_id.clone(),
        subject_id: entry.subject_id.clone(),
        split: entry.split,
        fps: entry.fps,
        n,
        visual,
        logmel,
        linguistic_dim: features.cols,
        linguistic,
        labels,
        mask,
        missing_frames,
    };
    rec.check()?;
    Ok(rec)
}

/// Record file for `trial_id` inside a preprocessed store.
pub fn record_path(store: &Path, trial_id: &str) -> std::path::PathBuf {
    store.join(format!("{trial_id}.atrc"))
}
