//! Parsers for the on-disk trial formats.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

/// Marker for unannotated frames.
pub const SENTINEL: f64 = -5.0;

/// Per-frame labels as `[N, 2]` (valence, arousal) plus the validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    pub labels: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Annotations {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

fn csv_error(source_name: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        source_name: source_name.to_string(),
        line,
        msg: e.to_string(),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn expect_header<R: Read>(rdr: &mut csv::Reader<R>, source_name: &str, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| csv_error(source_name, e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            msg: format!("header {:?}, expected {}", header, expected.join(",")),
        });
    }
    Ok(())
}

/// Parses `valence,arousal` rows. A row is masked out when either column is
/// the sentinel; any other value outside `[-1, 1]` is an error.
pub fn parse_annotations<R: Read>(reader: R, source_name: &str) -> Result<Annotations> {
    let mut rdr = csv_reader(reader);
    expect_header(&mut rdr, source_name, &["valence", "arousal"])?;
    let mut out = Annotations {
        labels: Vec::new(),
        mask: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source_name, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            msg,
        };
        if rec.len() != 2 {
            return Err(err(format!("expected 2 columns, got {}", rec.len())));
        }
        let mut valid = true;
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| err(format!("`{field}` is not a number")))?;
            if v == SENTINEL {
                valid = false;
            } else if !(-1.0..=1.0).contains(&v) {
                return Err(err(format!("label {v} outside [-1, 1]")));
            }
            out.labels.push(v as f32);
        }
        out.mask.push(valid);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            msg: "no annotation rows".into(),
        });
    }
    Ok(out)
}

/// One recognized word with its time span in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTiming {
    pub word: String,
    pub start_sec: f64,
    pub end_sec: f64,
}

/// Parses `word,start_sec,end_sec` rows.
pub fn parse_words<R: Read>(reader: R, source_name: &str) -> Result<Vec<WordTiming>> {
    let mut rdr = csv_reader(reader);
    expect_header(&mut rdr, source_name, &["word", "start_sec", "end_sec"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source_name, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            msg,
        };
        if rec.len() != 3 {
            return Err(err(format!("expected 3 columns, got {}", rec.len())));
        }
        let time = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| err(format!("`{}` is not a non-negative time", &rec[i])))
        };
        let (start_sec, end_sec) = (time(1)?, time(2)?);
        if start_sec >= end_sec {
            return Err(err(format!("start {start_sec} is not before end {end_sec}")));
        }
        out.push(WordTiming {
            word: rec[0].to_string(),
            start_sec,
            end_sec,
        });
    }
    Ok(out)
}

pub const LINGUISTIC_MAGIC: &[u8; 4] = b"LFEA";

/// A dense `rows x cols` feature matrix; `rows` may be zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn decode_linguistic(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new("linguistic features", bytes);
    r.magic(LINGUISTIC_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if cols == 0 {
        return Err(r.error("zero feature columns"));
    }
    let count = rows.checked_mul(cols).ok_or_else(|| r.error("rows * cols overflows"))?;
    let data = r.f32s(count, "feature data")?;
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Decode {
            what: "linguistic features",
            offset: 12 + 4 * i,
            msg: "non-finite feature value".into(),
        });
    }
    r.finish()?;
    Ok(FeatureMatrix { rows, cols, data })
}

pub fn encode_linguistic(m: &FeatureMatrix) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(LINGUISTIC_MAGIC);
    w.u32(m.rows as u32);
    w.u32(m.cols as u32);
    w.f32s(&m.data);
    w.buf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialPaths {
    pub frames_dir: PathBuf,
    pub wav: PathBuf,
    pub words_csv: PathBuf,
    pub linguistic_bin: PathBuf,
    /// Absent for unlabelled trials, whose length then comes from the frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub trial_id: String,
    pub subject_id: String,
    pub split: Split,
    pub fps: f64,
    pub paths: TrialPaths,
}

impl ManifestEntry {
    /// Relative paths are taken relative to `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.frames_dir);
        fix(&mut self.paths.wav);
        fix(&mut self.paths.words_csv);
        fix(&mut self.paths.linguistic_bin);
        if let Some(p) = self.paths.annotation_csv.as_mut() {
            fix(p);
        }
        self
    }
}

/// One JSON object per non-blank line; trial ids must be unique.
pub fn parse_manifest(text: &str, source_name: &str) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg,
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !(entry.fps.is_finite() && entry.fps > 0.0) {
            return Err(err(format!("fps must be positive, got {}", entry.fps)));
        }
        if entry.trial_id.is_empty() || entry.subject_id.is_empty() {
            return Err(err("empty trial or subject id".into()));
        }
        // Trial ids name files in the preprocessed store.
        if entry.trial_id.contains(['/', '\\']) || entry.trial_id.starts_with('.') {
            return Err(err(format!("trial id `{}` is not a plain file name", entry.trial_id)));
        }
        if !seen.insert(entry.trial_id.clone()) {
            return Err(err(format!("duplicate trial id `{}`", entry.trial_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text, &path.display().to_string())?
        .into_iter()
        .map(|e| e.resolve(base))
        .collect())
}

pub fn manifest_line(entry: &ManifestEntry) -> String {
    serde_json::to_string(entry).expect("manifest entries always serialize")
}
