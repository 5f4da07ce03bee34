//! Bringing every modality onto the video frame grid.

use crate::error::{Error, Result};

use super::formats::{FeatureMatrix, WordTiming};

/// A word, its time span and its embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSpan {
    pub word: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub feature: Vec<f32>,
}

/// Pairs the i-th word with the i-th feature row.
pub fn word_spans(words: &[WordTiming], features: &FeatureMatrix) -> Result<Vec<WordSpan>> {
    if words.len() != features.rows {
        return Err(Error::Data(format!(
            "{} words but {} feature rows",
            words.len(),
            features.rows
        )));
    }
    Ok(words
        .iter()
        .enumerate()
        .map(|(i, w)| WordSpan {
            word: w.word.clone(),
            start_sec: w.start_sec,
            end_sec: w.end_sec,
            feature: features.row(i).to_vec(),
        })
        .collect())
}

/// `[n, dim]` row-major: frame `i` starts at `i / fps` and takes the feature
/// of the span containing that instant, zeros if none does.
pub fn align_words_to_frames(spans: &[WordSpan], n: usize, fps: f64, dim: usize) -> Result<Vec<f32>> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::invalid(
            "align_words_to_frames",
            format!("fps must be positive, got {fps}"),
        ));
    }
    for (i, s) in spans.iter().enumerate() {
        if s.feature.len() != dim {
            return Err(Error::shape(
                "align_words_to_frames",
                format!("span {i} has {} features, expected {dim}", s.feature.len()),
            ));
        }
        if !(s.start_sec < s.end_sec) {
            return Err(Error::invalid(
                "align_words_to_frames",
                format!("span {i} `{}` has start {} >= end {}", s.word, s.start_sec, s.end_sec),
            ));
        }
        if i > 0 && s.start_sec < spans[i - 1].end_sec {
            return Err(Error::invalid(
                "align_words_to_frames",
                format!(
                    "span {i} `{}` starts at {} before span {} ends at {}",
                    s.word,
                    s.start_sec,
                    i - 1,
                    spans[i - 1].end_sec
                ),
            ));
        }
    }
    let mut out = vec![0.0f32; n * dim];
    let mut p = 0;
    for i in 0..n {
        let t = i as f64 / fps;
        while p < spans.len() && spans[p].end_sec <= t {
            p += 1;
        }
        if p == spans.len() {
            break;
        }
        if spans[p].start_sec <= t {
            out[i * dim..(i + 1) * dim].copy_from_slice(&spans[p].feature);
        }
    }
    Ok(out)
}

/// Pads by repeating the last row or trims from the end so that `m` rows of
/// `row_len` become `n` rows.
pub fn fit_length<T: Clone>(data: &[T], row_len: usize, n: usize) -> Result<Vec<T>> {
    if row_len == 0 || data.len() % row_len != 0 {
        return Err(Error::shape(
            "fit_length",
            format!("{} values do not form rows of {row_len}", data.len()),
        ));
    }
    let m = data.len() / row_len;
    if m == 0 {
        return Err(Error::invalid("fit_length", "no rows to pad from"));
    }
    let keep = m.min(n);
    let mut out = Vec::with_capacity(n * row_len);
    out.extend_from_slice(&data[..keep * row_len]);
    let last = &data[(m - 1) * row_len..m * row_len];
    for _ in keep..n {
        out.extend_from_slice(last);
    }
    Ok(out)
}
