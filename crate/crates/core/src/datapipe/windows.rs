//! Fixed-length window resampling and its inverse.

use crate::error::{Error, Result};

/// Frames `[start, start + valid)` of a trial; positions `valid..` of the
/// window are zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub valid: usize,
}

/// Window starts `0, hop, 2 hop, ...` that fit inside `n`. Evaluation adds
/// a tail window ending flush at `n` when the grid leaves frames uncovered.
/// `n <= len` gives a single padded window.
pub fn make_windows(n: usize, len: usize, hop: usize, eval_mode: bool) -> Result<Vec<Window>> {
    if len == 0 || hop == 0 || hop > len {
        return Err(Error::invalid(
            "make_windows",
            format!("need 0 < hop <= len, got len {len}, hop {hop}"),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("make_windows", "empty trial"));
    }
    if n <= len {
        return Ok(vec![Window { start: 0, valid: n }]);
    }
    let mut out: Vec<Window> = (0..=(n - len) / hop)
        .map(|k| Window {
            start: k * hop,
            valid: len,
        })
        .collect();
    if eval_mode && (n - len) % hop != 0 {
        out.push(Window {
            start: n - len,
            valid: len,
        });
    }
    Ok(out)
}

/// Averages per-window `[len, dim]` outputs back onto `[n, dim]` frames.
/// Padding positions are dropped; every frame must be covered.
pub fn stitch_predictions(outputs: &[(Window, &[f32])], n: usize, len: usize, dim: usize) -> Result<Vec<f32>> {
    let mut sum = vec![0.0f64; n * dim];
    let mut count = vec![0u32; n];
    for (w, out) in outputs {
        if out.len() != len * dim {
            return Err(Error::shape(
                "stitch_predictions",
                format!("window output has {} values, expected {}", out.len(), len * dim),
            ));
        }
        if w.valid > len || w.start + w.valid > n {
            return Err(Error::invalid(
                "stitch_predictions",
                format!("window {w:?} exceeds trial length {n}"),
            ));
        }
        for t in 0..w.valid {
            let f = w.start + t;
            count[f] += 1;
            for d in 0..dim {
                sum[f * dim + d] += f64::from(out[t * dim + d]);
            }
        }
    }
    if let Some(gap) = count.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("frame {gap} is covered by no window")));
    }
    Ok(sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / f64::from(count[i / dim])) as f32)
        .collect())
}
