//! WAV ingestion and frame-rate-aligned log-mel spectrograms.

use std::io::Read;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const MEL_BANDS: usize = 64;
/// 25 ms at 16 kHz.
pub const WINDOW_SAMPLES: usize = 400;
pub const FFT_LEN: usize = 512;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7500.0;
pub const LOG_FLOOR: f64 = 1e-6;

/// Decodes 16-bit mono PCM at [`SAMPLE_RATE`] into samples in `[-1, 1)`.
pub fn read_wav<R: Read>(reader: R, source_name: &str) -> Result<Vec<f32>> {
    let wav = hound::WavReader::new(reader).map_err(|e| Error::Audio(format!("{source_name}: {e}")))?;
    let spec = wav.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{source_name}: expected mono, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "{source_name}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{source_name}: expected 16-bit integer PCM, got {:?} {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    wav.into_samples::<i16>()
        .map(|s| {
            s.map(|v| f32::from(v) / 32768.0)
                .map_err(|e| Error::Audio(format!("{source_name}: {e}")))
        })
        .collect()
}

pub fn read_wav_file(path: &Path) -> Result<Vec<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(std::io::BufReader::new(file), &path.display().to_string())
}

/// Spectrogram hop in samples for one video frame tick.
pub fn hop_samples(fps: f64) -> Result<usize> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::invalid(
            "extract_logmel",
            format!("fps must be positive, got {fps}"),
        ));
    }
    let hop = (f64::from(SAMPLE_RATE) / fps).round();
    if hop < 1.0 {
        return Err(Error::invalid("extract_logmel", format!("fps {fps} gives a zero hop")));
    }
    Ok(hop as usize)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

/// Triangular filters in mel space, `[FFT_LEN / 2 + 1, MEL_BANDS]` row-major,
/// with the DC bin zeroed.
pub fn mel_filterbank() -> Vec<f64> {
    let bins = FFT_LEN / 2 + 1;
    let nyquist = f64::from(SAMPLE_RATE) / 2.0;
    let bin_mel: Vec<f64> = (0..bins)
        .map(|k| hz_to_mel(nyquist * k as f64 / (bins - 1) as f64))
        .collect();
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64)
        .collect();
    let mut w = vec![0.0; bins * MEL_BANDS];
    for b in 0..MEL_BANDS {
        let (l, c, u) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 1..bins {
            let m = bin_mel[k];
            let up = (m - l) / (c - l);
            let down = (u - m) / (u - c);
            w[k * MEL_BANDS + b] = up.min(down).max(0.0);
        }
    }
    w
}

/// One log-mel row per video frame tick: `[rows, MEL_BANDS]` row-major with
/// `rows = 1 + (len - WINDOW_SAMPLES) / hop`. Audio shorter than one window
/// is zero-padded to a single row.
pub fn extract_logmel(samples: &[f32], sample_rate: u32, fps: f64) -> Result<(usize, Vec<f32>)> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz (no resampling)"
        )));
    }
    let hop = hop_samples(fps)?;
    let rows = if samples.len() < WINDOW_SAMPLES {
        1
    } else {
        1 + (samples.len() - WINDOW_SAMPLES) / hop
    };
    let window: Vec<f64> = (0..WINDOW_SAMPLES)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos())
        .collect();
    let bank = mel_filterbank();
    let bins = FFT_LEN / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
    let mut mag = vec![0.0; bins];
    let mut out = Vec::with_capacity(rows * MEL_BANDS);
    for r in 0..rows {
        let start = r * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let s = if n < WINDOW_SAMPLES {
                samples.get(start + n).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            *slot = Complex::new(f64::from(s) * window.get(n).copied().unwrap_or(0.0), 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for b in 0..MEL_BANDS {
            let e: f64 = (0..bins).map(|k| mag[k] * bank[k * MEL_BANDS + b]).sum();
            out.push((e + LOG_FLOOR).ln() as f32);
        }
    }
    Ok((rows, out))
}
