//! Frame augmentation and feature standardization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::FRAME_SIDE;

pub const CROP: usize = 40;
pub const MAX_OFFSET: usize = FRAME_SIDE - CROP;

/// One augmentation draw, shared by every frame of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropParams {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl CropParams {
    pub fn center() -> Self {
        CropParams {
            flip: false,
            dy: MAX_OFFSET / 2,
            dx: MAX_OFFSET / 2,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        CropParams {
            flip: rng.gen_bool(0.5),
            dy: rng.gen_range(0..=MAX_OFFSET),
            dx: rng.gen_range(0..=MAX_OFFSET),
        }
    }
}

/// Crops (and maybe flips) one `[3, 48, 48]` byte frame into `out`
/// (`[3, 40, 40]`), mapping `[0, 255]` to `[-1, 1]`.
pub fn crop_frame(frame: &[u8], p: CropParams, out: &mut [f32]) {
    for c in 0..3 {
        for y in 0..CROP {
            let src = &frame[(c * FRAME_SIDE + y + p.dy) * FRAME_SIDE + p.dx..][..CROP];
            let dst = &mut out[(c * CROP + y) * CROP..][..CROP];
            for x in 0..CROP {
                let v = if p.flip { src[CROP - 1 - x] } else { src[x] };
                dst[x] = (f32::from(v) / 255.0 - 0.5) / 0.5;
            }
        }
    }
}

/// Training draws a flip and crop offset per window; evaluation takes the
/// center crop.
pub fn augment_and_normalize<R: Rng + ?Sized>(frames: &[&[u8]], training: bool, rng: &mut R) -> (CropParams, Vec<f32>) {
    let p = if training {
        CropParams::random(rng)
    } else {
        CropParams::center()
    };
    let mut out = vec![0.0; frames.len() * 3 * CROP * CROP];
    for (f, chunk) in frames.iter().zip(out.chunks_exact_mut(3 * CROP * CROP)) {
        crop_frame(f, p, chunk);
    }
    (p, out)
}

/// Per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are treated as zero.
const MIN_STD: f64 = 1e-8;

impl FeatureStats {
    /// Population statistics over the rows of `[.., dim]` blocks.
    pub fn fit<'a>(blocks: impl IntoIterator<Item = &'a [f32]>, dim: usize) -> Self {
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut rows = 0usize;
        let blocks: Vec<&[f32]> = blocks.into_iter().collect();
        for b in &blocks {
            for row in b.chunks_exact(dim) {
                rows += 1;
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += f64::from(v);
                }
            }
        }
        let n = rows.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for b in &blocks {
            for row in b.chunks_exact(dim) {
                for ((q, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (f64::from(v) - m).powi(2);
                }
            }
        }
        let std = sq.iter().map(|q| (q / n).sqrt()).collect();
        FeatureStats { mean, std }
    }

    /// Identity transform.
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes rows in place; zero-variance dimensions are only shifted.
    pub fn apply(&self, data: &mut [f32]) {
        for row in data.chunks_exact_mut(self.dim()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                let x = f64::from(*v) - m;
                *v = if *s < MIN_STD { x } else { x / s } as f32;
            }
        }
    }
}

/// Per-dimension standardization of linguistic features with statistics
/// from the training partition.
pub fn normalize_linguistic(stats: &FeatureStats, features: &mut [f32]) {
    stats.apply(features);
}
