//! Deterministic image features ("hist-pool-v1").
//!
//! 192 values: each RGB channel box-averaged onto an 8x8 grid, scaled to
//! [0, 1]. 24 values: an 8-bin histogram per channel (bin = value / 32),
//! normalized to sum 1. The 216-vector is then L2-normalized.
//!
//! Grid cell `g` along an axis of length `n` covers pixels
//! `floor(g*n/8) .. ceil((g+1)*n/8)`, which partitions the axis exactly when
//! `n` is a multiple of 8 and never leaves a cell empty otherwise.
//! All pixel sums are integer, so equal bytes give bit-equal features.

use crate::domain::ImageBlob;

pub const GRID: usize = 8;
pub const BINS: usize = 8;
pub const POOL_DIM: usize = 3 * GRID * GRID;
pub const FEATURE_DIM: usize = POOL_DIM + 3 * BINS;

pub const HIST_POOL_V1: &str = "hist-pool-v1";

/// An embedding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn from_raw(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }
}

/// Turns images into fixed-length feature vectors.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &ImageBlob) -> FeatureVector;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HistPool;

impl FeatureExtractor for HistPool {
    fn id(&self) -> &'static str {
        HIST_POOL_V1
    }

    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, image: &ImageBlob) -> FeatureVector {
        let mut v = raw_features(image);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // The histogram block always sums to 3, so norm > 0.
        for x in &mut v {
            *x /= norm;
        }
        FeatureVector(v)
    }
}

/// Looks up an extractor by id.
pub fn extractor_by_id(id: &str) -> Option<&'static dyn FeatureExtractor> {
    match id {
        HIST_POOL_V1 => Some(&HistPool),
        _ => None,
    }
}

fn cell_bounds(g: usize, n: usize) -> (usize, usize) {
    (g * n / GRID, ((g + 1) * n).div_ceil(GRID))
}

/// Pool and histogram values before normalization.
pub fn raw_features(image: &ImageBlob) -> Vec<f64> {
    let w = image.width() as usize;
    let h = image.height() as usize;
    let px = image.pixels();
    let mut out = vec![0.0; FEATURE_DIM];

    for gy in 0..GRID {
        let (y0, y1) = cell_bounds(gy, h);
        for gx in 0..GRID {
            let (x0, x1) = cell_bounds(gx, w);
            let mut sums = [0u64; 3];
            for y in y0..y1 {
                let row = &px[3 * (y * w + x0)..3 * (y * w + x1)];
                for p in row.chunks_exact(3) {
                    sums[0] += u64::from(p[0]);
                    sums[1] += u64::from(p[1]);
                    sums[2] += u64::from(p[2]);
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                out[c * GRID * GRID + gy * GRID + gx] = sums[c] as f64 / (count * 255.0);
            }
        }
    }

    let mut hist = [[0u64; BINS]; 3];
    for p in px.chunks_exact(3) {
        for c in 0..3 {
            hist[c][usize::from(p[c] >> 5)] += 1;
        }
    }
    let total = (w * h) as f64;
    for c in 0..3 {
        for b in 0..BINS {
            out[POOL_DIM + c * BINS + b] = hist[c][b] as f64 / total;
        }
    }
    out
}
