//! Seeded synthetic photos for scripted sessions, fixtures and benchmarks.
//!
//! An image is a base color with per-pixel noise and an optional solid
//! rectangle (a "hand", a background object) in the lower-right corner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::ImageBlob;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_size")]
    pub size: u32,
    pub rgb: [u8; 3],
    /// Maximum absolute per-channel noise.
    #[serde(default = "default_noise")]
    pub noise: u8,
    #[serde(default)]
    pub patch: Option<Patch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub rgb: [u8; 3],
    /// Side of the patch as a percentage of the image side.
    pub percent: u8,
}

fn default_size() -> u32 {
    64
}

fn default_noise() -> u8 {
    24
}

impl SynthSpec {
    pub fn swatch(rgb: [u8; 3]) -> Self {
        SynthSpec {
            size: default_size(),
            rgb,
            noise: default_noise(),
            patch: None,
        }
    }

    pub fn render(&self, seed: u64) -> ImageBlob {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.size as usize;
        let patch_from = self
            .patch
            .as_ref()
            .map(|p| n - (n * usize::from(p.percent.min(100)) / 100));
        let noise = i16::from(self.noise);
        let mut pixels = Vec::with_capacity(3 * n * n);
        for y in 0..n {
            for x in 0..n {
                let base = match (&self.patch, patch_from) {
                    (Some(p), Some(from)) if x >= from && y >= from => p.rgb,
                    _ => self.rgb,
                };
                for c in base {
                    let jitter = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
                    pixels.push((i16::from(c) + jitter).clamp(0, 255) as u8);
                }
            }
        }
        ImageBlob::new(self.size, self.size, pixels).expect("size within limits")
    }
}

/// Six well-separated base colors used by benchmarks and fixtures.
pub const PALETTE: [[u8; 3]; 6] = [
    [200, 40, 40],
    [40, 60, 200],
    [40, 170, 60],
    [230, 200, 40],
    [150, 60, 170],
    [240, 140, 30],
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_render_is_stable() {
        let spec = SynthSpec::swatch([10, 20, 30]);
        assert_eq!(spec.render(4), spec.render(4));
        assert_ne!(spec.render(4).digest(), spec.render(5).digest());
    }

    #[test]
    fn patch_occupies_corner() {
        let spec = SynthSpec {
            size: 10,
            rgb: [0, 0, 0],
            noise: 0,
            patch: Some(Patch {
                rgb: [255, 255, 255],
                percent: 30,
            }),
        };
        let img = spec.render(0);
        assert_eq!(img.pixel(9, 9), [255, 255, 255]);
        assert_eq!(img.pixel(7, 7), [255, 255, 255]);
        assert_eq!(img.pixel(6, 9), [0, 0, 0]);
    }
}
