use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::VolumeSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Per-axis flip probability.
    pub flip_prob: f64,
    /// Maximum shift as a fraction of each extent (zero fill).
    pub shift_frac: f64,
    /// Noise standard deviation relative to each channel's std.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            shift_frac: 0.1,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            shift_frac: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub a: VolumeSample,
    pub b: VolumeSample,
}

fn channel_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn augment_one(volume: &VolumeSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> VolumeSample {
    let e = volume.extents();
    let flips: [bool; 3] = std::array::from_fn(|_| rng.random::<f64>() < cfg.flip_prob);
    let shifts: [isize; 3] = std::array::from_fn(|a| {
        let m = (cfg.shift_frac * e[a] as f64).floor() as i64;
        if m > 0 {
            rng.random_range(-m..=m) as isize
        } else {
            0
        }
    });
    let plane = volume.plane_len();
    let mut out = vec![0.0; volume.voxels().len()];
    let source = |o: usize, a: usize| -> Option<usize> {
        let s = o as isize - shifts[a];
        if s < 0 || s >= e[a] as isize {
            return None;
        }
        let s = s as usize;
        Some(if flips[a] { e[a] - 1 - s } else { s })
    };
    for c in 0..volume.num_channels() {
        let src = volume.channel(c);
        let sigma = cfg.noise_sigma * channel_std(src);
        let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
        for z in 0..e[0] {
            for y in 0..e[1] {
                for x in 0..e[2] {
                    let mut v = match (source(z, 0), source(y, 1), source(x, 2)) {
                        (Some(sz), Some(sy), Some(sx)) => src[volume.offset(sz, sy, sx)],
                        _ => 0.0,
                    };
                    if let Some(n) = &noise {
                        v += n.sample(rng);
                    }
                    out[c * plane + volume.offset(z, y, x)] = v;
                }
            }
        }
    }
    volume.with_voxels(out).expect("same shape")
}

/// Two independently augmented views: axis flips, a shift within
/// `shift_frac` of each extent, and Gaussian noise.
pub fn augment_views(volume: &VolumeSample, seed: u64, cfg: &AugmentConfig) -> ViewPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment_one(volume, cfg, &mut rng);
    let b = augment_one(volume, cfg, &mut rng);
    ViewPair { a, b }
}
