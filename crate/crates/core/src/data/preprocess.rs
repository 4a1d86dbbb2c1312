//! Volume preprocessing: crop/pad to a standard grid, histogram
//! standardization against corpus landmarks, and per-channel z-scoring.

use log::warn;
use serde::{Deserialize, Serialize};

use super::volume::VolumeSample;
use crate::error::{Error, Result};

pub const DEFAULT_Z_EPS: f64 = 1e-8;

/// Percentiles used as histogram landmarks: p1, the nine deciles, p99.
pub const LANDMARK_PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

/// Center-crops axes that are too large and zero-pads axes that are too
/// small. Mask and dose planes are cropped/padded identically.
pub fn crop_or_pad(volume: &VolumeSample, target: [usize; 3]) -> Result<VolumeSample> {
    if target.contains(&0) {
        return Err(Error::Config(format!("target extents must be positive, got {target:?}")));
    }
    let src = volume.extents();
    if src == target {
        return Ok(volume.clone());
    }
    // For each axis: source index = target index + shift (may be negative).
    let shift: [isize; 3] = std::array::from_fn(|a| {
        if src[a] >= target[a] {
            ((src[a] - target[a]) / 2) as isize
        } else {
            -(((target[a] - src[a]) / 2) as isize)
        }
    });
    let plane = target.iter().product::<usize>();
    let map = |out: &mut dyn FnMut(usize, usize)| {
        for z in 0..target[0] {
            let sz = z as isize + shift[0];
            if sz < 0 || sz >= src[0] as isize {
                continue;
            }
            for y in 0..target[1] {
                let sy = y as isize + shift[1];
                if sy < 0 || sy >= src[1] as isize {
                    continue;
                }
                for x in 0..target[2] {
                    let sx = x as isize + shift[2];
                    if sx < 0 || sx >= src[2] as isize {
                        continue;
                    }
                    let dst = (z * target[1] + y) * target[2] + x;
                    out(dst, volume.offset(sz as usize, sy as usize, sx as usize));
                }
            }
        }
    };
    let mut voxels = vec![0.0; volume.num_channels() * plane];
    for c in 0..volume.num_channels() {
        let channel = volume.channel(c);
        let out = &mut voxels[c * plane..(c + 1) * plane];
        map(&mut |dst, s| out[dst] = channel[s]);
    }
    let mask = volume.mask().map(|m| {
        let mut out = vec![false; plane];
        map(&mut |dst, s| out[dst] = m[s]);
        out
    });
    let dose = volume.dose().map(|d| {
        let mut out = vec![0.0; plane];
        map(&mut |dst, s| out[dst] = d[s]);
        out
    });
    Ok(VolumeSample::from_parts(volume, target, voxels, mask, dose))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Landmarks of the foreground (`> 0`) voxels of one channel, or `None` if
/// the channel has no foreground.
pub fn channel_landmarks(values: &[f64]) -> Option<Vec<f64>> {
    let mut fg: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    if fg.is_empty() {
        return None;
    }
    fg.sort_by(f64::total_cmp);
    Some(LANDMARK_PERCENTILES.iter().map(|&q| percentile(&fg, q)).collect())
}

/// Per-channel reference landmarks averaged over a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModel {
    pub reference: Vec<Vec<f64>>,
}

impl LandmarkModel {
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a VolumeSample>) -> Result<Self> {
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for v in corpus {
            if sums.is_empty() {
                sums = vec![vec![0.0; LANDMARK_PERCENTILES.len()]; v.num_channels()];
                counts = vec![0; v.num_channels()];
            }
            if v.num_channels() != sums.len() {
                return Err(Error::Shape(format!(
                    "landmark corpus mixes {} and {} channels",
                    sums.len(),
                    v.num_channels()
                )));
            }
            for (c, (sum, count)) in sums.iter_mut().zip(counts.iter_mut()).enumerate() {
                if let Some(l) = channel_landmarks(v.channel(c)) {
                    sum.iter_mut().zip(&l).for_each(|(s, x)| *s += x);
                    *count += 1;
                }
            }
        }
        if sums.is_empty() {
            return Err(Error::Contract("landmark model needs a non-empty corpus".into()));
        }
        let reference = sums
            .into_iter()
            .zip(counts)
            .enumerate()
            .map(|(c, (sum, n))| {
                if n == 0 {
                    Err(Error::Contract(format!("channel {c} has no foreground in any corpus volume")))
                } else {
                    Ok(sum.into_iter().map(|s| s / n as f64).collect())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { reference })
    }
}

/// Monotone piecewise-linear map through `(input[k], reference[k])`,
/// extrapolated linearly beyond the end landmarks. Inputs equal to a landmark
/// map exactly onto the matching reference value.
fn landmark_map(x: f64, input: &[f64], reference: &[f64]) -> f64 {
    let n = input.len();
    let above = input.partition_point(|&l| l <= x);
    if above > 0 && input[above - 1] == x {
        return reference[above - 1];
    }
    let k = above.saturating_sub(1).min(n - 2);
    let slope = (reference[k + 1] - reference[k]) / (input[k + 1] - input[k]);
    reference[k] + (x - input[k]) * slope
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub volume: VolumeSample,
    /// Channels passed through unchanged because their landmarks were not
    /// strictly increasing (constant or nearly constant intensities).
    pub degenerate_channels: Vec<usize>,
}

pub fn histogram_standardize(volume: &VolumeSample, model: &LandmarkModel) -> Result<Standardized> {
    if model.reference.len() != volume.num_channels() {
        return Err(Error::Shape(format!(
            "landmark model has {} channels, volume has {}",
            model.reference.len(),
            volume.num_channels()
        )));
    }
    let mut out = volume.clone();
    let mut degenerate = Vec::new();
    for (c, reference) in model.reference.iter().enumerate() {
        let input = match channel_landmarks(volume.channel(c)) {
            Some(l) if l.windows(2).all(|w| w[0] < w[1]) => l,
            _ => {
                warn!(
                    "{}: channel {c} has degenerate intensity landmarks, passing through",
                    volume.subject_id
                );
                degenerate.push(c);
                continue;
            }
        };
        for v in out.channel_mut(c) {
            *v = landmark_map(*v, &input, reference);
        }
    }
    Ok(Standardized {
        volume: out,
        degenerate_channels: degenerate,
    })
}

/// Per channel: subtract the mean, divide by `max(std, eps)` (population std).
pub fn znormalize_channels(volume: &VolumeSample, eps: f64) -> Result<VolumeSample> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("z-normalization eps must be > 0, got {eps}")));
    }
    let mut out = volume.clone();
    for c in 0..out.num_channels() {
        let ch = out.channel_mut(c);
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = var.sqrt().max(eps);
        ch.iter_mut().for_each(|v| *v = (*v - mean) / scale);
    }
    Ok(out)
}

/// The full preprocessing chain with the statistics of one training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub extents: [usize; 3],
    pub landmarks: LandmarkModel,
    pub eps: f64,
}

impl Preprocessor {
    /// Fits landmarks on the cropped training corpus.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a VolumeSample>, extents: [usize; 3]) -> Result<Self> {
        let cropped = corpus
            .into_iter()
            .map(|v| crop_or_pad(v, extents))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            extents,
            landmarks: LandmarkModel::fit(&cropped)?,
            eps: DEFAULT_Z_EPS,
        })
    }

    pub fn apply(&self, volume: &VolumeSample) -> Result<VolumeSample> {
        let cropped = crop_or_pad(volume, self.extents)?;
        let standardized = histogram_standardize(&cropped, &self.landmarks)?;
        znormalize_channels(&standardized.volume, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(edge: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> VolumeSample {
        let mut data = Vec::with_capacity(edge * edge * edge);
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    data.push(f(z, y, x));
                }
            }
        }
        VolumeSample::new("s", vec!["t1ce".into()], [edge; 3], [1.0; 3], data).unwrap()
    }

    #[test]
    fn crop_is_identity_at_target() {
        let v = cube(4, |z, y, x| (z * 16 + y * 4 + x) as f64);
        assert_eq!(crop_or_pad(&v, [4, 4, 4]).unwrap(), v);
    }

    #[test]
    fn crop_keeps_central_block() {
        let v = cube(40, |z, y, x| (z * 1600 + y * 40 + x) as f64);
        let c = crop_or_pad(&v, [32, 32, 32]).unwrap();
        for (z, y, x) in [(0, 0, 0), (31, 31, 31), (5, 17, 30)] {
            let expected = ((z + 4) * 1600 + (y + 4) * 40 + (x + 4)) as f64;
            assert_eq!(c.channel(0)[c.offset(z, y, x)], expected);
        }
    }

    #[test]
    fn pad_adds_four_zero_voxels_per_side() {
        let v = cube(24, |_, _, _| 1.0);
        let p = crop_or_pad(&v, [32, 32, 32]).unwrap();
        let ch = p.channel(0);
        for i in 0..32 {
            let inside = (4..28).contains(&i);
            assert_eq!(ch[p.offset(i, 16, 16)], if inside { 1.0 } else { 0.0 }, "z={i}");
            assert_eq!(ch[p.offset(16, 16, i)], if inside { 1.0 } else { 0.0 }, "x={i}");
        }
        assert_eq!(ch.iter().sum::<f64>(), (24 * 24 * 24) as f64);
    }

    #[test]
    fn crop_applies_to_mask_and_dose() {
        let v = cube(6, |_, _, _| 1.0)
            .with_mask((0..216).map(|i| i == 0).collect())
            .unwrap()
            .with_dose((0..216).map(|i| i as f64).collect())
            .unwrap();
        let p = crop_or_pad(&v, [8, 8, 8]).unwrap();
        assert!(p.mask().unwrap()[p.offset(1, 1, 1)]);
        assert_eq!(p.dose().unwrap()[p.offset(1, 1, 2)], 1.0);
    }

    fn noisy(seed: u64, scale: f64) -> VolumeSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cube(8, |_, _, _| scale * rng.random_range(0.1..2.0))
    }

    #[test]
    fn identical_landmarks_give_identity_map() {
        let v = noisy(1, 1.0);
        let model = LandmarkModel::fit([&v]).unwrap();
        let out = histogram_standardize(&v, &model).unwrap();
        assert!(out.degenerate_channels.is_empty());
        for (a, b) in out.volume.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn landmarks_map_exactly_onto_reference() {
        let a = noisy(2, 1.0);
        let b = noisy(3, 3.0);
        let model = LandmarkModel::fit([&a, &b]).unwrap();
        let la = channel_landmarks(a.channel(0)).unwrap();
        let lb = channel_landmarks(b.channel(0)).unwrap();
        for k in 0..la.len() {
            assert_eq!(model.reference[0][k], (la[k] + lb[k]) / 2.0);
            assert_eq!(landmark_map(la[k], &la, &model.reference[0]), model.reference[0][k]);
        }
    }

    #[test]
    fn standardization_is_monotone() {
        let a = noisy(4, 1.0);
        let model = LandmarkModel::fit([&noisy(5, 2.0), &noisy(6, 0.5)]).unwrap();
        let out = histogram_standardize(&a, &model).unwrap().volume;
        let mut pairs: Vec<(f64, f64)> = a.voxels().iter().copied().zip(out.voxels().iter().copied()).collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn constant_channel_passes_through_with_flag() {
        let c = cube(4, |_, _, _| 2.0);
        let model = LandmarkModel::fit([&noisy(7, 1.0)]).unwrap();
        let out = histogram_standardize(&c, &model).unwrap();
        assert_eq!(out.degenerate_channels, vec![0]);
        assert_eq!(out.volume, c);
    }

    #[test]
    fn znorm_examples() {
        let constant = cube(2, |_, _, _| 5.0);
        let z = znormalize_channels(&constant, DEFAULT_Z_EPS).unwrap();
        assert!(z.voxels().iter().all(|&v| v == 0.0));

        let two = VolumeSample::new("s", vec!["t1ce".into()], [1, 1, 2], [1.0; 3], vec![1.0, 3.0]).unwrap();
        assert_eq!(znormalize_channels(&two, DEFAULT_Z_EPS).unwrap().voxels(), &[-1.0, 1.0]);

        let v = noisy(8, 1.0);
        let z = znormalize_channels(&v, DEFAULT_Z_EPS).unwrap();
        let n = z.voxels().len() as f64;
        let mean = z.voxels().iter().sum::<f64>() / n;
        let std = (z.voxels().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
    }

    #[test]
    fn znorm_is_idempotent_after_full_chain() {
        let corpus = [noisy(9, 1.0), noisy(10, 1.5)];
        let pre = Preprocessor::fit(&corpus, [6, 6, 6]).unwrap();
        let once = pre.apply(&noisy(11, 0.7)).unwrap();
        let twice = znormalize_channels(&once, DEFAULT_Z_EPS).unwrap();
        assert!(once.voxels().iter().zip(twice.voxels()).all(|(a, b)| (a - b).abs() < 1e-10));
        assert_eq!(pre.apply(&noisy(11, 0.7)).unwrap(), once);
    }
}
