use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Disjoint swaps of cubic patch blocks. Patches are indexed in the same
/// lexicographic order as encoder tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub patch: usize,
    pub grid: [usize; 3],
    pub swaps: Vec<(usize, usize)>,
}

impl CorruptionPlan {
    pub fn is_empty(&self) -> bool {
        self.swaps.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        self.grid.iter().product()
    }

    /// Corrupted patch indices, ascending.
    pub fn masked(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.swaps.iter().flat_map(|&(a, b)| [a, b]).collect();
        m.sort_unstable();
        m
    }

    fn origin(&self, index: usize) -> [usize; 3] {
        let [_, gy, gx] = self.grid;
        let p = self.patch;
        [index / (gy * gx) * p, index / gx % gy * p, index % gx * p]
    }

    fn check(&self, volume: &VolumeSample) -> Result<()> {
        let e = volume.extents();
        if (0..3).any(|a| self.grid[a] * self.patch != e[a]) {
            return Err(Error::Shape(format!(
                "plan covers {:?} patches of edge {}, volume is {e:?}",
                self.grid, self.patch
            )));
        }
        Ok(())
    }
}

/// Chooses `round(ratio * N / 2)` disjoint patch pairs to swap.
pub fn corruption_plan(extents: [usize; 3], patch: usize, ratio: f64, seed: u64) -> Result<CorruptionPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("corruption ratio {ratio} is outside (0, 1)")));
    }
    if patch == 0 || extents.iter().any(|&e| e % patch != 0) {
        return Err(Error::Config(format!("patch edge {patch} does not tile {extents:?}")));
    }
    let grid = extents.map(|e| e / patch);
    let n: usize = grid.iter().product();
    let pairs = ((ratio * n as f64 / 2.0).round() as usize).min(n / 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let swaps = order[..2 * pairs].chunks_exact(2).map(|c| (c[0], c[1])).collect();
    Ok(CorruptionPlan { patch, grid, swaps })
}

/// Applies the swaps to every image channel; mask and dose are untouched.
/// The swaps are disjoint, so applying a plan twice restores the input.
pub fn apply_plan(volume: &VolumeSample, plan: &CorruptionPlan) -> Result<VolumeSample> {
    plan.check(volume)?;
    let mut out = volume.clone();
    let p = plan.patch;
    let plane = volume.plane_len();
    let voxels = out.voxels_mut();
    for &(a, b) in &plan.swaps {
        let (oa, ob) = (plan.origin(a), plan.origin(b));
        for c in 0..volume.num_channels() {
            for dz in 0..p {
                for dy in 0..p {
                    let ia = c * plane + volume.offset(oa[0] + dz, oa[1] + dy, oa[2]);
                    let ib = c * plane + volume.offset(ob[0] + dz, ob[1] + dy, ob[2]);
                    for dx in 0..p {
                        voxels.swap(ia + dx, ib + dx);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Context-restoration corruption: swap randomly chosen patch pairs.
pub fn corrupt_context(
    volume: &VolumeSample,
    patch: usize,
    ratio: f64,
    seed: u64,
) -> Result<(VolumeSample, CorruptionPlan)> {
    let plan = corruption_plan(volume.extents(), patch, ratio, seed)?;
    Ok((apply_plan(volume, &plan)?, plan))
}

/// Mean squared error over the voxels (all channels) of corrupted patches.
pub fn restoration_loss(reconstruction: &VolumeSample, target: &VolumeSample, plan: &CorruptionPlan) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::Contract("restoration loss is undefined for an empty plan".into()));
    }
    plan.check(target)?;
    if reconstruction.extents() != target.extents() || reconstruction.num_channels() != target.num_channels() {
        return Err(Error::Shape("reconstruction and target differ in shape".into()));
    }
    let p = plan.patch;
    let plane = target.plane_len();
    let (r, t) = (reconstruction.voxels(), target.voxels());
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in plan.masked() {
        let o = plan.origin(idx);
        for c in 0..target.num_channels() {
            for dz in 0..p {
                for dy in 0..p {
                    let base = c * plane + target.offset(o[0] + dz, o[1] + dy, o[2]);
                    for i in base..base + p {
                        sum += (r[i] - t[i]).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(sum / count as f64)
}

/// Token-level form: `predicted` and `target` are N x (C p^3) patch rows;
/// the loss averages squared error over the rows of corrupted patches.
pub fn restoration_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    predicted: Var,
    target: &Tensor<T>,
    plan: &CorruptionPlan,
) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::Contract("restoration loss is undefined for an empty plan".into()));
    }
    let (n, len) = (target.rows(), target.cols());
    if tape.value(predicted).shape() != target.shape() || n != plan.num_patches() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?}, plan of {} patches",
            tape.value(predicted).shape(),
            target.shape(),
            plan.num_patches()
        )));
    }
    let mut mask = vec![T::zero(); n * len];
    let masked = plan.masked();
    for &row in &masked {
        mask[row * len..(row + 1) * len].fill(T::one());
    }
    let t = tape.constant(target.clone());
    let m = tape.constant(Tensor::matrix(n, len, mask));
    let diff = tape.sub(predicted, t)?;
    let diff = tape.mul(diff, m)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (masked.len() * len) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{patchify, PatchConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn volume(seed: u64) -> VolumeSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VolumeSample::new(
            "v",
            vec!["t1ce".into(), "flair".into()],
            [8, 8, 8],
            [1.0; 3],
            (0..1024).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn sorted(v: &[f64]) -> Vec<u64> {
        let mut b: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        b.sort_unstable();
        b
    }

    #[test]
    fn tiny_ratio_selects_nothing() {
        let v = volume(0);
        let (c, plan) = corrupt_context(&v, 4, 0.05, 1).unwrap();
        assert!(plan.is_empty());
        assert_eq!(c, v);
        assert!(matches!(restoration_loss(&c, &v, &plan), Err(Error::Contract(_))));
    }

    #[test]
    fn ratio_out_of_range() {
        for r in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(matches!(corrupt_context(&volume(0), 4, r, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn seeded_and_content_preserving() {
        let v = volume(1);
        let (a, pa) = corrupt_context(&v, 2, 0.3, 9).unwrap();
        let (b, pb) = corrupt_context(&v, 2, 0.3, 9).unwrap();
        assert_eq!((a.clone(), pa.clone()), (b, pb));
        assert_eq!(pa.swaps.len(), 10); // round(0.3 * 64 / 2)
        assert_ne!(a, v);
        assert_eq!(sorted(a.voxels()), sorted(v.voxels()));
    }

    #[test]
    fn loss_examples() {
        let v = volume(2);
        let (_, plan) = corrupt_context(&v, 4, 0.5, 3).unwrap();
        assert_eq!(restoration_loss(&v, &v, &plan).unwrap(), 0.0);

        // Shift every voxel of the masked patches by c = 0.5.
        let masked = plan.masked();
        let mut shifted = v.clone();
        let mut outside = v.clone();
        let cfg = PatchConfig {
            extents: [8; 3],
            patch: 4,
            ..PatchConfig::default()
        };
        let patches: Tensor = patchify(&v, &cfg).unwrap();
        let plane = v.plane_len();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let idx = (z / 4) * 4 + (y / 4) * 2 + x / 4;
                    for c in 0..2 {
                        let o = c * plane + v.offset(z, y, x);
                        if masked.contains(&idx) {
                            shifted.voxels_mut()[o] += 0.5;
                        } else {
                            outside.voxels_mut()[o] += 3.0;
                        }
                    }
                }
            }
        }
        assert!((restoration_loss(&shifted, &v, &plan).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(restoration_loss(&outside, &v, &plan).unwrap(), 0.0);

        // Token-level loss agrees with the volume-level one.
        let mut tape = Tape::new();
        let pred = tape.constant(patchify(&shifted, &cfg).unwrap());
        let l = restoration_loss_tape(&mut tape, pred, &patches, &plan).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn plan_is_an_involution(seed in any::<u64>(), ratio in 0.01f64..0.99) {
            let v = volume(seed % 7);
            let (c, plan) = corrupt_context(&v, 2, ratio, seed).unwrap();
            prop_assert_eq!(apply_plan(&c, &plan).unwrap(), v);
            let m = plan.masked();
            let mut dedup = m.clone();
            dedup.dedup();
            prop_assert_eq!(m, dedup);
        }
    }
}
