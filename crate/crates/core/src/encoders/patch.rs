use serde::{Deserialize, Serialize};

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Shape of the image encoder: input volume, patching and transformer size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub channels: usize,
    /// Volume extents (D, H, W) in voxels.
    pub extents: [usize; 3],
    /// Cubic patch edge in voxels.
    pub patch: usize,
    /// Embedding width d shared by every token in the model.
    pub dim: usize,
    /// Number of transformer blocks L.
    pub depth: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            extents: [32, 32, 32],
            patch: 8,
            dim: 32,
            depth: 2,
            mlp_ratio: 2,
        }
    }
}

const AXES: [&str; 3] = ["D", "H", "W"];

fn patch_grid(extents: [usize; 3], p: usize) -> Result<[usize; 3]> {
    if p == 0 {
        return Err(Error::Config("patch edge must be positive".into()));
    }
    let mut grid = [0; 3];
    for a in 0..3 {
        if !extents[a].is_multiple_of(p) {
            return Err(Error::Config(format!(
                "axis {} extent {} is not divisible by patch edge {p}",
                AXES[a], extents[a]
            )));
        }
        grid[a] = extents[a] / p;
    }
    Ok(grid)
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channels, dim and mlp_ratio must be positive".into()));
        }
        patch_grid(self.extents, self.patch).map(|_| ())
    }

    /// Patches per axis.
    pub fn grid(&self) -> Result<[usize; 3]> {
        patch_grid(self.extents, self.patch)
    }

    pub fn num_tokens(&self) -> Result<usize> {
        Ok(self.grid()?.iter().product())
    }

    /// Length of one flattened patch, C * p^3.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch.pow(3)
    }
}

/// Cuts `volume` into non-overlapping p^3 blocks. Rows follow lexicographic
/// (z, y, x) patch order; within a row voxels run in (z, y, x) order with the
/// channel index innermost.
pub fn patchify<T: Real>(volume: &VolumeSample, cfg: &PatchConfig) -> Result<Tensor<T>> {
    let p = cfg.patch;
    let grid = patch_grid(volume.extents(), p)?;
    if volume.extents() != cfg.extents || volume.num_channels() != cfg.channels {
        return Err(Error::Shape(format!(
            "volume is {}x{:?}, encoder expects {}x{:?}",
            volume.num_channels(),
            volume.extents(),
            cfg.channels,
            cfg.extents
        )));
    }
    let c = cfg.channels;
    let plane = volume.plane_len();
    let voxels = volume.voxels();
    let row_len = cfg.patch_len();
    let mut data = Vec::with_capacity(grid.iter().product::<usize>() * row_len);
    for gz in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                for dz in 0..p {
                    for dy in 0..p {
                        let base = volume.offset(gz * p + dz, gy * p + dy, gx * p);
                        for dx in 0..p {
                            for ch in 0..c {
                                data.push(T::from_f64(voxels[ch * plane + base + dx]));
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![data.len() / row_len, row_len], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(c: usize, e: usize) -> VolumeSample {
        let n = c * e * e * e;
        VolumeSample::new(
            "v",
            (0..c).map(|i| format!("c{i}")).collect(),
            [e; 3],
            [1.0; 3],
            (0..n).map(|i| i as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn desk_scale_token_count() {
        let cfg = PatchConfig::default();
        let t: Tensor = patchify(&volume(2, 32), &cfg).unwrap();
        assert_eq!(t.shape(), &[64, 1024]);
    }

    #[test]
    fn full_scale_token_count() {
        let cfg = PatchConfig {
            extents: [160; 3],
            patch: 20,
            ..PatchConfig::default()
        };
        assert_eq!(cfg.num_tokens().unwrap(), 512);
        assert_eq!(cfg.patch_len(), 16_000);
    }

    #[test]
    fn indivisible_axis_is_named() {
        let cfg = PatchConfig {
            patch: 7,
            ..PatchConfig::default()
        };
        match patchify::<f64>(&volume(2, 32), &cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("axis D"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layout_is_channel_innermost() {
        // 2 channels, 4^3 volume, p = 2: voxel value = index into (C, D, H, W).
        let cfg = PatchConfig {
            extents: [4; 3],
            patch: 2,
            ..PatchConfig::default()
        };
        let t: Tensor = patchify(&volume(2, 4), &cfg).unwrap();
        assert_eq!(t.shape(), &[8, 16]);
        // Patch 0 voxel (0,0,0) channel 0 and 1, then voxel (0,0,1).
        assert_eq!(&t.row(0)[..4], &[0.0, 64.0, 1.0, 65.0]);
        // Patch 1 is (gz, gy, gx) = (0, 0, 1): starts at x = 2.
        assert_eq!(t.row(1)[0], 2.0);
        // Patch 2 is (0, 1, 0): starts at y = 2 -> offset 8.
        assert_eq!(t.row(2)[0], 8.0);
        // Last element of patch 7: voxel (3,3,3), channel 1.
        assert_eq!(t.row(7)[15], 127.0);
    }
}
