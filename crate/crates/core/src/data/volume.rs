use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHANNELS: [&str; 2] = ["t1ce", "flair"];

/// Multi-channel 3D volume with optional lesion mask and dose grid.
///
/// Voxels are stored row-major in `C, D, H, W` order. Mask and dose, when
/// present, are single `D, H, W` planes aligned with the channels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub subject_id: String,
    pub channel_names: Vec<String>,
    extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    voxels: Vec<f64>,
    mask: Option<Vec<bool>>,
    dose: Option<Vec<f64>>,
}

impl VolumeSample {
    pub fn new(
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
        extents: [usize; 3],
        spacing_mm: [f64; 3],
        voxels: Vec<f64>,
    ) -> Result<Self> {
        if extents.contains(&0) || channel_names.is_empty() {
            return Err(Error::Shape(format!(
                "volume needs positive extents and at least one channel, got {extents:?} with {} channels",
                channel_names.len()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        let expected = channel_names.len() * extents.iter().product::<usize>();
        if voxels.len() != expected {
            return Err(Error::Shape(format!(
                "volume {:?}x{extents:?} needs {expected} voxels, got {}",
                channel_names.len(),
                voxels.len()
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            channel_names,
            extents,
            spacing_mm,
            voxels,
            mask: None,
            dose: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.check_plane("mask", mask.len())?;
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_dose(mut self, dose: Vec<f64>) -> Result<Self> {
        self.check_plane("dose", dose.len())?;
        self.dose = Some(dose);
        Ok(self)
    }

    fn check_plane(&self, what: &str, len: usize) -> Result<()> {
        if len != self.plane_len() {
            return Err(Error::Shape(format!(
                "{what} grid has {len} voxels, volume extents {:?} need {}",
                self.extents,
                self.plane_len()
            )));
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    /// Voxels per channel.
    pub fn plane_len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.voxels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.voxels[c * n..(c + 1) * n]
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn dose(&self) -> Option<&[f64]> {
        self.dose.as_deref()
    }

    /// Flat index of voxel `(z, y, x)` within one plane.
    #[inline]
    pub fn offset(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    /// Returns a copy with identical metadata and planes but new voxel data.
    pub fn with_voxels(&self, voxels: Vec<f64>) -> Result<Self> {
        if voxels.len() != self.voxels.len() {
            return Err(Error::Shape(format!(
                "replacement voxels: {} vs {}",
                voxels.len(),
                self.voxels.len()
            )));
        }
        Ok(Self {
            voxels,
            ..self.clone()
        })
    }

    pub(crate) fn from_parts(
        template: &Self,
        extents: [usize; 3],
        voxels: Vec<f64>,
        mask: Option<Vec<bool>>,
        dose: Option<Vec<f64>>,
    ) -> Self {
        Self {
            subject_id: template.subject_id.clone(),
            channel_names: template.channel_names.clone(),
            extents,
            spacing_mm: template.spacing_mm,
            voxels,
            mask,
            dose,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum VolumeDtype {
    #[default]
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

impl VolumeDtype {
    fn width(self) -> usize {
        match self {
            VolumeDtype::F32Le => 4,
            VolumeDtype::F64Le => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Extras {
    mask: bool,
    dose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    shape: [usize; 4],
    dtype: VolumeDtype,
    spacing_mm: [f64; 3],
    channels: Vec<String>,
    extras: Extras,
}

/// `<base>.vol.json` and `<base>.vol.bin` for a base path without extension.
pub fn volume_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.vol.json")), PathBuf::from(format!("{s}.vol.bin")))
}

/// Writes the volume as a JSON header plus a raw little-endian payload.
/// With `F32Le` the voxels are rounded to single precision.
pub fn store_volume(volume: &VolumeSample, base: &Path, dtype: VolumeDtype) -> Result<()> {
    let (header_path, blob_path) = volume_paths(base);
    let [d, h, w] = volume.extents;
    let header = VolumeHeader {
        shape: [volume.num_channels(), d, h, w],
        dtype,
        spacing_mm: volume.spacing_mm,
        channels: volume.channel_names.clone(),
        extras: Extras {
            mask: volume.mask.is_some(),
            dose: volume.dose.is_some(),
        },
    };
    let planes = volume.num_channels() + usize::from(volume.mask.is_some()) + usize::from(volume.dose.is_some());
    let mut blob = Vec::with_capacity(planes * volume.plane_len() * dtype.width());
    let mut put = |v: f64| match dtype {
        VolumeDtype::F32Le => blob.extend_from_slice(&(v as f32).to_le_bytes()),
        VolumeDtype::F64Le => blob.extend_from_slice(&v.to_le_bytes()),
    };
    volume.voxels.iter().for_each(|&v| put(v));
    if let Some(mask) = &volume.mask {
        mask.iter().for_each(|&m| put(if m { 1.0 } else { 0.0 }));
    }
    if let Some(dose) = &volume.dose {
        dose.iter().for_each(|&v| put(v));
    }
    if let Some(parent) = header_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&header_path, serde_json::to_vec_pretty(&header)?)?;
    fs::write(&blob_path, blob)?;
    Ok(())
}

pub fn load_volume(base: &Path) -> Result<VolumeSample> {
    let (header_path, blob_path) = volume_paths(base);
    let header: VolumeHeader = serde_json::from_slice(&fs::read(&header_path)?)?;
    let blob = fs::read(&blob_path)?;
    let [c, d, h, w] = header.shape;
    if c != header.channels.len() {
        return Err(Error::Format(format!(
            "{}: shape declares {c} channels but {} channel names are listed",
            header_path.display(),
            header.channels.len()
        )));
    }
    let plane = d * h * w;
    let planes = c + usize::from(header.extras.mask) + usize::from(header.extras.dose);
    let width = header.dtype.width();
    let expected = planes * plane * width;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} payload bytes, found {}",
            blob_path.display(),
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(width)
        .map(|b| match header.dtype {
            VolumeDtype::F32Le => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            VolumeDtype::F64Le => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        })
        .collect();
    let subject_id = base
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut volume = VolumeSample::new(
        subject_id,
        header.channels,
        [d, h, w],
        header.spacing_mm,
        values[..c * plane].to_vec(),
    )?;
    let mut offset = c * plane;
    if header.extras.mask {
        volume = volume.with_mask(values[offset..offset + plane].iter().map(|&v| v != 0.0).collect())?;
        offset += plane;
    }
    if header.extras.dose {
        volume = volume.with_dose(values[offset..offset + plane].to_vec())?;
    }
    Ok(volume)
}
