//! Volumes, clinical tables, preprocessing, dose statistics, and the
//! synthetic cohort generator.

pub mod clinical;
pub mod dose;
pub mod preprocess;
pub mod synth;
pub mod volume;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use clinical::{
    drop_collinear, encode_clinical, read_clinical_csv, write_clinical_csv, ClinicalInput, ClinicalRecord,
    ClinicalStats, DroppedColumn, FeatureColumn, FeatureMatrix, Label,
};
pub use dose::{dose_statistics, DoseStatistics};
pub use preprocess::{crop_or_pad, histogram_standardize, znormalize_channels, LandmarkModel, Preprocessor};
pub use synth::{synth_generate, SynthConfig};
pub use volume::{load_volume, store_volume, VolumeDtype, VolumeSample};

use crate::error::{Error, Result};

/// A cohort: one volume and one clinical record per subject, plus an
/// optional continuous auxiliary target (survival stand-in).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub volumes: Vec<VolumeSample>,
    pub records: Vec<ClinicalRecord>,
    pub aux_targets: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AuxRow {
    subject_id: String,
    aux_target: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Positive-class indicator per subject; errors if any label is missing.
    pub fn labels(&self) -> Result<Vec<bool>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .map(Label::is_positive)
                    .ok_or_else(|| Error::Contract(format!("subject {} has no label", r.subject_id)))
            })
            .collect()
    }

    /// Writes `clinical.csv`, `aux_targets.csv` (when present) and
    /// `volumes/<subject>.vol.{json,bin}` under `dir`.
    pub fn save(&self, dir: &Path, dtype: VolumeDtype) -> Result<()> {
        fs::create_dir_all(dir.join("volumes"))?;
        write_clinical_csv(&dir.join("clinical.csv"), &self.records)?;
        for v in &self.volumes {
            store_volume(v, &dir.join("volumes").join(&v.subject_id), dtype)?;
        }
        if !self.aux_targets.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("aux_targets.csv"))?;
            for (r, &t) in self.records.iter().zip(&self.aux_targets) {
                w.serialize(AuxRow {
                    subject_id: r.subject_id.clone(),
                    aux_target: t,
                })?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let clinical = dir.join("clinical.csv");
        if !clinical.is_file() {
            return Err(Error::Config(format!("no dataset at {}: missing clinical.csv", dir.display())));
        }
        let records = read_clinical_csv(&clinical)?;
        let volumes = records
            .iter()
            .map(|r| load_volume(&dir.join("volumes").join(&r.subject_id)))
            .collect::<Result<Vec<_>>>()?;
        let aux_path = dir.join("aux_targets.csv");
        let aux_targets = if aux_path.exists() {
            let mut reader = csv::Reader::from_path(&aux_path)?;
            let rows = reader.deserialize().collect::<std::result::Result<Vec<AuxRow>, _>>()?;
            if rows.len() != records.len() || rows.iter().zip(&records).any(|(a, r)| a.subject_id != r.subject_id) {
                return Err(Error::Format(format!(
                    "{}: subjects do not match clinical.csv",
                    aux_path.display()
                )));
            }
            rows.into_iter().map(|r| r.aux_target).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            volumes,
            records,
            aux_targets,
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            volumes: indices.iter().map(|&i| self.volumes[i].clone()).collect(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            aux_targets: if self.aux_targets.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.aux_targets[i]).collect()
            },
        }
    }
}
