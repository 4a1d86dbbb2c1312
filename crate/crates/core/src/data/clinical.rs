//! Clinical records, the CSV table, and feature encoding.
//!
//! Encoded column order (before collinearity pruning):
//!
//! | feature               | columns                                             |
//! |-----------------------|-----------------------------------------------------|
//! | `age_years`           | z-scored                                            |
//! | `gender`              | `gender=Male`, `gender=Female`, `gender=Unknown`    |
//! | `idh`                 | `idh=Mutant`, `idh=Wildtype`, `idh=Unknown`         |
//! | `mgmt`                | `mgmt=Methylated`, `mgmt=Unmethylated`, `mgmt=Unknown` |
//! | `days_to_progression` | z-scored                                            |
//! | `dose_mean_gy` … `dose_d98_gy` | z-scored, one column each                  |

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dose::DoseStatistics;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    /// True progression, the positive class.
    #[serde(rename = "TP")]
    TrueProgression,
    /// Pseudoprogression.
    #[serde(rename = "PsP")]
    Pseudoprogression,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::TrueProgression
    }

    pub fn target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::TrueProgression => "TP",
            Label::Pseudoprogression => "PsP",
        }
    }

    pub fn parse(s: &str) -> Result<Option<Self>> {
        match s.trim() {
            "" => Ok(None),
            "TP" => Ok(Some(Label::TrueProgression)),
            "PsP" => Ok(Some(Label::Pseudoprogression)),
            other => Err(Error::Format(format!("unknown label `{other}` (expected TP, PsP or empty)"))),
        }
    }
}

macro_rules! categorical {
    ($(#[$doc:meta])* $name:ident, $field:literal, [$($variant:ident),+]) => {
        $(#[$doc])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const FIELD: &'static str = $field;
            pub const LEVELS: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant)),+
                }
            }

            pub fn index(self) -> usize {
                Self::LEVELS.iter().position(|&l| l == self).expect("level listed")
            }

            /// Parses a level; anything unrecognized becomes `Unknown` with a
            /// warning.
            pub fn parse_lenient(s: &str) -> Self {
                let s = s.trim();
                match Self::LEVELS.iter().find(|l| l.as_str().eq_ignore_ascii_case(s)) {
                    Some(&l) => l,
                    None => {
                        if !s.is_empty() {
                            warn!("unseen {} category `{s}`, mapping to Unknown", $field);
                        }
                        $name::Unknown
                    }
                }
            }
        }
    };
}

categorical!(Gender, "gender", [Male, Female, Unknown]);
categorical!(
    /// IDH mutation status.
    IdhStatus, "idh", [Mutant, Wildtype, Unknown]
);
categorical!(
    /// MGMT promoter methylation status.
    MgmtStatus, "mgmt", [Methylated, Unmethylated, Unknown]
);

#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalRecord {
    pub subject_id: String,
    pub age_years: f64,
    pub gender: Gender,
    pub idh: IdhStatus,
    pub mgmt: MgmtStatus,
    pub days_to_progression: f64,
    pub dose: DoseStatistics,
    pub label: Option<Label>,
}

impl ClinicalRecord {
    fn continuous(&self) -> [f64; 6] {
        [
            self.age_years,
            self.days_to_progression,
            self.dose.mean,
            self.dose.min,
            self.dose.median,
            self.dose.d98,
        ]
    }
}

/// Raw clinical feature names, in encoded column order.
pub const FEATURES: [&str; 9] = [
    "age_years",
    "gender",
    "idh",
    "mgmt",
    "days_to_progression",
    "dose_mean_gy",
    "dose_min_gy",
    "dose_median_gy",
    "dose_d98_gy",
];

const CONTINUOUS: [&str; 6] = [
    "age_years",
    "days_to_progression",
    "dose_mean_gy",
    "dose_min_gy",
    "dose_median_gy",
    "dose_d98_gy",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    subject_id: String,
    age_years: f64,
    gender: String,
    idh: String,
    mgmt: String,
    days_to_progression: f64,
    dose_mean_gy: f64,
    dose_min_gy: f64,
    dose_median_gy: f64,
    dose_d98_gy: f64,
    label: String,
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: CsvRow = row?;
        out.push(ClinicalRecord {
            subject_id: row.subject_id,
            age_years: row.age_years,
            gender: Gender::parse_lenient(&row.gender),
            idh: IdhStatus::parse_lenient(&row.idh),
            mgmt: MgmtStatus::parse_lenient(&row.mgmt),
            days_to_progression: row.days_to_progression,
            dose: DoseStatistics {
                mean: row.dose_mean_gy,
                min: row.dose_min_gy,
                median: row.dose_median_gy,
                d98: row.dose_d98_gy,
            },
            label: Label::parse(&row.label)?,
        });
    }
    Ok(out)
}

pub fn write_clinical_csv(path: &Path, records: &[ClinicalRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(CsvRow {
            subject_id: r.subject_id.clone(),
            age_years: r.age_years,
            gender: r.gender.as_str().into(),
            idh: r.idh.as_str().into(),
            mgmt: r.mgmt.as_str().into(),
            days_to_progression: r.days_to_progression,
            dose_mean_gy: r.dose.mean,
            dose_min_gy: r.dose.min,
            dose_median_gy: r.dose.median,
            dose_d98_gy: r.dose.d98,
            label: r.label.map(Label::code).unwrap_or("").into(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Normalization statistics of the continuous features, fitted on one
/// training split. The fingerprint identifies the split so downstream
/// consumers can detect features encoded with someone else's statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
    pub fingerprint: String,
}

impl ClinicalStats {
    pub fn fit(records: &[ClinicalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("clinical statistics need at least one record".into()));
        }
        let n = records.len() as f64;
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for r in records {
            mean.iter_mut().zip(r.continuous()).for_each(|(m, v)| *m += v / n);
        }
        for r in records {
            std.iter_mut()
                .zip(r.continuous().iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        let mut hasher = Sha256::new();
        for r in records {
            hasher.update(r.subject_id.as_bytes());
            hasher.update([0u8]);
        }
        for v in mean.iter().chain(&std) {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let fingerprint = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { mean, std, fingerprint })
    }

    fn z(&self, k: usize, v: f64) -> f64 {
        (v - self.mean[k]) / self.std[k].max(super::preprocess::DEFAULT_Z_EPS)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub feature: String,
}

/// Encoded clinical features for a set of subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<FeatureColumn>,
    pub rows: Vec<Vec<f64>>,
    pub subject_ids: Vec<String>,
    /// Fingerprint of the statistics used for encoding.
    pub provenance: String,
}

/// Per-subject clinical input of the fusion model: one slot per selected
/// feature, each holding that feature's encoded columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalInput {
    pub slots: Vec<Vec<f64>>,
}

impl ClinicalInput {
    pub fn slot_widths(&self) -> Vec<usize> {
        self.slots.iter().map(Vec::len).collect()
    }
}

pub fn encode_clinical(records: &[ClinicalRecord], stats: &ClinicalStats) -> FeatureMatrix {
    let mut columns = Vec::new();
    let mut push = |name: String, feature: &str| {
        columns.push(FeatureColumn {
            name,
            feature: feature.to_string(),
        })
    };
    push("age_years".into(), "age_years");
    for l in Gender::LEVELS {
        push(format!("gender={}", l.as_str()), "gender");
    }
    for l in IdhStatus::LEVELS {
        push(format!("idh={}", l.as_str()), "idh");
    }
    for l in MgmtStatus::LEVELS {
        push(format!("mgmt={}", l.as_str()), "mgmt");
    }
    for name in &CONTINUOUS[1..] {
        push(name.to_string(), name);
    }

    let one_hot = |index: usize, len: usize| (0..len).map(move |i| if i == index { 1.0 } else { 0.0 });
    let rows = records
        .iter()
        .map(|r| {
            let c = r.continuous();
            let mut row = vec![stats.z(0, c[0])];
            row.extend(one_hot(r.gender.index(), Gender::LEVELS.len()));
            row.extend(one_hot(r.idh.index(), IdhStatus::LEVELS.len()));
            row.extend(one_hot(r.mgmt.index(), MgmtStatus::LEVELS.len()));
            row.extend((1..6).map(|k| stats.z(k, c[k])));
            row
        })
        .collect();
    FeatureMatrix {
        columns,
        rows,
        subject_ids: records.iter().map(|r| r.subject_id.clone()).collect(),
        provenance: stats.fingerprint.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

impl FeatureMatrix {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_values(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Distinct feature names in column order.
    pub fn features(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.columns {
            if !out.contains(&c.feature) {
                out.push(c.feature.clone());
            }
        }
        out
    }

    /// Keeps only the named columns, in this matrix's order.
    pub fn retain_columns(&self, names: &[String]) -> Self {
        let keep: Vec<usize> = (0..self.columns.len()).filter(|&j| names.contains(&self.columns[j].name)).collect();
        Self {
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            rows: self.rows.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect(),
            subject_ids: self.subject_ids.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Per-row model inputs for the listed features, in the listed order.
    pub fn clinical_inputs(&self, features: &[String]) -> Result<Vec<ClinicalInput>> {
        let groups: Vec<Vec<usize>> = features
            .iter()
            .map(|f| {
                let cols: Vec<usize> = (0..self.columns.len()).filter(|&j| &self.columns[j].feature == f).collect();
                if cols.is_empty() {
                    Err(Error::Config(format!("feature `{f}` has no encoded columns (dropped or unknown)")))
                } else {
                    Ok(cols)
                }
            })
            .collect::<Result<_>>()?;
        Ok(self
            .rows
            .iter()
            .map(|r| ClinicalInput {
                slots: groups.iter().map(|g| g.iter().map(|&j| r[j]).collect()).collect(),
            })
            .collect())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Greedy collinearity pruning in column order: a column is dropped when its
/// absolute Pearson correlation with an already kept column reaches
/// `threshold`, or when it has zero variance.
pub fn drop_collinear(matrix: &FeatureMatrix, threshold: f64) -> Result<(FeatureMatrix, Vec<DroppedColumn>)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("collinearity threshold must lie in (0, 1], got {threshold}")));
    }
    const ZERO_VARIANCE: f64 = 1e-12;
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..matrix.columns.len() {
        let col = matrix.column_values(j);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let name = matrix.columns[j].name.clone();
        if var < ZERO_VARIANCE {
            warn!("dropping zero-variance column `{name}`");
            dropped.push(DroppedColumn {
                name,
                reason: "zero variance".into(),
            });
            continue;
        }
        let clash = kept.iter().find_map(|&k| {
            let r = pearson(&col, &matrix.column_values(k));
            (r.abs() >= threshold).then_some((k, r))
        });
        match clash {
            Some((k, r)) => dropped.push(DroppedColumn {
                name,
                reason: format!("|r| = {:.4} with `{}`", r.abs(), matrix.columns[k].name),
            }),
            None => kept.push(j),
        }
    }
    let names: Vec<String> = kept.iter().map(|&j| matrix.columns[j].name.clone()).collect();
    Ok((matrix.retain_columns(&names), dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn record(id: &str, age: f64, idh: IdhStatus) -> ClinicalRecord {
        ClinicalRecord {
            subject_id: id.into(),
            age_years: age,
            gender: Gender::Female,
            idh,
            mgmt: MgmtStatus::Methylated,
            days_to_progression: 90.0 + age,
            dose: DoseStatistics {
                mean: 50.0,
                min: 30.0 + age / 10.0,
                median: 51.0,
                d98: 35.0,
            },
            label: Some(Label::TrueProgression),
        }
    }

    #[test]
    fn idh_mutant_one_hot() {
        let recs = vec![record("a", 50.0, IdhStatus::Mutant), record("b", 60.0, IdhStatus::Wildtype)];
        let m = encode_clinical(&recs, &ClinicalStats::fit(&recs).unwrap());
        let start = m.columns.iter().position(|c| c.name == "idh=Mutant").unwrap();
        assert_eq!(&m.rows[0][start..start + 3], &[1.0, 0.0, 0.0]);
        assert_eq!(m.columns[start + 2].name, "idh=Unknown");
    }

    #[test]
    fn training_columns_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<_> = (0..40)
            .map(|i| record(&format!("s{i}"), rng.random_range(30.0..80.0), IdhStatus::Wildtype))
            .collect();
        let stats = ClinicalStats::fit(&recs).unwrap();
        let m = encode_clinical(&recs, &stats);
        for name in ["age_years", "days_to_progression", "dose_min_gy"] {
            let j = m.columns.iter().position(|c| c.name == name).unwrap();
            let col = m.column_values(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10, "{name}: {mean} {std}");
        }
    }

    #[test]
    fn mean_age_encodes_to_zero_and_test_split_uses_train_stats() {
        let train = vec![record("a", 40.0, IdhStatus::Mutant), record("b", 60.0, IdhStatus::Wildtype)];
        let stats = ClinicalStats::fit(&train).unwrap();
        let test = vec![record("c", 50.0, IdhStatus::Unknown), record("d", 70.0, IdhStatus::Unknown)];
        let m = encode_clinical(&test, &stats);
        assert_eq!(m.rows[0][0], 0.0);
        assert_eq!(m.rows[1][0], 2.0);
        assert_eq!(m.provenance, stats.fingerprint);
        assert_ne!(ClinicalStats::fit(&test).unwrap().fingerprint, stats.fingerprint);
    }

    #[test]
    fn unseen_category_maps_to_unknown() {
        assert_eq!(IdhStatus::parse_lenient("mutant"), IdhStatus::Mutant);
        assert_eq!(IdhStatus::parse_lenient("IDH-2"), IdhStatus::Unknown);
        assert_eq!(MgmtStatus::parse_lenient(""), MgmtStatus::Unknown);
    }

    fn matrix(cols: Vec<(&str, Vec<f64>)>) -> FeatureMatrix {
        let n = cols[0].1.len();
        FeatureMatrix {
            columns: cols
                .iter()
                .map(|(name, _)| FeatureColumn {
                    name: name.to_string(),
                    feature: name.to_string(),
                })
                .collect(),
            rows: (0..n).map(|i| cols.iter().map(|(_, v)| v[i]).collect()).collect(),
            subject_ids: (0..n).map(|i| i.to_string()).collect(),
            provenance: String::new(),
        }
    }

    #[test]
    fn duplicated_and_affine_columns_are_dropped() {
        let a = vec![1.0, 2.0, 4.0, 3.0];
        let m = matrix(vec![
            ("a", a.clone()),
            ("dup", a.clone()),
            ("neg", a.iter().map(|v| -2.0 * v).collect()),
            ("flat", vec![1.0; 4]),
            ("b", vec![1.0, -1.0, 1.0, -1.0]),
        ]);
        let (kept, dropped) = drop_collinear(&m, 0.95).unwrap();
        assert_eq!(kept.column_names(), vec!["a", "b"]);
        assert_eq!(dropped.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(), vec!["dup", "neg", "flat"]);
    }

    #[test]
    fn independent_columns_survive() {
        // Sampled correlations of 5 independent 200-row columns stay far
        // below 0.95 (max |r| ~ 0.2 for this seed).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cols: Vec<(String, Vec<f64>)> = (0..5)
            .map(|k| (format!("c{k}"), (0..200).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let m = matrix(cols.iter().map(|(n, v)| (n.as_str(), v.clone())).collect());
        let worst = (0..5)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| pearson(&cols[i].1, &cols[j].1).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.3);
        let (kept, dropped) = drop_collinear(&m, 0.95).unwrap();
        assert_eq!(kept.columns.len(), 5);
        assert!(dropped.is_empty());
    }

    #[test]
    fn threshold_out_of_range() {
        let m = matrix(vec![("a", vec![1.0, 2.0])]);
        assert!(drop_collinear(&m, 0.0).is_err());
        assert!(drop_collinear(&m, 1.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clinical.csv");
        let mut recs = vec![record("a", 40.5, IdhStatus::Mutant), record("b", 61.0, IdhStatus::Unknown)];
        recs[1].label = None;
        write_clinical_csv(&path, &recs).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "subject_id,age_years,gender,idh,mgmt,days_to_progression,dose_mean_gy,dose_min_gy,dose_median_gy,dose_d98_gy,label"
        ));
        assert_eq!(read_clinical_csv(&path).unwrap(), recs);
    }

    #[test]
    fn clinical_inputs_group_one_hot_columns() {
        let recs = vec![record("a", 50.0, IdhStatus::Mutant), record("b", 60.0, IdhStatus::Wildtype)];
        let m = encode_clinical(&recs, &ClinicalStats::fit(&recs).unwrap());
        let inputs = m.clinical_inputs(&["idh".into(), "age_years".into()]).unwrap();
        assert_eq!(inputs[0].slots, vec![vec![1.0, 0.0, 0.0], vec![-1.0]]);
        assert!(m.clinical_inputs(&["nope".into()]).is_err());
    }
}
