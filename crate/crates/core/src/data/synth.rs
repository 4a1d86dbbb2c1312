//! Synthetic cohort with planted class signal.
//!
//! Every subject gets a two-channel head phantom with smooth texture,
//! per-subject scanner gain, an ellipsoidal lesion (mask), and a dose grid
//! from a spherical target near the lesion. Class effects, all scaled by
//! `signal`:
//!
//! - time to progression: longer for true progression (strongest effect);
//! - lesion position relative to the high-dose region: true-progression
//!   lesions sit further out, lowering min dose and D98 most;
//! - T1CE lesion enhancement: brighter for true progression.
//!
//! Age, gender, IDH and MGMT carry no class information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clinical::{ClinicalRecord, Gender, IdhStatus, Label, MgmtStatus};
use super::dose::dose_statistics;
use super::volume::{VolumeSample, DEFAULT_CHANNELS};
use super::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::metrics::roc_auc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub true_progression: usize,
    pub extents: [usize; 3],
    pub signal: f64,
    /// Cross-validation folds the cohort must support (two subjects per fold).
    pub folds: usize,
    /// When false the records carry no label.
    pub labeled: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 60,
            true_progression: 34,
            extents: [32, 32, 32],
            signal: 1.0,
            folds: 5,
            labeled: true,
        }
    }
}

struct Bump {
    center: [f64; 3],
    width: f64,
    amplitude: f64,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-6 {
            return v.map(|x| x / len);
        }
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, levels: &[(T, f64)]) -> T {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(level, p) in levels {
        acc += p;
        if u < acc {
            return level;
        }
    }
    levels.last().expect("levels").0
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    if cfg.folds == 0 || cfg.subjects < 2 * cfg.folds {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {} folds (need at least {})",
            cfg.subjects,
            cfg.folds,
            2 * cfg.folds
        )));
    }
    if cfg.true_progression > cfg.subjects {
        return Err(Error::Config(format!(
            "{} true-progression subjects requested out of {}",
            cfg.true_progression, cfg.subjects
        )));
    }
    if cfg.extents.contains(&0) || !(cfg.signal >= 0.0) {
        return Err(Error::Config("extents must be positive and signal non-negative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = (0..cfg.subjects).map(|i| i < cfg.true_progression).collect();
    labels.shuffle(&mut rng);

    let s = cfg.signal;
    let noise = Normal::new(0.0, 0.03).expect("noise");
    let [ed, eh, ew] = cfg.extents;
    let coord = |i: usize, e: usize| (i as f64 + 0.5) / e as f64 * 2.0 - 1.0;

    let mut volumes = Vec::with_capacity(cfg.subjects);
    let mut records = Vec::with_capacity(cfg.subjects);
    let mut aux_targets = Vec::with_capacity(cfg.subjects);
    for (idx, &tp) in labels.iter().enumerate() {
        let cls = if tp { 1.0 } else { 0.0 };
        let head_radii = [
            rng.random_range(0.78..0.88),
            rng.random_range(0.80..0.90),
            rng.random_range(0.72..0.82),
        ];
        let gains = [rng.random_range(0.75..1.25), rng.random_range(0.75..1.25)];
        let bumps: Vec<Bump> = (0..6)
            .map(|_| Bump {
                center: [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                ],
                width: rng.random_range(0.2..0.4),
                amplitude: rng.random_range(-0.25..0.25),
            })
            .collect();
        let lesion_center = [
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.35..0.35),
        ];
        let lesion_radius: f64 = rng.random_range(0.14..0.22);
        let enhancement = 0.3 + 0.5 * s * cls;

        let dir = unit_vector(&mut rng);
        let offset = rng.random_range(0.0..0.15) + 0.04 * s * cls;
        let target_center: [f64; 3] = std::array::from_fn(|i| lesion_center[i] + dir[i] * offset);
        let target_radius = lesion_radius + 0.05;
        let prescription = rng.random_range(57.0..61.0);

        let plane = ed * eh * ew;
        let mut voxels = vec![0.0; 2 * plane];
        let mut mask = vec![false; plane];
        let mut dose = vec![0.0; plane];
        let mut nearest = (f64::INFINITY, 0usize);
        for z in 0..ed {
            for y in 0..eh {
                for x in 0..ew {
                    let p = [coord(z, ed), coord(y, eh), coord(x, ew)];
                    let o = (z * eh + y) * ew + x;
                    let head: f64 = (0..3).map(|i| (p[i] / head_radii[i]).powi(2)).sum();
                    let d_lesion = dist2(p, lesion_center).sqrt();
                    if d_lesion < nearest.0 {
                        nearest = (d_lesion, o);
                    }
                    let in_lesion = d_lesion <= lesion_radius;
                    mask[o] = in_lesion;
                    let d_target = dist2(p, target_center).sqrt();
                    dose[o] = prescription / (1.0 + ((d_target - target_radius) / 0.08).exp());
                    if head <= 1.0 {
                        let texture: f64 = bumps
                            .iter()
                            .map(|b| b.amplitude * (-dist2(p, b.center) / (2.0 * b.width * b.width)).exp())
                            .sum();
                        let mut t1 = 0.9 + texture + noise.sample(&mut rng);
                        let mut fl = 0.7 + 0.8 * texture + noise.sample(&mut rng);
                        if in_lesion {
                            t1 += enhancement;
                            fl += 0.5;
                        }
                        voxels[o] = gains[0] * t1.max(0.01);
                        voxels[plane + o] = gains[1] * fl.max(0.01);
                    }
                }
            }
        }
        // Small lesions on coarse grids still cover the voxel nearest their center.
        mask[nearest.1] = true;
        for v in dose.iter_mut() {
            *v *= 1.0 + rng.random_range(-0.02..0.02);
        }
        let dose_stats = dose_statistics(&dose, &mask)?;

        let subject_id = format!("S{:04}", idx + 1);
        let log_days = Normal::new(75f64.ln() + 0.9 * s * cls, 0.45).expect("days");
        let age = Normal::new(58.0f64, 11.0).expect("age").sample(&mut rng).clamp(18.0, 90.0);
        let record = ClinicalRecord {
            subject_id: subject_id.clone(),
            age_years: (age * 10.0).round() / 10.0,
            gender: pick(&mut rng, &[(Gender::Male, 0.58), (Gender::Female, 0.4), (Gender::Unknown, 0.02)]),
            idh: pick(
                &mut rng,
                &[(IdhStatus::Wildtype, 0.82), (IdhStatus::Mutant, 0.1), (IdhStatus::Unknown, 0.08)],
            ),
            mgmt: pick(
                &mut rng,
                &[
                    (MgmtStatus::Methylated, 0.4),
                    (MgmtStatus::Unmethylated, 0.4),
                    (MgmtStatus::Unknown, 0.2),
                ],
            ),
            days_to_progression: log_days.sample(&mut rng).exp().round().max(1.0),
            dose: dose_stats,
            label: cfg.labeled.then_some(if tp {
                Label::TrueProgression
            } else {
                Label::Pseudoprogression
            }),
        };
        let survival = 24.0 - 40.0 * (lesion_radius - 0.18) - 6.0 * enhancement
            + Normal::new(0.0, 1.0).expect("aux").sample(&mut rng);

        let volume = VolumeSample::new(
            subject_id,
            DEFAULT_CHANNELS.iter().map(|c| c.to_string()).collect(),
            cfg.extents,
            [1.0; 3],
            voxels,
        )?
        .with_mask(mask)?
        .with_dose(dose)?;
        volumes.push(volume);
        records.push(record);
        aux_targets.push(survival);
    }

    if s > 0.0 && cfg.true_progression > 0 && cfg.true_progression < cfg.subjects {
        let days: Vec<f64> = records.iter().map(|r| r.days_to_progression).collect();
        let auc = roc_auc(&days, &labels)?.auc;
        if auc <= 0.5 {
            return Err(Error::Config(format!(
                "seed {seed}: planted time-to-progression signal not realized (AUC {auc:.3}); use another seed or a larger signal"
            )));
        }
    }
    Ok(Dataset {
        volumes,
        records,
        aux_targets,
    })
}
