use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dose summary of a lesion, in Gy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseStatistics {
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    /// Near-minimum dose: the dose received by at least 98% of the lesion.
    pub d98: f64,
}

/// Summarizes `dose` over the voxels selected by `mask`.
///
/// D98 is the nearest-rank 2nd percentile: sorted ascending, the value at
/// 1-based rank `ceil(0.02 n)`. The median averages the two middle values for
/// even counts.
pub fn dose_statistics(dose: &[f64], mask: &[bool]) -> Result<DoseStatistics> {
    if dose.len() != mask.len() {
        return Err(Error::Shape(format!(
            "dose grid has {} voxels, mask has {}",
            dose.len(),
            mask.len()
        )));
    }
    let mut values: Vec<f64> = dose.iter().zip(mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    if values.is_empty() {
        return Err(Error::Contract("dose statistics need a non-empty lesion mask".into()));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    // ceil(0.02 n) in integer arithmetic.
    let rank = (2 * n).div_ceil(100).max(1);
    Ok(DoseStatistics {
        mean,
        min: values[0],
        median,
        d98: values[rank - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_dose() {
        let s = dose_statistics(&[60.0; 10], &[true; 10]).unwrap();
        assert_eq!((s.mean, s.min, s.median, s.d98), (60.0, 60.0, 60.0, 60.0));
    }

    #[test]
    fn one_to_hundred() {
        // Sorted 1..=100: rank ceil(2) = 2 -> D98 = 2; median (50 + 51) / 2.
        let dose: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let s = dose_statistics(&dose, &[true; 100]).unwrap();
        assert_eq!((s.mean, s.min, s.median, s.d98), (50.5, 1.0, 50.5, 2.0));
    }

    #[test]
    fn single_voxel_mask() {
        let mut mask = vec![false; 5];
        mask[3] = true;
        let s = dose_statistics(&[1.0, 2.0, 3.0, 42.0, 5.0], &mask).unwrap();
        assert_eq!((s.mean, s.min, s.median, s.d98), (42.0, 42.0, 42.0, 42.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(dose_statistics(&[1.0, 2.0], &[false, false]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn order_relations(dose in prop::collection::vec(0.0f64..80.0, 1..300)) {
            let mask = vec![true; dose.len()];
            let s = dose_statistics(&dose, &mask).unwrap();
            let max = dose.iter().copied().fold(f64::MIN, f64::max);
            prop_assert!(s.min <= s.d98 && s.d98 <= s.median);
            prop_assert!(s.min <= s.mean && s.mean <= max + 1e-9);
        }
    }
}
