//! Scan-level train/validation/test assignment and per-epoch patch sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{PatchSpec, WhiteMatterMask};
use crate::phantom::derive_seed;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn num_scans(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Partition label of a scan, if it belongs to the split.
    pub fn role(&self, scan: usize) -> Option<&'static str> {
        if self.train.contains(&scan) {
            Some("train")
        } else if self.validation.contains(&scan) {
            Some("validation")
        } else if self.test.contains(&scan) {
            Some("test")
        } else {
            None
        }
    }
}

/// Split sizes by the largest-remainder rule: floor every quota, then hand
/// the leftover scans to the largest fractional parts (earlier split wins ties).
pub fn split_sizes(num_scans: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let quotas = ratios.map(|r| r / total * num_scans as f64);
    let mut sizes = quotas.map(|q| (q + 1e-9).floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    let frac = |i: usize| quotas[i] - sizes[i] as f64;
    order.sort_by(|a, b| frac(*b).total_cmp(&frac(*a)).then(a.cmp(b)));
    for i in order.iter().take(num_scans.saturating_sub(assigned)) {
        sizes[*i] += 1;
    }
    if let Some(empty) = sizes.iter().position(|s| *s == 0) {
        let name = ["train", "validation", "test"][empty];
        return Err(Error::contract(format!(
            "{name} split is empty ({num_scans} scans, ratios {ratios:?})"
        )));
    }
    Ok(sizes)
}

pub fn make_split(num_scans: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let [n_train, n_val, _] = split_sizes(num_scans, ratios)?;
    let mut scans: Vec<usize> = (0..num_scans).collect();
    scans.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x73706c]))); 
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: sorted(&scans[..n_train]),
        validation: sorted(&scans[n_train..n_train + n_val]),
        test: sorted(&scans[n_train + n_val..]),
    })
}

/// Patch corners whose context fits in the volume and whose center voxel is white matter.
pub fn valid_positions(mask: &WhiteMatterMask, n: usize) -> Vec<PatchSpec> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for x in PatchSpec::corner_range(n, dims[0]) {
        for y in PatchSpec::corner_range(n, dims[1]) {
            for z in PatchSpec::corner_range(n, dims[2]) {
                let spec = PatchSpec::new(n, [x, y, z]);
                if mask.contains(spec.center_voxel()) {
                    out.push(spec);
                }
            }
        }
    }
    out
}

/// Random stream for one (epoch, scan) pair, independent of every other pair.
pub fn epoch_rng(seed: u64, epoch: u64, scan: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6570_6f63, epoch, scan as u64]))
}

/// One uniformly drawn valid patch per scan. `positions[i]` lists the valid
/// positions of `scans[i]`.
pub fn sample_epoch(scans: &[usize], positions: &[Vec<PatchSpec>], seed: u64, epoch: u64) -> Result<Vec<PatchSpec>> {
    scans
        .iter()
        .zip(positions)
        .map(|(scan, valid)| {
            if valid.is_empty() {
                return Err(Error::contract(format!("scan {scan} has no valid white-matter patch position")));
            }
            let mut rng = epoch_rng(seed, epoch, *scan);
            Ok(valid[rng.gen_range(0..valid.len())])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(split_sizes(10, [0.7, 0.15, 0.15]).unwrap(), [7, 2, 1]);
        assert_eq!(split_sizes(60, [0.7, 0.15, 0.15]).unwrap(), [42, 9, 9]);
    }

    #[test]
    fn cohort_ratios_reproduce_reported_split() {
        let r = [442.0 / 630.0, 94.0 / 630.0, 94.0 / 630.0];
        assert_eq!(split_sizes(630, r).unwrap(), [442, 94, 94]);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(make_split(3, [0.9, 0.1, 0.0], 1).is_err());
        assert!(make_split(10, [0.5, 0.1, 0.1], 1).is_err());
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let a = make_split(50, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(a, make_split(50, [0.6, 0.2, 0.2], 9).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_ne!(a, make_split(50, [0.6, 0.2, 0.2], 10).unwrap());
    }

    #[test]
    fn single_position_is_forced() {
        let spec = PatchSpec::new(2, [1, 1, 1]);
        for epoch in 0..10 {
            let out = sample_epoch(&[3], &[vec![spec]], 5, epoch).unwrap();
            assert_eq!(out, vec![spec]);
        }
        let err = sample_epoch(&[7], &[vec![]], 5, 0).unwrap_err();
        assert!(err.to_string().contains("scan 7"));
    }

    #[test]
    fn epochs_draw_different_positions() {
        let valid: Vec<PatchSpec> = (0..20).map(|i| PatchSpec::new(2, [i, 0, 0])).collect();
        let mut seen = std::collections::HashSet::new();
        for epoch in 0..100 {
            seen.insert(sample_epoch(&[0], std::slice::from_ref(&valid), 1, epoch).unwrap()[0]);
        }
        assert!(seen.len() > 1);
    }
}
