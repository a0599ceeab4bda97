use fiberfill::eval::{
    aggregate_maps, calibration, coefficient_of_variation, evaluate_volume, fill_gaps, lattice_positions, region_report,
    PatchRecord,
};
use fiberfill::field::{white_matter_mask, PatchSpec};
use fiberfill::gan::{Architecture, ClipStats, GanModel};
use fiberfill::phantom::{generate_phantom, CohortConfig, Region, RegionLabels};
use fiberfill::stats::pearson;
use fiberfill::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(n: usize, corner: [usize; 3], variance: f32, error: f32) -> PatchRecord {
    let v = n * n * n;
    PatchRecord { spec: PatchSpec::new(n, corner), variance: vec![variance; v], error: vec![error; v] }
}

fn model(seed: u64) -> GanModel<f32> {
    let mut m = GanModel::new(Architecture { n: 4, width: 8, ..Architecture::default() }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    m.clip = Some(ClipStats { mean: [0.0; 3], std: [1.0; 3] });
    m
}

#[test]
fn lattice_count_matches_exhaustive_enumeration() {
    let cohort = CohortConfig::default();
    let (vol, _) = generate_phantom(&cohort.phantom(2, 1)).unwrap();
    let mask = white_matter_mask(&vol, 0.1);
    let n = 4;
    let got = lattice_positions(&mask, n, 2).unwrap();
    // Independent enumeration: scan all corners, find the first valid one,
    // then count valid corners congruent to it modulo 2 on every axis.
    let valid = |c: [usize; 3]| {
        (0..3).all(|a| c[a] >= n / 2 && c[a] + n + n / 2 <= 32) && mask.contains([c[0] + n / 2, c[1] + n / 2, c[2] + n / 2])
    };
    let all: Vec<[usize; 3]> = (0..32)
        .flat_map(|x| (0..32).flat_map(move |y| (0..32).map(move |z| [x, y, z])))
        .filter(|c| valid(*c))
        .collect();
    let anchor = all[0];
    let expected = all.iter().filter(|c| (0..3).all(|a| c[a] % 2 == anchor[a] % 2)).count();
    assert_eq!(got.len(), expected);
}

#[test]
fn stride_as_large_as_the_volume_evaluates_once() {
    let cohort = CohortConfig::default();
    let (vol, _) = generate_phantom(&cohort.phantom(2, 3)).unwrap();
    let mask = white_matter_mask(&vol, 0.1);
    let recs = evaluate_volume(&model(1), &vol, &mask, 32, 8).unwrap();
    assert_eq!(recs.len(), 1);
}

#[test]
fn evaluation_is_deterministic_and_records_are_well_formed() {
    let cohort = CohortConfig::default();
    let (vol, _) = generate_phantom(&cohort.phantom(2, 4)).unwrap();
    let mask = white_matter_mask(&vol, 0.1);
    let m = model(2);
    let a = evaluate_volume(&m, &vol, &mask, 4, 16).unwrap();
    let b = evaluate_volume(&m, &vol, &mask, 4, 7).unwrap();
    assert_eq!(a, b);
    for r in &a {
        assert_eq!(r.variance.len(), 64);
        assert!(r.variance.iter().all(|v| *v > 0.0 && v.is_finite()));
        assert!(r.error.iter().all(|e| *e >= 0.0 && e.is_finite()));
    }
}

#[test]
fn empty_mask_has_no_positions() {
    let cohort = CohortConfig::default();
    let (vol, _) = generate_phantom(&cohort.phantom(2, 0)).unwrap();
    let mask = white_matter_mask(&vol, 1e9);
    assert!(matches!(evaluate_volume(&model(1), &vol, &mask, 2, 4), Err(Error::Contract(_))));
}

#[test]
fn single_record_fills_exactly_its_patch() {
    let dims = [8, 8, 8];
    let mags = vec![1.0; 512];
    let mut rec = record(2, [3, 4, 1], 0.0, 0.0);
    rec.variance = (0..8).map(|i| i as f32 + 0.5).collect();
    let map = aggregate_maps(&[rec.clone()], dims, &mags, 0.0).unwrap();
    let mut i = 0;
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                let v = map.variance[(x * 8 + y) * 8 + z];
                if (3..5).contains(&x) && (4..6).contains(&y) && (1..3).contains(&z) {
                    assert_eq!(v, rec.variance[i]);
                    i += 1;
                } else {
                    assert!(v.is_nan());
                }
            }
        }
    }
}

#[test]
fn constant_records_interpolate_to_the_constant() {
    let dims = [12, 12, 12];
    let recs: Vec<_> = [[0, 0, 0], [6, 0, 0], [0, 6, 6], [6, 6, 6], [6, 6, 0]].iter().map(|c| record(2, *c, 0.37, 0.1)).collect();
    let map = aggregate_maps(&recs, dims, &vec![1.0; 1728], 0.0).unwrap();
    for (v, f) in map.variance.iter().zip(&map.interpolated) {
        if !v.is_nan() {
            assert_eq!(*v, 0.37);
        }
        if *f {
            assert!(!v.is_nan());
        }
    }
    assert!(map.interpolated.iter().any(|f| *f));
}

#[test]
fn gap_filling_is_trilinear_on_a_lattice() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let dims = [rng.gen_range(4..14), rng.gen_range(4..14), rng.gen_range(4..14)];
        let step = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let nodes: Vec<Vec<usize>> = (0..3).map(|a| (0..dims[a]).step_by(step[a]).collect()).collect();
        let mut grid = vec![f32::NAN; dims.iter().product()];
        let idx = |p: [usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
        let mut known = std::collections::HashMap::new();
        for &x in &nodes[0] {
            for &y in &nodes[1] {
                for &z in &nodes[2] {
                    let v: f32 = rng.gen_range(-1.0..1.0);
                    grid[idx([x, y, z])] = v;
                    known.insert([x, y, z], v as f64);
                }
            }
        }
        fill_gaps(&mut grid, dims);
        let last = [*nodes[0].last().unwrap(), *nodes[1].last().unwrap(), *nodes[2].last().unwrap()];
        for x in 0..=last[0] {
            for y in 0..=last[1] {
                for z in 0..=last[2] {
                    // Direct trilinear formula over the enclosing lattice cell.
                    let p = [x, y, z];
                    let lo: [usize; 3] = std::array::from_fn(|a| (p[a] / step[a]) * step[a]);
                    let hi: [usize; 3] = std::array::from_fn(|a| if lo[a] == last[a] { lo[a] } else { lo[a] + step[a] });
                    let t: [f64; 3] = std::array::from_fn(|a| if hi[a] == lo[a] { 0.0 } else { (p[a] - lo[a]) as f64 / step[a] as f64 });
                    let mut expected = 0.0;
                    for corner in 0..8 {
                        let pick = |a: usize| corner >> a & 1 == 1;
                        let q: [usize; 3] = std::array::from_fn(|a| if pick(a) { hi[a] } else { lo[a] });
                        let w: f64 = (0..3).map(|a| if pick(a) { t[a] } else { 1.0 - t[a] }).product();
                        expected += w * known[&q];
                    }
                    let got = grid[idx(p)] as f64;
                    assert!((got - expected).abs() < 1e-6, "{p:?}: {got} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn aggregation_conserves_variance_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let dims = [10, 10, 10];
    let recs: Vec<PatchRecord> = (0..40)
        .map(|_| {
            let c = [rng.gen_range(0..7), rng.gen_range(0..7), rng.gen_range(0..7)];
            let mut r = record(4, c, 0.0, 0.0);
            r.variance.iter_mut().for_each(|v| *v = rng.gen_range(0.01..2.0));
            r
        })
        .collect();
    let map = aggregate_maps(&recs, dims, &vec![1.0; 1000], 0.0).unwrap();
    let total: f64 = recs.iter().flat_map(|r| &r.variance).map(|v| *v as f64).sum();
    let mass: f64 = map.count.iter().zip(&map.variance).filter(|(c, _)| **c > 0).map(|(c, v)| *c as f64 * *v as f64).sum();
    assert!((mass - total).abs() <= 1e-4 * total);
    for (c, v) in map.count.iter().zip(&map.variance) {
        if *c > 0 {
            assert!(!v.is_nan());
        }
    }
}

#[test]
fn thresholding_only_removes_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mags: Vec<f32> = (0..512).map(|_| rng.gen_range(0.0..2.0)).collect();
    let recs = vec![record(4, [0, 0, 0], 0.3, 0.1), record(4, [4, 4, 4], 0.6, 0.2), record(4, [2, 3, 1], 0.9, 0.1)];
    let open = aggregate_maps(&recs, [8, 8, 8], &mags, 0.0).unwrap();
    let strict = aggregate_maps(&recs, [8, 8, 8], &mags, 1.0).unwrap();
    for ((a, b), m) in open.cov.iter().zip(&strict.cov).zip(&mags) {
        if b.is_nan() {
            assert!(a.is_nan() || *m < 1.0);
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(strict.cov.iter().filter(|v| !v.is_nan()).count() < open.cov.iter().filter(|v| !v.is_nan()).count());
}

proptest! {
    #[test]
    fn cov_is_invariant_to_global_rescaling(var in 1e-3f32..10.0, mag in 0.1f32..5.0, lambda in 0.1f32..10.0) {
        let a = coefficient_of_variation(var, mag, 0.0);
        let b = coefficient_of_variation(lambda * lambda * var, lambda * mag, 0.0);
        prop_assert!((a - b).abs() <= 1e-5 * a);
    }
}

#[test]
fn calibration_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let recs: Vec<PatchRecord> = (0..50).map(|_| record(2, [0, 0, 0], rng.gen_range(0.1..1.0), rng.gen_range(0.0..1.0))).collect();
    let c = calibration(&recs).unwrap();
    let x: Vec<f64> = recs.iter().map(|r| r.variance[0] as f64).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.error[0] as f64).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 50.0, y.iter().sum::<f64>() / 50.0);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    assert!((c.r - cov / (sx * sy)).abs() < 1e-10);
    assert_eq!(c.samples, 50);
    assert!((-1.0..=1.0).contains(&c.r));
    assert!(matches!(calibration(&recs[..2]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
}

#[test]
fn region_report_on_constructed_maps() {
    let dims = [4, 4, 4];
    let labels = RegionLabels {
        dims,
        labels: (0..64).map(|i| [Region::Background, Region::Bundle, Region::Crossing, Region::Dispersion][i % 4]).collect(),
    };
    let recs = vec![record(4, [0, 0, 0], 1.0, 0.0)];
    let mut map = aggregate_maps(&recs, dims, &vec![1.0; 64], 0.0).unwrap();
    for (c, l) in map.cov.iter_mut().zip(&labels.labels) {
        *c = if *l == Region::Crossing { 1.0 } else { 0.0 };
    }
    let report = region_report(&[(&map, &labels)]).unwrap();
    let means: Vec<f64> = report.iter().map(|r| r.mean.unwrap()).collect();
    assert_eq!(means, vec![0.0, 1.0, 0.0]);
    assert_eq!(report.iter().map(|r| r.region).collect::<Vec<_>>(), vec![Region::Bundle, Region::Crossing, Region::Dispersion]);

    map.cov.iter_mut().for_each(|c| *c = 0.4);
    let uniform = region_report(&[(&map, &labels)]).unwrap();
    assert!(uniform.iter().all(|r| r.mean == Some(0.4f32 as f64) && r.median == Some(0.4f32 as f64)));

    map.cov.iter_mut().zip(&labels.labels).for_each(|(c, l)| if *l == Region::Dispersion { *c = f32::NAN });
    let sparse = region_report(&[(&map, &labels)]).unwrap();
    assert_eq!((sparse[2].voxels, sparse[2].mean), (0, None));
}
