//! Whole-volume strided inference and the voxel maps derived from it.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::field::{extract_sample, symmetric_l2, PatchSpec, VectorVolume, WhiteMatterMask};
use crate::dataset::valid_positions;
use crate::gan::GanModel;
use crate::phantom::{Region, RegionLabels};
use crate::stats::{mann_whitney_greater, pearson, Correlation, MannWhitney};
use crate::tensor::Tensor;

/// Per-voxel predictions for one evaluated patch, in patch order `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub spec: PatchSpec,
    /// Predicted aleatoric variance `exp(s)`.
    pub variance: Vec<f32>,
    /// Symmetric L2 distance between prediction and ground truth.
    pub error: Vec<f32>,
}

impl PatchRecord {
    pub fn mean_variance(&self) -> f64 {
        self.variance.iter().map(|v| *v as f64).sum::<f64>() / self.variance.len() as f64
    }

    pub fn mean_error(&self) -> f64 {
        self.error.iter().map(|v| *v as f64).sum::<f64>() / self.error.len() as f64
    }
}

/// Valid positions whose corners lie on a `stride` lattice anchored at the first valid position.
pub fn lattice_positions(mask: &WhiteMatterMask, n: usize, stride: usize) -> Result<Vec<PatchSpec>> {
    if stride == 0 {
        return Err(Error::contract("stride must be positive"));
    }
    let valid = valid_positions(mask, n);
    let anchor = valid
        .first()
        .ok_or_else(|| Error::contract("volume has no valid white-matter patch position"))?
        .corner;
    Ok(valid
        .into_iter()
        .filter(|p| (0..3).all(|a| (p.corner[a] as i64 - anchor[a] as i64).rem_euclid(stride as i64) == 0))
        .collect())
}

/// Runs the generator on every lattice position of `vol`.
pub fn evaluate_volume(
    model: &GanModel<f32>,
    vol: &VectorVolume,
    mask: &WhiteMatterMask,
    stride: usize,
    batch_size: usize,
) -> Result<Vec<PatchRecord>> {
    let n = model.arch.n;
    let positions = lattice_positions(mask, n, stride)?;
    let voxels = n * n * n;
    let mut out = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let mut ctx = Vec::new();
        let mut truth = Vec::new();
        for spec in chunk {
            let s = extract_sample(vol, *spec)?;
            ctx.extend_from_slice(s.context.data());
            truth.extend_from_slice(s.patch.data());
        }
        let side = 2 * n;
        let (pred, logvar) = model.predict(Tensor::new(vec![chunk.len(), side, side, side, 3], ctx)?)?;
        for (b, spec) in chunk.iter().enumerate() {
            let range = b * voxels..(b + 1) * voxels;
            let variance = logvar.data()[range.clone()].iter().map(|s| s.exp()).collect();
            let error = range
                .map(|v| {
                    let p = &pred.data()[3 * v..3 * v + 3];
                    let t = &truth[3 * v..3 * v + 3];
                    symmetric_l2([p[0], p[1], p[2]], [t[0], t[1], t[2]])
                })
                .collect();
            out.push(PatchRecord { spec: *spec, variance, error });
        }
    }
    Ok(out)
}

/// Voxel maps of one volume. Absent entries are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityMap {
    pub dims: [usize; 3],
    pub variance: Vec<f32>,
    pub error: Vec<f32>,
    /// `sqrt(variance) / magnitude` where the magnitude reaches `threshold`.
    pub cov: Vec<f32>,
    /// Number of patches covering each voxel (0 for interpolated voxels).
    pub count: Vec<u32>,
    /// Voxels whose values were filled by interpolation between evaluated neighbors.
    pub interpolated: Vec<bool>,
    pub threshold: f32,
}

fn voxel_index(dims: [usize; 3], [x, y, z]: [usize; 3]) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Fills absent entries lying between two present entries along an axis by
/// linear interpolation, one axis after another (x, y, z). On values known
/// at the nodes of a rectilinear lattice this is trilinear interpolation.
pub fn fill_gaps(grid: &mut [f32], dims: [usize; 3]) -> Vec<bool> {
    let mut filled = vec![false; grid.len()];
    for axis in 0..3 {
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..dims[u] {
            for b in 0..dims[v] {
                let at = |t: usize| {
                    let mut p = [0; 3];
                    p[axis] = t;
                    p[u] = a;
                    p[v] = b;
                    voxel_index(dims, p)
                };
                let mut prev: Option<usize> = None;
                for t in 0..dims[axis] {
                    if grid[at(t)].is_nan() {
                        continue;
                    }
                    if let Some(s) = prev {
                        if t > s + 1 {
                            let (lo, hi) = (grid[at(s)] as f64, grid[at(t)] as f64);
                            for k in s + 1..t {
                                let w = (k - s) as f64 / (t - s) as f64;
                                grid[at(k)] = ((1.0 - w) * lo + w * hi) as f32;
                                filled[at(k)] = true;
                            }
                        }
                    }
                    prev = Some(t);
                }
            }
        }
    }
    filled
}

/// Averages overlapping records per voxel (uniform weights), fills lattice
/// gaps, and normalizes the standard deviation by `magnitude`.
pub fn aggregate_maps(records: &[PatchRecord], dims: [usize; 3], magnitude: &[f32], threshold: f32) -> Result<ComplexityMap> {
    if records.is_empty() {
        return Err(Error::contract("no patch records to aggregate"));
    }
    let total = dims.iter().product::<usize>();
    if magnitude.len() != total {
        return Err(Error::contract(format!("magnitude grid has {} voxels, dims {dims:?}", magnitude.len())));
    }
    let mut var_sum = vec![0.0f64; total];
    let mut err_sum = vec![0.0f64; total];
    let mut count = vec![0u32; total];
    for rec in records {
        let n = rec.spec.n;
        if rec.variance.len() != n * n * n || rec.error.len() != n * n * n {
            return Err(Error::contract("record length does not match its patch size"));
        }
        let c = rec.spec.corner;
        if (0..3).any(|a| c[a] + n > dims[a]) {
            return Err(Error::contract(format!("record at {c:?} leaves volume {dims:?}")));
        }
        let mut i = 0;
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let v = voxel_index(dims, [c[0] + x, c[1] + y, c[2] + z]);
                    var_sum[v] += rec.variance[i] as f64;
                    err_sum[v] += rec.error[i] as f64;
                    count[v] += 1;
                    i += 1;
                }
            }
        }
    }
    let mean = |sums: &[f64]| -> Vec<f32> {
        sums.iter().zip(&count).map(|(s, c)| if *c > 0 { (*s / *c as f64) as f32 } else { f32::NAN }).collect()
    };
    let mut variance = mean(&var_sum);
    let mut error = mean(&err_sum);
    let interpolated = fill_gaps(&mut variance, dims);
    fill_gaps(&mut error, dims);
    let cov = variance.iter().zip(magnitude).map(|(v, m)| coefficient_of_variation(*v, *m, threshold)).collect();
    Ok(ComplexityMap { dims, variance, error, cov, count, interpolated, threshold })
}

/// `sqrt(variance) / magnitude`, or NaN when the magnitude is below `threshold`
/// (or not positive) or the variance is absent.
pub fn coefficient_of_variation(variance: f32, magnitude: f32, threshold: f32) -> f32 {
    if variance.is_nan() || !(magnitude >= threshold) || magnitude <= 0.0 {
        f32::NAN
    } else {
        variance.sqrt() / magnitude
    }
}

/// Per-patch mean variance against mean error.
pub fn calibration(records: &[PatchRecord]) -> Result<Correlation> {
    let x: Vec<f64> = records.iter().map(PatchRecord::mean_variance).collect();
    let y: Vec<f64> = records.iter().map(PatchRecord::mean_error).collect();
    pearson(&x, &y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats {
    pub region: Region,
    /// Present coefficient-of-variation voxels in the region.
    pub voxels: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

/// Regions summarized by [`region_report`]; background is excluded.
pub const REPORTED_REGIONS: [Region; 3] = [Region::Bundle, Region::Crossing, Region::Dispersion];

/// Present coefficient-of-variation values of each reported region, pooled over maps.
pub fn region_values(maps: &[(&ComplexityMap, &RegionLabels)]) -> Result<Vec<(Region, Vec<f64>)>> {
    let mut out: Vec<(Region, Vec<f64>)> = REPORTED_REGIONS.iter().map(|r| (*r, Vec::new())).collect();
    for (map, labels) in maps {
        if labels.dims != map.dims {
            return Err(Error::contract(format!("labels {:?} do not match map {:?}", labels.dims, map.dims)));
        }
        for (cov, region) in map.cov.iter().zip(&labels.labels) {
            if cov.is_nan() {
                continue;
            }
            if let Some(slot) = out.iter_mut().find(|(r, _)| r == region) {
                slot.1.push(*cov as f64);
            }
        }
    }
    Ok(out)
}

pub fn region_report(maps: &[(&ComplexityMap, &RegionLabels)]) -> Result<Vec<RegionStats>> {
    Ok(region_values(maps)?
        .into_iter()
        .map(|(region, mut values)| {
            let voxels = values.len();
            if voxels == 0 {
                return RegionStats { region, voxels, mean: None, median: None };
            }
            values.sort_by(f64::total_cmp);
            let mean = values.iter().sum::<f64>() / voxels as f64;
            let median = if voxels % 2 == 1 {
                values[voxels / 2]
            } else {
                0.5 * (values[voxels / 2 - 1] + values[voxels / 2])
            };
            RegionStats { region, voxels, mean: Some(mean), median: Some(median) }
        })
        .collect())
}

/// Maps and statistics of a set of evaluated scans.
#[derive(Clone, Debug)]
pub struct CohortReport {
    /// Scan index and its map, in the order evaluated.
    pub maps: Vec<(usize, ComplexityMap)>,
    pub records: usize,
    pub calibration: Correlation,
    pub regions: Vec<RegionStats>,
    /// Crossing against bundle-interior coefficient of variation.
    pub crossing_vs_bundle: Option<MannWhitney>,
}

#[allow(clippy::too_many_arguments)]
/// Evaluates every scan in `scans`. `volumes` are already normalized, and
/// `thresholds[s]` is the coefficient-of-variation threshold of scan `s`.
pub fn evaluate_cohort(
    model: &GanModel<f32>,
    volumes: &[VectorVolume],
    labels: &[RegionLabels],
    masks: &[WhiteMatterMask],
    thresholds: &[f32],
    scans: &[usize],
    stride: usize,
    batch_size: usize,
) -> Result<CohortReport> {
    if scans.is_empty() {
        return Err(Error::contract("no scans to evaluate"));
    }
    let mut records = Vec::new();
    let mut maps = Vec::new();
    for &s in scans {
        let vol = &volumes[s];
        let recs = evaluate_volume(model, vol, &masks[s], stride, batch_size)?;
        maps.push((s, aggregate_maps(&recs, vol.dims(), &vol.magnitudes(), thresholds[s])?));
        records.extend(recs);
    }
    let pairs: Vec<_> = maps.iter().map(|(s, m)| (m, &labels[*s])).collect();
    let values = region_values(&pairs)?;
    let pick = |r: Region| values.iter().find(|v| v.0 == r).map(|v| v.1.as_slice()).unwrap_or(&[]);
    let (crossing, bundle) = (pick(Region::Crossing), pick(Region::Bundle));
    let crossing_vs_bundle = if crossing.is_empty() || bundle.is_empty() {
        None
    } else {
        Some(mann_whitney_greater(crossing, bundle)?)
    };
    Ok(CohortReport {
        calibration: calibration(&records)?,
        regions: region_report(&pairs)?,
        records: records.len(),
        maps,
        crossing_vs_bundle,
    })
}

impl CohortReport {
    /// `key = value` lines; absent statistics read `absent`.
    pub fn summary_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.9e}"));
        let mut out = String::new();
        let _ = writeln!(out, "patches = {}", self.records);
        let _ = writeln!(out, "pearson_r = {:.9e}", self.calibration.r);
        let _ = writeln!(out, "pearson_p = {:.9e}", self.calibration.p_value);
        for r in &self.regions {
            let name = r.region.name();
            let _ = writeln!(out, "region.{name}.voxels = {}", r.voxels);
            let _ = writeln!(out, "region.{name}.mean_cov = {}", opt(r.mean));
            let _ = writeln!(out, "region.{name}.median_cov = {}", opt(r.median));
        }
        let _ = writeln!(out, "crossing_vs_bundle.u = {}", opt(self.crossing_vs_bundle.map(|m| m.u)));
        let _ = writeln!(out, "crossing_vs_bundle.p_greater = {}", opt(self.crossing_vs_bundle.map(|m| m.p_greater)));
        out
    }
}
