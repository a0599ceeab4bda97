//! Sign-ambiguous fiber-orientation fields, the symmetric L2 metric, and
//! patch/context geometry.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Squared norms of `x - y` and `x + y`, summed in a fixed component order.
#[inline]
pub fn branch_norms_sq<T: Real>(x: [T; 3], y: [T; 3]) -> (T, T) {
    let sq = |a: T| a * a;
    let minus = sq(x[0] - y[0]) + sq(x[1] - y[1]) + sq(x[2] - y[2]);
    let plus = sq(x[0] + y[0]) + sq(x[1] + y[1]) + sq(x[2] + y[2]);
    (minus, plus)
}

/// `min(|x - y|, |x + y|)`: distance between fiber orientations, blind to
/// the sign of either vector.
#[inline]
pub fn symmetric_l2<T: Real>(x: [T; 3], y: [T; 3]) -> T {
    let (minus, plus) = branch_norms_sq(x, y);
    minus.min(plus).sqrt()
}

/// X x Y x Z grid of 3-vectors, stored `((x * Y + y) * Z + z) * 3 + component`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorVolume {
    dims: [usize; 3],
    /// Edge length of a voxel in mm; carried along, never used in computation.
    pub spacing: f32,
    data: Vec<f32>,
}

impl VectorVolume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::contract(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() * 3 {
            return Err(Error::contract(format!(
                "volume {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>() * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite vector component at flat index {i}")));
        }
        Ok(Self {
            dims,
            spacing: 1.25,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![0.0; dims.iter().product::<usize>() * 3]).expect("positive dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        [index / (self.dims[1] * self.dims[2]), y, z]
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> [f32; 3] {
        let i = self.index(p) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, p: [usize; 3], v: [f32; 3]) {
        let i = self.index(p) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn magnitude(&self, p: [usize; 3]) -> f32 {
        norm(self.get(p))
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.data.chunks(3).map(|v| norm([v[0], v[1], v[2]])).collect()
    }

    /// Copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Copy with each voxel's sign flipped independently with probability 1/2.
    pub fn canonicalize_signs<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        flip_signs(&mut out.data, rng);
        out
    }
}

fn norm(v: [f32; 3]) -> f32 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Flips the sign of each consecutive 3-vector in `data` with probability 1/2.
pub fn flip_signs<R: Rng + ?Sized>(data: &mut [f32], rng: &mut R) {
    for v in data.chunks_mut(3) {
        if rng.gen::<bool>() {
            v.iter_mut().for_each(|c| *c = -*c);
        }
    }
}

/// Position of an `n`-voxel patch inside its `2n` context cube. The patch is
/// addressed by its low corner; the context starts `n / 2` voxels earlier on
/// every axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchSpec {
    pub n: usize,
    pub corner: [usize; 3],
}

impl PatchSpec {
    pub fn new(n: usize, corner: [usize; 3]) -> Self {
        Self { n, corner }
    }

    /// Offset of the patch inside the context cube.
    pub fn offset(n: usize) -> usize {
        n / 2
    }

    pub fn context_side(&self) -> usize {
        2 * self.n
    }

    /// Low corner of the context cube, if it is non-negative.
    pub fn context_corner(&self) -> Option<[usize; 3]> {
        let off = Self::offset(self.n);
        let c = self.corner;
        (c.iter().all(|v| *v >= off)).then(|| c.map(|v| v - off))
    }

    /// Voxel used to decide whether a patch counts as white matter.
    pub fn center_voxel(&self) -> [usize; 3] {
        self.corner.map(|v| v + self.n / 2)
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        self.n > 0
            && self
                .context_corner()
                .is_some_and(|lo| (0..3).all(|a| lo[a] + self.context_side() <= dims[a]))
    }

    /// Range of valid low corners along an axis of extent `extent`.
    pub fn corner_range(n: usize, extent: usize) -> std::ops::RangeInclusive<usize> {
        let off = Self::offset(n);
        let hi = (extent + off).checked_sub(2 * n);
        match hi {
            Some(hi) if hi >= off => off..=hi,
            #[allow(clippy::reversed_empty_ranges)]
            _ => 1..=0,
        }
    }
}

/// Masked context, ground-truth patch, and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `[2n, 2n, 2n, 3]`, central `n^3` region zeroed.
    pub context: Tensor<f32>,
    /// `[n, n, n, 3]`.
    pub patch: Tensor<f32>,
    pub spec: PatchSpec,
}

pub fn extract_sample(vol: &VectorVolume, spec: PatchSpec) -> Result<PatchSample> {
    if !spec.fits(vol.dims()) {
        return Err(Error::OutOfBounds {
            corner: spec.corner,
            n: spec.n,
            dims: vol.dims(),
        });
    }
    let lo = spec.context_corner().expect("checked by fits");
    let (n, side, off) = (spec.n, spec.context_side(), PatchSpec::offset(spec.n));
    let mut context = Vec::with_capacity(side.pow(3) * 3);
    let mut patch = Vec::with_capacity(n.pow(3) * 3);
    let inside = |v: usize| (off..off + n).contains(&v);
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let v = vol.get([lo[0] + x, lo[1] + y, lo[2] + z]);
                if inside(x) && inside(y) && inside(z) {
                    context.extend_from_slice(&[0.0; 3]);
                    patch.extend_from_slice(&v);
                } else {
                    context.extend_from_slice(&v);
                }
            }
        }
    }
    Ok(PatchSample {
        context: Tensor::new(vec![side, side, side, 3], context)?,
        patch: Tensor::new(vec![n, n, n, 3], patch)?,
        spec,
    })
}

/// Inverse of the masking step: the context with its patch written back.
pub fn paste_patch(sample: &PatchSample) -> Tensor<f32> {
    let (n, side, off) = (sample.spec.n, sample.spec.context_side(), PatchSpec::offset(sample.spec.n));
    let mut out = sample.context.clone();
    let dst = out.data_mut();
    let src = sample.patch.data();
    for x in 0..n {
        for y in 0..n {
            let p = (x * n + y) * n * 3;
            let c = (((x + off) * side + y + off) * side + off) * 3;
            dst[c..c + n * 3].copy_from_slice(&src[p..p + n * 3]);
        }
    }
    out
}

/// Voxels whose orientation magnitude reaches a threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WhiteMatterMask {
    dims: [usize; 3],
    cells: Vec<bool>,
}

impl WhiteMatterMask {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn contains(&self, [x, y, z]: [usize; 3]) -> bool {
        self.cells[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

pub fn white_matter_mask(vol: &VectorVolume, threshold: f32) -> WhiteMatterMask {
    assert!(threshold >= 0.0, "threshold must be non-negative");
    let cells = vol
        .magnitudes()
        .into_iter()
        .map(|m| if threshold == 0.0 { m > 0.0 } else { m >= threshold })
        .collect();
    WhiteMatterMask { dims: vol.dims(), cells }
}

/// `fraction` of the volume's 99th-percentile magnitude.
pub fn default_threshold(vol: &VectorVolume, fraction: f32) -> f32 {
    fraction * percentile(vol.magnitudes(), 0.99)
}

/// Nearest-rank percentile (`q` in `[0, 1]`).
pub fn percentile(mut values: Vec<f32>, q: f64) -> f32 {
    assert!(!values.is_empty());
    values.sort_by(f32::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3]) -> VectorVolume {
        let n = dims.iter().product::<usize>() * 3;
        VectorVolume::new(dims, (0..n).map(|i| i as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(symmetric_l2([1.0f32, 0.0, 0.0], [-1.0, 0.0, 0.0]), 0.0);
        assert_eq!(symmetric_l2([0.3f32, -2.0, 1.0], [0.3, -2.0, 1.0]), 0.0);
        assert_eq!(symmetric_l2([1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]), 2f64.sqrt());
    }

    #[test]
    fn smallest_sample() {
        let vol = ramp([2, 2, 2]);
        let s = extract_sample(&vol, PatchSpec::new(1, [0, 0, 0])).unwrap();
        assert_eq!(s.patch.data(), &vol.get([0, 0, 0]));
        assert_eq!(&s.context.data()[..3], &[0.0; 3]);
        assert_eq!(&s.context.data()[3..], &vol.data()[3..]);
    }

    #[test]
    fn overflowing_context_is_reported() {
        let vol = ramp([8, 8, 8]);
        let err = extract_sample(&vol, PatchSpec::new(4, [6, 6, 6])).unwrap_err();
        assert!(err.to_string().contains("[6, 6, 6]"));
        assert!(extract_sample(&vol, PatchSpec::new(4, [1, 2, 2])).is_err());
        assert!(extract_sample(&vol, PatchSpec::new(4, [2, 2, 2])).is_ok());
    }

    #[test]
    fn corner_range_matches_fits() {
        for n in 1..6 {
            for extent in 1..20 {
                let dims = [extent, 2 * n, 2 * n];
                let fits: Vec<usize> = (0..extent + 2)
                    .filter(|x| PatchSpec::new(n, [*x, n / 2, n / 2]).fits(dims))
                    .collect();
                let range: Vec<usize> = PatchSpec::corner_range(n, extent).collect();
                assert_eq!(fits, range, "n={n} extent={extent}");
            }
        }
    }

    #[test]
    fn mask_thresholds() {
        let mut vol = VectorVolume::zeros([2, 2, 2]);
        vol.set([0, 0, 0], [0.5, 0.0, 0.0]);
        vol.set([1, 1, 1], [0.0, 3.0, 4.0]);
        let all = white_matter_mask(&vol, 0.0);
        assert_eq!(all.count(), 2);
        assert_eq!(white_matter_mask(&vol, 5.1).count(), 0);
        let hi = white_matter_mask(&vol, 1.0);
        assert!(hi.contains([1, 1, 1]) && !hi.contains([0, 0, 0]));
    }

    #[test]
    fn sign_flips_preserve_metric_and_are_seeded() {
        let vol = ramp([4, 4, 4]);
        let a = vol.canonicalize_signs(&mut ChaCha8Rng::seed_from_u64(1));
        let b = a.canonicalize_signs(&mut ChaCha8Rng::seed_from_u64(2));
        for i in 0..vol.num_voxels() {
            let p = vol.coords(i);
            assert_eq!(symmetric_l2(vol.get(p), b.get(p)), 0.0);
        }
        assert_eq!(a, vol.canonicalize_signs(&mut ChaCha8Rng::seed_from_u64(1)));
    }

    #[test]
    fn flip_fraction_is_binomial() {
        let dims = [100, 100, 10];
        let vol = VectorVolume::new(dims, vec![1.0; 100_000 * 3]).unwrap();
        let flipped = vol.canonicalize_signs(&mut ChaCha8Rng::seed_from_u64(99));
        let frac = flipped.data().chunks(3).filter(|v| v[0] < 0.0).count() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn rejects_non_finite() {
        assert!(VectorVolume::new([1, 1, 1], vec![0.0, f32::NAN, 0.0]).is_err());
    }
}
