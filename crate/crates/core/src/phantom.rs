//! Synthetic fiber phantoms: straight and curved bundles, crossing pockets
//! where each voxel keeps a single winning orientation, and dispersing fans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::VectorVolume;

type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub enum Centerline {
    Segment { start: Point, end: Point },
    /// Quadratic Bezier arc.
    Arc { start: Point, control: Point, end: Point },
}

impl Centerline {
    fn at(&self, t: f64) -> Point {
        match self {
            Centerline::Segment { start, end } => lerp(*start, *end, t),
            Centerline::Arc { start, control, end } => {
                let u = 1.0 - t;
                std::array::from_fn(|i| u * u * start[i] + 2.0 * u * t * control[i] + t * t * end[i])
            }
        }
    }

    fn derivative(&self, t: f64) -> Point {
        match self {
            Centerline::Segment { start, end } => sub(*end, *start),
            Centerline::Arc { start, control, end } => {
                std::array::from_fn(|i| 2.0 * (1.0 - t) * (control[i] - start[i]) + 2.0 * t * (end[i] - control[i]))
            }
        }
    }

    fn points(&self) -> Vec<Point> {
        match self {
            Centerline::Segment { start, end } => vec![*start, *end],
            Centerline::Arc { start, control, end } => vec![*start, *control, *end],
        }
    }

    fn translated(&self, d: Point) -> Self {
        let mv = |p: &Point| add(*p, d);
        match self {
            Centerline::Segment { start, end } => Centerline::Segment { start: mv(start), end: mv(end) },
            Centerline::Arc { start, control, end } => Centerline::Arc {
                start: mv(start),
                control: mv(control),
                end: mv(end),
            },
        }
    }

    /// Distance from `p` to the curve and the unit tangent at the closest point.
    fn closest(&self, p: Point) -> (f64, Point) {
        let t = match self {
            Centerline::Segment { start, end } => {
                let d = sub(*end, *start);
                (dot(sub(p, *start), d) / dot(d, d)).clamp(0.0, 1.0)
            }
            Centerline::Arc { .. } => {
                const SAMPLES: usize = 128;
                let dist = |t: f64| norm_sq(sub(self.at(t), p));
                let best = (0..=SAMPLES)
                    .min_by(|a, b| dist(*a as f64 / SAMPLES as f64).total_cmp(&dist(*b as f64 / SAMPLES as f64)))
                    .expect("non-empty");
                let (mut lo, mut hi) = (
                    (best as f64 - 1.0).max(0.0) / SAMPLES as f64,
                    (best as f64 + 1.0).min(SAMPLES as f64) / SAMPLES as f64,
                );
                for _ in 0..40 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if dist(m1) <= dist(m2) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        (norm_sq(sub(self.at(t), p)).sqrt(), normalize(self.derivative(t)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub centerline: Centerline,
    /// Tube radius in voxels.
    pub radius: f64,
}

impl Bundle {
    /// Cheap rejection test: the curve lies in the hull of its control points.
    fn near(&self, p: Point) -> bool {
        let pts = self.centerline.points();
        (0..3).all(|a| {
            let lo = pts.iter().map(|q| q[a]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|q| q[a]).fold(f64::NEG_INFINITY, f64::max);
            p[a] >= lo - self.radius && p[a] <= hi + self.radius
        })
    }
}

/// Overlap of two bundles where each voxel keeps bundle `a`'s orientation
/// with probability `weight`, else bundle `b`'s.
#[derive(Clone, Debug, PartialEq)]
pub struct Crossing {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Sphere in which orientations fan out from a bundle's tangent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispersion {
    pub bundle: usize,
    pub center: Point,
    pub radius: f64,
    pub half_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub bundles: Vec<Bundle>,
    pub crossings: Vec<Crossing>,
    pub dispersions: Vec<Dispersion>,
    /// Orientation magnitude of white-matter voxels.
    pub magnitude: f64,
    pub angular_jitter_deg: f64,
    /// Relative standard deviation of the magnitude.
    pub magnitude_jitter: f64,
    /// Per-component standard deviation of background vectors, relative to `magnitude`.
    pub background_noise: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Bundle = 1,
    Crossing = 2,
    Dispersion = 3,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Background, Region::Bundle, Region::Crossing, Region::Dispersion];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::Bundle => "bundle",
            Region::Crossing => "crossing",
            Region::Dispersion => "dispersion",
        }
    }
}

/// Per-voxel region of a phantom, same layout as [`VectorVolume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabels {
    pub dims: [usize; 3],
    pub labels: Vec<Region>,
}

impl RegionLabels {
    pub fn get(&self, [x, y, z]: [usize; 3]) -> Region {
        self.labels[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|r| **r == region).count()
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::contract("phantom dims must be positive"));
        }
        for (i, b) in self.bundles.iter().enumerate() {
            if !(b.radius > 0.0) {
                return Err(Error::contract(format!("bundle {i}: radius must be positive")));
            }
            let inside = b.centerline.points().iter().all(|p| {
                p.iter().zip(self.dims).all(|(c, d)| *c >= 0.0 && *c <= (d - 1) as f64)
            });
            if !inside {
                return Err(Error::contract(format!("bundle {i}: centerline leaves the volume")));
            }
        }
        for c in &self.crossings {
            if c.a == c.b || c.a >= self.bundles.len() || c.b >= self.bundles.len() {
                return Err(Error::contract(format!("crossing refers to invalid bundles {}/{}", c.a, c.b)));
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(Error::contract(format!("crossing weight {} outside [0, 1]", c.weight)));
            }
        }
        for d in &self.dispersions {
            if d.bundle >= self.bundles.len() {
                return Err(Error::contract(format!("dispersion refers to missing bundle {}", d.bundle)));
            }
            if !(0.0..=90.0).contains(&d.half_angle_deg) {
                return Err(Error::contract(format!(
                    "dispersion half-angle {} outside [0, 90] degrees",
                    d.half_angle_deg
                )));
            }
        }
        let nonneg = [self.magnitude, self.angular_jitter_deg, self.magnitude_jitter, self.background_noise];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract("magnitude and noise levels must be non-negative"));
        }
        Ok(())
    }

    fn crossing_between(&self, a: usize, b: usize) -> Option<&Crossing> {
        self.crossings
            .iter()
            .find(|c| (c.a == a && c.b == b) || (c.a == b && c.b == a))
    }
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(VectorVolume, RegionLabels)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vol = VectorVolume::zeros(cfg.dims);
    let mut labels = Vec::with_capacity(vol.num_voxels());
    let m = cfg.magnitude;
    for i in 0..vol.num_voxels() {
        let p = vol.coords(i);
        let pf = p.map(|c| c as f64);
        let hits: Vec<(usize, Point)> = cfg
            .bundles
            .iter()
            .enumerate()
            .filter_map(|(k, b)| {
                if !b.near(pf) {
                    return None;
                }
                let (d, t) = b.centerline.closest(pf);
                (d <= b.radius).then_some((k, t))
            })
            .collect();
        let dispersion = cfg
            .dispersions
            .iter()
            .find(|d| norm_sq(sub(pf, d.center)) <= d.radius * d.radius);

        let (region, direction) = if let Some(d) = dispersion {
            let (_, tangent) = cfg.bundles[d.bundle].centerline.closest(pf);
            let theta = rng.gen::<f64>() * d.half_angle_deg.to_radians();
            (Region::Dispersion, Some(rotate_random(tangent, theta, &mut rng)))
        } else {
            match hits.as_slice() {
                [] => (Region::Background, None),
                [(_, t)] => (Region::Bundle, Some(*t)),
                [(a, ta), (b, tb)] => {
                    let c = cfg.crossing_between(*a, *b).ok_or_else(|| {
                        Error::contract(format!("bundles {a} and {b} overlap at {p:?} without a declared crossing"))
                    })?;
                    let pick_a = rng.gen::<f64>() < c.weight;
                    let from_first = (c.a == *a) == pick_a;
                    (Region::Crossing, Some(if from_first { *ta } else { *tb }))
                }
                _ => {
                    return Err(Error::contract(format!(
                        "more than two bundles overlap at {p:?}; crossings are pairwise"
                    )))
                }
            }
        };

        let v = match direction {
            Some(dir) => {
                let angle = cfg.angular_jitter_deg.to_radians() * gauss(&mut rng).abs();
                let dir = if angle > 0.0 { rotate_random(dir, angle, &mut rng) } else { dir };
                let mag = m * (1.0 + cfg.magnitude_jitter * gauss(&mut rng));
                dir.map(|c| c * mag)
            }
            None => {
                let s = cfg.background_noise * m;
                [gauss(&mut rng) * s, gauss(&mut rng) * s, gauss(&mut rng) * s]
            }
        };
        vol.set(p, v.map(|c| c as f32));
        labels.push(region);
    }
    Ok((vol, RegionLabels { dims: cfg.dims, labels }))
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Tilts unit vector `u` by `theta` towards a uniformly random perpendicular direction.
fn rotate_random<R: Rng + ?Sized>(u: Point, theta: f64, rng: &mut R) -> Point {
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(u, helper));
    let e2 = cross(u, e1);
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    std::array::from_fn(|i| theta.cos() * u[i] + theta.sin() * (phi.cos() * e1[i] + phi.sin() * e2[i]))
}

/// Settings for a cohort of phantoms sharing one template geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortConfig {
    pub num_scans: usize,
    /// Edge length of the cubic volumes.
    pub side: usize,
    pub magnitude: f64,
    pub angular_jitter_deg: f64,
    pub magnitude_jitter: f64,
    pub background_noise: f64,
    pub crossing_weight: f64,
    pub dispersion_half_angle_deg: f64,
    /// Maximum per-axis translation of each bundle between scans, in voxels
    /// at the reference 32^3 scale.
    pub position_jitter: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            num_scans: 60,
            side: 32,
            magnitude: 1.0,
            angular_jitter_deg: 5.0,
            magnitude_jitter: 0.05,
            background_noise: 0.01,
            crossing_weight: 0.5,
            dispersion_half_angle_deg: 45.0,
            position_jitter: 1.0,
        }
    }
}

impl CohortConfig {
    /// Template geometry (defined on a 32^3 grid and rescaled), translated by
    /// a scan-specific random offset per bundle.
    pub fn phantom(&self, master_seed: u64, scan: usize) -> PhantomConfig {
        let s = self.side as f64 / 32.0;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, &[0x7068_616e, scan as u64]));
        let p = |x: f64, y: f64, z: f64| [x * s, y * s, z * s];
        let template = [
            (Centerline::Segment { start: p(1.0, 9.0, 10.0), end: p(30.0, 9.0, 10.0) }, 4.0),
            (Centerline::Segment { start: p(18.0, 1.0, 10.0), end: p(18.0, 30.0, 10.0) }, 4.0),
            (Centerline::Segment { start: p(5.0, 24.0, 1.0), end: p(5.0, 24.0, 30.0) }, 3.0),
            (
                Centerline::Arc { start: p(12.0, 2.0, 23.0), control: p(24.0, 16.0, 23.0), end: p(12.0, 30.0, 23.0) },
                3.0,
            ),
            (Centerline::Segment { start: p(28.0, 26.0, 1.0), end: p(28.0, 26.0, 14.0) }, 3.0),
        ];
        let hi = (self.side - 1) as f64;
        let mut offsets = Vec::new();
        let bundles = template
            .into_iter()
            .map(|(line, r)| {
                let j = self.position_jitter * s;
                let shift: Point = std::array::from_fn(|_| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 });
                // Keep the centerline inside the volume after the shift.
                let pts = line.points();
                let shift: Point = std::array::from_fn(|a| {
                    let lo_room = pts.iter().map(|q| q[a]).fold(f64::INFINITY, f64::min);
                    let hi_room = hi - pts.iter().map(|q| q[a]).fold(f64::NEG_INFINITY, f64::max);
                    shift[a].clamp(-lo_room, hi_room)
                });
                offsets.push(shift);
                Bundle { centerline: line.translated(shift), radius: r * s }
            })
            .collect();
        PhantomConfig {
            dims: [self.side; 3],
            bundles,
            crossings: vec![Crossing { a: 0, b: 1, weight: self.crossing_weight }],
            dispersions: vec![Dispersion {
                bundle: 4,
                center: add(p(28.0, 26.0, 19.0), offsets[4]),
                radius: 5.0 * s,
                half_angle_deg: self.dispersion_half_angle_deg,
            }],
            magnitude: self.magnitude,
            angular_jitter_deg: self.angular_jitter_deg,
            magnitude_jitter: self.magnitude_jitter,
            background_noise: self.background_noise,
            seed: derive_seed(master_seed, &[0x0076_6f6c, scan as u64]),
        }
    }
}

impl CohortConfig {
    /// Generates every scan of the cohort; scans are independent, so the
    /// result does not depend on the thread count.
    pub fn generate(&self, master_seed: u64) -> Result<Vec<(VectorVolume, RegionLabels)>> {
        use rayon::prelude::*;
        (0..self.num_scans).into_par_iter().map(|i| generate_phantom(&self.phantom(master_seed, i))).collect()
    }
}

/// SplitMix64-style mixing of a master seed with stream identifiers.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(master), |acc, p| mix(acc ^ mix(*p)))
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    std::array::from_fn(|i| a[i] + t * (b[i] - a[i]))
}
fn add(a: Point, b: Point) -> Point {
    std::array::from_fn(|i| a[i] + b[i])
}
fn sub(a: Point, b: Point) -> Point {
    std::array::from_fn(|i| a[i] - b[i])
}
fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn norm_sq(a: Point) -> f64 {
    dot(a, a)
}
fn normalize(a: Point) -> Point {
    let n = norm_sq(a).sqrt();
    a.map(|c| c / n)
}
fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{symmetric_l2, white_matter_mask};

    fn quiet(dims: [usize; 3], bundles: Vec<Bundle>) -> PhantomConfig {
        PhantomConfig {
            dims,
            bundles,
            crossings: vec![],
            dispersions: vec![],
            magnitude: 2.0,
            angular_jitter_deg: 0.0,
            magnitude_jitter: 0.0,
            background_noise: 0.0,
            seed: 3,
        }
    }

    fn x_bundle(y: f64, z: f64, len: f64) -> Bundle {
        Bundle {
            centerline: Centerline::Segment { start: [0.0, y, z], end: [len, y, z] },
            radius: 2.0,
        }
    }

    fn y_bundle(x: f64, z: f64, len: f64) -> Bundle {
        Bundle {
            centerline: Centerline::Segment { start: [x, 0.0, z], end: [x, len, z] },
            radius: 2.0,
        }
    }

    #[test]
    fn straight_bundle_without_jitter() {
        let cfg = quiet([16, 12, 12], vec![x_bundle(6.0, 6.0, 15.0)]);
        let (vol, labels) = generate_phantom(&cfg).unwrap();
        let mut inside = 0;
        for i in 0..vol.num_voxels() {
            let p = vol.coords(i);
            match labels.get(p) {
                Region::Bundle => {
                    inside += 1;
                    assert_eq!(symmetric_l2(vol.get(p), [2.0, 0.0, 0.0]), 0.0);
                }
                Region::Background => assert_eq!(vol.get(p), [0.0; 3]),
                r => panic!("unexpected region {r:?}"),
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn undeclared_overlap_is_rejected() {
        let cfg = quiet([12, 12, 12], vec![x_bundle(6.0, 6.0, 11.0), y_bundle(6.0, 6.0, 11.0)]);
        assert!(generate_phantom(&cfg).is_err());
    }

    fn crossing(weight: f64) -> PhantomConfig {
        let mut cfg = quiet(
            [12, 12, 12],
            vec![
                Bundle { radius: 5.5, ..x_bundle(6.0, 6.0, 11.0) },
                Bundle { radius: 5.5, ..y_bundle(6.0, 6.0, 11.0) },
            ],
        );
        cfg.crossings.push(Crossing { a: 0, b: 1, weight });
        cfg
    }

    #[test]
    fn crossing_weight_one_keeps_first_bundle() {
        let (vol, labels) = generate_phantom(&crossing(1.0)).unwrap();
        let n = labels.count(Region::Crossing);
        assert!(n > 100);
        for i in 0..vol.num_voxels() {
            let p = vol.coords(i);
            if labels.get(p) == Region::Crossing {
                assert_eq!(symmetric_l2(vol.get(p), [2.0, 0.0, 0.0]), 0.0);
            }
        }
    }

    #[test]
    fn crossing_mixture_fraction_is_binomial() {
        let mut cfg = quiet(
            [10, 10, 10],
            vec![
                Bundle { radius: 20.0, ..x_bundle(5.0, 5.0, 9.0) },
                Bundle { radius: 20.0, ..y_bundle(5.0, 5.0, 9.0) },
            ],
        );
        cfg.crossings.push(Crossing { a: 0, b: 1, weight: 0.5 });
        let (vol, labels) = generate_phantom(&cfg).unwrap();
        assert_eq!(labels.count(Region::Crossing), 1000);
        let aligned = (0..1000)
            .filter(|i| symmetric_l2(vol.get(vol.coords(*i)), [2.0, 0.0, 0.0]) < 0.2)
            .count() as f64;
        assert!((aligned / 1000.0 - 0.5).abs() < 0.05, "{aligned}");
    }

    #[test]
    fn dispersion_stays_within_half_angle() {
        let mut cfg = quiet([16, 16, 16], vec![x_bundle(8.0, 8.0, 8.0)]);
        cfg.dispersions.push(Dispersion { bundle: 0, center: [12.0, 8.0, 8.0], radius: 3.0, half_angle_deg: 30.0 });
        let (vol, labels) = generate_phantom(&cfg).unwrap();
        let mut n = 0;
        for i in 0..vol.num_voxels() {
            let p = vol.coords(i);
            if labels.get(p) == Region::Dispersion {
                n += 1;
                let v = vol.get(p);
                let cos = (v[0] / 2.0).abs() as f64;
                assert!(cos >= 30f64.to_radians().cos() - 1e-5);
            }
        }
        assert!(n > 50);
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = crossing(1.5);
        assert!(cfg.validate().is_err());
        cfg.crossings[0].weight = 0.5;
        cfg.dispersions.push(Dispersion { bundle: 0, center: [0.0; 3], radius: 1.0, half_angle_deg: 95.0 });
        assert!(cfg.validate().is_err());
        let out = quiet([8, 8, 8], vec![x_bundle(3.0, 3.0, 9.0)]);
        assert!(out.validate().is_err());
    }

    #[test]
    fn cohort_phantoms_are_deterministic_and_labelled() {
        let cohort = CohortConfig { angular_jitter_deg: 0.0, magnitude_jitter: 0.0, ..Default::default() };
        let cfg = cohort.phantom(11, 4);
        let (vol, labels) = generate_phantom(&cfg).unwrap();
        let (again, _) = generate_phantom(&cohort.phantom(11, 4)).unwrap();
        assert_eq!(vol, again);
        for region in Region::ALL {
            assert!(labels.count(region) > 0, "{region:?} missing");
        }
        let threshold = 0.1 * cohort.magnitude as f32;
        let mask = white_matter_mask(&vol, threshold);
        for i in 0..vol.num_voxels() {
            let p = vol.coords(i);
            assert_eq!(mask.contains(p), labels.get(p) != Region::Background, "{p:?}");
        }
    }

    #[test]
    fn every_cohort_scan_is_valid() {
        let cohort = CohortConfig::default();
        for scan in 0..60 {
            generate_phantom(&cohort.phantom(2024, scan)).unwrap();
        }
    }
}
