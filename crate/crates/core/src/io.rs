//! Volume files, split manifests and graymap export.
//!
//! Volume layout (little-endian): `"MDAV"`, `u32` version 1, `u32` X, Y, Z,
//! `u32` channels, then `X*Y*Z*channels` `f32` values ordered
//! `((x * Y + y) * Z + z) * channels + c`. Absent map entries are NaN.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::field::VectorVolume;
use crate::phantom::{Region, RegionLabels};

pub const VOLUME_MAGIC: &[u8; 4] = b"MDAV";
pub const VOLUME_VERSION: u32 = 1;
pub const VOLUME_HEADER_BYTES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VolumeFile {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::contract(format!("volume dims {dims:?} x {channels} channels must be positive")));
        }
        if data.len() != dims.iter().product::<usize>() * channels {
            return Err(Error::contract(format!(
                "{} values do not fill {dims:?} x {channels} channels",
                data.len()
            )));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VOLUME_HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        for d in self.dims.iter().chain([&self.channels]) {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        if buf.len() < VOLUME_HEADER_BYTES || &buf[..4] != VOLUME_MAGIC {
            return Err(bad("not a volume file (missing MDAV header)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if word(1) != VOLUME_VERSION {
            return Err(bad(format!("unsupported volume version {}", word(1))));
        }
        let dims = [word(2) as usize, word(3) as usize, word(4) as usize];
        let channels = word(5) as usize;
        let expected = dims
            .iter()
            .chain([&channels])
            .try_fold(4usize, |a, d| a.checked_mul(*d))
            .and_then(|b| b.checked_add(VOLUME_HEADER_BYTES));
        if expected != Some(buf.len()) {
            return Err(bad(format!("length {} does not match dims {dims:?} x {channels}", buf.len())));
        }
        let data = buf[VOLUME_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dims, channels, data).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn from_field(vol: &VectorVolume) -> Self {
        Self { dims: vol.dims(), channels: 3, data: vol.data().to_vec() }
    }

    pub fn into_field(self, path: &Path) -> Result<VectorVolume> {
        if self.channels != 3 {
            return Err(Error::Format { path: path.to_path_buf(), msg: format!("expected 3 channels, found {}", self.channels) });
        }
        VectorVolume::new(self.dims, self.data).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
    }

    pub fn from_labels(labels: &RegionLabels) -> Self {
        Self { dims: labels.dims, channels: 1, data: labels.labels.iter().map(|r| r.code() as f32).collect() }
    }

    pub fn into_labels(self, path: &Path) -> Result<RegionLabels> {
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        if self.channels != 1 {
            return Err(bad(format!("label volume has {} channels", self.channels)));
        }
        let labels = self
            .data
            .iter()
            .map(|v| {
                let code = *v as u8;
                (code as f32 == *v).then(|| Region::from_code(code)).flatten().ok_or_else(|| bad(format!("invalid region code {v}")))
            })
            .collect::<Result<_>>()?;
        Ok(RegionLabels { dims: self.dims, labels })
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn scan_name(scan: usize) -> String {
    format!("scan_{scan:03}")
}

/// One `scan_NNN role` line per scan, in scan order.
pub fn manifest_text(split: &DatasetSplit) -> String {
    let mut out = String::from("# scan split\n");
    for scan in 0..split.num_scans() {
        let _ = writeln!(out, "{} {}", scan_name(scan), split.role(scan).expect("scan in split"));
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    let mut expected = 0;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: format!("line {}: {msg}", line_no + 1) };
        let mut parts = line.split_whitespace();
        let (name, role) = (parts.next().unwrap_or(""), parts.next().ok_or_else(|| bad("missing role"))?);
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        if name != scan_name(expected) {
            return Err(bad(&format!("expected {}", scan_name(expected))));
        }
        match role {
            "train" => split.train.push(expected),
            "validation" => split.validation.push(expected),
            "test" => split.test.push(expected),
            _ => return Err(bad(&format!("unknown role `{role}`"))),
        }
        expected += 1;
    }
    if expected == 0 {
        return Err(Error::Format { path: path.to_path_buf(), msg: "manifest lists no scans".into() });
    }
    Ok(split)
}

/// 8-bit grayscale image, rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary portable graymap (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Maps present (non-NaN) values to `floor(255 * (v - min) / (max - min))`.
/// A slice whose present values are all equal renders 128; absent values render 0.
pub fn scale_to_gray(values: &[f32]) -> Vec<u8> {
    let present = values.iter().filter(|v| !v.is_nan());
    let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v as f64), hi.max(*v as f64)));
    values
        .iter()
        .map(|v| {
            if v.is_nan() {
                0
            } else if hi == lo {
                128
            } else {
                (255.0 * ((*v as f64 - lo) / (hi - lo))).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// Slice `index` across `axis`. Rows run along the lower remaining axis and
/// columns along the higher one. Multi-channel volumes render the vector norm.
pub fn render_slice(vol: &VolumeFile, axis: usize, index: usize) -> Result<GrayImage> {
    if axis > 2 {
        return Err(Error::contract(format!("axis {axis} is not 0, 1 or 2")));
    }
    if index >= vol.dims[axis] {
        return Err(Error::contract(format!("slice {index} out of range 0..{} on axis {axis}", vol.dims[axis])));
    }
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (height, width) = (vol.dims[ra], vol.dims[ca]);
    let mut values = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let mut p = [0; 3];
            p[axis] = index;
            p[ra] = r;
            p[ca] = c;
            let base = ((p[0] * vol.dims[1] + p[1]) * vol.dims[2] + p[2]) * vol.channels;
            let cell = &vol.data[base..base + vol.channels];
            values.push(if vol.channels == 1 { cell[0] } else { cell.iter().map(|v| v * v).sum::<f32>().sqrt() });
        }
    }
    Ok(GrayImage { width, height, pixels: scale_to_gray(&values) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_24_bytes() {
        let v = VolumeFile::new([2, 1, 3], 1, vec![0.0; 6]).unwrap();
        assert_eq!(v.to_bytes().len(), VOLUME_HEADER_BYTES + 24);
        assert_eq!(&v.to_bytes()[..4], b"MDAV");
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let p = Path::new("x.vol");
        let bytes = VolumeFile::new([2, 2, 2], 3, vec![1.0; 24]).unwrap().to_bytes();
        assert!(matches!(VolumeFile::from_bytes(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(VolumeFile::from_bytes(b"P5\n1 1\n255\n\0", p), Err(Error::Format { .. })));
    }

    #[test]
    fn two_by_two_scaling() {
        assert_eq!(scale_to_gray(&[0.0, 1.0, 0.5, f32::NAN]), vec![0, 255, 127, 0]);
        assert_eq!(scale_to_gray(&[3.0, 3.0, f32::NAN]), vec![128, 128, 0]);
    }

    #[test]
    fn manifest_round_trip() {
        let split = DatasetSplit { train: vec![0, 3], validation: vec![1], test: vec![2] };
        let back = parse_manifest(&manifest_text(&split), Path::new("m")).unwrap();
        assert_eq!(back, split);
        assert!(parse_manifest("scan_000 train\nscan_002 test\n", Path::new("m")).is_err());
    }
}
