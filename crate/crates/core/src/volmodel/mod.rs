//! Volume data model: HU grids, bit-exact disk I/O, nodule annotations and
//! HU bone windowing.
//!
//! Voxels are stored x-fastest (`index = x + X*(y + Y*z)`) so a projection
//! ray along y strides by `X`.

mod phantom;

pub use phantom::{generate_phantom, EllipsoidSpec, NoduleParams, PhantomSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replacement value for voxels outside a bone window, per the training-pair
/// recipe ("-1024 HU (Air)").
pub const AIR_HU: i16 = -1024;
/// Lowest representable HU value.
pub const HU_MIN: i16 = -1024;
/// Highest representable HU value.
pub const HU_MAX: i16 = 3071;
/// Default bone window lower bound.
pub const BONE_LO: i16 = 300;
/// Default bone window upper bound.
pub const BONE_HI: i16 = 700;

/// A 3D signed-HU grid with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing_mm: (f64, f64, f64),
    data: Vec<i16>,
}

impl Volume {
    /// Builds a volume, validating dims, spacing, data length and HU range.
    pub fn new(
        dims: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        data: Vec<i16>,
    ) -> Result<Self> {
        let (x, y, z) = dims;
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::invalid("dims", format!("must be positive, got {dims:?}")));
        }
        let (sx, sy, sz) = spacing_mm;
        if [sx, sy, sz].iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::invalid(
                "spacing_mm",
                format!("must be positive, got {spacing_mm:?}"),
            ));
        }
        let expected = x * y * z;
        if data.len() != expected {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match dims product {expected}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(Error::invalid(
                "data",
                format!("HU value {bad} outside [{HU_MIN}, {HU_MAX}]"),
            ));
        }
        Ok(Volume { dims, spacing_mm, data })
    }

    /// Constant-valued volume.
    pub fn filled(dims: (usize, usize, usize), spacing_mm: (f64, f64, f64), hu: i16) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, spacing_mm, vec![hu; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing_mm(&self) -> (f64, f64, f64) {
        self.spacing_mm
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> i16 {
        self.data[self.index(x, y, z)]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, z: usize, hu: i16) {
        let i = self.index(x, y, z);
        self.data[i] = hu;
    }
}

/// An ellipsoidal nodule annotation in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub center_vox: (f64, f64, f64),
    pub radii_vox: (f64, f64, f64),
}

impl NoduleAnnotation {
    /// Validates radii positivity and that the center lies inside `dims`.
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        let (rx, ry, rz) = self.radii_vox;
        if [rx, ry, rz].iter().any(|r| r.is_nan() || *r <= 0.0) {
            return Err(Error::invalid(
                "radii_vox",
                format!("must be strictly positive, got {:?}", self.radii_vox),
            ));
        }
        let (cx, cy, cz) = self.center_vox;
        let inside = cx >= 0.0
            && cx < dims.0 as f64
            && cy >= 0.0
            && cy < dims.1 as f64
            && cz >= 0.0
            && cz < dims.2 as f64;
        if !inside {
            return Err(Error::invalid(
                "center_vox",
                format!("{:?} outside volume dims {dims:?}", self.center_vox),
            ));
        }
        Ok(())
    }
}

/// Keeps voxels with `lo <= HU <= hi` (both bounds inclusive) and replaces
/// everything else with -1024 HU.
pub fn bone_window(vol: &Volume, lo: i16, hi: i16) -> Volume {
    assert!(lo <= hi, "bone_window requires lo <= hi");
    let data = vol
        .data
        .iter()
        .map(|&v| if (lo..=hi).contains(&v) { v } else { AIR_HU })
        .collect();
    Volume { dims: vol.dims, spacing_mm: vol.spacing_mm, data }
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    data: String,
}

/// Resolves `<base>.vol.json` / `<base>.vol.raw` from a path that may carry
/// either the full header name or just the base.
fn vol_paths(path: &Path) -> (PathBuf, String) {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".vol.json").unwrap_or(&s).to_string();
    let header = PathBuf::from(format!("{base}.vol.json"));
    let stem = Path::new(&base)
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| base.clone());
    (header, stem)
}

/// Writes `<name>.vol.json` + `<name>.vol.raw` (little-endian i16, x-fastest).
/// Byte output is deterministic.
pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, stem) = vol_paths(path.as_ref());
    let raw_name = format!("{stem}.vol.raw");
    let header = VolumeHeader {
        dims: [vol.dims.0, vol.dims.1, vol.dims.2],
        spacing_mm: [vol.spacing_mm.0, vol.spacing_mm.1, vol.spacing_mm.2],
        dtype: "i16le".to_string(),
        data: raw_name.clone(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;

    let raw_path = header_path.with_file_name(&raw_name);
    let mut bytes = Vec::with_capacity(vol.data.len() * 2);
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Loads a volume saved by [`save_volume`], validating every header field.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header_path, _) = vol_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "volume header",
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "i16le" {
        return Err(Error::Format {
            what: "volume header",
            path: header_path.clone(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let raw_path = header_path.with_file_name(&header.data);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.dims.iter().product::<usize>() as u64 * 2;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path: raw_path,
            expected,
            found: bytes.len() as u64,
        });
    }
    let data: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Volume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing_mm[0], header.spacing_mm[1], header.spacing_mm[2]),
        data,
    )
}

/// Writes `<name>.nod.json` as a JSON array of annotations.
pub fn save_annotations(nodules: &[NoduleAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(nodules).expect("annotations serialize");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads a `<name>.nod.json` annotation list.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<NoduleAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "annotations",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
