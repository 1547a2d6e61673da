//! 2D radiograph images with an explicit range tag, plus their disk formats
//! (JSON header + f32le raw, optional 16-bit PGM export).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeTag {
    /// Unconstrained values (e.g. raw DRR intensities, attenuation maps).
    Raw,
    /// Values in [0, 1].
    Unit,
    /// Zero-centered values (standardized or [-1, 1]-mapped).
    Standardized,
    /// Values in {0, 1} only.
    Binary,
}

impl RangeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RangeTag::Raw => "raw",
            RangeTag::Unit => "unit",
            RangeTag::Standardized => "standardized",
            RangeTag::Binary => "binary",
        }
    }
}

/// A 2D scalar image, row-major with row index z: `pixels[z*width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiographImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    range: RangeTag,
}

impl RadiographImage {
    /// Builds an image, enforcing the tag's range invariant.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, range: RangeTag) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("dims", format!("must be positive, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(
                "pixels",
                format!("length {} does not match {width}x{height}", pixels.len()),
            ));
        }
        let img = RadiographImage { width, height, pixels, range };
        img.check_range()?;
        Ok(img)
    }

    fn check_range(&self) -> Result<()> {
        match self.range {
            RangeTag::Unit => {
                if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::invalid("pixels", format!("unit image has value {p} outside [0,1]")));
                }
            }
            RangeTag::Binary => {
                if let Some(p) = self.pixels.iter().find(|&&p| p != 0.0 && p != 1.0) {
                    return Err(Error::invalid("pixels", format!("binary image has value {p}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, value: f64, range: RangeTag) -> Result<Self> {
        RadiographImage::new(width, height, vec![value; width * height], range)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn at(&self, x: usize, z: usize) -> f64 {
        self.pixels[z * self.width + x]
    }

    pub fn same_dims(&self, other: &RadiographImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Re-tags the image without touching pixels; validates the new tag.
    pub fn with_range(mut self, range: RangeTag) -> Result<Self> {
        self.range = range;
        self.check_range()?;
        Ok(self)
    }

    pub(crate) fn new_unchecked(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        range: RangeTag,
    ) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        RadiographImage { width, height, pixels, range }
    }
}

/// (source DRR, target bone X-ray, nodule-weight mask) with shared dims.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub source: RadiographImage,
    pub target: RadiographImage,
    pub nodule_mask: RadiographImage,
}

impl TrainingPair {
    pub fn new(
        source: RadiographImage,
        target: RadiographImage,
        nodule_mask: RadiographImage,
    ) -> Result<Self> {
        if !source.same_dims(&target) || !source.same_dims(&nodule_mask) {
            return Err(Error::shape(
                "training pair",
                format!(
                    "source {}x{}, target {}x{}, mask {}x{}",
                    source.width, source.height, target.width, target.height,
                    nodule_mask.width, nodule_mask.height
                ),
            ));
        }
        if nodule_mask.range != RangeTag::Binary {
            return Err(Error::invalid("nodule_mask", "must be binary-tagged"));
        }
        Ok(TrainingPair { source, target, nodule_mask })
    }

    pub fn width(&self) -> usize {
        self.source.width
    }

    pub fn height(&self) -> usize {
        self.source.height
    }
}

#[derive(Serialize, Deserialize)]
struct ImageHeader {
    width: usize,
    height: usize,
    dtype: String,
    range: String,
    data: String,
}

fn img_paths(path: &Path) -> (PathBuf, String) {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".img.json").unwrap_or(&s).to_string();
    let header = PathBuf::from(format!("{base}.img.json"));
    let stem = Path::new(&base)
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| base.clone());
    (header, stem)
}

/// Writes `<name>.img.json` + `<name>.img.raw` (row-major f32le).
pub fn save_image(img: &RadiographImage, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, stem) = img_paths(path.as_ref());
    let raw_name = format!("{stem}.img.raw");
    let header = ImageHeader {
        width: img.width,
        height: img.height,
        dtype: "f32le".to_string(),
        range: img.range.as_str().to_string(),
        data: raw_name.clone(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;

    let raw_path = header_path.with_file_name(&raw_name);
    let mut bytes = Vec::with_capacity(img.pixels.len() * 4);
    for p in &img.pixels {
        bytes.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Loads an image saved by [`save_image`], validating the header and the
/// tag's range invariant.
pub fn load_image(path: impl AsRef<Path>) -> Result<RadiographImage> {
    let (header_path, _) = img_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: ImageHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "image header",
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32le" {
        return Err(Error::Format {
            what: "image header",
            path: header_path.clone(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let range = match header.range.as_str() {
        "raw" => RangeTag::Raw,
        "unit" => RangeTag::Unit,
        "standardized" => RangeTag::Standardized,
        "binary" => RangeTag::Binary,
        other => {
            return Err(Error::Format {
                what: "image header",
                path: header_path.clone(),
                reason: format!("unknown range tag {other:?}"),
            })
        }
    };
    let raw_path = header_path.with_file_name(&header.data);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = (header.width * header.height) as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path: raw_path,
            expected,
            found: bytes.len() as u64,
        });
    }
    let pixels: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    RadiographImage::new(header.width, header.height, pixels, range)
}

/// Exports as binary PGM (P5, maxval 65535, big-endian samples) with a linear
/// min->0 / max->65535 mapping; a constant image maps to all zeros.
pub fn save_pgm16(img: &RadiographImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let min = img.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        let v = if span > 0.0 {
            ((p - min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
