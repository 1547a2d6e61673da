//! Parallel-projection DRR synthesis and 2D nodule-mask projection.
//!
//! The projector follows the average-attenuation formulation: HU values are
//! shifted by +1000, scaled by the water attenuation coefficient, and averaged
//! along the beam axis y; the radiograph intensity is `exp(beta * mu_av)`.
//! Note the positive exponent: bones come out bright, which is exactly what
//! the bone-extraction targets want.

mod image;

pub use image::{load_image, save_image, save_pgm16, RadiographImage, RangeTag, TrainingPair};

use crate::error::{Error, Result};
use crate::volmodel::{bone_window, NoduleAnnotation, Volume};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    /// Water attenuation coefficient in cm^-1.
    pub mu_water: f64,
    /// Dimensionless exposure factor applied in the exponent.
    pub beta: f64,
    /// Clamp (HU + 1000) at zero so air contributes nothing. The unclamped
    /// variant applies the formula verbatim and lets HU below -1000 subtract.
    pub clamp_air: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { mu_water: 0.2, beta: 0.02, clamp_air: true }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu_water.is_nan() || self.mu_water <= 0.0 {
            return Err(Error::invalid("mu_water", format!("must be > 0, got {}", self.mu_water)));
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::invalid("beta", format!("must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Average attenuation map over the beam axis:
/// `mu_av(x,z) = sum_y mu_water * max(0, HU+1000) / (N*1000)` with N = Y.
///
/// Accumulation is f64 in ascending-y order, so results are bit-reproducible.
pub fn attenuation_map(vol: &Volume, cfg: &ProjectorConfig) -> Result<RadiographImage> {
    cfg.validate()?;
    let (x_dim, y_dim, z_dim) = vol.dims();
    let n = y_dim as f64;
    let scale = cfg.mu_water / (n * 1000.0);
    let data = vol.data();
    let mut pixels = vec![0.0f64; x_dim * z_dim];
    for z in 0..z_dim {
        let row = &mut pixels[z * x_dim..(z + 1) * x_dim];
        for y in 0..y_dim {
            let slab = &data[x_dim * (y + y_dim * z)..x_dim * (y + 1 + y_dim * z)];
            if cfg.clamp_air {
                for (px, &hu) in row.iter_mut().zip(slab) {
                    *px += scale * f64::max(0.0, hu as f64 + 1000.0);
                }
            } else {
                for (px, &hu) in row.iter_mut().zip(slab) {
                    *px += scale * (hu as f64 + 1000.0);
                }
            }
        }
    }
    Ok(RadiographImage::new_unchecked(x_dim, z_dim, pixels, RangeTag::Raw))
}

/// Raw DRR intensities `exp(beta * mu_av)`, before any normalization.
pub fn drr_raw(vol: &Volume, cfg: &ProjectorConfig) -> Result<RadiographImage> {
    let mut mu = attenuation_map(vol, cfg)?;
    for p in mu.pixels_mut() {
        *p = (cfg.beta * *p).exp();
    }
    Ok(mu)
}

/// Min-max normalization to [0, 1]; a constant image maps to all zeros.
pub fn minmax_to_unit(img: &RadiographImage) -> RadiographImage {
    let min = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels = if span > 0.0 {
        img.pixels().iter().map(|p| ((p - min) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; img.pixels().len()]
    };
    RadiographImage::new_unchecked(img.width(), img.height(), pixels, RangeTag::Unit)
}

/// The normalized DRR: `exp(beta * mu_av)` min-max mapped to [0, 1].
pub fn drr(vol: &Volume, cfg: &ProjectorConfig) -> Result<RadiographImage> {
    Ok(minmax_to_unit(&drr_raw(vol, cfg)?))
}

/// Bone-only DRR: the projection of the bone-windowed volume.
pub fn bone_drr(vol: &Volume, cfg: &ProjectorConfig, lo: i16, hi: i16) -> Result<RadiographImage> {
    drr(&bone_window(vol, lo, hi), cfg)
}

/// Raw-intensity variant of [`bone_drr`], for diagnostics.
pub fn bone_drr_raw(
    vol: &Volume,
    cfg: &ProjectorConfig,
    lo: i16,
    hi: i16,
) -> Result<RadiographImage> {
    drr_raw(&bone_window(vol, lo, hi), cfg)
}

/// Projects ellipsoidal nodule annotations along y into a binary 2D mask:
/// pixel (x,z) is 1 iff some integer y puts (x,y,z) inside an annotation.
pub fn project_nodule_mask(
    dims: (usize, usize, usize),
    annotations: &[NoduleAnnotation],
) -> RadiographImage {
    let (x_dim, y_dim, z_dim) = dims;
    let mut pixels = vec![0.0f64; x_dim * z_dim];
    for a in annotations {
        let (cx, cy, cz) = a.center_vox;
        let (rx, ry, rz) = a.radii_vox;
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(x_dim.saturating_sub(1));
        let z0 = (cz - rz).floor().max(0.0) as usize;
        let z1 = ((cz + rz).ceil() as usize).min(z_dim.saturating_sub(1));
        for z in z0..=z1 {
            for x in x0..=x1 {
                let dx = (x as f64 - cx) / rx;
                let dz = (z as f64 - cz) / rz;
                let rem = 1.0 - dx * dx - dz * dz;
                if rem < 0.0 {
                    continue;
                }
                // Some integer y in [0, Y) must satisfy ((y-cy)/ry)^2 <= rem.
                let half = ry * rem.sqrt();
                let y_lo = (cy - half).ceil().max(0.0);
                let y_hi = (cy + half).floor().min(y_dim as f64 - 1.0);
                if y_lo <= y_hi {
                    pixels[z * x_dim + x] = 1.0;
                }
            }
        }
    }
    RadiographImage::new_unchecked(x_dim, z_dim, pixels, RangeTag::Binary)
}

/// Builds one (source DRR, bone-target DRR, nodule mask) training triple.
pub fn make_pair(
    vol: &Volume,
    annotations: &[NoduleAnnotation],
    cfg: &ProjectorConfig,
    lo: i16,
    hi: i16,
) -> Result<TrainingPair> {
    let source = drr(vol, cfg)?;
    let target = bone_drr(vol, cfg, lo, hi)?;
    let mask = project_nodule_mask(vol.dims(), annotations);
    TrainingPair::new(source, target, mask)
}
