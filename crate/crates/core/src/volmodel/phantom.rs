//! Parametric thorax phantom: a desk-scale stand-in for chest CT volumes.
//!
//! The phantom is a body ellipsoid of soft tissue containing two low-HU lung
//! ellipsoids, elliptical rib bands plus a spine cylinder of bone-window HU,
//! and optional soft-tissue nodules inside the lungs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NoduleAnnotation, Volume, BONE_HI, BONE_LO, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

/// Background HU. -1000 contributes exactly zero attenuation under the
/// clamped projector, which keeps the all-air oracle exact.
pub const BACKGROUND_HU: i16 = -1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
    pub hu: i16,
}

impl EllipsoidSpec {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        let dz = (z - self.center.2) / self.radii.2;
        dx * dx + dy * dy + dz * dz <= 1.0
    }
}

/// Randomly placed lung nodules: how many, how large, what HU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleParams {
    pub count: usize,
    pub radius_range: (f64, f64),
    pub hu: i16,
}

impl Default for NoduleParams {
    fn default() -> Self {
        NoduleParams { count: 0, radius_range: (2.0, 4.0), hu: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub body: Option<EllipsoidSpec>,
    pub lungs: Vec<EllipsoidSpec>,
    /// HU of rib bands and the spine cylinder; must lie in the bone window.
    pub bone_hu: i16,
    pub rib_rings: usize,
    pub rib_half_thickness: f64,
    /// Fraction of the body z-radius covered by rib rings.
    pub rib_z_span: f64,
    pub spine: bool,
    pub nodules: NoduleParams,
    /// Nodules placed verbatim (annotated exactly as given), in addition to
    /// the randomly placed ones.
    pub explicit_nodules: Vec<NoduleAnnotation>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::thorax((64, 64, 64), 0)
    }
}

impl PhantomSpec {
    /// A spec with no structures: the generated volume is uniform background.
    pub fn empty(dims: (usize, usize, usize)) -> Self {
        PhantomSpec {
            dims,
            spacing_mm: (1.0, 1.0, 1.0),
            body: None,
            lungs: Vec::new(),
            bone_hu: 500,
            rib_rings: 0,
            rib_half_thickness: 1.0,
            rib_z_span: 0.55,
            spine: false,
            nodules: NoduleParams { count: 0, ..NoduleParams::default() },
            explicit_nodules: Vec::new(),
            seed: 0,
        }
    }

    /// The standard thorax layout scaled to `dims`: soft-tissue body (+40 HU),
    /// two lungs (-800 HU), bone inserts (+500 HU), nodules (+50 HU).
    pub fn thorax(dims: (usize, usize, usize), seed: u64) -> Self {
        let (x, y, z) = (dims.0 as f64, dims.1 as f64, dims.2 as f64);
        let body = EllipsoidSpec {
            center: (x / 2.0, y / 2.0, z / 2.0),
            radii: (0.46 * x, 0.40 * y, 0.49 * z),
            hu: 40,
        };
        let lung = |cx: f64| EllipsoidSpec {
            center: (cx, 0.46 * y, 0.52 * z),
            radii: (0.17 * x, 0.26 * y, 0.34 * z),
            hu: -800,
        };
        PhantomSpec {
            dims,
            spacing_mm: (1.0, 1.0, 1.0),
            body: Some(body),
            lungs: vec![lung(0.30 * x), lung(0.70 * x)],
            bone_hu: 500,
            rib_rings: 5,
            rib_half_thickness: 1.0,
            rib_z_span: 0.55,
            spine: true,
            nodules: NoduleParams::default(),
            explicit_nodules: Vec::new(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (dx, dy, dz) = self.dims;
        if dx == 0 || dy == 0 || dz == 0 {
            return Err(Error::invalid("dims", "must be positive"));
        }
        for (name, hu) in [
            ("body.hu", self.body.as_ref().map(|b| b.hu)),
            ("nodules.hu", Some(self.nodules.hu)),
            ("bone_hu", Some(self.bone_hu)),
        ] {
            if let Some(hu) = hu {
                if !(HU_MIN..=HU_MAX).contains(&hu) {
                    return Err(Error::invalid(name, format!("HU {hu} outside [{HU_MIN}, {HU_MAX}]")));
                }
            }
        }
        for l in &self.lungs {
            if !(HU_MIN..=HU_MAX).contains(&l.hu) {
                return Err(Error::invalid("lungs.hu", format!("HU {} out of range", l.hu)));
            }
        }
        if (self.rib_rings > 0 || self.spine) && !(BONE_LO..=BONE_HI).contains(&self.bone_hu) {
            return Err(Error::invalid(
                "bone_hu",
                format!("{} outside bone window [{BONE_LO}, {BONE_HI}]", self.bone_hu),
            ));
        }
        let bounds = (dx as f64, dy as f64, dz as f64);
        let check_ellipsoid = |name: &str, e: &EllipsoidSpec| -> Result<()> {
            let ok = e.radii.0 > 0.0
                && e.radii.1 > 0.0
                && e.radii.2 > 0.0
                && e.center.0 - e.radii.0 >= 0.0
                && e.center.0 + e.radii.0 <= bounds.0
                && e.center.1 - e.radii.1 >= 0.0
                && e.center.1 + e.radii.1 <= bounds.1
                && e.center.2 - e.radii.2 >= 0.0
                && e.center.2 + e.radii.2 <= bounds.2;
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(name.to_string(), format!("{e:?} exceeds volume bounds {bounds:?}")))
            }
        };
        if let Some(b) = &self.body {
            check_ellipsoid("body", b)?;
        }
        for l in &self.lungs {
            check_ellipsoid("lungs", l)?;
        }
        if self.nodules.count > 0 {
            let (lo, hi) = self.nodules.radius_range;
            if lo.is_nan() || hi.is_nan() || lo <= 0.0 || hi < lo {
                return Err(Error::invalid("nodules.radius_range", format!("bad range {:?}", self.nodules.radius_range)));
            }
            if self.lungs.is_empty() {
                return Err(Error::invalid("nodules.count", "random nodules need at least one lung"));
            }
        }
        for n in &self.explicit_nodules {
            n.validate(self.dims)?;
            let (cx, cy, cz) = n.center_vox;
            let (rx, ry, rz) = n.radii_vox;
            if cx - rx < 0.0
                || cx + rx > bounds.0
                || cy - ry < 0.0
                || cy + ry > bounds.1
                || cz - rz < 0.0
                || cz + rz > bounds.2
            {
                return Err(Error::invalid("explicit_nodules", format!("{n:?} exceeds volume bounds")));
            }
        }
        Ok(())
    }
}

fn paint_ellipsoid(vol: &mut Volume, e: &EllipsoidSpec) {
    let (dx, dy, dz) = vol.dims();
    let x0 = (e.center.0 - e.radii.0).floor().max(0.0) as usize;
    let x1 = ((e.center.0 + e.radii.0).ceil() as usize).min(dx - 1);
    let y0 = (e.center.1 - e.radii.1).floor().max(0.0) as usize;
    let y1 = ((e.center.1 + e.radii.1).ceil() as usize).min(dy - 1);
    let z0 = (e.center.2 - e.radii.2).floor().max(0.0) as usize;
    let z1 = ((e.center.2 + e.radii.2).ceil() as usize).min(dz - 1);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(x as f64, y as f64, z as f64) {
                    vol.set(x, y, z, e.hu);
                }
            }
        }
    }
}

/// Paints rib bands: elliptical annuli in the x-y plane at evenly spaced z
/// levels, with a frontal gap so each ring reads as two arcs.
fn paint_ribs(vol: &mut Volume, spec: &PhantomSpec, body: &EllipsoidSpec) {
    let (dx, dy, dz) = vol.dims();
    let outer = (body.radii.0 * 0.92, body.radii.1 * 0.88);
    let inner_scale = 1.0 - (2.0 * spec.rib_half_thickness / outer.0.min(outer.1)).min(0.5);
    let z_lo = body.center.2 - body.radii.2 * spec.rib_z_span;
    let z_hi = body.center.2 + body.radii.2 * spec.rib_z_span;
    for k in 0..spec.rib_rings {
        let t = if spec.rib_rings == 1 { 0.5 } else { k as f64 / (spec.rib_rings - 1) as f64 };
        let zc = z_lo + t * (z_hi - z_lo);
        let half = spec.rib_half_thickness;
        let zi0 = ((zc - half).floor().max(0.0)) as usize;
        let zi1 = ((zc + half).ceil() as usize).min(dz - 1);
        for z in zi0..=zi1 {
            if (z as f64 - zc).abs() > half {
                continue;
            }
            for y in 0..dy {
                for x in 0..dx {
                    let nx = (x as f64 - body.center.0) / outer.0;
                    let ny = (y as f64 - body.center.1) / outer.1;
                    let r2 = nx * nx + ny * ny;
                    let in_band = r2 <= 1.0 && r2 >= inner_scale * inner_scale;
                    // Frontal gap where the ribs would meet the sternum.
                    let gap = ny < -0.85;
                    if in_band && !gap {
                        vol.set(x, y, z, spec.bone_hu);
                    }
                }
            }
        }
    }
}

fn paint_spine(vol: &mut Volume, spec: &PhantomSpec, body: &EllipsoidSpec) {
    let (dx, dy, dz) = vol.dims();
    let cx = body.center.0;
    let cy = body.center.1 + body.radii.1 * 0.68;
    let r = (0.055 * dx as f64).max(1.0);
    let z0 = ((body.center.2 - body.radii.2 * 0.9).floor().max(0.0)) as usize;
    let z1 = ((body.center.2 + body.radii.2 * 0.9).ceil() as usize).min(dz - 1);
    for z in z0..=z1 {
        for y in 0..dy {
            for x in 0..dx {
                let ddx = x as f64 - cx;
                let ddy = y as f64 - cy;
                if ddx * ddx + ddy * ddy <= r * r {
                    vol.set(x, y, z, spec.bone_hu);
                }
            }
        }
    }
}

/// Generates the phantom volume and the exact list of nodule annotations that
/// were inserted. Deterministic for a fixed spec (including its seed).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Vec<NoduleAnnotation>)> {
    spec.validate()?;
    let mut vol = Volume::filled(spec.dims, spec.spacing_mm, BACKGROUND_HU)?;
    if let Some(body) = &spec.body {
        paint_ellipsoid(&mut vol, body);
    }
    for lung in &spec.lungs {
        paint_ellipsoid(&mut vol, lung);
    }

    let mut annotations: Vec<NoduleAnnotation> = spec.explicit_nodules.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.nodules.count {
        let (rlo, rhi) = spec.nodules.radius_range;
        let r = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
        let lung = &spec.lungs[i % spec.lungs.len()];
        let mut placed = false;
        for _attempt in 0..1000 {
            let px = lung.center.0 + (rng.gen::<f64>() * 2.0 - 1.0) * lung.radii.0;
            let py = lung.center.1 + (rng.gen::<f64>() * 2.0 - 1.0) * lung.radii.1;
            let pz = lung.center.2 + (rng.gen::<f64>() * 2.0 - 1.0) * lung.radii.2;
            // Keep the whole nodule inside the lung: test against the lung
            // shrunk by the nodule radius on each axis.
            let shrunk = EllipsoidSpec {
                center: lung.center,
                radii: (
                    (lung.radii.0 - r).max(1e-6),
                    (lung.radii.1 - r).max(1e-6),
                    (lung.radii.2 - r).max(1e-6),
                ),
                hu: lung.hu,
            };
            if shrunk.contains(px, py, pz) {
                annotations.push(NoduleAnnotation {
                    center_vox: (px, py, pz),
                    radii_vox: (r, r, r),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(
                "nodules",
                format!("could not place nodule {i} of radius {r} inside a lung"),
            ));
        }
    }
    for n in &annotations {
        paint_ellipsoid(
            &mut vol,
            &EllipsoidSpec {
                center: n.center_vox,
                radii: n.radii_vox,
                hu: spec.nodules.hu,
            },
        );
    }

    if let Some(body) = &spec.body {
        if spec.spine {
            paint_spine(&mut vol, spec, body);
        }
        if spec.rib_rings > 0 {
            paint_ribs(&mut vol, spec, body);
        }
    }
    Ok((vol, annotations))
}
