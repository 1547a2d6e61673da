//! Paired data augmentation. Geometric transforms (flip, zoom, rotation,
//! shift) hit source, target and mask with the same displacement field; the
//! intensity transforms (bias, noise, sharpening) never touch the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sharpen;
use crate::error::{Error, Result};
use crate::projector::{RadiographImage, RangeTag, TrainingPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip.
    pub horizontal_flip: f64,
    /// Additive Gaussian noise sigma.
    pub noise_std: f64,
    /// Additive intensity offset drawn from +-bias_range.
    pub bias_range: f64,
    /// Spatial zoom factor drawn from 1 +- zoom_range.
    pub zoom_range: f64,
    /// Unsharp amount; sharpening fires with probability 0.5 when > 0.
    pub sharpen_alpha: f64,
    /// Max |rotation| in degrees (0 disables).
    pub rotation_deg: f64,
    /// Max |shift| as a fraction of each dimension (0 disables).
    pub shift_range: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip: 0.5,
            noise_std: 0.02,
            bias_range: 0.2,
            zoom_range: 0.3,
            sharpen_alpha: 0.5,
            rotation_deg: 0.0,
            shift_range: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration: every transform disabled.
    pub fn identity(seed: u64) -> Self {
        AugmentConfig {
            horizontal_flip: 0.0,
            noise_std: 0.0,
            bias_range: 0.0,
            zoom_range: 0.0,
            sharpen_alpha: 0.0,
            rotation_deg: 0.0,
            shift_range: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip) {
            return Err(Error::invalid("horizontal_flip", "probability must be in [0,1]"));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("bias_range", self.bias_range),
            ("zoom_range", self.zoom_range),
            ("sharpen_alpha", self.sharpen_alpha),
            ("rotation_deg", self.rotation_deg),
            ("shift_range", self.shift_range),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::invalid(name, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Inverse affine map from output pixel coordinates to source coordinates,
/// composed around the image center.
struct InverseAffine {
    m: [[f64; 2]; 2],
    shift: (f64, f64),
    center: (f64, f64),
}

impl InverseAffine {
    fn new(width: usize, height: usize, flip: bool, zoom: f64, rot_deg: f64, shift: (f64, f64)) -> Self {
        let theta = -rot_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let inv_zoom = 1.0 / zoom;
        let f = if flip { -1.0 } else { 1.0 };
        // flip^-1 * zoom^-1 * rot^-1
        let m = [[f * inv_zoom * c, f * inv_zoom * (-s)], [inv_zoom * s, inv_zoom * c]];
        InverseAffine {
            m,
            shift,
            center: ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0),
        }
    }

    #[inline]
    fn source_of(&self, x: usize, z: usize) -> (f64, f64) {
        let u = x as f64 - self.center.0 - self.shift.0;
        let v = z as f64 - self.center.1 - self.shift.1;
        (
            self.m[0][0] * u + self.m[0][1] * v + self.center.0,
            self.m[1][0] * u + self.m[1][1] * v + self.center.1,
        )
    }
}

fn warp_bilinear(img: &RadiographImage, affine: &InverseAffine) -> RadiographImage {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0f64; w * h];
    let sample = |x: isize, z: isize| -> f64 {
        if x < 0 || z < 0 || x >= w as isize || z >= h as isize {
            0.0
        } else {
            img.pixels()[z as usize * w + x as usize]
        }
    };
    for z in 0..h {
        for x in 0..w {
            let (sx, sz) = affine.source_of(x, z);
            let x0 = sx.floor();
            let z0 = sz.floor();
            let fx = sx - x0;
            let fz = sz - z0;
            let (xi, zi) = (x0 as isize, z0 as isize);
            let v = sample(xi, zi) * (1.0 - fx) * (1.0 - fz)
                + sample(xi + 1, zi) * fx * (1.0 - fz)
                + sample(xi, zi + 1) * (1.0 - fx) * fz
                + sample(xi + 1, zi + 1) * fx * fz;
            out[z * w + x] = v;
        }
    }
    RadiographImage::new_unchecked(w, h, out, img.range())
}

fn warp_nearest_binary(img: &RadiographImage, affine: &InverseAffine) -> RadiographImage {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0f64; w * h];
    for z in 0..h {
        for x in 0..w {
            let (sx, sz) = affine.source_of(x, z);
            let xi = sx.round() as isize;
            let zi = sz.round() as isize;
            let v = if xi < 0 || zi < 0 || xi >= w as isize || zi >= h as isize {
                0.0
            } else {
                img.pixels()[zi as usize * w + xi as usize]
            };
            out[z * w + x] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    RadiographImage::new_unchecked(w, h, out, RangeTag::Binary)
}

fn add_noise(img: &mut RadiographImage, std: f64, rng: &mut ChaCha8Rng) {
    for p in img.pixels_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *p += std * n;
    }
}

fn clamp_unit(img: &mut RadiographImage) {
    if img.range() == RangeTag::Unit {
        for p in img.pixels_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

/// Applies one random augmentation draw to a pair. Pure in
/// `(pair, cfg, draw_index)`: the RNG stream is keyed by the config seed and
/// the draw index, so item i of a dataset always sees the same transform.
pub fn augment(pair: &TrainingPair, cfg: &AugmentConfig, draw_index: u64) -> Result<TrainingPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(draw_index);

    // Fixed draw order keeps the stream layout stable.
    let flip = rng.gen::<f64>() < cfg.horizontal_flip;
    let zoom = 1.0 + (2.0 * rng.gen::<f64>() - 1.0) * cfg.zoom_range;
    let rot = (2.0 * rng.gen::<f64>() - 1.0) * cfg.rotation_deg;
    let w = pair.width() as f64;
    let h = pair.height() as f64;
    let dx = (2.0 * rng.gen::<f64>() - 1.0) * cfg.shift_range * w;
    let dz = (2.0 * rng.gen::<f64>() - 1.0) * cfg.shift_range * h;
    let bias = (2.0 * rng.gen::<f64>() - 1.0) * cfg.bias_range;
    let do_sharpen = rng.gen::<f64>() < 0.5 && cfg.sharpen_alpha > 0.0;

    let affine = InverseAffine::new(pair.width(), pair.height(), flip, zoom, rot, (dx, dz));
    let mut source = warp_bilinear(&pair.source, &affine);
    let mut target = warp_bilinear(&pair.target, &affine);
    let mask = warp_nearest_binary(&pair.nodule_mask, &affine);

    for img in [&mut source, &mut target] {
        for p in img.pixels_mut() {
            *p += bias;
        }
    }
    if cfg.noise_std > 0.0 {
        add_noise(&mut source, cfg.noise_std, &mut rng);
        add_noise(&mut target, cfg.noise_std, &mut rng);
    }
    if do_sharpen {
        source = sharpen(&source, cfg.sharpen_alpha);
        target = sharpen(&target, cfg.sharpen_alpha);
    }
    clamp_unit(&mut source);
    clamp_unit(&mut target);
    TrainingPair::new(source, target, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_pair(seed: u64) -> TrainingPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 16;
        let h = 16;
        let src: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        let tgt: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        let msk: Vec<f64> = (0..w * h).map(|_| if rng.gen::<f64>() < 0.2 { 1.0 } else { 0.0 }).collect();
        TrainingPair::new(
            RadiographImage::new(w, h, src, RangeTag::Unit).unwrap(),
            RadiographImage::new(w, h, tgt, RangeTag::Unit).unwrap(),
            RadiographImage::new(w, h, msk, RangeTag::Binary).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_config_is_exact_identity() {
        let pair = test_pair(1);
        let out = augment(&pair, &AugmentConfig::identity(9), 3).unwrap();
        assert_eq!(out, pair);
    }

    #[test]
    fn flip_is_an_involution() {
        let pair = test_pair(2);
        let cfg = AugmentConfig { horizontal_flip: 1.0, ..AugmentConfig::identity(4) };
        let once = augment(&pair, &cfg, 0).unwrap();
        assert_ne!(once, pair);
        let twice = augment(&once, &cfg, 1).unwrap();
        assert_eq!(twice, pair);
    }

    #[test]
    fn mask_stays_binary_under_any_augmentation() {
        let pair = test_pair(3);
        let cfg = AugmentConfig {
            rotation_deg: 7.0,
            shift_range: 0.1,
            zoom_range: 0.3,
            ..AugmentConfig::default()
        };
        for i in 0..20 {
            let out = augment(&pair, &cfg, i).unwrap();
            assert!(out.nodule_mask.pixels().iter().all(|&p| p == 0.0 || p == 1.0));
            assert!(out.source.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn deterministic_in_seed_and_draw_index() {
        let pair = test_pair(4);
        let cfg = AugmentConfig { seed: 11, ..AugmentConfig::default() };
        let a = augment(&pair, &cfg, 5).unwrap();
        let b = augment(&pair, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = augment(&pair, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn geometry_is_shared_across_the_pair() {
        // With pure geometry and source == target, outputs stay equal.
        let base = test_pair(5);
        let pair = TrainingPair::new(base.source.clone(), base.source.clone(), base.nodule_mask.clone()).unwrap();
        let cfg = AugmentConfig {
            horizontal_flip: 1.0,
            zoom_range: 0.3,
            rotation_deg: 4.0,
            shift_range: 0.1,
            ..AugmentConfig::identity(7)
        };
        let out = augment(&pair, &cfg, 2).unwrap();
        assert_eq!(out.source, out.target.with_range(RangeTag::Unit).unwrap());
    }

    #[test]
    fn intensity_never_touches_mask() {
        let pair = test_pair(6);
        let cfg = AugmentConfig {
            noise_std: 0.5,
            bias_range: 0.2,
            sharpen_alpha: 0.5,
            ..AugmentConfig::identity(13)
        };
        let out = augment(&pair, &cfg, 0).unwrap();
        assert_eq!(out.nodule_mask, pair.nodule_mask);
        assert_ne!(out.source, pair.source);
    }
}
