//! Inference-time bone extraction and weighted-fusion enhancement:
//! `enhanced = cxr + w * bone`, clamped back to [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::resample_bilinear;
use crate::projector::{minmax_to_unit, RadiographImage, RangeTag};
use crate::trainer::{predict_unit, Preprocess};
use crate::unet::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weight on the predicted bone image.
    pub weight: f64,
    /// Clamp the sum back to [0, 1] (clamping rather than renormalizing
    /// keeps w = 0 an exact identity).
    pub clamp: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { weight: 0.5, clamp: true }
    }
}

/// Extracts the bone image from a radiograph: resample to the model size if
/// needed, preprocess, run inference, map the Tanh output to [0, 1], min-max
/// normalize, and resample back to the original dims. Inputs already at the
/// model size skip resampling entirely.
pub fn predict_bone(
    model: &Model,
    cxr: &RadiographImage,
    preprocess: Preprocess,
) -> Result<RadiographImage> {
    if cxr.range() != RangeTag::Unit {
        return Err(Error::invalid("cxr", "input radiograph must be unit-tagged"));
    }
    let size = model.config().input_size;
    let at_model_size = cxr.width() == size && cxr.height() == size;
    let input = if at_model_size {
        cxr.clone()
    } else {
        resample_bilinear(cxr, size, size)
    };
    let pred = predict_unit(model, &input, preprocess)?;
    let normalized = minmax_to_unit(&pred);
    if at_model_size {
        Ok(normalized)
    } else {
        Ok(resample_bilinear(&normalized, cxr.width(), cxr.height()))
    }
}

/// Weighted summation of the radiograph and the predicted bone image.
pub fn fuse(
    cxr: &RadiographImage,
    bone: &RadiographImage,
    cfg: &FusionConfig,
) -> Result<RadiographImage> {
    if cfg.weight.is_nan() || cfg.weight < 0.0 {
        return Err(Error::invalid("weight", "must be non-negative"));
    }
    if !cxr.same_dims(bone) {
        return Err(Error::shape(
            "fuse",
            format!(
                "{}x{} vs {}x{}",
                cxr.width(),
                cxr.height(),
                bone.width(),
                bone.height()
            ),
        ));
    }
    if cxr.range() != RangeTag::Unit || bone.range() != RangeTag::Unit {
        return Err(Error::invalid("range", "fuse needs unit-tagged inputs"));
    }
    let pixels: Vec<f64> = cxr
        .pixels()
        .iter()
        .zip(bone.pixels())
        .map(|(c, b)| {
            let v = c + cfg.weight * b;
            if cfg.clamp {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    let tag = if cfg.clamp { RangeTag::Unit } else { RangeTag::Raw };
    Ok(RadiographImage::new_unchecked(cxr.width(), cxr.height(), pixels, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build, UNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RadiographImage {
        let px: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        RadiographImage::new(w, h, px, RangeTag::Unit).unwrap()
    }

    #[test]
    fn fuse_zero_weight_is_bit_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cxr = random_unit(16, 16, &mut rng);
        let bone = random_unit(16, 16, &mut rng);
        let out = fuse(&cxr, &bone, &FusionConfig { weight: 0.0, clamp: true }).unwrap();
        assert_eq!(out.pixels(), cxr.pixels());
    }

    #[test]
    fn fuse_half_plus_full_bone_saturates_at_one() {
        let cxr = RadiographImage::filled(8, 8, 0.5, RangeTag::Unit).unwrap();
        let bone = RadiographImage::filled(8, 8, 1.0, RangeTag::Unit).unwrap();
        let out = fuse(&cxr, &bone, &FusionConfig::default()).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn fuse_is_monotone_in_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cxr = random_unit(12, 12, &mut rng);
        let bone = random_unit(12, 12, &mut rng);
        let mut last = fuse(&cxr, &bone, &FusionConfig { weight: 0.0, clamp: true }).unwrap();
        for w in [0.25, 0.5, 1.0, 2.0] {
            let next = fuse(&cxr, &bone, &FusionConfig { weight: w, clamp: true }).unwrap();
            for (a, b) in last.pixels().iter().zip(next.pixels()) {
                assert!(b >= a);
            }
            last = next;
        }
    }

    #[test]
    fn fuse_output_stays_unit_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let cxr = random_unit(6, 6, &mut rng);
            let bone = random_unit(6, 6, &mut rng);
            let w = rng.gen::<f64>() * 3.0;
            let out = fuse(&cxr, &bone, &FusionConfig { weight: w, clamp: true }).unwrap();
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn fuse_rejects_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_unit(8, 8, &mut rng);
        let b = random_unit(8, 9, &mut rng);
        assert!(fuse(&a, &b, &FusionConfig::default()).is_err());
        let raw = RadiographImage::filled(8, 8, 2.0, RangeTag::Raw).unwrap();
        assert!(fuse(&a, &raw, &FusionConfig::default()).is_err());
    }

    fn small_model() -> crate::unet::Model {
        build(&UNetConfig {
            input_size: 32,
            base_filters: 4,
            depth: 2,
            bottleneck_dilation: 2,
            noise_std: 0.2,
            init_seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn predict_bone_is_deterministic_and_unit() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cxr = random_unit(32, 32, &mut rng);
        let a = predict_bone(&model, &cxr, Preprocess::Standardize).unwrap();
        let b = predict_bone(&model, &cxr, Preprocess::Standardize).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.range(), RangeTag::Unit);
        assert!(a.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn predict_bone_resamples_other_sizes() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cxr = random_unit(48, 40, &mut rng);
        let out = predict_bone(&model, &cxr, Preprocess::Standardize).unwrap();
        assert_eq!((out.width(), out.height()), (48, 40));
    }
}
