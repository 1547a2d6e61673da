//! osteoforge: synthetic radiograph (DRR) generation from HU volumes,
//! bone-structure extraction with a compact U-Net, and selective bone
//! enhancement of radiographs.
//!
//! The pipeline: a 3D HU volume is projected into a source DRR and a
//! bone-windowed target DRR; a U-Net is trained on such pairs under L1,
//! nodule-weighted L1 or perceptual loss; at inference the predicted bone
//! image is fused back into the input radiograph.

pub mod autodiff;
pub mod cli;
pub mod enhancer;
pub mod error;
pub mod imageops;
pub mod losses;
pub mod projector;
pub mod quality;
pub mod trainer;
pub mod unet;
pub mod volmodel;
pub mod weights;

pub use error::{Error, Result};
pub use projector::{RadiographImage, RangeTag, TrainingPair};
pub use volmodel::Volume;

/// Mixes a base seed with a stream tag and index into a fresh RNG seed
/// (splitmix64 finalizer), so every consumer draws from its own stream.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
