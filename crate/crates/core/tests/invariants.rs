//! Property tests over the cross-cutting invariants.

use osteoforge::enhancer::{fuse, FusionConfig};
use osteoforge::imageops::{augment, minmax_normalize, standardize, AugmentConfig};
use osteoforge::projector::{
    attenuation_map, drr, load_image, save_image, ProjectorConfig, RadiographImage, RangeTag,
    TrainingPair,
};
use osteoforge::quality::{rmse, ssim, MetricConfig};
use osteoforge::trainer::{split_dataset, SplitSpec};
use osteoforge::volmodel::{bone_window, load_volume, save_volume, Volume};
use proptest::prelude::*;

fn volume_strategy() -> impl Strategy<Value = Volume> {
    ((1usize..5, 1usize..5, 1usize..5), any::<u64>()).prop_flat_map(|(dims, _)| {
        let n = dims.0 * dims.1 * dims.2;
        proptest::collection::vec(-1024i16..=3071, n)
            .prop_map(move |data| Volume::new(dims, (1.0, 1.0, 1.0), data).unwrap())
    })
}

fn unit_image_strategy(side: usize) -> impl Strategy<Value = RadiographImage> {
    proptest::collection::vec(0.0f64..=1.0, side * side)
        .prop_map(move |px| RadiographImage::new(side, side, px, RangeTag::Unit).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_roundtrip_is_bit_exact(vol in volume_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        save_volume(&vol, dir.path().join("v")).unwrap();
        let back = load_volume(dir.path().join("v.vol.json")).unwrap();
        prop_assert_eq!(vol, back);
    }

    #[test]
    fn bone_window_idempotent_and_contractive(vol in volume_strategy()) {
        let once = bone_window(&vol, 300, 700);
        prop_assert_eq!(&once, &bone_window(&once, 300, 700));
        let in_window = |v: &Volume| v.data().iter().filter(|&&h| (300..=700).contains(&h)).count();
        prop_assert!(in_window(&once) <= in_window(&vol));
    }

    #[test]
    fn drr_is_unit_range(vol in volume_strategy()) {
        let img = drr(&vol, &ProjectorConfig::default()).unwrap();
        prop_assert!(img.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn attenuation_monotone_under_hu_increase(vol in volume_strategy(), bump in 1i16..500) {
        let base = attenuation_map(&vol, &ProjectorConfig::default()).unwrap();
        let bumped: Vec<i16> = vol.data().iter().map(|&v| v.saturating_add(bump).min(3071)).collect();
        let vol2 = Volume::new(vol.dims(), vol.spacing_mm(), bumped).unwrap();
        let after = attenuation_map(&vol2, &ProjectorConfig::default()).unwrap();
        for (a, b) in base.pixels().iter().zip(after.pixels()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn image_roundtrip_preserves_f32_payload(img in unit_image_strategy(6)) {
        let dir = tempfile::tempdir().unwrap();
        save_image(&img, dir.path().join("i")).unwrap();
        let back = load_image(dir.path().join("i.img.json")).unwrap();
        // One save quantizes to f32; a second trip is bit-exact.
        save_image(&back, dir.path().join("j")).unwrap();
        let twice = load_image(dir.path().join("j.img.json")).unwrap();
        prop_assert_eq!(back, twice);
    }

    #[test]
    fn minmax_lands_in_unit_range(img in unit_image_strategy(5)) {
        let out = minmax_normalize(&img);
        prop_assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let min = out.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(min == 0.0);
    }

    #[test]
    fn standardize_hits_moment_targets(img in unit_image_strategy(5)) {
        let out = standardize(&img, 0.0, 0.5);
        let n = out.pixels().len() as f64;
        let mean = out.pixels().iter().sum::<f64>() / n;
        let var = out.pixels().iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-6);
        let constant = img.pixels().iter().all(|p| *p == img.pixels()[0]);
        if !constant {
            prop_assert!((var.sqrt() - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_stays_unit_and_identity_at_zero(
        cxr in unit_image_strategy(4),
        bone in unit_image_strategy(4),
        w in 0.0f64..4.0,
    ) {
        let id = fuse(&cxr, &bone, &FusionConfig { weight: 0.0, clamp: true }).unwrap();
        prop_assert_eq!(id.pixels(), cxr.pixels());
        let out = fuse(&cxr, &bone, &FusionConfig { weight: w, clamp: true }).unwrap();
        prop_assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn augmented_mask_stays_binary(
        src in unit_image_strategy(8),
        tgt in unit_image_strategy(8),
        bits in proptest::collection::vec(any::<bool>(), 64),
        draw in any::<u64>(),
    ) {
        let mask_px: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mask = RadiographImage::new(8, 8, mask_px, RangeTag::Binary).unwrap();
        let pair = TrainingPair::new(src, tgt, mask).unwrap();
        let cfg = AugmentConfig { rotation_deg: 6.0, shift_range: 0.1, seed: 5, ..AugmentConfig::default() };
        let out = augment(&pair, &cfg, draw).unwrap();
        prop_assert!(out.nodule_mask.pixels().iter().all(|&p| p == 0.0 || p == 1.0));
        prop_assert!(out.source.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn metrics_are_symmetric(a in unit_image_strategy(16), b in unit_image_strategy(16)) {
        let cfg = MetricConfig::default();
        prop_assert_eq!(rmse(&a, &b, &cfg).unwrap(), rmse(&b, &a, &cfg).unwrap());
        let s_ab = ssim(&a, &b, &cfg).unwrap();
        let s_ba = ssim(&b, &a, &cfg).unwrap();
        prop_assert!((s_ab - s_ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s_ab));
    }

    #[test]
    fn split_is_a_partition(
        n in 1usize..300,
        a in 0.0f64..1.0,
        t in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let val = a * (1.0 - t.min(0.999));
        let test = (1.0 - a) * (1.0 - t.min(0.999));
        let train = 1.0 - val - test;
        let spec = SplitSpec { fractions: (train, val, test), seed };
        let items: Vec<usize> = (0..n).collect();
        let (tr, va, te) = split_dataset(&items, &spec).unwrap();
        let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
        prop_assert_eq!(all.len(), n);
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }
}
