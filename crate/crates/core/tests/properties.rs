use std::path::Path;

use deer_core::data::Split;
use deer_core::image::equispaced_angles;
use deer_core::io::{ExperimentConfig, RasterFile};
use deer_core::metrics::{psnr, Psnr, PEAK};
use deer_core::model::{bp_forward, BpLayer, BpScaling, BpVariant};
use deer_core::train::loss::{mae_images, ssim_images};
use deer_core::train::SsimParams;
use deer_core::{Image, Sinogram};
use proptest::prelude::*;

const N: usize = 12;

fn image() -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..1.0, N * N).prop_map(|d| Image::new(N, 1.0, d).unwrap())
}

fn small_ssim() -> SsimParams {
    SsimParams {
        window: 5,
        ..SsimParams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raster_round_trip_is_bitwise(bits in prop::collection::vec(any::<u32>(), 64), spacing in 0.1f64..4.0) {
        let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).map(|v| if v.is_finite() { v } else { 0.0 }).collect();
        let img = Image::new(8, spacing, data).unwrap();
        let bytes = RasterFile::from_image(&img).to_bytes().unwrap();
        let back = RasterFile::from_bytes(&bytes, Path::new("mem")).unwrap().to_image().unwrap();
        prop_assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.pixel_size().to_bits(), spacing.to_bits());
    }

    #[test]
    fn back_projection_is_linear_in_the_sinogram(
        a in prop::collection::vec(-1.0f32..1.0, 4 * N),
        b in prop::collection::vec(-1.0f32..1.0, 4 * N),
        k in -2.0f32..2.0,
        lite in any::<bool>(),
    ) {
        let variant = if lite { BpVariant::Lite } else { BpVariant::ViewDependent };
        let layer = BpLayer::<f32>::uniform(variant, N, N, 4, BpScaling::PerView, 1.0).unwrap();
        let sino = |d: Vec<f32>| Sinogram::new(equispaced_angles(4), N, 1.0, d).unwrap();
        let mixed: Vec<f32> = a.iter().zip(&b).map(|(x, y)| k * x + y).collect();
        let lhs = bp_forward(&layer, &sino(mixed)).unwrap();
        let ra = bp_forward(&layer, &sino(a)).unwrap();
        let rb = bp_forward(&layer, &sino(b)).unwrap();
        for i in 0..N * N {
            let rhs = k * ra.data()[i] + rb.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn mae_is_a_metric(x in image(), y in image(), z in image()) {
        let xy = mae_images(&x, &y).unwrap();
        prop_assert_eq!(mae_images(&x, &x).unwrap(), 0.0);
        prop_assert!((xy - mae_images(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(xy <= mae_images(&x, &z).unwrap() + mae_images(&z, &y).unwrap() + 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(x in image(), y in image()) {
        let p = small_ssim();
        let s = ssim_images(&x, &y, &p).unwrap();
        prop_assert!((ssim_images(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((s - ssim_images(&y, &x, &p).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn psnr_is_infinite_only_for_identical_images(x in image(), y in image()) {
        prop_assert_eq!(psnr(&x, &x, PEAK).unwrap(), Psnr::INFINITE);
        let p = psnr(&x, &y, PEAK).unwrap();
        prop_assert_eq!(p.finite().is_none(), x == y);
    }

    #[test]
    fn split_seeds_never_collide(base in 0u64..1 << 20, i in 0usize..1 << 20, j in 0usize..1 << 20) {
        let seeds = Split::ALL.map(|s| s.seed(base, i));
        prop_assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
        prop_assert_eq!(Split::Train.seed(base, i) == Split::Train.seed(base, j), i == j);
        prop_assert_ne!(Split::Val.seed(base, i), Split::Test.seed(base, j));
    }

    #[test]
    fn resolved_configs_round_trip(n in 16usize..128, few in 1usize..60, filters in 1usize..64, seed in any::<u64>(), lr in 1e-6f64..1.0) {
        let text = format!("seed = {seed}\n[geometry]\nn = {n}\nnv_few = {few}\n[model]\nunet_filters = {filters}\n[optim]\nlr_base = {lr:e}\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(cfg.hash(), again.hash());
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(cfg.geometry().unwrap().nv_dense, 2 * few);
    }
}
