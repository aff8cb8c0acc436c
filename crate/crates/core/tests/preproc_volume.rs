use bodycomp::preproc::{
    augment_flip_x, augment_sample, downscale_labels_xy, downscale_xy, multi_window_stack, sample_augmentation_params,
    window_preset, AugmentToggles, CropSize, HuWindow,
};
use bodycomp::volume::{decode_volume, encode_volume, AnyVolume};
use bodycomp::{BodyRegionLabel as L, Dims, HuVolume, LabelVolume, Spacing, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(seed: u64, d: Dims) -> (HuVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Spacing::new(3.0, 0.8, 0.8).unwrap();
    let hu = (0..d.len()).map(|_| rng.random_range(-1100.0f32..1500.0)).collect();
    let lab = (0..d.len()).map(|_| L::CLASSES[rng.random_range(0..6)]).collect();
    (Volume::from_hu(d, s, hu).unwrap(), Volume::new(d, s, lab).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_output_is_clipped_and_monotone(lo in -1500.0f32..500.0, width in 1.0f32..3000.0, a in -3000.0f32..3000.0, b in -3000.0f32..3000.0) {
        let w = HuWindow::new(lo, lo + width).unwrap();
        let (fa, fb) = (w.apply(a), w.apply(b));
        prop_assert!((-1.0..=1.0).contains(&fa));
        if a <= b {
            prop_assert!(fa <= fb);
        }
        prop_assert_eq!(w.apply(lo - 1.0), -1.0);
        prop_assert_eq!(w.apply(lo + width + 1.0), 1.0);
    }

    #[test]
    fn stack_has_one_channel_per_window(seed in any::<u64>(), nz in 1usize..4, n in 1usize..6) {
        let (hu, _) = random_pair(seed, Dims::new(nz, n, n));
        let windows = window_preset("multi").unwrap();
        let t = multi_window_stack(&hu, &windows).unwrap();
        prop_assert_eq!(t.shape(), [1, 3, nz, n, n]);
        for (c, w) in windows.iter().enumerate() {
            prop_assert!(t.channel(0, c).iter().zip(hu.data()).all(|(&o, &v)| o == w.apply(v)));
        }
    }

    #[test]
    fn downscale_preserves_mean_and_scales_spacing(seed in any::<u64>(), f in 1usize..4, b in 1usize..5) {
        let d = Dims::new(2, f * b, f * (b + 1));
        let (hu, lab) = random_pair(seed, d);
        let small = downscale_xy(&hu, f).unwrap();
        prop_assert_eq!(small.dims(), Dims::new(2, b, b + 1));
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        prop_assert!((mean(small.data()) - mean(hu.data())).abs() < 1e-3);
        prop_assert!((small.spacing().y_mm - 0.8 * f as f64).abs() < 1e-12);
        prop_assert_eq!(small.spacing().z_mm, 3.0);
        let sl = downscale_labels_xy(&lab, f).unwrap();
        prop_assert_eq!(sl.dims(), small.dims());
        // Every output label occurs in its source block.
        for z in 0..2 { for y in 0..b { for x in 0..b + 1 {
            let l = sl.get(z, y, x);
            let found = (0..f).any(|dy| (0..f).any(|dx| lab.get(z, y * f + dy, x * f + dx) == l));
            prop_assert!(found);
        }}}
    }

    #[test]
    fn flip_twice_is_identity(seed in any::<u64>(), nz in 1usize..3, ny in 1usize..6, nx in 1usize..7) {
        let (hu, lab) = random_pair(seed, Dims::new(nz, ny, nx));
        let (h1, l1) = augment_flip_x(&hu, &lab).unwrap();
        prop_assert_eq!(h1.get(0, 0, 0), hu.get(0, 0, nx - 1));
        let (h2, l2) = augment_flip_x(&h1, &l1).unwrap();
        prop_assert_eq!(h2, hu);
        prop_assert_eq!(l2, lab);
    }

    #[test]
    fn augmented_sample_has_crop_shape_and_known_labels(seed in any::<u64>(), nz in 2usize..8, n in 8usize..24) {
        let (hu, lab) = random_pair(seed, Dims::new(nz, n, n));
        let crop = CropSize { d: 4, h: 8, w: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_augmentation_params(&mut rng, hu.dims(), crop, AugmentToggles::default());
        prop_assert!((0.8..=1.2).contains(&p.scale_x) && (0.8..=1.2).contains(&p.scale_y));
        let (img, l) = augment_sample(&hu, &lab, &p, crop).unwrap();
        prop_assert_eq!(img.dims(), Dims::new(4, 8, 8));
        prop_assert_eq!(l.dims(), img.dims());
        prop_assert!(l.data().iter().all(|x| x.is_ignore() || lab.data().contains(x)));
        // Padded depth is marked Ignore and air.
        if nz < 4 {
            let pad = (4 - nz) / 2;
            for z in (0..pad).chain(pad + nz..4) {
                prop_assert!(l.slice(z).iter().all(|x| x.is_ignore()));
                prop_assert!(img.slice(z).iter().all(|&v| v == -1024.0));
            }
        }
    }

    #[test]
    fn volume_codec_round_trips(seed in any::<u64>(), nz in 1usize..4, ny in 1usize..5, nx in 1usize..5) {
        let (hu, lab) = random_pair(seed, Dims::new(nz, ny, nx));
        let bytes = encode_volume(&hu).unwrap();
        match decode_volume(&bytes).unwrap() {
            AnyVolume::Hu(v) => prop_assert_eq!(v, hu),
            _ => prop_assert!(false, "wrong kind"),
        }
        let bytes = encode_volume(&lab).unwrap();
        prop_assert_eq!(&bytes[..8], b"VBCVOL01");
        match decode_volume(&bytes).unwrap() {
            AnyVolume::Label(v) => prop_assert_eq!(v, lab),
            _ => prop_assert!(false, "wrong kind"),
        }
    }
}
