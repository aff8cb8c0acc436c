use bodycomp::inference::{
    accumulated_weights, argmax_labels, ensemble_predict, predict_volume, sliding_window_predict, slab_weights, window_starts,
    SlabWeighting, SlidingWindowOptions,
};
use bodycomp::models::{ArchitectureSpec, Model, Variant};
use bodycomp::nn::ops;
use bodycomp::phantom::{generate_phantom, PhantomSpec};
use bodycomp::preproc::window_preset;
use bodycomp::{BodyRegionLabel as L, Tensor5};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant, seed: u64) -> Model<f32> {
    Model::build(ArchitectureSpec::new(variant, 2).with_levels(3), seed).unwrap()
}

fn random_input(shape: [usize; 5], seed: u64) -> Tensor5<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn opts(window: usize) -> SlidingWindowOptions {
    SlidingWindowOptions {
        window,
        ..SlidingWindowOptions::default()
    }
}

#[test]
fn single_window_equals_direct_forward() {
    for variant in [Variant::Unet3d, Variant::MultiresUnet3d] {
        let m = tiny(variant, 1);
        let x = random_input([1, 3, 8, 12, 12], 2);
        let direct = ops::softmax_forward(&m.predict(&x).unwrap());
        let slid = sliding_window_predict(&m, &x, &opts(8)).unwrap();
        assert!(slid.max_abs_diff(&direct) < 1e-6, "{variant}: {}", slid.max_abs_diff(&direct));
    }
}

/// Coverage weight per slice, enumerating windows one by one.
fn coverage_oracle(nz: usize, w: usize, overlap: f64) -> Vec<f64> {
    let tent: Vec<f64> = (0..w).map(|i| (i + 1).min(w - i) as f64).collect();
    if nz <= w {
        let pad = (w - nz) / 2;
        return (0..nz).map(|z| tent[z + pad]).collect();
    }
    let stride = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + w <= nz {
        starts.push(s);
        s += stride;
    }
    if *starts.last().unwrap() + w != nz {
        starts.push(nz - w);
    }
    let mut acc = vec![0.0; nz];
    for s in starts {
        for (i, t) in tent.iter().enumerate() {
            acc[s + i] += t;
        }
    }
    acc
}

#[test]
fn every_slice_receives_positive_weight() {
    for nz in [1, 31, 32, 33, 44, 64] {
        let got = accumulated_weights(nz, 32, 0.75, SlabWeighting::Tent);
        let want = coverage_oracle(nz, 32, 0.75);
        assert_eq!(got.len(), nz);
        assert!(got.iter().all(|&w| w > 0.0), "nz {nz}");
        assert_eq!(got, want, "nz {nz}");
        let g = accumulated_weights(nz, 32, 0.75, SlabWeighting::Gaussian { sigma: 0.125 });
        assert!(g.iter().all(|&w| w > 0.0), "gaussian nz {nz}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn windows_cover_volume_and_end_flush(nz in 1usize..200, w in 1usize..40, overlap in 0.0f64..0.95) {
        let starts = window_starts(nz, w, overlap);
        prop_assert_eq!(starts[0], 0);
        prop_assert!(starts.windows(2).all(|p| p[0] < p[1]));
        if nz > w {
            prop_assert_eq!(*starts.last().unwrap() + w, nz);
            prop_assert!(starts.windows(2).all(|p| p[1] - p[0] <= w));
        }
        prop_assert!(accumulated_weights(nz, w, overlap, SlabWeighting::Tent).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn slab_weights_are_symmetric_and_peak_in_the_middle(w in 1usize..64, sigma in 0.05f64..1.0) {
        for weighting in [SlabWeighting::Tent, SlabWeighting::Gaussian { sigma }] {
            let v = slab_weights(w, weighting);
            prop_assert!(v.iter().all(|&x| x > 0.0));
            for i in 0..w {
                prop_assert!((v[i] - v[w - 1 - i]).abs() < 1e-12);
            }
            for i in 1..w.div_ceil(2) {
                prop_assert!(v[i] >= v[i - 1]);
            }
        }
    }
}

#[test]
fn output_is_normalized_with_padding_and_overlap() {
    let m = tiny(Variant::MultiresUnet3d, 4);
    // 13 slices with window 8: three overlapping slabs; 10×6 padded to 12×8.
    let x = random_input([1, 3, 13, 10, 6], 5);
    for weighting in [SlabWeighting::Tent, SlabWeighting::Gaussian { sigma: 0.25 }] {
        let o = SlidingWindowOptions { window: 8, overlap: 0.5, weighting };
        let p = sliding_window_predict(&m, &x, &o).unwrap();
        assert_eq!(p.shape(), [1, 6, 13, 10, 6]);
        let s = p.spatial();
        for v in 0..s {
            let total: f64 = (0..6).map(|c| p.channel(0, c)[v] as f64).sum();
            assert!((total - 1.0).abs() < 1e-5, "{total}");
        }
    }
    // Fewer slices than the window.
    let short = random_input([1, 3, 3, 8, 8], 6);
    let p = sliding_window_predict(&m, &short, &opts(8)).unwrap();
    assert_eq!(p.shape(), [1, 6, 3, 8, 8]);
}

#[test]
fn ensemble_of_identical_models_equals_single_model() {
    let m = tiny(Variant::Unet3d, 7);
    let x = random_input([1, 3, 12, 8, 8], 8);
    let o = opts(8);
    let one = sliding_window_predict(&m, &x, &o).unwrap();
    let three = ensemble_predict(&[m.clone(), m.clone(), m], &x, &o).unwrap();
    assert!(three.max_abs_diff(&one) < 1e-7);
}

#[test]
fn ensemble_is_mean_of_members() {
    let a = tiny(Variant::Unet3d, 9);
    let b = tiny(Variant::Unet3d, 10);
    let x = random_input([1, 3, 12, 8, 8], 11);
    let o = opts(8);
    let pa = sliding_window_predict(&a, &x, &o).unwrap();
    let pb = sliding_window_predict(&b, &x, &o).unwrap();
    let pe = ensemble_predict(&[a, b], &x, &o).unwrap();
    for ((e, u), v) in pe.data().iter().zip(pa.data()).zip(pb.data()) {
        assert!((e - 0.5 * (u + v)).abs() < 1e-6);
    }
}

#[test]
fn ensemble_rejects_empty_and_mixed_members() {
    let x = random_input([1, 3, 8, 8, 8], 0);
    assert!(ensemble_predict(&[], &x, &opts(8)).is_err());
    let mixed = [tiny(Variant::Unet3d, 0), tiny(Variant::MultiresUnet3d, 0)];
    assert!(ensemble_predict(&mixed, &x, &opts(8)).is_err());
    assert!(sliding_window_predict(&mixed[0], &x, &opts(6)).is_err());
}

#[test]
fn zero_head_predicts_uniform_distribution() {
    let mut m = tiny(Variant::MultiresUnet3d, 12);
    m.zero_head();
    let x = random_input([1, 3, 20, 8, 8], 13);
    let p = sliding_window_predict(&m, &x, &opts(8)).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-6));
}

#[test]
fn predicted_labels_cover_grid_and_never_ignore() {
    let ph = generate_phantom(&PhantomSpec::sampled(2, 6, 48)).unwrap();
    let models = [tiny(Variant::Unet3d, 14)];
    let windows = window_preset("multi").unwrap();
    let probs = predict_volume(&models, &ph.hu, &windows, 2, &opts(8)).unwrap();
    assert_eq!(probs.dims().as_array(), [6, 24, 24]);
    assert!(probs.max_normalization_error() < 1e-5);
    let labels = argmax_labels(&probs);
    assert_eq!(labels.dims(), probs.dims());
    assert!(labels.data().iter().all(|&l| l != L::Ignore));
}
