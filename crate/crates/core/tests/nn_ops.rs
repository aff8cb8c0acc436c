use bodycomp::nn::ops;
use bodycomp::Tensor5;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Zero-padded "same" cross-correlation, straight from the definition.
fn conv_oracle(x: &Tensor5<f64>, w: &[f64], b: &[f64], c_out: usize, k: usize) -> Tensor5<f64> {
    let [n, c_in, d, h, wd] = x.shape();
    let p = (k / 2) as isize;
    let mut out = Tensor5::zeros([n, c_out, d, h, wd]);
    for ni in 0..n {
        for co in 0..c_out {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let zi = z as isize + kz as isize - p;
                                        let yi = y as isize + ky as isize - p;
                                        let xi = xx as isize + kx as isize - p;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= wd as isize {
                                            continue;
                                        }
                                        let wi = (((co * c_in + ci) * k + kz) * k + ky) * k + kx;
                                        acc += w[wi] * x.get([ni, ci, zi as usize, yi as usize, xi as usize]);
                                    }
                                }
                            }
                        }
                        out.set([ni, co, z, y, xx], acc);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `Σ dout · conv(x)` by direct accumulation over every tap.
fn conv_backward_oracle(
    x: &Tensor5<f64>,
    w: &[f64],
    c_out: usize,
    k: usize,
    dout: &Tensor5<f64>,
) -> (Tensor5<f64>, Vec<f64>, Vec<f64>) {
    let [n, c_in, d, h, wd] = x.shape();
    let p = (k / 2) as isize;
    let mut dx = Tensor5::zeros(x.shape());
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_out];
    for ni in 0..n {
        for co in 0..c_out {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let g = dout.get([ni, co, z, y, xx]);
                        db[co] += g;
                        for ci in 0..c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let zi = z as isize + kz as isize - p;
                                        let yi = y as isize + ky as isize - p;
                                        let xi = xx as isize + kx as isize - p;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= wd as isize {
                                            continue;
                                        }
                                        let idx = [ni, ci, zi as usize, yi as usize, xi as usize];
                                        let wi = (((co * c_in + ci) * k + kz) * k + ky) * k + kx;
                                        dw[wi] += g * x.get(idx);
                                        let v = dx.get(idx) + g * w[wi];
                                        dx.set(idx, v);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> ([usize; 5], usize, usize) {
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=6),
        rng.random_range(1..=7),
    ];
    let c_out = rng.random_range(1..=4);
    let k = if rng.random_bool(0.7) { 3 } else { 1 };
    (shape, c_out, k)
}

#[test]
fn conv_forward_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let (shape, c_out, k) = random_conv_case(&mut rng);
        let x = random_tensor(shape, &mut rng);
        let w = random_vec(c_out * shape[1] * k * k * k, &mut rng);
        let b = random_vec(c_out, &mut rng);
        let got = ops::conv3d_forward(&x, &w, &b, c_out, k).unwrap();
        let want = conv_oracle(&x, &w, &b, c_out, k);
        assert!(got.max_abs_diff(&want) < 1e-12, "shape {shape:?} k {k}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn conv_forward_large_plane_uses_chunked_path() {
    // Enough columns to exceed one im2col chunk.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [1, 2, 12, 64, 64];
    let x = random_tensor(shape, &mut rng);
    let w = random_vec(3 * 2 * 27, &mut rng);
    let b = random_vec(3, &mut rng);
    let got = ops::conv3d_forward(&x, &w, &b, 3, 3).unwrap();
    let want = conv_oracle(&x, &w, &b, 3, 3);
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv_backward_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..25 {
        let (shape, c_out, k) = random_conv_case(&mut rng);
        let c_in = shape[1];
        let x = random_tensor(shape, &mut rng);
        let w = random_vec(c_out * c_in * k * k * k, &mut rng);
        let dout = random_tensor([shape[0], c_out, shape[2], shape[3], shape[4]], &mut rng);
        let mut dx = Tensor5::zeros(shape);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; c_out];
        ops::conv3d_backward(&x, &w, c_out, k, &dout, Some(&mut dx), &mut dw, &mut db).unwrap();
        let (ox, ow, ob) = conv_backward_oracle(&x, &w, c_out, k, &dout);
        assert!(dx.max_abs_diff(&ox) < 1e-12, "dx {shape:?} k {k}");
        assert!(max_diff(&dw, &ow) < 1e-11, "dw {shape:?} k {k}");
        assert!(max_diff(&db, &ob) < 1e-12, "db {shape:?} k {k}");
    }
}

#[test]
fn conv_backward_accumulates_into_existing_buffers() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = [1, 2, 3, 4, 5];
    let x = random_tensor(shape, &mut rng);
    let w = random_vec(2 * 2 * 27, &mut rng);
    let dout = random_tensor([1, 2, 3, 4, 5], &mut rng);
    let mut dx = Tensor5::full(shape, 1.0);
    let mut dw = vec![1.0; w.len()];
    let mut db = vec![1.0; 2];
    ops::conv3d_backward(&x, &w, 2, 3, &dout, Some(&mut dx), &mut dw, &mut db).unwrap();
    let (ox, ow, ob) = conv_backward_oracle(&x, &w, 2, 3, &dout);
    assert!(dx.data().iter().zip(ox.data()).all(|(a, b)| (a - 1.0 - b).abs() < 1e-12));
    assert!(dw.iter().zip(&ow).all(|(a, b)| (a - 1.0 - b).abs() < 1e-11));
    assert!(db.iter().zip(&ob).all(|(a, b)| (a - 1.0 - b).abs() < 1e-12));
}

fn dot(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), c in 1usize..7, s in 1usize..20, scale in 0.1f64..80.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_tensor([1, c, 1, 1, s], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let y = ops::softmax_forward(&x);
        for v in 0..s {
            let total: f64 = (0..c).map(|ci| y.get([0, ci, 0, 0, v])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!((0..c).all(|ci| y.get([0, ci, 0, 0, v]) >= 0.0));
        }
    }

    #[test]
    fn upsample_backward_is_adjoint(seed in any::<u64>(), d in 1usize..4, h in 1usize..5, w in 1usize..5, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([1, c, d, h, w], &mut rng);
        let g = random_tensor([1, c, 2 * d, 2 * h, 2 * w], &mut rng);
        let mut gx = Tensor5::zeros(x.shape());
        ops::upsample_backward(&g, &mut gx);
        let lhs = dot(&ops::upsample_forward(&x), &g);
        let rhs = dot(&x, &gx);
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn upsample_preserves_constants(v in -5.0f64..5.0, d in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let y = ops::upsample_forward(&Tensor5::full([1, 1, d, h, w], v));
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }

    #[test]
    fn maxpool_picks_block_maximum(seed in any::<u64>(), d in 1usize..3, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([1, 2, 2 * d, 2 * h, 2 * w], &mut rng);
        let (y, arg) = ops::maxpool_forward(&x).unwrap();
        for c in 0..2 {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut m = f64::NEG_INFINITY;
                        for dz in 0..2 { for dy in 0..2 { for dx in 0..2 {
                            m = m.max(x.get([0, c, 2 * z + dz, 2 * yy + dy, 2 * xx + dx]));
                        }}}
                        prop_assert_eq!(y.get([0, c, z, yy, xx]), m);
                    }
                }
            }
        }
        prop_assert!(arg.iter().zip(y.data()).all(|(&a, &v)| x.data()[a as usize] == v));
    }

    #[test]
    fn instance_norm_standardizes_each_channel(seed in any::<u64>(), c in 1usize..4, s in 8usize..40, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_tensor([2, c, 1, 1, s], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + shift);
        let (y, _) = ops::instance_norm_forward(&x, &vec![1.0; c], &vec![0.0; c], 0.0).unwrap();
        for n in 0..2 {
            for ci in 0..c {
                let ch = y.channel(n, ci);
                let mean = ch.iter().sum::<f64>() / s as f64;
                let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relu_is_idempotent_and_nonnegative(seed in any::<u64>(), s in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([1, 1, 1, 1, s], &mut rng);
        let y = ops::relu_forward(&x);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(ops::relu_forward(&y), y);
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, 2, 3, 4, 4];
        let x1 = random_tensor(shape, &mut rng);
        let x2 = random_tensor(shape, &mut rng);
        let w = random_vec(3 * 2 * 27, &mut rng);
        let zero = vec![0.0; 3];
        let mut mix = x1.clone();
        mix.data_mut().iter_mut().zip(x2.data()).for_each(|(u, v)| *u = a * *u + v);
        let lhs = ops::conv3d_forward(&mix, &w, &zero, 3, 3).unwrap();
        let mut rhs = ops::conv3d_forward(&x1, &w, &zero, 3, 3).unwrap();
        rhs.data_mut().iter_mut().for_each(|v| *v *= a);
        rhs.add_assign(&ops::conv3d_forward(&x2, &w, &zero, 3, 3).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
