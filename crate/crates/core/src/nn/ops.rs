//! Forward and backward kernels of the layer set.
//!
//! Every backward function is the exact adjoint of its forward; gradients
//! are accumulated (`+=`) into caller-provided buffers.

use crate::error::{Error, Result};

use super::{Real, Tensor5};

/// Upper bound on im2col buffer elements; larger convolutions are chunked
/// along z.
const IM2COL_LIMIT: usize = 1 << 20;

fn check_conv(x: &Tensor5<impl Real>, w_len: usize, b_len: usize, c_out: usize, k: usize) -> Result<()> {
    if k != 1 && k != 3 {
        return Err(Error::Invalid(format!("unsupported kernel size {k}")));
    }
    let expect = c_out * x.c() * k * k * k;
    if w_len != expect || b_len != c_out {
        return Err(Error::Shape(format!(
            "conv weights {w_len} / bias {b_len} do not fit {}->{c_out} k={k}",
            x.c()
        )));
    }
    Ok(())
}

fn chunk_planes(k_rows: usize, plane: usize, depth: usize) -> usize {
    (IM2COL_LIMIT / (k_rows * plane).max(1)).clamp(1, depth)
}

/// Lays out the 27 shifted copies of each input channel for z in `z0..z1`.
/// `cols` has `c_in * 27` rows of `(z1 - z0) * h * w` columns.
fn im2col<T: Real>(x: &[T], c_in: usize, [d, h, w]: [usize; 3], z0: usize, z1: usize, cols: &mut [T]) {
    let plane = h * w;
    let vol = d * plane;
    let nc = (z1 - z0) * plane;
    let zero = T::zero();
    for ci in 0..c_in {
        let xc = &x[ci * vol..(ci + 1) * vol];
        for t in 0..27 {
            let (kz, ky, kx) = (t / 9, (t / 3) % 3, t % 3);
            let row = &mut cols[(ci * 27 + t) * nc..(ci * 27 + t + 1) * nc];
            for z in z0..z1 {
                let sz = z as isize + kz as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[((z - z0) * h + y) * w..((z - z0) * h + y + 1) * w];
                    if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                        dst.fill(zero);
                        continue;
                    }
                    let s0 = sz as usize * plane + sy as usize * w;
                    let src = &xc[s0..s0 + w];
                    match kx {
                        0 => {
                            dst[0] = zero;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = zero;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution (cross-correlation) with kernel `k ∈ {1, 3}`.
/// Weights are laid out `(c_out, c_in, k, k, k)`.
pub fn conv3d_forward<T: Real>(x: &Tensor5<T>, weight: &[T], bias: &[T], c_out: usize, k: usize) -> Result<Tensor5<T>> {
    check_conv(x, weight.len(), bias.len(), c_out, k)?;
    let [n, c_in, d, h, w] = x.shape();
    let s = d * h * w;
    let mut out = Tensor5::zeros([n, c_out, d, h, w]);
    if s == 0 {
        return Ok(out);
    }
    for ni in 0..n {
        let xs = x.sample(ni);
        let os = out.sample_mut(ni);
        for (co, &b) in bias.iter().enumerate() {
            os[co * s..(co + 1) * s].fill(b);
        }
        if k == 1 {
            T::gemm(c_out, c_in, s, T::one(), weight, (c_in, 1), xs, (s, 1), T::one(), os, (s, 1));
            continue;
        }
        let kr = c_in * 27;
        let plane = h * w;
        let step = chunk_planes(kr, plane, d);
        let mut cols = vec![T::zero(); kr * step * plane];
        let mut z0 = 0;
        while z0 < d {
            let z1 = (z0 + step).min(d);
            let nc = (z1 - z0) * plane;
            im2col(xs, c_in, [d, h, w], z0, z1, &mut cols[..kr * nc]);
            T::gemm(
                c_out,
                kr,
                nc,
                T::one(),
                weight,
                (kr, 1),
                &cols[..kr * nc],
                (nc, 1),
                T::one(),
                &mut os[z0 * plane..],
                (s, 1),
            );
            z0 = z1;
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`]. `dx` is skipped when `None`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor5<T>,
    weight: &[T],
    c_out: usize,
    k: usize,
    dout: &Tensor5<T>,
    dx: Option<&mut Tensor5<T>>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Result<()> {
    check_conv(x, weight.len(), dbias.len(), c_out, k)?;
    let [n, c_in, d, h, w] = x.shape();
    if dout.shape() != [n, c_out, d, h, w] || dweight.len() != weight.len() {
        return Err(Error::Shape("conv backward buffers do not match".into()));
    }
    let s = d * h * w;
    let mut dx = dx;
    for ni in 0..n {
        let xs = x.sample(ni);
        let gs = dout.sample(ni);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += gs[co * s..(co + 1) * s].iter().copied().sum::<T>();
        }
        if k == 1 {
            // dW (c_out×c_in) += dOut (c_out×s) · Xᵀ (s×c_in)
            T::gemm(c_out, s, c_in, T::one(), gs, (s, 1), xs, (1, s), T::one(), dweight, (c_in, 1));
            if let Some(dx) = dx.as_deref_mut() {
                // dX (c_in×s) += Wᵀ (c_in×c_out) · dOut (c_out×s)
                T::gemm(c_in, c_out, s, T::one(), weight, (1, c_in), gs, (s, 1), T::one(), dx.sample_mut(ni), (s, 1));
            }
            continue;
        }
        let kr = c_in * 27;
        let plane = h * w;
        let step = chunk_planes(kr, plane, d);
        let mut cols = vec![T::zero(); kr * step * plane];
        let mut z0 = 0;
        while z0 < d {
            let z1 = (z0 + step).min(d);
            let nc = (z1 - z0) * plane;
            let g = &gs[z0 * plane..];
            im2col(xs, c_in, [d, h, w], z0, z1, &mut cols[..kr * nc]);
            // dW[co, r] += dOut_chunk[co] · cols[r]
            for (r, row) in cols[..kr * nc].chunks_exact(nc).enumerate() {
                for co in 0..c_out {
                    dweight[co * kr + r] += dot(&g[co * s..co * s + nc], row);
                }
            }
            z0 = z1;
        }
    }
    if k == 3 {
        if let Some(dx) = dx {
            // The adjoint of a zero-padded "same" correlation is the same
            // correlation with the kernel flipped and channels transposed.
            let flipped = flip_transpose(weight, c_out, c_in);
            let zero_bias = vec![T::zero(); c_in];
            dx.add_assign(&conv3d_forward(dout, &flipped, &zero_bias, c_in, 3)?);
        }
    }
    Ok(())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `(c_out, c_in, 27)` → `(c_in, c_out, 27)` with the taps reversed.
fn flip_transpose<T: Real>(weight: &[T], c_out: usize, c_in: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..27 {
                out[(ci * c_out + co) * 27 + 26 - t] = weight[(co * c_in + ci) * 27 + t];
            }
        }
    }
    out
}

/// 2×2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the flat input offset of the (first) maximum.
pub fn maxpool_forward<T: Real>(x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<u32>)> {
    let [n, c, d, h, w] = x.shape();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool needs even spatial dims, got {:?}", [d, h, w])));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor5::zeros([n, c, od, oh, ow]);
    let mut arg = Vec::with_capacity(out.len());
    let src = x.data();
    let mut oi = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo;
                            for off in row..row + 2 {
                                if src[off] > src[best] {
                                    best = off;
                                }
                            }
                        }
                    }
                    out.data_mut()[oi] = src[best];
                    arg.push(best as u32);
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward<T: Real>(dout: &Tensor5<T>, argmax: &[u32], dx: &mut Tensor5<T>) {
    let g = dx.data_mut();
    for (&a, &v) in argmax.iter().zip(dout.data()) {
        g[a as usize] += v;
    }
}

/// ×2 linear upsampling of the middle axis of an `[outer, len, inner]` layout
/// with half-pixel centers and edge clamping.
fn upsample_axis<T: Real>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let (q, tq) = (T::of(0.25), T::of(0.75));
    let mut out = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let s = &src[o * len * inner..(o + 1) * len * inner];
        let d = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for i in 0..len {
            let prev = &s[i.saturating_sub(1) * inner..][..inner];
            let cur = &s[i * inner..][..inner];
            let next = &s[(i + 1).min(len - 1) * inner..][..inner];
            let (lo, hi) = d[2 * i * inner..(2 * i + 2) * inner].split_at_mut(inner);
            for j in 0..inner {
                lo[j] = q * prev[j] + tq * cur[j];
                hi[j] = tq * cur[j] + q * next[j];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`].
fn upsample_axis_adjoint<T: Real>(g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let (q, tq) = (T::of(0.25), T::of(0.75));
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let gs = &g[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let d = &mut out[o * len * inner..(o + 1) * len * inner];
        for i in 0..len {
            let lo = &gs[2 * i * inner..][..inner];
            let hi = &gs[(2 * i + 1) * inner..][..inner];
            let (pi, ni) = (i.saturating_sub(1), (i + 1).min(len - 1));
            for j in 0..inner {
                d[pi * inner + j] += q * lo[j];
                d[i * inner + j] += tq * (lo[j] + hi[j]);
                d[ni * inner + j] += q * hi[j];
            }
        }
    }
    out
}

/// Trilinear ×2 upsampling (half-pixel centers, clamped edges).
pub fn upsample_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let [n, c, d, h, w] = x.shape();
    let a = upsample_axis(x.data(), n * c, d, h * w);
    let b = upsample_axis(&a, n * c * 2 * d, h, w);
    let out = upsample_axis(&b, n * c * 2 * d * 2 * h, w, 1);
    Tensor5::from_vec([n, c, 2 * d, 2 * h, 2 * w], out).expect("upsample shape")
}

pub fn upsample_backward<T: Real>(dout: &Tensor5<T>, dx: &mut Tensor5<T>) {
    let [n, c, d, h, w] = dx.shape();
    let gw = upsample_axis_adjoint(dout.data(), n * c * 2 * d * 2 * h, w, 1);
    let gh = upsample_axis_adjoint(&gw, n * c * 2 * d, h, w);
    let gd = upsample_axis_adjoint(&gh, n * c, d, h * w);
    for (a, b) in dx.data_mut().iter_mut().zip(gd) {
        *a += b;
    }
}

/// Saved statistics of an instance-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per (sample, channel) standardization over the spatial axes followed by a
/// per-channel affine map.
pub fn instance_norm_forward<T: Real>(x: &Tensor5<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<(Tensor5<T>, NormCache<T>)> {
    let [n, c, ..] = x.shape();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("norm params for {} channels, input has {c}", gamma.len())));
    }
    let s = x.spatial();
    let mut y = Tensor5::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.channel(ni, ci);
            let mean = src.iter().map(|v| v.f64()).sum::<f64>() / s as f64;
            let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / s as f64;
            let istd = 1.0 / (var + eps).sqrt();
            let (mean_t, istd_t) = (T::of(mean), T::of(istd));
            let off = (ni * c + ci) * s;
            let xh = &mut xhat[off..off + s];
            let dst = y.channel_mut(ni, ci);
            for ((o, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                *h = (v - mean_t) * istd_t;
                *o = gamma[ci] * *h + beta[ci];
            }
            inv_std.push(istd_t);
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

pub fn instance_norm_backward<T: Real>(
    dout: &Tensor5<T>,
    cache: &NormCache<T>,
    gamma: &[T],
    dx: Option<&mut Tensor5<T>>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let [n, c, ..] = dout.shape();
    let s = dout.spatial();
    let mut dx = dx;
    for ni in 0..n {
        for ci in 0..c {
            let g = dout.channel(ni, ci);
            let off = (ni * c + ci) * s;
            let xh = &cache.xhat[off..off + s];
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for (&gv, &h) in g.iter().zip(xh) {
                sum_g += gv.f64();
                sum_gx += (gv * h).f64();
            }
            dgamma[ci] += T::of(sum_gx);
            dbeta[ci] += T::of(sum_g);
            if let Some(dx) = dx.as_deref_mut() {
                // dx = γ·istd/M · (M·g − Σg − x̂·Σ(g·x̂))
                let m = s as f64;
                let scale = T::of(gamma[ci].f64() * cache.inv_std[ni * c + ci].f64() / m);
                let (mt, sg, sgx) = (T::of(m), T::of(sum_g), T::of(sum_gx));
                for ((d, &gv), &h) in dx.channel_mut(ni, ci).iter_mut().zip(g).zip(xh) {
                    *d += scale * (mt * gv - sg - h * sgx);
                }
            }
        }
    }
}

pub fn relu_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let zero = T::zero();
    Tensor5::from_vec(x.shape(), x.data().iter().map(|&v| if v > zero { v } else { zero }).collect())
        .expect("relu shape")
}

/// Uses the forward output: gradient passes where `y > 0` (subgradient 0 at 0).
pub fn relu_backward<T: Real>(y: &Tensor5<T>, dout: &Tensor5<T>, dx: &mut Tensor5<T>) {
    let zero = T::zero();
    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dout.data()).zip(y.data()) {
        if v > zero {
            *d += g;
        }
    }
}

/// Channel concatenation; `a` occupies the leading channels.
pub fn concat_forward<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let [na, ca, da, ha, wa] = a.shape();
    let [nb, cb, db, hb, wb] = b.shape();
    if (na, da, ha, wa) != (nb, db, hb, wb) {
        return Err(Error::Shape(format!("concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut out = Tensor5::zeros([na, ca + cb, da, ha, wa]);
    let (sa, sb) = (a.sample(0).len(), if nb > 0 { b.sample(0).len() } else { 0 });
    for ni in 0..na {
        let dst = out.sample_mut(ni);
        dst[..sa].copy_from_slice(a.sample(ni));
        dst[sa..sa + sb].copy_from_slice(b.sample(ni));
    }
    Ok(out)
}

pub fn concat_backward<T: Real>(dout: &Tensor5<T>, da: Option<&mut Tensor5<T>>, db: Option<&mut Tensor5<T>>, ca: usize) {
    let n = dout.n();
    let s = dout.spatial();
    let split = ca * s;
    if let Some(da) = da {
        for ni in 0..n {
            for (d, &g) in da.sample_mut(ni).iter_mut().zip(&dout.sample(ni)[..split]) {
                *d += g;
            }
        }
    }
    if let Some(db) = db {
        for ni in 0..n {
            for (d, &g) in db.sample_mut(ni).iter_mut().zip(&dout.sample(ni)[split..]) {
                *d += g;
            }
        }
    }
}

pub fn add_forward<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Numerically stable softmax over the channel axis.
pub fn softmax_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let [n, c, ..] = x.shape();
    let s = x.spatial();
    let mut out = Tensor5::zeros(x.shape());
    let mut buf = vec![0.0f64; c];
    for ni in 0..n {
        let src = x.sample(ni);
        let dst = out.sample_mut(ni);
        for v in 0..s {
            let max = (0..c).map(|ci| src[ci * s + v].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ci, b) in buf.iter_mut().enumerate() {
                *b = (src[ci * s + v].f64() - max).exp();
                sum += *b;
            }
            for (ci, b) in buf.iter().enumerate() {
                dst[ci * s + v] = T::of(b / sum);
            }
        }
    }
    out
}

/// `dx_c = y_c · (g_c − Σ_k y_k g_k)`, using the forward output `y`.
pub fn softmax_backward<T: Real>(y: &Tensor5<T>, dout: &Tensor5<T>, dx: &mut Tensor5<T>) {
    let [n, c, ..] = y.shape();
    let s = y.spatial();
    for ni in 0..n {
        let ys = y.sample(ni);
        let gs = dout.sample(ni);
        let ds = dx.sample_mut(ni);
        for v in 0..s {
            let dot: f64 = (0..c).map(|ci| (ys[ci * s + v] * gs[ci * s + v]).f64()).sum();
            let dot = T::of(dot);
            for ci in 0..c {
                let i = ci * s + v;
                ds[i] += ys[i] * (gs[i] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 5], f: impl Fn(usize) -> f64) -> Tensor5<f64> {
        let n: usize = shape.iter().product();
        Tensor5::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn conv_scalar_affine() {
        let x = t([1, 1, 1, 1, 1], |_| 2.0);
        let y = conv3d_forward(&x, &[3.0], &[1.0], 1, 1).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = t([1, 1, 3, 4, 5], |i| (i as f64 * 0.7).cos());
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let y = conv3d_forward(&x, &w, &[0.0], 1, 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_kernel_and_channels() {
        let x = t([1, 2, 2, 2, 2], |_| 1.0);
        assert!(conv3d_forward(&x, &[0.0; 2 * 125], &[0.0], 1, 5).is_err());
        assert!(conv3d_forward(&x, &[0.0; 27], &[0.0], 1, 3).is_err());
    }

    #[test]
    fn conv_chunked_matches_single_chunk() {
        // Large enough plane that the im2col buffer is split along z.
        let x = Tensor5::<f32>::from_vec(
            [1, 2, 6, 256, 160],
            (0..2 * 6 * 256 * 160).map(|i| ((i % 37) as f32 - 18.0) * 0.05).collect(),
        )
        .unwrap();
        assert!(chunk_planes(2 * 27, 256 * 160, 6) < 6);
        let w: Vec<f32> = (0..2 * 2 * 27).map(|i| ((i % 11) as f32 - 5.0) * 0.1).collect();
        let y = conv3d_forward(&x, &w, &[0.5, -0.5], 2, 3).unwrap();
        let xd = x.cast::<f64>();
        let wd: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        // Spot-check against direct evaluation at a few voxels.
        for &(co, z, yy, xx) in &[(0usize, 0usize, 0usize, 0usize), (1, 3, 128, 80), (0, 5, 255, 159), (1, 2, 17, 0)] {
            let mut acc = if co == 0 { 0.5 } else { -0.5 };
            for ci in 0..2 {
                for kz in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sz, sy, sx) = (z as isize + kz - 1, yy as isize + ky - 1, xx as isize + kx - 1);
                            if sz < 0 || sy < 0 || sx < 0 || sz >= 6 || sy >= 256 || sx >= 160 {
                                continue;
                            }
                            acc += wd[(((co * 2 + ci) * 3 + kz as usize) * 3 + ky as usize) * 3 + kx as usize]
                                * xd.get([0, ci, sz as usize, sy as usize, sx as usize]);
                        }
                    }
                }
            }
            assert!((y.get([0, co, z, yy, xx]) as f64 - acc).abs() < 1e-4);
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = t([1, 1, 2, 2, 2], |i| i as f64);
        let (y, arg) = maxpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(arg, vec![7]);
        let c = t([1, 2, 4, 4, 4], |_| 3.5);
        assert!(maxpool_forward(&c).unwrap().0.data().iter().all(|&v| v == 3.5));
        assert!(maxpool_forward(&t([1, 1, 3, 2, 2], |_| 0.0)).is_err());
    }

    #[test]
    fn upsample_examples() {
        let ramp = t([1, 1, 1, 1, 2], |i| i as f64);
        let up = upsample_forward(&ramp);
        assert_eq!(up.shape(), [1, 1, 2, 2, 4]);
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);

        let one = t([1, 1, 1, 1, 1], |_| 4.0);
        assert_eq!(upsample_forward(&one).data(), &[4.0; 8]);
    }

    #[test]
    fn upsample_then_average_pool_restores_constants() {
        let x = t([1, 2, 2, 3, 2], |_| -1.25);
        let up = upsample_forward(&x);
        let [_, c, d, h, w] = x.shape();
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for (dz, dy, dx) in (0..8).map(|i| (i / 4, (i / 2) % 2, i % 2)) {
                            acc += up.get([0, ci, 2 * z + dz, 2 * y + dy, 2 * xx + dx]);
                        }
                        assert_eq!(acc / 8.0, x.get([0, ci, z, y, xx]));
                    }
                }
            }
        }
    }

    #[test]
    fn instance_norm_constant_channel_gives_beta() {
        let x = t([1, 2, 2, 2, 2], |_| 5.0);
        let (y, _) = instance_norm_forward(&x, &[2.0, 3.0], &[0.5, -1.0], 1e-5).unwrap();
        assert!(y.channel(0, 0).iter().all(|&v| v == 0.5));
        assert!(y.channel(0, 1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn instance_norm_standardizes() {
        let x = t([1, 1, 4, 4, 4], |i| ((i * 7919) % 101) as f64);
        let (y, _) = instance_norm_forward(&x, &[1.0], &[0.0], 1e-5).unwrap();
        let m = y.data().iter().sum::<f64>() / 64.0;
        let v = y.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
    }

    #[test]
    fn relu_and_concat() {
        let x = t([1, 1, 1, 1, 3], |i| [-1.0, 0.0, 2.0][i]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);

        let a = t([1, 16, 1, 2, 2], |i| i as f64);
        let b = t([1, 16, 1, 2, 2], |i| -(i as f64));
        assert_eq!(concat_forward(&a, &b).unwrap().shape(), [1, 32, 1, 2, 2]);
        let empty = Tensor5::<f64>::zeros([1, 0, 1, 2, 2]);
        assert_eq!(concat_forward(&a, &empty).unwrap(), a);
        assert!(concat_forward(&a, &t([1, 1, 1, 2, 3], |_| 0.0)).is_err());

        let g = t([1, 32, 1, 2, 2], |i| i as f64);
        let mut da = Tensor5::zeros(a.shape());
        let mut db = Tensor5::zeros(b.shape());
        concat_backward(&g, Some(&mut da), Some(&mut db), 16);
        assert_eq!(da.data(), &g.data()[..64]);
        assert_eq!(db.data(), &g.data()[64..]);
    }

    #[test]
    fn softmax_examples() {
        let x = t([1, 6, 1, 1, 2], |i| if i % 2 == 0 { 0.3 } else { if i == 1 { 1000.0 } else { 0.0 } });
        let y = softmax_forward(&x);
        for c in 0..6 {
            assert!((y.get([0, c, 0, 0, 0]) - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!((y.get([0, 0, 0, 0, 1]) - 1.0).abs() < 1e-12);
        assert!(y.all_finite());
    }
}
