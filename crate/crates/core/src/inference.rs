//! Whole-volume prediction by overlapping slabs along z, weighted towards the
//! slab center, optionally averaged over an ensemble.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::{ops, Tensor5};
use crate::preproc::{downscale_xy, multi_window_stack, HuWindow};
use crate::volume::{BodyRegionLabel, HuVolume, LabelVolume, ProbabilityVolume, Spacing, Volume, NUM_CLASSES};

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_OVERLAP: f64 = 0.75;
/// Normalized value used to pad the input (air under every window).
pub const PAD_VALUE: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SlabWeighting {
    /// `w_i = min(i + 1, W − i)`.
    #[default]
    Tent,
    /// `exp(−½((i − (W−1)/2) / (σ·W))²)`.
    Gaussian { sigma: f64 },
}

pub fn window_stride(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Slab start indices for `nz` slices. When `nz < window` the single start 0
/// refers to the padded volume.
pub fn window_starts(nz: usize, window: usize, overlap: f64) -> Vec<usize> {
    if nz <= window {
        return vec![0];
    }
    let stride = window_stride(window, overlap);
    let last = nz - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

pub fn slab_weights(window: usize, weighting: SlabWeighting) -> Vec<f64> {
    match weighting {
        SlabWeighting::Tent => (0..window).map(|i| (i + 1).min(window - i) as f64).collect(),
        SlabWeighting::Gaussian { sigma } => {
            let c = (window as f64 - 1.0) / 2.0;
            let s = (sigma * window as f64).max(1e-6);
            (0..window).map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp()).collect()
        }
    }
}

/// Per-slice sum of slab weights over all windows covering it.
pub fn accumulated_weights(nz: usize, window: usize, overlap: f64, weighting: SlabWeighting) -> Vec<f64> {
    let w = slab_weights(window, weighting);
    let (pad, _) = z_padding(nz, window);
    let total = nz + 2 * pad + window;
    let mut acc = vec![0.0; total];
    for s in window_starts(nz, window, overlap) {
        for (i, wi) in w.iter().enumerate() {
            acc[s + i] += wi;
        }
    }
    acc[pad..pad + nz].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowOptions {
    pub window: usize,
    pub overlap: f64,
    pub weighting: SlabWeighting,
}

impl Default for SlidingWindowOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            overlap: DEFAULT_OVERLAP,
            weighting: SlabWeighting::Tent,
        }
    }
}

/// `(before, after)` padding that brings `nz` up to `window`.
fn z_padding(nz: usize, window: usize) -> (usize, usize) {
    if nz >= window {
        (0, 0)
    } else {
        let extra = window - nz;
        (extra / 2, extra - extra / 2)
    }
}

fn pad_to(x: &Tensor5<f32>, d: usize, h: usize, w: usize) -> (Tensor5<f32>, [usize; 3]) {
    let [n, c, xd, xh, xw] = x.shape();
    let off = [(d - xd) / 2, (h - xh) / 2, (w - xw) / 2];
    if off == [0, 0, 0] && [xd, xh, xw] == [d, h, w] {
        return (x.clone(), off);
    }
    let mut out = Tensor5::full([n, c, d, h, w], PAD_VALUE);
    for ni in 0..n {
        for ci in 0..c {
            for z in 0..xd {
                for y in 0..xh {
                    let src = x.offset([ni, ci, z, y, 0]);
                    let dst = out.offset([ni, ci, z + off[0], y + off[1], off[2]]);
                    out.data_mut()[dst..dst + xw].copy_from_slice(&x.data()[src..src + xw]);
                }
            }
        }
    }
    (out, off)
}

fn round_up(v: usize, q: usize) -> usize {
    v.div_ceil(q) * q
}

/// Accumulates `Σ w·softmax` and `Σ w` for one model into f64 buffers of
/// shape `(C, nz, ny, nx)` / `(nz)`.
fn accumulate_model(model: &Model<f32>, input: &Tensor5<f32>, opts: &SlidingWindowOptions, acc: &mut [f64]) -> Result<Vec<f64>> {
    let spec = model.spec();
    let [n, c, nz, ny, nx] = input.shape();
    if n != 1 || c != spec.in_channels {
        return Err(Error::Shape(format!(
            "input {:?} does not match model with {} input channels",
            input.shape(),
            spec.in_channels
        )));
    }
    let w = opts.window;
    let q = spec.divisor();
    if w == 0 || w % q != 0 {
        return Err(Error::Invalid(format!("window depth {w} must be a positive multiple of {q}")));
    }
    let (zpad, _) = z_padding(nz, w);
    let (py, px) = (round_up(ny, q), round_up(nx, q));
    let (padded, off) = pad_to(input, nz.max(w), py, px);
    debug_assert_eq!(off[0], zpad);
    let weights = slab_weights(w, opts.weighting);
    let plane = ny * nx;
    let classes = spec.out_classes;
    let mut wsum = vec![0.0; nz];
    let pplane = py * px;
    for s in window_starts(nz, w, opts.overlap) {
        let mut slab = Tensor5::zeros([1, c, w, py, px]);
        for ci in 0..c {
            let src = &padded.channel(0, ci)[s * pplane..(s + w) * pplane];
            slab.channel_mut(0, ci).copy_from_slice(src);
        }
        let probs = ops::softmax_forward(&model.predict(&slab)?);
        for (i, &wi) in weights.iter().enumerate() {
            let Some(z) = (s + i).checked_sub(zpad).filter(|&z| z < nz) else { continue };
            wsum[z] += wi;
            for k in 0..classes {
                let pc = probs.channel(0, k);
                let dst = &mut acc[(k * nz + z) * plane..(k * nz + z + 1) * plane];
                for y in 0..ny {
                    let row = &pc[i * pplane + (y + off[1]) * px + off[2]..][..nx];
                    for (d, &p) in dst[y * nx..(y + 1) * nx].iter_mut().zip(row) {
                        *d += wi * p as f64;
                    }
                }
            }
        }
    }
    Ok(wsum)
}

/// Weighted sliding-window probabilities of a preprocessed `(1, C, nz, ny, nx)`
/// input, returned as `(1, classes, nz, ny, nx)`.
pub fn sliding_window_predict(model: &Model<f32>, input: &Tensor5<f32>, opts: &SlidingWindowOptions) -> Result<Tensor5<f32>> {
    ensemble_predict(std::slice::from_ref(model), input, opts)
}

/// Mean of the per-model sliding-window probabilities.
pub fn ensemble_predict(models: &[Model<f32>], input: &Tensor5<f32>, opts: &SlidingWindowOptions) -> Result<Tensor5<f32>> {
    let first = models.first().ok_or_else(|| Error::Invalid("ensemble needs at least one model".into()))?;
    if models.iter().any(|m| m.spec() != first.spec()) {
        return Err(Error::Invalid("ensemble members have different architectures".into()));
    }
    let [_, _, nz, ny, nx] = input.shape();
    let classes = first.spec().out_classes;
    let vox = nz * ny * nx;
    let mut mean = vec![0.0f64; classes * vox];
    let mut acc = vec![0.0f64; classes * vox];
    for m in models {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let wsum = accumulate_model(m, input, opts, &mut acc)?;
        let plane = ny * nx;
        for k in 0..classes {
            for (z, &ws) in wsum.iter().enumerate() {
                let r = (k * nz + z) * plane..(k * nz + z + 1) * plane;
                for (o, &a) in mean[r.clone()].iter_mut().zip(&acc[r]) {
                    *o += a / ws;
                }
            }
        }
    }
    let k = models.len() as f64;
    Tensor5::from_vec([1, classes, nz, ny, nx], mean.into_iter().map(|v| (v / k) as f32).collect())
}

/// Windowed, normalized and optionally downscaled network input.
pub fn prepare_input(hu: &HuVolume, windows: &[HuWindow], downscale: usize) -> Result<(Tensor5<f32>, HuVolume)> {
    let grid = if downscale > 1 { downscale_xy(hu, downscale)? } else { hu.clone() };
    Ok((multi_window_stack(&grid, windows)?, grid))
}

/// Ensemble probabilities for an HU volume at the processing grid.
pub fn predict_volume(
    models: &[Model<f32>],
    hu: &HuVolume,
    windows: &[HuWindow],
    downscale: usize,
    opts: &SlidingWindowOptions,
) -> Result<ProbabilityVolume> {
    let (input, grid) = prepare_input(hu, windows, downscale)?;
    let probs = ensemble_predict(models, &input, opts)?;
    if probs.c() != NUM_CLASSES {
        return Err(Error::Shape(format!("models emit {} classes, expected {NUM_CLASSES}", probs.c())));
    }
    ProbabilityVolume::new(grid.dims(), grid.spacing(), probs.into_vec())
}

/// Lowest class index among the per-voxel maxima.
pub fn argmax_labels(probs: &ProbabilityVolume) -> LabelVolume {
    let n = probs.dims().len();
    let data = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if probs.prob(c, v) > probs.prob(best, v) {
                    best = c;
                }
            }
            BodyRegionLabel::CLASSES[best]
        })
        .collect();
    Volume::new(probs.dims(), probs.spacing(), data).expect("dims of a valid probability volume")
}

/// Argmax of a `(1, C, d, h, w)` probability tensor.
pub fn argmax_tensor(probs: &Tensor5<f32>, spacing: Spacing) -> Result<LabelVolume> {
    let [_, c, d, h, w] = probs.shape();
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("{c} classes, expected {NUM_CLASSES}")));
    }
    let pv = ProbabilityVolume::new(crate::volume::Dims::new(d, h, w), spacing, probs.data().to_vec())?;
    Ok(argmax_labels(&pv))
}
