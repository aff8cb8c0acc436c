//! HU windowing, in-plane downscaling and training-time augmentation.
//!
//! Training pipeline order: downscale → scale augmentation → flip → crop/pad
//! → multi-window normalization. Augmentations run in HU space so that the
//! padding value (-1024 HU) maps to -1 under every window.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor5;
use crate::volume::{BodyRegionLabel, Dims, HuVolume, LabelVolume, Spacing, Volume};

/// HU value used to pad images (maps to -1 under all preset windows).
pub const PAD_HU: f32 = -1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 2]", into = "[f32; 2]")]
pub struct HuWindow {
    lo: f32,
    hi: f32,
}

impl HuWindow {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(Error::Invalid(format!("invalid HU window [{lo}, {hi}]")))
        }
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    /// Maps one HU value into `[-1, 1]`, clipping outside the window.
    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        let (lo, hi) = (self.lo as f64, self.hi as f64);
        let v = (hu as f64).clamp(lo, hi);
        (2.0 * (v - lo) / (hi - lo) - 1.0) as f32
    }
}

impl TryFrom<[f32; 2]> for HuWindow {
    type Error = Error;
    fn try_from(v: [f32; 2]) -> Result<Self> {
        HuWindow::new(v[0], v[1])
    }
}

impl From<HuWindow> for [f32; 2] {
    fn from(w: HuWindow) -> Self {
        [w.lo, w.hi]
    }
}

impl fmt::Display for HuWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Window list given either by preset name or explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSpec {
    Preset(String),
    Explicit(Vec<HuWindow>),
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::Preset("multi".into())
    }
}

impl WindowSpec {
    pub fn resolve(&self) -> Result<Vec<HuWindow>> {
        match self {
            WindowSpec::Preset(name) => window_preset(name),
            WindowSpec::Explicit(list) if list.is_empty() => {
                Err(Error::Invalid("empty window list".into()))
            }
            WindowSpec::Explicit(list) => Ok(list.clone()),
        }
    }

    /// Parses a preset name or a JSON array of `[lo, hi]` pairs.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let spec = if t.starts_with('[') {
            WindowSpec::Explicit(serde_json::from_str(t)?)
        } else {
            WindowSpec::Preset(t.to_string())
        };
        spec.resolve()?;
        Ok(spec)
    }
}

/// Named window presets.
pub fn window_preset(name: &str) -> Result<Vec<HuWindow>> {
    let w = |lo, hi| HuWindow { lo, hi };
    Ok(match name {
        "multi" => vec![w(-1024.0, 4096.0), w(-150.0, 250.0), w(-95.0, 155.0)],
        "full12bit" => vec![w(-1024.0, 3071.0)],
        "abdomen" => vec![w(-150.0, 250.0)],
        "liver" => vec![w(-95.0, 155.0)],
        other => return Err(Error::Invalid(format!("unknown window preset {other:?}"))),
    })
}

pub fn window_normalize(volume: &HuVolume, window: HuWindow) -> Volume<f32> {
    volume.map(|v| window.apply(v))
}

/// One channel per window, shape `(1, windows, nz, ny, nx)`.
pub fn multi_window_stack(volume: &HuVolume, windows: &[HuWindow]) -> Result<Tensor5<f32>> {
    if windows.is_empty() {
        return Err(Error::Invalid("empty window list".into()));
    }
    let d = volume.dims();
    let mut data = Vec::with_capacity(windows.len() * d.len());
    for w in windows {
        data.extend(volume.data().iter().map(|&v| w.apply(v)));
    }
    Tensor5::from_vec([1, windows.len(), d.nz, d.ny, d.nx], data)
}

/// Block-mean in-plane downscaling; z and z spacing are untouched.
pub fn downscale_xy(volume: &HuVolume, factor: usize) -> Result<HuVolume> {
    let d = check_downscale(volume.dims(), factor)?;
    if factor == 1 {
        return Ok(volume.clone());
    }
    let src = volume.dims();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    let row = src.index(z, y * factor + dy, x * factor);
                    acc += volume.data()[row..row + factor]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                out.push((acc * inv) as f32);
            }
        }
    }
    let s = volume.spacing();
    let spacing = Spacing::new(s.z_mm, s.y_mm * factor as f64, s.x_mm * factor as f64)?;
    HuVolume::new(d, spacing, out)
}

/// Majority-vote in-plane downscaling of labels. Ties resolve to the lowest
/// label value, so a real class beats Ignore.
pub fn downscale_labels_xy(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    let d = check_downscale(labels.dims(), factor)?;
    if factor == 1 {
        return Ok(labels.clone());
    }
    let mut out = Vec::with_capacity(d.len());
    let mut counts = BTreeMap::new();
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                counts.clear();
                for dy in 0..factor {
                    for dx in 0..factor {
                        *counts
                            .entry(labels.get(z, y * factor + dy, x * factor + dx))
                            .or_insert(0usize) += 1;
                    }
                }
                // BTreeMap iterates in ascending label order; max_by keeps the last
                // maximum, so iterate in reverse to prefer the lowest label.
                let (&label, _) = counts.iter().rev().max_by_key(|(_, &c)| c).unwrap();
                out.push(label);
            }
        }
    }
    let s = labels.spacing();
    let spacing = Spacing::new(s.z_mm, s.y_mm * factor as f64, s.x_mm * factor as f64)?;
    LabelVolume::new(d, spacing, out)
}

fn check_downscale(d: Dims, factor: usize) -> Result<Dims> {
    if factor == 0 {
        return Err(Error::Invalid("downscale factor must be >= 1".into()));
    }
    if d.ny % factor != 0 || d.nx % factor != 0 {
        return Err(Error::Dims(format!(
            "in-plane dims {}x{} not divisible by {factor}",
            d.ny, d.nx
        )));
    }
    Ok(Dims::new(d.nz, d.ny / factor, d.nx / factor))
}

/// Training crop size in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct CropSize {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for CropSize {
    fn default() -> Self {
        Self {
            d: 32,
            h: 256,
            w: 256,
        }
    }
}

impl From<[usize; 3]> for CropSize {
    fn from(v: [usize; 3]) -> Self {
        Self {
            d: v[0],
            h: v[1],
            w: v[2],
        }
    }
}

impl From<CropSize> for [usize; 3] {
    fn from(c: CropSize) -> Self {
        [c.d, c.h, c.w]
    }
}

/// Lower and upper bound of the random scale factor.
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const FLIP_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub scale_x: f64,
    pub scale_y: f64,
    pub flip_x: bool,
    pub crop_z0: usize,
    pub crop_y0: usize,
    pub crop_x0: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentToggles {
    pub scale: bool,
    pub flip: bool,
}

impl Default for AugmentToggles {
    fn default() -> Self {
        Self {
            scale: true,
            flip: true,
        }
    }
}

/// In-plane size after scaling by `f`, rounded to nearest, at least 1.
pub fn scaled_len(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).max(1)
}

/// Dims after symmetric padding up to the crop size.
pub fn padded_dims(d: Dims, crop: CropSize) -> Dims {
    Dims::new(d.nz.max(crop.d), d.ny.max(crop.h), d.nx.max(crop.w))
}

pub fn sample_augmentation_params<R: Rng + ?Sized>(
    rng: &mut R,
    dims: Dims,
    crop: CropSize,
    toggles: AugmentToggles,
) -> AugmentationParams {
    let (lo, hi) = SCALE_RANGE;
    let (scale_x, scale_y) = if toggles.scale {
        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
    } else {
        (1.0, 1.0)
    };
    let flip_x = toggles.flip && rng.random_bool(FLIP_PROBABILITY);
    let scaled = Dims::new(
        dims.nz,
        scaled_len(dims.ny, scale_y),
        scaled_len(dims.nx, scale_x),
    );
    let p = padded_dims(scaled, crop);
    AugmentationParams {
        scale_x,
        scale_y,
        flip_x,
        crop_z0: rng.random_range(0..=p.nz - crop.d),
        crop_y0: rng.random_range(0..=p.ny - crop.h),
        crop_x0: rng.random_range(0..=p.nx - crop.w),
    }
}

#[inline]
fn bilinear_coord(o: usize, n: usize, m: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * (n as f64 / m as f64) - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

#[inline]
fn nearest_coord(o: usize, n: usize, m: usize) -> usize {
    (((o as f64 + 0.5) * (n as f64 / m as f64)).floor() as usize).min(n - 1)
}

/// Resamples in-plane by independent x/y factors: bilinear for the image,
/// nearest neighbour for labels.
pub fn augment_scale(
    image: &HuVolume,
    labels: &LabelVolume,
    scale_x: f64,
    scale_y: f64,
) -> Result<(HuVolume, LabelVolume)> {
    crate::volume::check_paired(image, labels)?;
    for s in [scale_x, scale_y] {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Invalid(format!("scale factor {s} must be positive")));
        }
    }
    let d = image.dims();
    let (ny, nx) = (scaled_len(d.ny, scale_y), scaled_len(d.nx, scale_x));
    if ny == d.ny && nx == d.nx {
        return Ok((image.clone(), labels.clone()));
    }
    let out_dims = Dims::new(d.nz, ny, nx);
    let xs: Vec<_> = (0..nx).map(|x| bilinear_coord(x, d.nx, nx)).collect();
    let ys: Vec<_> = (0..ny).map(|y| bilinear_coord(y, d.ny, ny)).collect();
    let xn: Vec<_> = (0..nx).map(|x| nearest_coord(x, d.nx, nx)).collect();
    let yn: Vec<_> = (0..ny).map(|y| nearest_coord(y, d.ny, ny)).collect();

    let mut img = Vec::with_capacity(out_dims.len());
    let mut lab = Vec::with_capacity(out_dims.len());
    for z in 0..d.nz {
        let plane = image.slice(z);
        let lplane = labels.slice(z);
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let v = |y: usize, x: usize| plane[y * d.nx + x] as f64;
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                img.push((top * (1.0 - ty) + bot * ty) as f32);
            }
        }
        for &y in &yn {
            for &x in &xn {
                lab.push(lplane[y * d.nx + x]);
            }
        }
    }
    let s = image.spacing();
    let spacing = Spacing::new(
        s.z_mm,
        s.y_mm * d.ny as f64 / ny as f64,
        s.x_mm * d.nx as f64 / nx as f64,
    )?;
    Ok((
        HuVolume::new(out_dims, spacing, img)?,
        LabelVolume::new(out_dims, spacing, lab)?,
    ))
}

fn flip_x_in_place<T: Copy>(v: &mut Volume<T>) {
    let nx = v.dims().nx;
    for row in v.data_mut().chunks_exact_mut(nx) {
        row.reverse();
    }
}

/// Mirrors both grids along x.
pub fn augment_flip_x(image: &HuVolume, labels: &LabelVolume) -> Result<(HuVolume, LabelVolume)> {
    crate::volume::check_paired(image, labels)?;
    let (mut a, mut b) = (image.clone(), labels.clone());
    flip_x_in_place(&mut a);
    flip_x_in_place(&mut b);
    Ok((a, b))
}

fn crop_padded<T: Copy>(v: &Volume<T>, crop: CropSize, offset: [usize; 3], pad: T) -> Result<Volume<T>> {
    let d = v.dims();
    let p = padded_dims(d, crop);
    if offset[0] + crop.d > p.nz || offset[1] + crop.h > p.ny || offset[2] + crop.w > p.nx {
        return Err(Error::Invalid(format!(
            "crop offset {offset:?} outside padded dims {:?}",
            p.as_array()
        )));
    }
    let before = [(p.nz - d.nz) / 2, (p.ny - d.ny) / 2, (p.nx - d.nx) / 2];
    let src = |pc: usize, axis: usize, n: usize| -> Option<usize> {
        pc.checked_sub(before[axis]).filter(|&s| s < n)
    };
    let out_dims = Dims::new(crop.d, crop.h, crop.w);
    let mut out = Vec::with_capacity(out_dims.len());
    for z in 0..crop.d {
        let sz = src(offset[0] + z, 0, d.nz);
        for y in 0..crop.h {
            let sy = src(offset[1] + y, 1, d.ny);
            for x in 0..crop.w {
                let sx = src(offset[2] + x, 2, d.nx);
                out.push(match (sz, sy, sx) {
                    (Some(z), Some(y), Some(x)) => v.get(z, y, x),
                    _ => pad,
                });
            }
        }
    }
    Volume::new(out_dims, v.spacing(), out)
}

/// Cuts a fixed-size training sample, padding symmetrically where the volume
/// is smaller than the crop (image with [`PAD_HU`], labels with Ignore).
pub fn crop_subvolume(
    image: &HuVolume,
    labels: &LabelVolume,
    params: &AugmentationParams,
    crop: CropSize,
) -> Result<(HuVolume, LabelVolume)> {
    crate::volume::check_paired(image, labels)?;
    let off = [params.crop_z0, params.crop_y0, params.crop_x0];
    Ok((
        crop_padded(image, crop, off, PAD_HU)?,
        crop_padded(labels, crop, off, BodyRegionLabel::Ignore)?,
    ))
}

/// Scale, flip and crop in pipeline order.
pub fn augment_sample(
    image: &HuVolume,
    labels: &LabelVolume,
    params: &AugmentationParams,
    crop: CropSize,
) -> Result<(HuVolume, LabelVolume)> {
    let (mut img, mut lab) = augment_scale(image, labels, params.scale_x, params.scale_y)?;
    if params.flip_x {
        flip_x_in_place(&mut img);
        flip_x_in_place(&mut lab);
    }
    crop_subvolume(&img, &lab, params, crop)
}
