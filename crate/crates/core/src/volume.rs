//! Voxel grids, spacing geometry and the VBC on-disk volume format.
//!
//! All grids are stored row-major with z outermost and x innermost.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic prefix of every VBC volume file.
pub const VOLUME_MAGIC: &[u8; 8] = b"VBCVOL01";
/// Magic prefix of raw probability dumps.
pub const PROBS_MAGIC: &[u8; 8] = b"VBCPROB1";

/// Number of semantic classes (background included, ignore excluded).
pub const NUM_CLASSES: usize = 6;

/// Millimeters per voxel edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z_mm: f64,
    pub y_mm: f64,
    pub x_mm: f64,
}

impl Spacing {
    pub fn new(z_mm: f64, y_mm: f64, x_mm: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(z_mm) && ok(y_mm) && ok(x_mm) {
            Ok(Self { z_mm, y_mm, x_mm })
        } else {
            Err(Error::Spacing {
                z: z_mm,
                y: y_mm,
                x: x_mm,
            })
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z_mm, self.y_mm, self.x_mm]
    }

    pub fn voxel_volume_ml(&self) -> f64 {
        voxel_volume_ml(self)
    }
}

impl Default for Spacing {
    /// 5 mm slices, 1 mm in-plane.
    fn default() -> Self {
        Self {
            z_mm: 5.0,
            y_mm: 1.0,
            x_mm: 1.0,
        }
    }
}

/// Volume of one voxel in milliliters (1 ml = 1000 mm³).
pub fn voxel_volume_ml(spacing: &Spacing) -> f64 {
    spacing.z_mm * spacing.y_mm * spacing.x_mm / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Dims {
    pub fn new(nz: usize, ny: usize, nx: usize) -> Self {
        Self { nz, ny, nx }
    }

    pub fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.ny * self.nx
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }
}

/// Semantic body region of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum BodyRegionLabel {
    Background = 0,
    Muscle = 1,
    Bones = 2,
    SubcutaneousTissue = 3,
    AbdominalCavity = 4,
    ThoracicCavity = 5,
    Ignore = 255,
}

impl BodyRegionLabel {
    /// The six semantic classes in class-index order.
    pub const CLASSES: [BodyRegionLabel; NUM_CLASSES] = [
        BodyRegionLabel::Background,
        BodyRegionLabel::Muscle,
        BodyRegionLabel::Bones,
        BodyRegionLabel::SubcutaneousTissue,
        BodyRegionLabel::AbdominalCavity,
        BodyRegionLabel::ThoracicCavity,
    ];

    pub fn from_u8(value: u8) -> Result<Self> {
        Ok(match value {
            0 => Self::Background,
            1 => Self::Muscle,
            2 => Self::Bones,
            3 => Self::SubcutaneousTissue,
            4 => Self::AbdominalCavity,
            5 => Self::ThoracicCavity,
            255 => Self::Ignore,
            v => return Err(Error::LabelDomain(v)),
        })
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::CLASSES.get(index).copied()
    }

    /// Class index in `0..6`, `None` for [`BodyRegionLabel::Ignore`].
    pub fn class_index(self) -> Option<usize> {
        match self {
            Self::Ignore => None,
            other => Some(other as usize),
        }
    }

    pub fn is_ignore(self) -> bool {
        self == Self::Ignore
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Background => "BG",
            Self::Muscle => "M",
            Self::Bones => "B",
            Self::SubcutaneousTissue => "ST",
            Self::AbdominalCavity => "AC",
            Self::ThoracicCavity => "TC",
            Self::Ignore => "IGN",
        }
    }
}

/// A scalar grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

/// Hounsfield units, stored as 32-bit reals.
pub type HuVolume = Volume<f32>;
pub type LabelVolume = Volume<BodyRegionLabel>;

impl<T: Copy> Volume<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Dims(format!(
                "zero-voxel dims {:?}",
                dims.as_array()
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::Dims(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims.as_array()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.dims.index(z, y, x);
        self.data[i] = value;
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let p = self.dims.plane();
        &self.data[z * p..(z + 1) * p]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let p = self.dims.plane();
        &mut self.data[z * p..(z + 1) * p]
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl HuVolume {
    /// Validates finiteness on top of [`Volume::new`].
    pub fn from_hu(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite HU value at voxel {i}")));
        }
        Self::new(dims, spacing, data)
    }
}

/// Asserts that a label grid can be paired with an image grid.
pub fn check_paired<A: Copy, B: Copy>(image: &Volume<A>, labels: &Volume<B>) -> Result<()> {
    if image.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "image dims {:?} vs label dims {:?}",
            image.dims().as_array(),
            labels.dims().as_array()
        )));
    }
    Ok(())
}

/// Per-class probabilities, class-major: `data[c * nvox + voxel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl ProbabilityVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_CLASSES * dims.len() {
            return Err(Error::Dims(format!(
                "probability payload {} != {} x {}",
                data.len(),
                NUM_CLASSES,
                dims.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn class_plane(&self, class: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[class * n..(class + 1) * n]
    }

    #[inline]
    pub fn prob(&self, class: usize, voxel: usize) -> f32 {
        self.data[class * self.dims.len() + voxel]
    }

    /// Largest deviation of a per-voxel class sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let n = self.dims.len();
        (0..n)
            .map(|v| {
                let s: f64 = (0..NUM_CLASSES).map(|c| self.data[c * n + v] as f64).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Hu,
    Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    kind: VolumeKind,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbsHeader {
    kind: String,
    classes: usize,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
}

/// Either kind of volume read from a VBC file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Hu(HuVolume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            AnyVolume::Hu(_) => VolumeKind::Hu,
            AnyVolume::Label(_) => VolumeKind::Label,
        }
    }
}

/// Types that can be stored in a VBC payload.
pub trait VbcPayload: Copy + Sized {
    const KIND: VolumeKind;
    fn encode(data: &[Self], out: &mut Vec<u8>);
    fn wrap(volume: Volume<Self>) -> AnyVolume;
}

impl VbcPayload for f32 {
    const KIND: VolumeKind = VolumeKind::Hu;
    fn encode(data: &[Self], out: &mut Vec<u8>) {
        out.reserve(data.len() * 4);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn wrap(volume: Volume<Self>) -> AnyVolume {
        AnyVolume::Hu(volume)
    }
}

impl VbcPayload for BodyRegionLabel {
    const KIND: VolumeKind = VolumeKind::Label;
    fn encode(data: &[Self], out: &mut Vec<u8>) {
        out.extend(data.iter().map(|&l| l as u8));
    }
    fn wrap(volume: Volume<Self>) -> AnyVolume {
        AnyVolume::Label(volume)
    }
}

fn write_framed(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Splits a framed file into (header bytes, payload bytes).
pub(crate) fn split_framed<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Header(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Header(format!("header length {len} exceeds file size")))?;
    Ok((&bytes[12..end], &bytes[end..]))
}

pub(crate) fn frame(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    write_framed(magic, header, payload)
}

/// Serializes a volume into VBC bytes.
pub fn encode_volume<T: VbcPayload>(volume: &Volume<T>) -> Result<Vec<u8>> {
    if volume.dims().is_empty() {
        return Err(Error::Dims("refusing to write zero-voxel volume".into()));
    }
    let header = VolumeHeader {
        kind: T::KIND,
        dims: volume.dims().as_array(),
        spacing_mm: volume.spacing().as_array(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    T::encode(volume.data(), &mut payload);
    Ok(write_framed(VOLUME_MAGIC, &header, &payload))
}

pub fn decode_volume(bytes: &[u8]) -> Result<AnyVolume> {
    let (header, payload) = split_framed(VOLUME_MAGIC, bytes)?;
    let header: VolumeHeader = serde_json::from_slice(header)
        .map_err(|e| Error::Header(format!("invalid JSON header: {e}")))?;
    let [nz, ny, nx] = header.dims;
    let dims = Dims::new(nz, ny, nx);
    if dims.is_empty() {
        return Err(Error::Header(format!("zero-voxel dims {:?}", header.dims)));
    }
    let [sz, sy, sx] = header.spacing_mm;
    let spacing = Spacing::new(sz, sy, sx)?;
    let n = dims.len();
    match header.kind {
        VolumeKind::Hu => {
            let expected = n * 4;
            if payload.len() != expected {
                return Err(Error::PayloadSize {
                    expected,
                    found: payload.len(),
                });
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyVolume::Hu(HuVolume::from_hu(dims, spacing, data)?))
        }
        VolumeKind::Label => {
            if payload.len() != n {
                return Err(Error::PayloadSize {
                    expected: n,
                    found: payload.len(),
                });
            }
            let data = payload
                .iter()
                .map(|&b| BodyRegionLabel::from_u8(b))
                .collect::<Result<Vec<_>>>()?;
            Ok(AnyVolume::Label(LabelVolume::new(dims, spacing, data)?))
        }
    }
}

pub fn save_volume<T: VbcPayload>(volume: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(volume)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn load_hu(path: impl AsRef<Path>) -> Result<HuVolume> {
    match load_volume(path.as_ref())? {
        AnyVolume::Hu(v) => Ok(v),
        AnyVolume::Label(_) => Err(Error::Header(format!(
            "{} holds labels, expected HU",
            path.as_ref().display()
        ))),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_volume(path.as_ref())? {
        AnyVolume::Label(v) => Ok(v),
        AnyVolume::Hu(_) => Err(Error::Header(format!(
            "{} holds HU, expected labels",
            path.as_ref().display()
        ))),
    }
}

/// Writes a raw probability dump: framed JSON header, then f32 LE payload
/// with the class axis leading.
pub fn save_probabilities(probs: &ProbabilityVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = ProbsHeader {
        kind: "prob".into(),
        classes: NUM_CLASSES,
        dims: probs.dims().as_array(),
        spacing_mm: probs.spacing().as_array(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut payload = Vec::with_capacity(probs.data().len() * 4);
    f32::encode(probs.data(), &mut payload);
    fs::write(path, write_framed(PROBS_MAGIC, &header, &payload)).map_err(|e| Error::io(path, e))
}

pub fn load_probabilities(path: impl AsRef<Path>) -> Result<ProbabilityVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_framed(PROBS_MAGIC, &bytes)?;
    let header: ProbsHeader = serde_json::from_slice(header)
        .map_err(|e| Error::Header(format!("invalid JSON header: {e}")))?;
    if header.classes != NUM_CLASSES {
        return Err(Error::Header(format!("expected {NUM_CLASSES} classes")));
    }
    let [nz, ny, nx] = header.dims;
    let dims = Dims::new(nz, ny, nx);
    let [sz, sy, sx] = header.spacing_mm;
    let expected = NUM_CLASSES * dims.len() * 4;
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ProbabilityVolume::new(dims, Spacing::new(sz, sy, sx)?, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn voxel_volume_examples() {
        let ml = |z, y, x| voxel_volume_ml(&Spacing::new(z, y, x).unwrap());
        assert!((ml(5.0, 1.0, 1.0) - 0.005).abs() < 1e-15);
        assert!((ml(5.0, 2.0, 2.0) - 0.020).abs() < 1e-15);
        assert!((ml(1.0, 1.0, 1.0) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn spacing_rejects_non_positive() {
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
        assert!(Spacing::new(1.0, -1.0, 1.0).is_err());
        assert!(Spacing::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn hu_round_trip_is_identity() {
        let dims = Dims::new(4, 8, 8);
        let data: Vec<f32> = (0..dims.len()).map(|i| (i as f32 * 0.37).sin() * 900.0).collect();
        let v = HuVolume::from_hu(dims, Spacing::new(5.0, 1.0, 1.0).unwrap(), data).unwrap();
        let dir = tmp();
        let p = dir.path().join("v.vbc");
        save_volume(&v, &p).unwrap();
        assert_eq!(load_hu(&p).unwrap(), v);
    }

    #[test]
    fn header_records_spacing() {
        let v = HuVolume::filled(Dims::new(1, 1, 1), Spacing::new(5.0, 1.0, 1.0).unwrap(), 0.0)
            .unwrap();
        let bytes = encode_volume(&v).unwrap();
        let (header, _) = split_framed(VOLUME_MAGIC, &bytes).unwrap();
        let json: serde_json::Value = serde_json::from_slice(header).unwrap();
        assert_eq!(json["spacing_mm"], serde_json::json!([5.0, 1.0, 1.0]));
        assert_eq!(json["kind"], "hu");
    }

    #[test]
    fn resave_is_byte_identical() {
        let dims = Dims::new(2, 3, 4);
        let labels: Vec<_> = (0..dims.len())
            .map(|i| BodyRegionLabel::CLASSES[i % 6])
            .collect();
        let v = LabelVolume::new(dims, Spacing::default(), labels).unwrap();
        let a = encode_volume(&v).unwrap();
        let back = match decode_volume(&a).unwrap() {
            AnyVolume::Label(l) => l,
            _ => panic!("kind changed"),
        };
        assert_eq!(encode_volume(&back).unwrap(), a);
    }

    #[test]
    fn short_payload_is_rejected() {
        let header = br#"{"kind":"hu","dims":[2,2,2],"spacing_mm":[5.0,1.0,1.0]}"#;
        let payload = vec![0u8; 7 * 4];
        let bytes = frame(VOLUME_MAGIC, header, &payload);
        assert!(matches!(
            decode_volume(&bytes),
            Err(Error::PayloadSize {
                expected: 32,
                found: 28
            })
        ));
    }

    #[test]
    fn out_of_domain_label_is_rejected() {
        let header = br#"{"kind":"label","dims":[1,1,2],"spacing_mm":[5.0,1.0,1.0]}"#;
        let bytes = frame(VOLUME_MAGIC, header, &[1, 7]);
        assert!(matches!(decode_volume(&bytes), Err(Error::LabelDomain(7))));
    }

    #[test]
    fn malformed_header_and_missing_file() {
        let bytes = frame(VOLUME_MAGIC, b"{not json", &[]);
        assert!(matches!(decode_volume(&bytes), Err(Error::Header(_))));
        assert!(matches!(decode_volume(b"NOTMAGIC"), Err(Error::Header(_))));
        assert!(matches!(
            load_volume("/nonexistent/dir/v.vbc"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn zero_voxel_dims_rejected_before_write() {
        assert!(HuVolume::new(Dims::new(0, 4, 4), Spacing::default(), vec![]).is_err());
    }

    #[test]
    fn probabilities_round_trip() {
        let dims = Dims::new(1, 2, 2);
        let data = vec![1.0 / 6.0; 6 * 4];
        let p = ProbabilityVolume::new(dims, Spacing::default(), data).unwrap();
        let dir = tmp();
        let path = dir.path().join("p.bin");
        save_probabilities(&p, &path).unwrap();
        assert_eq!(load_probabilities(&path).unwrap(), p);
    }

    #[test]
    fn pairing_requires_equal_dims() {
        let a = HuVolume::filled(Dims::new(1, 2, 2), Spacing::default(), 0.0).unwrap();
        let b = LabelVolume::filled(Dims::new(1, 2, 3), Spacing::default(), BodyRegionLabel::Background)
            .unwrap();
        assert!(check_paired(&a, &b).is_err());
    }
}
