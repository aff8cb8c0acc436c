//! Procedural abdomen phantoms with exact labels and known composition.
//!
//! Each axial slice is a set of nested ellipses: body outline, subcutaneous
//! fat ring, muscle ring and the inner cavity. The top `thoracic_cap` slices
//! hold a thoracic cavity with two lungs, the rest an abdominal cavity with
//! organs and a smooth visceral fat pattern. Bone discs sit inside the cavity.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantify::{CompartmentCounts, CompositionReport};
use crate::rng::{self, tag};
use crate::volume::{BodyRegionLabel, Dims, HuVolume, LabelVolume, Spacing, Volume};

pub mod hu {
    pub const AIR: f32 = -1000.0;
    pub const LUNG: f32 = -800.0;
    pub const FAT: f32 = -100.0;
    pub const MUSCLE: f32 = 50.0;
    /// Contrast-enhanced organ parenchyma and mediastinum.
    pub const ORGAN: f32 = 100.0;
    pub const BONE: f32 = 400.0;
}

/// Geometry is given in units of half the in-plane size, so a spec scales
/// with `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub nz: usize,
    pub size: usize,
    pub spacing_mm: [f64; 3],
    /// Body semi-axes `(ry, rx)`.
    pub body_radii: [f64; 2],
    /// Relative amplitude of the smooth radius variation along z.
    pub radius_variation: f64,
    pub sat_thickness: f64,
    pub muscle_thickness: f64,
    pub bone_count: usize,
    pub bone_radius: f64,
    pub visceral_fat_fraction: f64,
    pub thoracic_cap: usize,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            nz: 40,
            size: 256,
            spacing_mm: [5.0, 2.0, 2.0],
            body_radii: [0.62, 0.84],
            radius_variation: 0.05,
            sat_thickness: 0.12,
            muscle_thickness: 0.10,
            bone_count: 3,
            bone_radius: 0.08,
            visceral_fat_fraction: 0.3,
            thoracic_cap: 8,
            noise_sigma: 10.0,
        }
    }
}

impl PhantomSpec {
    /// A default-shaped spec with seed-dependent anatomy.
    pub fn sampled(seed: u64, nz: usize, size: usize) -> Self {
        let mut r = rng::stream(seed, &[tag::PHANTOM, 0]);
        let base = Self::default();
        let mut j = |v: f64, rel: f64| v * (1.0 + r.random_range(-rel..=rel));
        Self {
            seed,
            nz,
            size,
            body_radii: [j(base.body_radii[0], 0.08), j(base.body_radii[1], 0.06)],
            sat_thickness: j(base.sat_thickness, 0.2),
            muscle_thickness: j(base.muscle_thickness, 0.2),
            visceral_fat_fraction: j(base.visceral_fat_fraction, 0.3),
            thoracic_cap: ((nz as f64 * 0.2).round() as usize).clamp(1, nz.saturating_sub(1).max(1)),
            ..base
        }
    }

    fn radii_at(&self, z: usize, phase: f64) -> [f64; 2] {
        let t = 2.0 * std::f64::consts::PI * (z as f64 + 0.5) / self.nz as f64;
        let s = 1.0 + self.radius_variation * (t + phase).sin();
        [self.body_radii[0] * s, self.body_radii[1] * s]
    }

    fn cavity_radii(body: [f64; 2], wall: f64) -> [f64; 2] {
        [body[0] - wall, body[1] - wall]
    }

    /// Bone centers `(v, u)` relative to the cavity radii: spine posterior,
    /// further discs alternating left and right.
    fn bone_centers(&self, cav: [f64; 2]) -> Vec<[f64; 2]> {
        (0..self.bone_count)
            .map(|i| {
                if i == 0 {
                    [0.6 * cav[0], 0.0]
                } else {
                    let side = if i % 2 == 1 { 1.0 } else { -1.0 };
                    let row = ((i - 1) / 2) as f64;
                    [0.15 * cav[0] - 0.3 * row * cav[0], side * 0.6 * cav[1]]
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("phantom spec: {m}")));
        if self.size < 16 || self.nz < 2 {
            return bad("need size ≥ 16 and nz ≥ 2");
        }
        Spacing::new(self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2])?;
        if self.thoracic_cap == 0 || self.thoracic_cap >= self.nz {
            return bad("thoracic_cap must leave at least one thoracic and one abdominal slice");
        }
        if !(0.0 < self.visceral_fat_fraction && self.visceral_fat_fraction < 1.0) {
            return bad("visceral_fat_fraction must lie in (0, 1)");
        }
        if self.bone_count == 0 || self.bone_radius <= 0.0 {
            return bad("at least one bone of positive radius is required");
        }
        if self.sat_thickness <= 0.0 || self.muscle_thickness <= 0.0 || !(0.0..0.5).contains(&self.radius_variation) {
            return bad("ring thicknesses must be positive and radius_variation in [0, 0.5)");
        }
        let pixel = 2.0 / self.size as f64;
        if self.sat_thickness < 1.5 * pixel || self.muscle_thickness < 1.5 * pixel {
            return bad("rings thinner than 1.5 pixels");
        }
        let lo = 1.0 - self.radius_variation;
        let hi = 1.0 + self.radius_variation;
        if self.body_radii.iter().any(|&r| r * hi >= 0.98) {
            return bad("body does not fit in the field of view");
        }
        let body_min = [self.body_radii[0] * lo, self.body_radii[1] * lo];
        let cav = Self::cavity_radii(body_min, self.sat_thickness + self.muscle_thickness);
        if cav.iter().any(|&r| r <= 2.5 * self.bone_radius) {
            return bad("rings leave no room for the cavity");
        }
        for c in self.bone_centers(cav) {
            let reach = ((c[0].abs() + self.bone_radius) / cav[0]).powi(2) + ((c[1].abs() + self.bone_radius) / cav[1]).powi(2);
            if reach >= 1.0 {
                return bad("bones do not fit inside the cavity");
            }
        }
        Ok(())
    }
}

/// A generated case: noisy and noise-free HU, exact labels and the
/// composition counted directly on the generating geometry.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub hu: HuVolume,
    pub clean_hu: HuVolume,
    pub labels: LabelVolume,
    pub composition: CompositionReport,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    SatFat,
    Muscle,
    Bone,
    Lung,
    Mediastinum,
    Organ,
    VisceralFat,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.size;
    let dims = Dims::new(spec.nz, n, n);
    let [sz, sy, sx] = spec.spacing_mm;
    let spacing = Spacing::new(sz, sy, sx)?;
    let mut shape_rng = rng::stream(spec.seed, &[tag::PHANTOM, 1]);
    let phase = shape_rng.random_range(0.0..std::f64::consts::TAU);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                shape_rng.random_range(2.0..5.0),
                shape_rng.random_range(2.0..5.0),
                shape_rng.random_range(0.0..std::f64::consts::TAU),
                shape_rng.random_range(0.05..0.3),
            ]
        })
        .collect();

    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    let mut clean = vec![0f32; dims.len()];
    let mut labels = vec![BodyRegionLabel::Background; dims.len()];
    let mut counts = vec![CompartmentCounts::default(); spec.nz];

    for z in 0..spec.nz {
        let body = spec.radii_at(z, phase);
        let inner = PhantomSpec::cavity_radii(body, spec.sat_thickness);
        let cav = PhantomSpec::cavity_radii(body, spec.sat_thickness + spec.muscle_thickness);
        let bones = spec.bone_centers(cav);
        let thoracic = z < spec.thoracic_cap;
        let inside = |r: [f64; 2], v: f64, u: f64| (v / r[0]).powi(2) + (u / r[1]).powi(2) <= 1.0;

        let mut tissue = vec![Tissue::Air; n * n];
        let mut region = vec![BodyRegionLabel::Background; n * n];
        let mut field = Vec::new();
        for y in 0..n {
            let v = (y as f64 - c) / half;
            for x in 0..n {
                let u = (x as f64 - c) / half;
                let i = y * n + x;
                if !inside(body, v, u) {
                    continue;
                }
                if !inside(inner, v, u) {
                    tissue[i] = Tissue::SatFat;
                    region[i] = BodyRegionLabel::SubcutaneousTissue;
                } else if !inside(cav, v, u) {
                    tissue[i] = Tissue::Muscle;
                    region[i] = BodyRegionLabel::Muscle;
                } else if bones.iter().any(|b| (v - b[0]).powi(2) + (u - b[1]).powi(2) <= spec.bone_radius.powi(2)) {
                    tissue[i] = Tissue::Bone;
                    region[i] = BodyRegionLabel::Bones;
                } else if thoracic {
                    region[i] = BodyRegionLabel::ThoracicCavity;
                    let lung = [0.75 * cav[0], 0.38 * cav[1]];
                    let in_lung = inside(lung, v + 0.1 * cav[0], u - 0.5 * cav[1]) || inside(lung, v + 0.1 * cav[0], u + 0.5 * cav[1]);
                    tissue[i] = if in_lung { Tissue::Lung } else { Tissue::Mediastinum };
                } else {
                    region[i] = BodyRegionLabel::AbdominalCavity;
                    tissue[i] = Tissue::Organ;
                    let zf = z as f64 / spec.nz as f64;
                    let f: f64 = waves
                        .iter()
                        .map(|w| w[3] * (w[0] * u + w[1] * v + w[2] + 3.0 * zf).sin())
                        .sum::<f64>()
                        + 0.5 * (u * u + v * v).sqrt();
                    field.push((f, i));
                }
            }
        }
        if !field.is_empty() {
            field.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let k = (spec.visceral_fat_fraction * field.len() as f64).round() as usize;
            for &(_, i) in &field[..k] {
                tissue[i] = Tissue::VisceralFat;
            }
        }

        let off = z * n * n;
        for i in 0..n * n {
            clean[off + i] = match tissue[i] {
                Tissue::Air => hu::AIR,
                Tissue::SatFat | Tissue::VisceralFat => hu::FAT,
                Tissue::Muscle => hu::MUSCLE,
                Tissue::Bone => hu::BONE,
                Tissue::Lung => hu::LUNG,
                Tissue::Mediastinum | Tissue::Organ => hu::ORGAN,
            };
            labels[off + i] = region[i];
            match tissue[i] {
                Tissue::SatFat => counts[z].sat += 1,
                Tissue::VisceralFat => counts[z].vat += 1,
                Tissue::Muscle => counts[z].muscle += 1,
                _ => {}
            }
        }
    }

    let mut noisy = clean.clone();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for z in 0..spec.nz {
            let mut r = rng::stream(spec.seed, &[tag::NOISE, z as u64]);
            for v in &mut noisy[z * n * n..(z + 1) * n * n] {
                *v += normal.sample(&mut r) as f32;
            }
        }
    }

    let labels = Volume::new(dims, spacing, labels)?;
    let present: std::collections::BTreeSet<_> = labels.data().iter().copied().collect();
    if present.len() != BodyRegionLabel::CLASSES.len() {
        return Err(Error::Invalid(format!("phantom spec yields only classes {present:?}")));
    }
    Ok(Phantom {
        spec: spec.clone(),
        hu: Volume::from_hu(dims, spacing, noisy)?,
        clean_hu: Volume::from_hu(dims, spacing, clean)?,
        labels,
        composition: CompositionReport::from_counts(spacing, &counts),
    })
}

/// Keeps every `period`-th slice (starting at 0) and marks the rest Ignore.
pub fn sparsify_annotation(labels: &LabelVolume, period: usize) -> Result<LabelVolume> {
    if period == 0 {
        return Err(Error::Invalid("annotation period must be ≥ 1".into()));
    }
    let mut out = labels.clone();
    for z in 0..labels.dims().nz {
        if z % period != 0 {
            out.slice_mut(z).fill(BodyRegionLabel::Ignore);
        }
    }
    Ok(out)
}
