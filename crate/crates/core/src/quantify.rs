//! HU-threshold tissue typing inside segmented body regions, summed per
//! axial slice.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{check_paired, BodyRegionLabel, HuVolume, LabelVolume, Spacing};

pub const ADIPOSE_HU: (f64, f64) = (-190.0, -30.0);
pub const MUSCLE_HU: (f64, f64) = (-29.0, 150.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TissueClass {
    Adipose,
    Muscle,
    Other,
}

pub fn classify_tissue(hu: f32) -> TissueClass {
    let v = hu as f64;
    if (ADIPOSE_HU.0..=ADIPOSE_HU.1).contains(&v) {
        TissueClass::Adipose
    } else if (MUSCLE_HU.0..=MUSCLE_HU.1).contains(&v) {
        TissueClass::Muscle
    } else {
        TissueClass::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Compartment {
    Sat,
    Vat,
    MuscleTissue,
    Unassigned,
}

pub fn assign_compartment(tissue: TissueClass, region: BodyRegionLabel) -> Compartment {
    match (tissue, region) {
        (TissueClass::Adipose, BodyRegionLabel::AbdominalCavity) => Compartment::Vat,
        (TissueClass::Adipose, BodyRegionLabel::SubcutaneousTissue) => Compartment::Sat,
        (TissueClass::Muscle, BodyRegionLabel::Muscle) => Compartment::MuscleTissue,
        _ => Compartment::Unassigned,
    }
}

/// Voxel counts of the three compartments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompartmentCounts {
    pub sat: u64,
    pub vat: u64,
    pub muscle: u64,
}

impl CompartmentCounts {
    pub fn add(&mut self, c: Compartment) {
        match c {
            Compartment::Sat => self.sat += 1,
            Compartment::Vat => self.vat += 1,
            Compartment::MuscleTissue => self.muscle += 1,
            Compartment::Unassigned => {}
        }
    }
}

impl std::ops::Add for CompartmentCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            sat: self.sat + o.sat,
            vat: self.vat + o.vat,
            muscle: self.muscle + o.muscle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub slice: usize,
    pub sat_ml: f64,
    pub vat_ml: f64,
    pub muscle_ml: f64,
    pub counts: CompartmentCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub sat_ml: f64,
    pub vat_ml: f64,
    pub muscle_ml: f64,
    pub counts: CompartmentCounts,
}

/// Where a report's labels came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceMeta {
    pub input_id: String,
    pub checkpoint_hashes: Vec<String>,
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub spacing_mm: [f64; 3],
    pub voxel_volume_ml: f64,
    pub rows: Vec<SliceRow>,
    pub totals: Totals,
    pub source: SourceMeta,
}

impl CompositionReport {
    /// Builds rows and totals from per-slice counts.
    pub fn from_counts(spacing: Spacing, counts: &[CompartmentCounts]) -> Self {
        let ml = spacing.voxel_volume_ml();
        let rows = counts
            .iter()
            .enumerate()
            .map(|(slice, c)| SliceRow {
                slice,
                sat_ml: c.sat as f64 * ml,
                vat_ml: c.vat as f64 * ml,
                muscle_ml: c.muscle as f64 * ml,
                counts: *c,
            })
            .collect();
        let total = counts.iter().copied().fold(CompartmentCounts::default(), |a, b| a + b);
        Self {
            spacing_mm: spacing.as_array(),
            voxel_volume_ml: ml,
            rows,
            totals: Totals {
                sat_ml: total.sat as f64 * ml,
                vat_ml: total.vat as f64 * ml,
                muscle_ml: total.muscle as f64 * ml,
                counts: total,
            },
            source: SourceMeta::default(),
        }
    }

    pub fn with_source(mut self, source: SourceMeta) -> Self {
        self.source = source;
        self
    }

    pub fn slice_counts(&self) -> Vec<CompartmentCounts> {
        self.rows.iter().map(|r| r.counts).collect()
    }

    /// Per-slice ml series of one compartment.
    pub fn series(&self, c: Compartment) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match c {
                Compartment::Sat => r.sat_ml,
                Compartment::Vat => r.vat_ml,
                Compartment::MuscleTissue => r.muscle_ml,
                Compartment::Unassigned => 0.0,
            })
            .collect()
    }
}

/// Per-slice SAT, VAT and muscle volumes of `hu` within the regions of `labels`.
pub fn quantify(hu: &HuVolume, labels: &LabelVolume) -> Result<CompositionReport> {
    check_paired(hu, labels)?;
    let dims = hu.dims();
    let counts: Vec<CompartmentCounts> = (0..dims.nz)
        .map(|z| {
            let mut c = CompartmentCounts::default();
            for (&v, &l) in hu.slice(z).iter().zip(labels.slice(z)) {
                c.add(assign_compartment(classify_tissue(v), l));
            }
            c
        })
        .collect();
    Ok(CompositionReport::from_counts(labels.spacing(), &counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Volume};
    use BodyRegionLabel as L;

    #[test]
    fn thresholds() {
        assert_eq!(classify_tissue(-100.0), TissueClass::Adipose);
        assert_eq!(classify_tissue(50.0), TissueClass::Muscle);
        assert_eq!(classify_tissue(-29.5), TissueClass::Other);
        assert_eq!(classify_tissue(200.0), TissueClass::Other);
        assert_eq!(classify_tissue(-190.0), TissueClass::Adipose);
        assert_eq!(classify_tissue(-30.0), TissueClass::Adipose);
        assert_eq!(classify_tissue(-29.0), TissueClass::Muscle);
        assert_eq!(classify_tissue(150.0), TissueClass::Muscle);
        assert_eq!(classify_tissue(-190.01), TissueClass::Other);
    }

    #[test]
    fn compartments() {
        assert_eq!(assign_compartment(TissueClass::Adipose, L::AbdominalCavity), Compartment::Vat);
        assert_eq!(assign_compartment(TissueClass::Adipose, L::SubcutaneousTissue), Compartment::Sat);
        assert_eq!(assign_compartment(TissueClass::Adipose, L::ThoracicCavity), Compartment::Unassigned);
        assert_eq!(assign_compartment(TissueClass::Muscle, L::Muscle), Compartment::MuscleTissue);
        assert_eq!(assign_compartment(TissueClass::Muscle, L::Ignore), Compartment::Unassigned);
        assert_eq!(assign_compartment(TissueClass::Adipose, L::Ignore), Compartment::Unassigned);
    }

    #[test]
    fn ten_vat_voxels_at_twenty_microlitres() {
        let spacing = Spacing::new(5.0, 2.0, 2.0).unwrap();
        let dims = Dims::new(1, 1, 12);
        let hu = Volume::from_hu(dims, spacing, vec![-100.0; 12]).unwrap();
        let mut lab = vec![L::AbdominalCavity; 10];
        lab.extend([L::Background, L::Background]);
        let labels = Volume::new(dims, spacing, lab).unwrap();
        let r = quantify(&hu, &labels).unwrap();
        assert_eq!(r.rows[0].counts.vat, 10);
        assert!((r.rows[0].vat_ml - 0.2).abs() < 1e-12);
        assert_eq!(r.totals.counts.vat, 10);
    }

    #[test]
    fn background_only_is_zero() {
        let dims = Dims::new(3, 2, 2);
        let hu = Volume::from_hu(dims, Spacing::default(), vec![-100.0; 12]).unwrap();
        let labels = Volume::filled(dims, Spacing::default(), L::Background).unwrap();
        let r = quantify(&hu, &labels).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.totals.counts, CompartmentCounts::default());
        assert_eq!(r.totals.sat_ml + r.totals.vat_ml + r.totals.muscle_ml, 0.0);
    }
}
