//! Dice overlap per class and intraclass correlation of paired series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BodyRegionLabel, LabelVolume};

/// Foreground classes in reporting column order.
pub const REPORT_ORDER: [BodyRegionLabel; 5] = [
    BodyRegionLabel::AbdominalCavity,
    BodyRegionLabel::Bones,
    BodyRegionLabel::Muscle,
    BodyRegionLabel::SubcutaneousTissue,
    BodyRegionLabel::ThoracicCavity,
];

fn check_dims(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} vs reference dims {:?}",
            pred.dims().as_array(),
            gt.dims().as_array()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for one class over voxels not marked Ignore in
/// either volume; 1 when both masks are empty.
pub fn dice_score(pred: &LabelVolume, gt: &LabelVolume, class: BodyRegionLabel) -> Result<f64> {
    check_dims(pred, gt)?;
    Ok(dice_from_slices(pred.data(), gt.data(), class))
}

pub(crate) fn dice_from_slices(pred: &[BodyRegionLabel], gt: &[BodyRegionLabel], class: BodyRegionLabel) -> f64 {
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        if p.is_ignore() || g.is_ignore() {
            continue;
        }
        let (ip, ig) = (p == class, g == class);
        a += ip as u64;
        b += ig as u64;
        inter += (ip && ig) as u64;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    /// Dice per class in [`REPORT_ORDER`].
    pub per_class: [f64; 5],
    pub mean: f64,
}

impl DiceResult {
    pub fn from_per_class(per_class: [f64; 5]) -> Self {
        Self {
            per_class,
            mean: per_class.iter().sum::<f64>() / 5.0,
        }
    }

    pub fn get(&self, class: BodyRegionLabel) -> Option<f64> {
        REPORT_ORDER.iter().position(|&c| c == class).map(|i| self.per_class[i])
    }

    /// `AC,B,M,ST,TC,Average` header line.
    pub fn csv_header() -> String {
        let mut cols: Vec<&str> = REPORT_ORDER.iter().map(|c| c.short_name()).collect();
        cols.push("Average");
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.per_class.iter().map(|v| format!("{v:.4}")).collect();
        cols.push(format!("{:.4}", self.mean));
        cols.join(",")
    }
}

pub fn mean_foreground_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<DiceResult> {
    check_dims(pred, gt)?;
    Ok(DiceResult::from_per_class(REPORT_ORDER.map(|c| dice_from_slices(pred.data(), gt.data(), c))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IccKind {
    /// Two-way, absolute agreement, single measure.
    #[default]
    AbsoluteAgreement,
    /// Two-way, consistency, single measure.
    Consistency,
}

impl std::str::FromStr for IccKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" | "absolute_agreement" | "a1" => Ok(IccKind::AbsoluteAgreement),
            "consistency" | "c1" => Ok(IccKind::Consistency),
            other => Err(Error::Invalid(format!("unknown ICC kind {other:?}"))),
        }
    }
}

/// Two-way ANOVA mean squares of an `n × 2` table (rows, columns, error).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSquares {
    pub rows: f64,
    pub cols: f64,
    pub error: f64,
    pub total_ss: f64,
}

pub fn mean_squares(a: &[f64], b: &[f64]) -> Result<MeanSquares> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("series lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(format!("ICC needs at least 2 paired values, got {n}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("ICC input contains non-finite values".into()));
    }
    let nf = n as f64;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (2.0 * nf);
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let ssr: f64 = a.iter().zip(b).map(|(x, y)| 2.0 * ((x + y) / 2.0 - grand).powi(2)).sum();
    let ssc = nf * ((ma - grand).powi(2) + (mb - grand).powi(2));
    let sst: f64 = a.iter().chain(b).map(|v| (v - grand).powi(2)).sum();
    let sse = (sst - ssr - ssc).max(0.0);
    Ok(MeanSquares {
        rows: ssr / (nf - 1.0),
        cols: ssc,
        error: sse / (nf - 1.0),
        total_ss: sst,
    })
}

/// Single-measure ICC between two raters over `n` subjects.
pub fn icc_with(a: &[f64], b: &[f64], kind: IccKind) -> Result<f64> {
    let ms = mean_squares(a, b)?;
    if a == b {
        return Ok(1.0);
    }
    let n = a.len() as f64;
    let den = match kind {
        IccKind::AbsoluteAgreement => ms.rows + ms.error + 2.0 / n * (ms.cols - ms.error),
        IccKind::Consistency => ms.rows + ms.error,
    };
    if den <= 0.0 {
        return Err(Error::Invalid("ICC undefined: series carry no between-subject variance".into()));
    }
    Ok((ms.rows - ms.error) / den)
}

pub fn icc(a: &[f64], b: &[f64]) -> Result<f64> {
    icc_with(a, b, IccKind::AbsoluteAgreement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing, Volume};
    use BodyRegionLabel as L;

    fn vol(d: &[L]) -> LabelVolume {
        Volume::new(Dims::new(1, 1, d.len()), Spacing::default(), d.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol(&[L::Muscle; 4]);
        assert_eq!(dice_score(&a, &a, L::Muscle).unwrap(), 1.0);
        let b = vol(&[L::Background; 4]);
        assert_eq!(dice_score(&a, &b, L::Muscle).unwrap(), 0.0);
        let p = vol(&[L::Muscle, L::Muscle, L::Muscle, L::Muscle, L::Background, L::Background]);
        let g = vol(&[L::Background, L::Background, L::Muscle, L::Muscle, L::Muscle, L::Muscle]);
        assert_eq!(dice_score(&p, &g, L::Muscle).unwrap(), 0.5);
        assert_eq!(dice_score(&b, &b, L::Bones).unwrap(), 1.0);
    }

    #[test]
    fn ignore_voxels_are_excluded() {
        let p = vol(&[L::Muscle, L::Muscle]);
        let g = vol(&[L::Muscle, L::Ignore]);
        assert_eq!(dice_score(&p, &g, L::Muscle).unwrap(), 1.0);
    }

    #[test]
    fn one_wrong_class_gives_point_eight() {
        let g = vol(&[L::Muscle, L::Bones, L::SubcutaneousTissue, L::AbdominalCavity, L::ThoracicCavity]);
        let p = vol(&[L::Background, L::Bones, L::SubcutaneousTissue, L::AbdominalCavity, L::ThoracicCavity]);
        let r = mean_foreground_dice(&p, &g).unwrap();
        assert!((r.mean - 0.8).abs() < 1e-15);
        assert_eq!(r.get(L::Muscle), Some(0.0));
        assert_eq!(DiceResult::csv_header(), "AC,B,M,ST,TC,Average");
    }

    #[test]
    fn icc_identical_is_one_and_errors() {
        assert_eq!(icc(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]).unwrap(), 1.0);
        assert_eq!(icc(&[3.0, 3.0], &[3.0, 3.0]).unwrap(), 1.0);
        assert!(icc(&[1.0], &[1.0]).is_err());
        assert!(icc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(icc(&[0.0, 1.0], &[1.0, 0.0]).is_err());
    }
}
