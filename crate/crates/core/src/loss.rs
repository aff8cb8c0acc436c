//! Cross entropy, foreground soft dice and their equal-weight combination,
//! all restricted to annotated voxels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor5};
use crate::volume::BodyRegionLabel;

pub const DICE_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub xce: f64,
    pub dice: f64,
    pub combined: f64,
    pub annotated: usize,
}

impl LossValue {
    pub fn new(xce: f64, dice: f64, annotated: usize) -> Self {
        Self {
            xce,
            dice,
            combined: 0.5 * xce + 0.5 * dice,
            annotated,
        }
    }
}

fn check<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<usize> {
    if probs.n() != 1 {
        return Err(Error::Shape(format!("loss expects batch size 1, got {}", probs.n())));
    }
    if probs.spatial() != labels.len() {
        return Err(Error::Shape(format!(
            "{} voxels of probabilities vs {} labels",
            probs.spatial(),
            labels.len()
        )));
    }
    let c = probs.c();
    let mut annotated = 0;
    for &l in labels {
        match l.class_index() {
            Some(k) if k < c => annotated += 1,
            Some(k) => return Err(Error::Shape(format!("label class {k} but only {c} channels"))),
            None => {}
        }
    }
    if annotated == 0 {
        return Err(Error::NoAnnotatedVoxels);
    }
    Ok(annotated)
}

/// Mean negative log-probability of the true class over annotated voxels.
pub fn xce_loss<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<f64> {
    let n = check(probs, labels)?;
    let mut sum = 0.0;
    for (v, l) in labels.iter().enumerate() {
        if let Some(k) = l.class_index() {
            sum -= probs.channel(0, k)[v].f64().max(LOG_CLAMP).ln();
        }
    }
    Ok(sum / n as f64)
}

/// Per foreground class: (Σŷy, Σŷ + Σy) over annotated voxels.
fn dice_sums<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Vec<(f64, f64)> {
    (1..probs.c())
        .map(|k| {
            let p = probs.channel(0, k);
            let (mut inter, mut total) = (0.0, 0.0);
            for (v, l) in labels.iter().enumerate() {
                let Some(truth) = l.class_index() else { continue };
                let pv = p[v].f64();
                total += pv;
                if truth == k {
                    inter += pv;
                    total += 1.0;
                }
            }
            (inter, total)
        })
        .collect()
}

/// One minus the mean smoothed soft dice over the foreground classes.
pub fn dice_loss<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<f64> {
    check(probs, labels)?;
    let sums = dice_sums(probs, labels);
    if sums.is_empty() {
        return Err(Error::Shape("dice loss needs at least one foreground class".into()));
    }
    let mean = sums.iter().map(|&(i, t)| (2.0 * i + DICE_EPS) / (t + DICE_EPS)).sum::<f64>() / sums.len() as f64;
    Ok(1.0 - mean)
}

pub fn combined_loss<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<LossValue> {
    let n = check(probs, labels)?;
    Ok(LossValue::new(xce_loss(probs, labels)?, dice_loss(probs, labels)?, n))
}

/// Gradient of [`xce_loss`] with respect to the probabilities.
pub fn xce_grad<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<Tensor5<T>> {
    let n = check(probs, labels)? as f64;
    let mut g = Tensor5::zeros(probs.shape());
    let s = probs.spatial();
    for (v, l) in labels.iter().enumerate() {
        if let Some(k) = l.class_index() {
            let p = probs.channel(0, k)[v].f64();
            if p > LOG_CLAMP {
                g.data_mut()[k * s + v] = T::of(-1.0 / (n * p));
            }
        }
    }
    Ok(g)
}

/// Gradient of [`dice_loss`] with respect to the probabilities.
pub fn dice_grad<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<Tensor5<T>> {
    check(probs, labels)?;
    let sums = dice_sums(probs, labels);
    let scale = -1.0 / sums.len() as f64;
    let mut g = Tensor5::zeros(probs.shape());
    let s = probs.spatial();
    for (j, &(inter, total)) in sums.iter().enumerate() {
        let k = j + 1;
        let den = total + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        let on = T::of(scale * (2.0 * den - num) / (den * den));
        let off = T::of(scale * (-num) / (den * den));
        let dst = &mut g.data_mut()[k * s..(k + 1) * s];
        for (d, l) in dst.iter_mut().zip(labels) {
            match l.class_index() {
                Some(t) if t == k => *d = on,
                Some(_) => *d = off,
                None => {}
            }
        }
    }
    Ok(g)
}

/// Loss value and its gradient with respect to the probabilities.
pub fn combined_loss_with_grad<T: Real>(probs: &Tensor5<T>, labels: &[BodyRegionLabel]) -> Result<(LossValue, Tensor5<T>)> {
    let value = combined_loss(probs, labels)?;
    let mut g = xce_grad(probs, labels)?;
    let gd = dice_grad(probs, labels)?;
    let half = T::of(0.5);
    for (a, &b) in g.data_mut().iter_mut().zip(gd.data()) {
        *a = half * *a + half * b;
    }
    Ok((value, g))
}
