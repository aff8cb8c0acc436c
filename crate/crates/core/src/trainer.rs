//! K-fold cross-validated training with validation-dice checkpoint selection.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, sha256_hex, CheckpointMeta};
use crate::error::{Error, Result};
use crate::inference::{ensemble_predict, argmax_tensor, SlidingWindowOptions};
use crate::loss::combined_loss_with_grad;
use crate::metrics::{mean_foreground_dice, DiceResult, REPORT_ORDER};
use crate::models::{ArchitectureSpec, Model, Variant};
use crate::nn::Tensor5;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::preproc::{
    augment_sample, downscale_labels_xy, downscale_xy, multi_window_stack, sample_augmentation_params, AugmentToggles,
    CropSize, HuWindow, WindowSpec,
};
use crate::rng::{self, tag};
use crate::volume::{check_paired, load_hu, load_labels, HuVolume, LabelVolume};

fn default_arch() -> ArchitectureSpec {
    ArchitectureSpec::new(Variant::MultiresUnet3d, 16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchitectureSpec,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    /// Optimizer steps per epoch; one crop per training case when absent.
    pub steps_per_epoch: Option<usize>,
    pub folds: usize,
    pub seed: u64,
    pub windows: WindowSpec,
    pub augment: AugmentToggles,
    pub crop: CropSize,
    /// In-plane downscale factor applied before everything else.
    pub downscale: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
    pub inference: SlidingWindowOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::default(),
            epochs: 200,
            steps_per_epoch: None,
            folds: 5,
            seed: 0,
            windows: WindowSpec::default(),
            augment: AugmentToggles::default(),
            crop: CropSize::default(),
            downscale: 2,
            val_every: 1,
            inference: SlidingWindowOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let windows = self.windows.resolve()?;
        if windows.len() != self.arch.in_channels {
            return Err(Error::Invalid(format!(
                "{} HU windows but the architecture expects {} input channels",
                windows.len(),
                self.arch.in_channels
            )));
        }
        let q = self.arch.divisor();
        let CropSize { d, h, w } = self.crop;
        if [d, h, w].iter().any(|&v| v == 0 || v % q != 0) {
            return Err(Error::Invalid(format!("crop {d}x{h}x{w} must be a positive multiple of {q}")));
        }
        if self.inference.window == 0 || self.inference.window % q != 0 {
            return Err(Error::Invalid(format!(
                "inference window {} must be a positive multiple of {q}",
                self.inference.window
            )));
        }
        if !(0.0..1.0).contains(&self.inference.overlap) {
            return Err(Error::Invalid(format!("overlap {} outside [0, 1)", self.inference.overlap)));
        }
        if self.folds < 2 {
            return Err(Error::Invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.epochs == 0 || self.val_every == 0 || self.downscale == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Invalid("epochs, val_every, downscale and steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Case ids per fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<String>>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(training ids, validation ids)` for one fold.
    pub fn split(&self, fold: usize) -> (Vec<&str>, Vec<&str>) {
        let mut train = Vec::new();
        for (i, f) in self.folds.iter().enumerate() {
            if i != fold {
                train.extend(f.iter().map(String::as_str));
            }
        }
        (train, self.folds[fold].iter().map(String::as_str).collect())
    }
}

/// Seeded shuffle of `case_ids`, then round-robin into `k` folds.
pub fn make_cv_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 || k > case_ids.len() {
        return Err(Error::Invalid(format!("cannot split {} cases into {k} folds", case_ids.len())));
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut rng::stream(seed, &[tag::FOLDS]));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldAssignment { folds })
}

#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub hu: HuVolume,
    pub labels: LabelVolume,
}

impl Case {
    pub fn new(id: impl Into<String>, hu: HuVolume, labels: LabelVolume) -> Result<Self> {
        check_paired(&hu, &labels)?;
        Ok(Self {
            id: id.into(),
            hu,
            labels,
        })
    }

    /// In-plane downscaled copy.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            hu: downscale_xy(&self.hu, factor)?,
            labels: downscale_labels_xy(&self.labels, factor)?,
        })
    }
}

pub const HU_SUFFIX: &str = "_hu.vbc";
pub const LABELS_SUFFIX: &str = "_labels.vbc";
pub const DENSE_LABELS_SUFFIX: &str = "_labels_dense.vbc";

/// Ids of every `{id}_hu.vbc` in a directory, sorted.
pub fn dataset_ids(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(HU_SUFFIX)).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn case_paths(dir: impl AsRef<Path>, id: &str) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    (dir.join(format!("{id}{HU_SUFFIX}")), dir.join(format!("{id}{LABELS_SUFFIX}")))
}

/// Loads every paired case of a directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let ids = dataset_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::Invalid(format!("no *{HU_SUFFIX} files in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let (h, l) = case_paths(dir, &id);
            Case::new(id, load_hu(h)?, load_labels(l)?)
        })
        .collect()
}

/// One line of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean combined loss over the optimizer steps of the epoch.
    pub loss: f64,
    pub steps: usize,
    /// Crops without annotated voxels.
    pub skipped: usize,
    pub val: Option<DiceResult>,
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = format!("epoch,lr,loss,{}\n", DiceResult::csv_header());
    for r in curve {
        let val = match &r.val {
            Some(d) => d.csv_row(),
            None => vec![""; REPORT_ORDER.len() + 1].join(","),
        };
        s.push_str(&format!("{},{:e},{:.6},{}\n", r.epoch, r.lr, r.loss, val));
    }
    s
}

/// Earliest epoch with the highest validation mean.
pub fn best_epoch(curve: &[EpochRecord]) -> Option<(usize, f64)> {
    curve
        .iter()
        .filter_map(|r| r.val.map(|v| (r.epoch, v.mean)))
        .fold(None, |best, (e, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((e, m)),
        })
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub curve: Vec<EpochRecord>,
}

impl FoldResult {
    pub fn checkpoint_name(&self) -> String {
        format!("fold{}.ckpt", self.fold)
    }

    /// Writes `fold{i}.ckpt` and `fold{i}_curve.csv`; returns the checkpoint hash.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<String> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = save_checkpoint(dir.join(self.checkpoint_name()), &self.model, &self.meta)?;
        let curve = dir.join(format!("fold{}_curve.csv", self.fold));
        std::fs::write(&curve, curve_csv(&self.curve)).map_err(|e| Error::io(&curve, e))?;
        Ok(hash)
    }
}

/// Network input of a whole case, computed once for validation.
struct ValCase {
    input: Tensor5<f32>,
    labels: LabelVolume,
}

fn val_cases(cases: &[&Case], windows: &[HuWindow]) -> Result<Vec<ValCase>> {
    cases
        .iter()
        .map(|c| {
            Ok(ValCase {
                input: multi_window_stack(&c.hu, windows)?,
                labels: c.labels.clone(),
            })
        })
        .collect()
}

fn val_dice(model: &Model<f32>, cases: &[ValCase], opts: &SlidingWindowOptions) -> Result<DiceResult> {
    let mut sum = [0.0; 5];
    for c in cases {
        let probs = ensemble_predict(std::slice::from_ref(model), &c.input, opts)?;
        let pred = argmax_tensor(&probs, c.labels.spacing())?;
        let d = mean_foreground_dice(&pred, &c.labels)?;
        for (s, v) in sum.iter_mut().zip(d.per_class) {
            *s += v;
        }
    }
    Ok(DiceResult::from_per_class(sum.map(|s| s / cases.len() as f64)))
}

/// Per-class dice of `model` on already downscaled cases, averaged over cases.
pub fn evaluate_val_dice(
    model: &Model<f32>,
    cases: &[Case],
    windows: &[HuWindow],
    opts: &SlidingWindowOptions,
) -> Result<DiceResult> {
    if cases.is_empty() {
        return Err(Error::Invalid("no validation cases".into()));
    }
    let refs: Vec<&Case> = cases.iter().collect();
    val_dice(model, &val_cases(&refs, windows)?, opts)
}

/// Runs one training step on a crop; `None` when the crop has no annotated voxel.
fn train_step(model: &mut Model<f32>, opt: &mut AdamW<f32>, input: Tensor5<f32>, labels: &LabelVolume, lr: f64) -> Result<Option<f64>> {
    if labels.data().iter().all(|l| l.is_ignore()) {
        return Ok(None);
    }
    let (mut tape, logits) = model.forward_tape(input)?;
    let probs = tape.softmax(logits);
    let (loss, grad) = combined_loss_with_grad(tape.value(probs), labels.data())?;
    if !loss.combined.is_finite() {
        return Ok(Some(loss.combined));
    }
    model.params_mut().zero_grad();
    tape.backward(model.params_mut(), probs, grad)?;
    opt.step(model.params_mut(), lr)?;
    Ok(Some(loss.combined))
}

/// Trains fold `fold` of the assignment derived from `config.seed`.
pub fn train_fold(config: &TrainConfig, dataset: &[Case], fold: usize) -> Result<FoldResult> {
    train_fold_with(config, dataset, fold, &mut |_| {})
}

pub fn train_fold_with(
    config: &TrainConfig,
    dataset: &[Case],
    fold: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FoldResult> {
    config.validate()?;
    let ids: Vec<String> = dataset.iter().map(|c| c.id.clone()).collect();
    let folds = make_cv_folds(&ids, config.folds, config.seed)?;
    if fold >= folds.k() {
        return Err(Error::Invalid(format!("fold {fold} out of range for k={}", folds.k())));
    }
    let (train_ids, val_ids) = folds.split(fold);
    let pick = |want: &[&str]| -> Vec<Case> {
        want.iter()
            .map(|id| dataset.iter().find(|c| c.id == *id).expect("id from dataset").clone())
            .collect()
    };
    train_model(config, &pick(&train_ids), &pick(&val_ids), fold, on_epoch)
}

/// Trains on `train`, selecting the checkpoint by mean dice on `val`. With no
/// validation cases the final weights are kept. `stream` keys the random
/// streams, so distinct values give independent runs.
pub fn train_model(
    config: &TrainConfig,
    train: &[Case],
    val: &[Case],
    stream: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FoldResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let train: Vec<Case> = train.iter().map(|c| c.downscaled(config.downscale)).collect::<Result<_>>()?;
    let val: Vec<Case> = val.iter().map(|c| c.downscaled(config.downscale)).collect::<Result<_>>()?;
    let windows = config.windows.resolve()?;
    let val_refs: Vec<&Case> = val.iter().collect();
    let val_inputs = val_cases(&val_refs, &windows)?;
    let fold = stream;

    let seed = config.seed;
    let f = fold as u64;
    let mut model = Model::<f32>::build(config.arch, rng::derive_seed(seed, &[tag::INIT, f]))?;
    let mut opt = AdamW::new(config.optimizer, model.params());
    let steps = config.steps_per_epoch.unwrap_or(train.len());
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, crate::nn::ParamStore<f32>)> = None;

    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::ORDER, f, epoch as u64]));
        let (mut loss_sum, mut done, mut skipped) = (0.0, 0usize, 0usize);
        for step in 0..steps {
            let case = &train[order[step % order.len()]];
            let mut r = rng::stream(seed, &[tag::SAMPLE, f, epoch as u64, step as u64]);
            let params = sample_augmentation_params(&mut r, case.hu.dims(), config.crop, config.augment);
            let (img, lab) = augment_sample(&case.hu, &case.labels, &params, config.crop)?;
            let input = multi_window_stack(&img, &windows)?;
            match train_step(&mut model, &mut opt, input, &lab, lr)? {
                None => skipped += 1,
                Some(v) if !v.is_finite() => return Err(Error::NonFiniteLoss { epoch, step, value: v }),
                Some(v) => {
                    loss_sum += v;
                    done += 1;
                }
            }
        }
        let last = epoch + 1 == config.epochs;
        let val = if !val_inputs.is_empty() && ((epoch + 1) % config.val_every == 0 || last) {
            Some(val_dice(&model, &val_inputs, &config.inference)?)
        } else {
            None
        };
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(m, _, _)| v.mean > *m) {
                best = Some((v.mean, epoch, model.params().clone()));
            }
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: if done > 0 { loss_sum / done as f64 } else { f64::NAN },
            steps: done,
            skipped,
            val,
        };
        on_epoch(&rec);
        curve.push(rec);
    }

    let (val_dice, epoch) = match best {
        Some((m, e, params)) => {
            *model.params_mut() = params;
            (Some(m), e)
        }
        None => (None, config.epochs - 1),
    };
    let meta = CheckpointMeta {
        fold: Some(fold),
        epoch,
        val_dice,
        seed,
        config_hash: config.hash(),
        config: config.to_value(),
    };
    Ok(FoldResult {
        fold,
        model,
        meta,
        curve,
    })
}

/// One model per fold.
pub fn train_ensemble(config: &TrainConfig, dataset: &[Case]) -> Result<Vec<FoldResult>> {
    (0..config.folds).map(|f| train_fold(config, dataset, f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:02}")).collect()
    }

    #[test]
    fn forty_cases_five_folds_of_eight() {
        let f = make_cv_folds(&ids(40), 5, 3).unwrap();
        assert!(f.folds.iter().all(|x| x.len() == 8));
        let (tr, va) = f.split(2);
        assert_eq!((tr.len(), va.len()), (32, 8));
        assert_eq!(f, make_cv_folds(&ids(40), 5, 3).unwrap());
        assert!(make_cv_folds(&ids(3), 4, 0).is_err());
    }

    #[test]
    fn config_defaults() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.epochs, c.folds, c.downscale), (200, 5, 2));
        assert_eq!(c.crop, CropSize { d: 32, h: 256, w: 256 });
        c.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert_eq!(c.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn best_epoch_is_earliest_max() {
        let rec = |epoch, m: Option<f64>| EpochRecord {
            epoch,
            lr: 1e-4,
            loss: 1.0,
            steps: 1,
            skipped: 0,
            val: m.map(|m| DiceResult::from_per_class([m; 5])),
        };
        let c = vec![rec(0, Some(0.2)), rec(1, None), rec(2, Some(0.5)), rec(3, Some(0.5)), rec(4, Some(0.4))];
        assert_eq!(best_epoch(&c).map(|b| b.0), Some(2));
        assert!(curve_csv(&c).lines().nth(2).unwrap().ends_with(",,,,,"));
    }
}
