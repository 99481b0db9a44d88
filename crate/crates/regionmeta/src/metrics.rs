//! Confusion-matrix metrics and the per-shot evaluation curve.

use crate::data::{RegionDataset, TaskSampler};
use crate::error::MetricError;
use crate::rng::derive_seed;
use crate::train::{adapt, Checkpoint, EpisodeModel};
use std::fmt::Write as _;

/// Square count grid: rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn from_pairs(
        truth: &[usize],
        predicted: &[usize],
        classes: usize,
    ) -> Result<ConfusionMatrix, MetricError> {
        if truth.len() != predicted.len() {
            return Err(MetricError::LengthMismatch {
                truth: truth.len(),
                predicted: predicted.len(),
            });
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricError> {
        for label in [truth, predicted] {
            if label >= self.classes {
                return Err(MetricError::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_total(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.count(truth, p)).sum()
    }

    fn col_total(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, predicted)).sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }
}

/// Fraction of correct predictions.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricError::Empty);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Cohen's kappa: (p_o - p_e) / (1 - p_e) with expected agreement from the
/// marginals.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricError::Empty);
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let p_e = (0..cm.classes())
        .map(|c| cm.row_total(c) as f64 * cm.col_total(c) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(MetricError::DegenerateKappa);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Mean over classes of TP/(TP+FP+FN). Classes in `ignore`, and classes
/// absent from both truth and prediction, are skipped.
pub fn mean_iou(cm: &ConfusionMatrix, ignore: &[usize]) -> Result<f64, MetricError> {
    if cm.total() == 0 {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..cm.classes() {
        if ignore.contains(&c) {
            continue;
        }
        let tp = cm.count(c, c);
        let denom = cm.row_total(c) + cm.col_total(c) - tp;
        if denom == 0 {
            continue;
        }
        sum += tp as f64 / denom as f64;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::AllClassesSkipped);
    }
    Ok(sum / used as f64)
}

/// One row of the per-shot evaluation table. Task-level (macro) means and
/// standard deviations sit alongside pooled (micro) metrics computed from
/// one merged confusion matrix per shot.
#[derive(Debug, Clone)]
pub struct ShotRow {
    pub shot: usize,
    pub seed: u64,
    pub tasks: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub query_loss_mean: f64,
    pub pooled_accuracy: f64,
    pub pooled_kappa: f64,
    pub pooled_miou: f64,
}

/// Shot-curve protocol settings.
#[derive(Debug, Clone)]
pub struct ShotCurveConfig {
    /// Shots to evaluate, e.g. 0..=10.
    pub shots: Vec<usize>,
    /// (step size, steps) per shot, aligned with `shots`.
    pub tuned: Vec<(f64, usize)>,
    pub tasks_per_point: usize,
    pub ways: usize,
    /// Query tiles per class scored at every shot.
    pub query_per_class: usize,
    /// Classes excluded from mean IoU.
    pub ignore_classes: Vec<usize>,
    pub seed: u64,
}

/// Evaluates a checkpoint over the shot list. Tasks are sampled once at
/// the maximum shot and reused for every shot and checkpoint under the
/// same seed, so different checkpoints see identical episodes; shot `s`
/// adapts on the first `s` support examples of each class.
pub fn shot_curve(
    model: &dyn EpisodeModel,
    ckpt: &Checkpoint,
    ds: &RegionDataset,
    cfg: &ShotCurveConfig,
) -> Result<Vec<ShotRow>, MetricError> {
    if cfg.shots.len() != cfg.tuned.len() {
        return Err(MetricError::Train(crate::error::TrainError::Config(
            format!(
                "{} shots but {} tuned pairs",
                cfg.shots.len(),
                cfg.tuned.len()
            ),
        )));
    }
    let max_shot = cfg.shots.iter().copied().max().unwrap_or(0).max(1);
    let mut sampler = TaskSampler::new(derive_seed(cfg.seed, "shot-curve"));
    let tasks: Vec<crate::data::Task> = (0..cfg.tasks_per_point)
        .map(|_| sampler.sample(ds, crate::data::MetaSet::Test, max_shot, cfg.ways, cfg.query_per_class))
        .collect::<Result<_, _>>()
        .map_err(crate::error::TrainError::Data)?;

    let mut rows = Vec::with_capacity(cfg.shots.len());
    for (&shot, &(alpha, steps)) in cfg.shots.iter().zip(&cfg.tuned) {
        let mut accs = Vec::with_capacity(tasks.len());
        let mut kappas = Vec::with_capacity(tasks.len());
        let mut mious = Vec::with_capacity(tasks.len());
        let mut loss_sum = 0.0;
        let mut pooled = ConfusionMatrix::new(cfg.ways);
        for task in &tasks {
            let adapted = if shot == 0 {
                ckpt.params.detached()
            } else {
                let (tiles, labels) = task.support_prefix(shot);
                adapt(model, &ckpt.params, ds, &tiles, &labels, &task.ways, alpha, steps)?
            };
            let preds = model.predictions(&adapted, ds, &task.query, &task.ways)?;
            let truth = model.targets(ds, &task.query, &task.query_labels, &task.ways)?;
            let cm = ConfusionMatrix::from_pairs(&truth, &preds, cfg.ways)?;
            accs.push(accuracy(&cm)?);
            kappas.push(cohen_kappa(&cm)?);
            mious.push(mean_iou(&cm, &cfg.ignore_classes)?);
            pooled.merge(&cm);
            loss_sum += model
                .loss(&adapted, ds, &task.query, &task.query_labels, &task.ways)?
                .item();
        }
        let (am, asd) = mean_std(&accs);
        let (km, ksd) = mean_std(&kappas);
        let (mm, msd) = mean_std(&mious);
        rows.push(ShotRow {
            shot,
            seed: cfg.seed,
            tasks: tasks.len(),
            accuracy_mean: am,
            accuracy_std: asd,
            kappa_mean: km,
            kappa_std: ksd,
            miou_mean: mm,
            miou_std: msd,
            query_loss_mean: loss_sum / tasks.len() as f64,
            pooled_accuracy: accuracy(&pooled)?,
            pooled_kappa: cohen_kappa(&pooled)?,
            pooled_miou: mean_iou(&pooled, &cfg.ignore_classes)?,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The per-shot metrics table (task-level means and standard deviations).
pub fn metrics_csv(rows: &[ShotRow]) -> String {
    let mut out = String::from(
        "shot,seed,tasks,accuracy_mean,accuracy_std,kappa_mean,kappa_std,miou_mean,miou_std,query_loss_mean\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.shot,
            r.seed,
            r.tasks,
            r.accuracy_mean,
            r.accuracy_std,
            r.kappa_mean,
            r.kappa_std,
            r.miou_mean,
            r.miou_std,
            r.query_loss_mean
        )
        .expect("string write");
    }
    out
}

/// Companion table with pooled (micro) metrics per shot.
pub fn pooled_metrics_csv(rows: &[ShotRow]) -> String {
    let mut out = String::from("shot,seed,tasks,accuracy,kappa,miou\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.shot, r.seed, r.tasks, r.pooled_accuracy, r.pooled_kappa, r.pooled_miou
        )
        .expect("string write");
    }
    out
}
