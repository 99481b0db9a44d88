//! Training procedures: plain gradient-descent pretraining, episodic
//! meta-training with second-order outer updates, per-task adaptation,
//! fine-tuning grid search, and binary checkpoints.

use crate::data::{MetaSet, RegionDataset, Task, TaskSampler};
use crate::error::{ModelError, TrainError};
use crate::models::{Cnn, Unet};
use crate::rng::derive_seed;
use crate::tensor::{
    gradient, gradient_at_adapted, gradient_through_update, softmax_cross_entropy, ParamSet,
    Tensor,
};
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Losses above this, or any non-finite loss, abort training.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Hyperparameters shared by both training procedures.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Inner step size (and the plain-SGD step size for pretraining).
    pub alpha: f64,
    /// Outer (meta) step size.
    pub beta: f64,
    /// Inner gradient steps per task.
    pub inner_steps: usize,
    /// Tasks per outer update.
    pub meta_batch: usize,
    /// Shots per class (k).
    pub shots: usize,
    /// Classes per task (n).
    pub ways: usize,
    /// Query tiles per class at meta-train time; 0 means "match shots".
    pub query_per_class: usize,
    /// Outer iterations.
    pub iterations: usize,
    /// Differentiate through the inner updates (versus the first-order
    /// approximation evaluated at the adapted parameters).
    pub second_order: bool,
    /// Divide the summed meta-gradient by the meta-batch size.
    pub average_outer: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 0.05,
            inner_steps: 1,
            meta_batch: 4,
            shots: 2,
            ways: 4,
            query_per_class: 0,
            iterations: 300,
            second_order: true,
            average_outer: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // beta = 0 is the degenerate "no outer update" mode; alpha must be
        // positive for the inner loop to do anything.
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(TrainError::Config(format!(
                "need alpha > 0 and beta >= 0 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if self.inner_steps == 0 || self.meta_batch == 0 {
            return Err(TrainError::Config(
                "inner_steps and meta_batch must be at least 1".into(),
            ));
        }
        if self.shots == 0 || self.ways < 2 {
            return Err(TrainError::Config(format!(
                "need shots >= 1 and ways >= 2, got k={} n={}",
                self.shots, self.ways
            )));
        }
        Ok(())
    }

    fn queries(&self) -> usize {
        if self.query_per_class == 0 {
            self.shots
        } else {
            self.query_per_class
        }
    }
}

/// How a checkpoint's parameters came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Random,
    Pretrained,
    Maml,
}

impl Provenance {
    pub fn to_byte(self) -> u8 {
        match self {
            Provenance::Random => 0,
            Provenance::Pretrained => 1,
            Provenance::Maml => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Provenance> {
        match b {
            0 => Some(Provenance::Random),
            1 => Some(Provenance::Pretrained),
            2 => Some(Provenance::Maml),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Provenance::Random => "random",
            Provenance::Pretrained => "pretrained",
            Provenance::Maml => "maml",
        }
    }
}

/// A trained (or deliberately untrained) parameter snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub iteration: u64,
    pub params: ParamSet,
}

/// Per-iteration loss history of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
}

/// A model architecture bound to a task representation: how to compute a
/// task loss and how to score predictions. Classification scores one unit
/// per tile; segmentation scores one unit per pixel.
pub trait EpisodeModel {
    fn loss(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
        labels: &[usize],
        ways: &[u8],
    ) -> Result<Tensor, TrainError>;

    /// Predicted relabeled class per scoring unit.
    fn predictions(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
        ways: &[u8],
    ) -> Result<Vec<usize>, TrainError>;

    /// True relabeled class per scoring unit, aligned with `predictions`.
    fn targets(
        &self,
        ds: &RegionDataset,
        tiles: &[usize],
        labels: &[usize],
        ways: &[u8],
    ) -> Result<Vec<usize>, TrainError>;
}

/// Tile-level classification with the stacked-conv network.
pub struct Classifier {
    pub cnn: Cnn,
}

impl EpisodeModel for Classifier {
    fn loss(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
        labels: &[usize],
        _ways: &[u8],
    ) -> Result<Tensor, TrainError> {
        let logits = self.cnn.forward(params, &ds.batch(tiles)).map_err(model_err)?;
        Ok(softmax_cross_entropy(&logits, labels)?)
    }

    fn predictions(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
        _ways: &[u8],
    ) -> Result<Vec<usize>, TrainError> {
        let logits = self.cnn.forward(params, &ds.batch(tiles)).map_err(model_err)?;
        Ok(argmax_rows(&logits))
    }

    fn targets(
        &self,
        _ds: &RegionDataset,
        _tiles: &[usize],
        labels: &[usize],
        _ways: &[u8],
    ) -> Result<Vec<usize>, TrainError> {
        Ok(labels.to_vec())
    }
}

/// Pixel-level segmentation with the mini U-Net.
pub struct Segmenter {
    pub unet: Unet,
}

impl Segmenter {
    fn pixel_logits(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
    ) -> Result<Tensor, TrainError> {
        let logits = self.unet.forward(params, &ds.batch(tiles)).map_err(model_err)?;
        let s = logits.shape().to_vec();
        // [B,n,H,W] -> one row of n logits per pixel
        Ok(logits
            .permute(&[0, 2, 3, 1])?
            .reshape(&[s[0] * s[2] * s[3], s[1]])?)
    }
}

impl EpisodeModel for Segmenter {
    fn loss(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
        _labels: &[usize],
        ways: &[u8],
    ) -> Result<Tensor, TrainError> {
        let rows = self.pixel_logits(params, ds, tiles)?;
        let targets = ds.pixel_label_batch(tiles, ways)?;
        Ok(softmax_cross_entropy(&rows, &targets)?)
    }

    fn predictions(
        &self,
        params: &ParamSet,
        ds: &RegionDataset,
        tiles: &[usize],
        _ways: &[u8],
    ) -> Result<Vec<usize>, TrainError> {
        let rows = self.pixel_logits(params, ds, tiles)?;
        Ok(argmax_rows(&rows))
    }

    fn targets(
        &self,
        ds: &RegionDataset,
        tiles: &[usize],
        _labels: &[usize],
        ways: &[u8],
    ) -> Result<Vec<usize>, TrainError> {
        Ok(ds.pixel_label_batch(tiles, ways)?)
    }
}

fn model_err(e: ModelError) -> TrainError {
    match e {
        ModelError::Tensor(t) => TrainError::Tensor(t),
        ModelError::Config(msg) => TrainError::Config(msg),
    }
}

/// Row argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (rows, cols) = (s[0], s[1]);
    let data = logits.data();
    (0..rows)
        .map(|r| {
            let row = &data[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_finite(loss: f64, iteration: usize) -> Result<(), TrainError> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(TrainError::Diverged { iteration, loss });
    }
    Ok(())
}

/// Regular gradient-descent pretraining over merged support+query task
/// batches (batch size 2·k·n).
pub fn pretrain(
    model: &dyn EpisodeModel,
    init: &ParamSet,
    ds: &RegionDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    let mut sampler = TaskSampler::new(derive_seed(cfg.seed, "pretrain-tasks"));
    let mut params = init.detached();
    let mut report = TrainReport::default();
    for iteration in 0..cfg.iterations {
        let task = sampler.sample(ds, MetaSet::Train, cfg.shots, cfg.ways, cfg.queries())?;
        let mut tiles = task.support.clone();
        tiles.extend_from_slice(&task.query);
        let mut labels = task.support_labels.clone();
        labels.extend_from_slice(&task.query_labels);

        let leaves = params.leaves();
        let loss = model.loss(&leaves, ds, &tiles, &labels, &task.ways)?;
        check_finite(loss.item(), iteration)?;
        report.loss_history.push(loss.item());
        let grads = gradient(&loss, &leaves, false)?;
        params = leaves.descend(&grads, cfg.alpha)?.detached();
    }
    Ok((
        Checkpoint {
            provenance: Provenance::Pretrained,
            iteration: cfg.iterations as u64,
            params,
        },
        report,
    ))
}

/// Episodic meta-training. Each outer iteration samples `meta_batch`
/// tasks, adapts each for `inner_steps` on its support set, and applies
/// the summed query meta-gradient (second order unless disabled).
/// Meta-gradients accumulate in fixed task order, so the result does not
/// depend on evaluation interleaving.
pub fn maml_train(
    model: &dyn EpisodeModel,
    init: &ParamSet,
    ds: &RegionDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    let mut sampler = TaskSampler::new(derive_seed(cfg.seed, "maml-tasks"));
    let mut theta = init.detached();
    let mut report = TrainReport::default();
    for iteration in 0..cfg.iterations {
        let tasks: Vec<Task> = (0..cfg.meta_batch)
            .map(|_| sampler.sample(ds, MetaSet::Train, cfg.shots, cfg.ways, cfg.queries()))
            .collect::<Result<_, _>>()?;

        let mut meta_sum: Option<ParamSet> = None;
        let mut query_loss_sum = 0.0;
        for task in &tasks {
            let support = |p: &ParamSet| {
                model.loss(p, ds, &task.support, &task.support_labels, &task.ways)
            };
            let query =
                |p: &ParamSet| model.loss(p, ds, &task.query, &task.query_labels, &task.ways);
            let (meta, _phi, q) = if cfg.second_order {
                gradient_through_update(&theta, support, query, cfg.alpha, cfg.inner_steps)?
            } else {
                gradient_at_adapted(&theta, support, query, cfg.alpha, cfg.inner_steps)?
            };
            query_loss_sum += q;
            meta_sum = Some(match meta_sum {
                Some(acc) => acc.add(&meta)?,
                None => meta,
            });
        }
        let mean_loss = query_loss_sum / cfg.meta_batch as f64;
        check_finite(mean_loss, iteration)?;
        report.loss_history.push(mean_loss);

        let step = if cfg.average_outer {
            cfg.beta / cfg.meta_batch as f64
        } else {
            cfg.beta
        };
        theta = theta
            .descend(&meta_sum.expect("meta_batch >= 1"), step)?
            .detached();
    }
    Ok((
        Checkpoint {
            provenance: Provenance::Maml,
            iteration: cfg.iterations as u64,
            params: theta,
        },
        report,
    ))
}

/// Gradient descent from `params` on one fixed loss; the input set is
/// never mutated. Zero steps (or a zero step size) returns the input
/// values bit-exactly.
pub fn adapt_with<E: From<crate::error::TensorError>>(
    params: &ParamSet,
    loss: impl Fn(&ParamSet) -> Result<Tensor, E>,
    alpha: f64,
    steps: usize,
) -> Result<ParamSet, E> {
    if steps == 0 || alpha == 0.0 {
        return Ok(params.detached());
    }
    let mut phi = params.leaves();
    for _ in 0..steps {
        let l = loss(&phi)?;
        let g = gradient(&l, &phi, false)?;
        phi = phi.descend(&g, alpha)?.leaves();
    }
    Ok(phi.detached())
}

/// Full-batch adaptation on a support set ("gradient steps on the same
/// data batch").
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    model: &dyn EpisodeModel,
    params: &ParamSet,
    ds: &RegionDataset,
    tiles: &[usize],
    labels: &[usize],
    ways: &[u8],
    alpha: f64,
    steps: usize,
) -> Result<ParamSet, TrainError> {
    if tiles.is_empty() && steps > 0 && alpha != 0.0 {
        return Err(TrainError::EmptySupport { steps });
    }
    adapt_with(params, |p| model.loss(p, ds, tiles, labels, ways), alpha, steps)
}

/// Grid search over (step size, step count) pairs for fine-tuning, scored
/// by mean query accuracy over meta-val tasks at the given shot. Ties
/// break toward the smaller step size, then fewer steps.
#[allow(clippy::too_many_arguments)]
pub fn finetune_grid_search(
    model: &dyn EpisodeModel,
    params: &ParamSet,
    ds: &RegionDataset,
    shot: usize,
    ways: usize,
    alphas: &[f64],
    step_counts: &[usize],
    num_tasks: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<(f64, usize), TrainError> {
    if alphas.is_empty() || step_counts.is_empty() {
        return Err(TrainError::Config("empty fine-tuning grid".into()));
    }
    if shot == 0 {
        return Err(TrainError::Config(
            "grid search needs at least one shot to adapt on".into(),
        ));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut step_counts = step_counts.to_vec();
    step_counts.sort_unstable();

    let mut sampler = TaskSampler::new(derive_seed(seed, "grid-search"));
    let tasks: Vec<Task> = (0..num_tasks.max(1))
        .map(|_| sampler.sample(ds, MetaSet::Val, shot, ways, query_per_class))
        .collect::<Result<_, _>>()?;

    let mut best = (alphas[0], step_counts[0]);
    let mut best_acc = f64::NEG_INFINITY;
    for &alpha in &alphas {
        for &steps in &step_counts {
            let mut acc_sum = 0.0;
            for task in &tasks {
                let adapted = adapt(
                    model,
                    params,
                    ds,
                    &task.support,
                    &task.support_labels,
                    &task.ways,
                    alpha,
                    steps,
                )?;
                let preds = model.predictions(&adapted, ds, &task.query, &task.ways)?;
                let truth = model.targets(ds, &task.query, &task.query_labels, &task.ways)?;
                let correct = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
                acc_sum += correct as f64 / truth.len() as f64;
            }
            let acc = acc_sum / tasks.len() as f64;
            if acc > best_acc {
                best_acc = acc;
                best = (alpha, steps);
            }
        }
    }
    Ok(best)
}

// ── Checkpoint file format ──────────────────────────────────────────────
//
// Little-endian: magic "MAMLCKPT", u32 version=1, u8 provenance
// (0 random / 1 pretrained / 2 maml), u64 iteration, u32 tensor count;
// per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
// f64 data row-major.

const CKPT_MAGIC: &[u8; 8] = b"MAMLCKPT";
const CKPT_VERSION: u32 = 1;

pub fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(cp.provenance.to_byte());
    out.extend_from_slice(&cp.iteration.to_le_bytes());
    out.extend_from_slice(&(cp.params.len() as u32).to_le_bytes());
    for (name, tensor) in cp.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct CkptReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> CkptReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.offset + n > self.bytes.len() {
            return Err(TrainError::Truncated {
                path: self.path.display().to_string(),
                offset: self.offset,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = CkptReader {
        bytes,
        offset: 0,
        path,
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(TrainError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(TrainError::UnsupportedVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let prov_byte = r.take(1)?[0];
    let provenance = Provenance::from_byte(prov_byte).ok_or_else(|| TrainError::BadProvenance {
        path: path.display().to_string(),
        byte: prov_byte,
    })?;
    let iteration = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name_offset = r.offset;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| {
                TrainError::Config(format!(
                    "{}: tensor name at byte offset {name_offset} is not UTF-8",
                    path.display()
                ))
            })?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(Checkpoint {
        provenance,
        iteration,
        params: ParamSet::new(entries)?,
    })
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut f = fs::File::create(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&encode_checkpoint(cp)).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_regions, SyntheticConfig};
    use crate::models::CnnConfig;
    use crate::TensorError;

    fn tiny_dataset(shift: f64, seed: u64) -> RegionDataset {
        let mut cfg = SyntheticConfig::new(6, 2, 40, shift, 8, 3, seed);
        cfg.min_class_fraction = 0.3;
        generate_synthetic_regions(&cfg).unwrap()
    }

    fn tiny_classifier() -> Classifier {
        Classifier {
            cnn: Cnn::new(CnnConfig {
                in_channels: 3,
                num_classes: 2,
                input_size: 8,
                width: 4,
                depth: 3,
            })
            .unwrap(),
        }
    }

    fn quad_loss(center: f64) -> impl Fn(&ParamSet) -> Result<Tensor, TensorError> {
        move |p: &ParamSet| {
            let x = p.get("x")?;
            let d = x.add_scalar(-center);
            Ok(d.mul(&d)?.sum_all().scale(0.5))
        }
    }

    fn one_param(v: f64) -> ParamSet {
        ParamSet::new(vec![(
            "x".to_string(),
            Tensor::from_vec(&[1], vec![v]).unwrap(),
        )])
        .unwrap()
    }

    #[test]
    fn adapt_zero_steps_is_bit_exact() {
        let p = one_param(1.25);
        let out = adapt_with(&p, quad_loss(2.0), 0.5, 0).unwrap();
        assert_eq!(
            p.get("x").unwrap().item().to_bits(),
            out.get("x").unwrap().item().to_bits()
        );
        let out = adapt_with(&p, quad_loss(2.0), 0.0, 5).unwrap();
        assert_eq!(
            p.get("x").unwrap().item().to_bits(),
            out.get("x").unwrap().item().to_bits()
        );
    }

    #[test]
    fn adapt_quadratic_one_step() {
        // θ=0, center 2, α=0.5 -> φ = 0 - 0.5·(0-2) = 1.
        let p = one_param(0.0);
        let out = adapt_with(&p, quad_loss(2.0), 0.5, 1).unwrap();
        assert!((out.get("x").unwrap().item() - 1.0).abs() < 1e-12);
        // input untouched
        assert_eq!(p.get("x").unwrap().item(), 0.0);
    }

    #[test]
    fn maml_update_rule_matches_manual_meta_gradient() {
        let ds = tiny_dataset(1.0, 5);
        let model = tiny_classifier();
        let init = model.cnn.init(3);
        let cfg = TrainConfig {
            alpha: 0.2,
            beta: 0.1,
            inner_steps: 1,
            meta_batch: 1,
            shots: 2,
            ways: 2,
            iterations: 1,
            second_order: true,
            ..TrainConfig::default()
        };
        let (ckpt, _) = maml_train(&model, &init, &ds, &cfg).unwrap();

        // Reproduce the single sampled task and its meta-gradient by hand.
        let mut sampler = TaskSampler::new(derive_seed(cfg.seed, "maml-tasks"));
        let task = sampler.sample(&ds, MetaSet::Train, 2, 2, 2).unwrap();
        let support =
            |p: &ParamSet| model.loss(p, &ds, &task.support, &task.support_labels, &task.ways);
        let query =
            |p: &ParamSet| model.loss(p, &ds, &task.query, &task.query_labels, &task.ways);
        let (meta, _, _) =
            gradient_through_update::<TrainError, _, _>(&init, support, query, 0.2, 1).unwrap();
        let manual = init.descend(&meta, 0.1).unwrap();

        for (a, b) in ckpt.params.flatten().iter().zip(manual.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_order_differs_by_one_minus_alpha_on_quadratic() {
        let alpha = 0.25;
        let theta = one_param(0.0);
        let (so, _, _) = gradient_through_update::<TensorError, _, _>(
            &theta,
            quad_loss(2.0),
            quad_loss(4.0),
            alpha,
            1,
        )
        .unwrap();
        let (fo, _, _) = gradient_at_adapted::<TensorError, _, _>(
            &theta,
            quad_loss(2.0),
            quad_loss(4.0),
            alpha,
            1,
        )
        .unwrap();
        let ratio = so.get("x").unwrap().item() / fo.get("x").unwrap().item();
        assert!((ratio - (1.0 - alpha)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_family_meta_training_converges() {
        // Tasks: support center c, query center c'. After one inner step
        // φ = (1-α)θ + αc, so θ* minimizing the expected post-adaptation
        // loss is E[c' - αc]/(1-α); the meta-gradient per task is
        // (φ - c')·(1-α).
        let pairs = [(2.0, 4.0), (0.0, 1.0), (-1.0, 2.0), (3.0, 3.0)];
        let alpha = 0.5;
        let beta = 0.2;
        let mut theta = one_param(0.0);
        for step in 0..120 {
            let (c, cq) = pairs[step % pairs.len()];
            let (meta, phi, _) = gradient_through_update::<TensorError, _, _>(
                &theta,
                quad_loss(c),
                quad_loss(cq),
                alpha,
                1,
            )
            .unwrap();
            let phi_v = phi.get("x").unwrap().item();
            let want = (phi_v - cq) * (1.0 - alpha);
            assert!((meta.get("x").unwrap().item() - want).abs() < 1e-10);
            theta = theta.descend(&meta, beta).unwrap().detached();
        }
        let expect: f64 = pairs.iter().map(|(c, cq)| cq - alpha * c).sum::<f64>()
            / pairs.len() as f64
            / (1.0 - alpha);
        assert!(
            (theta.get("x").unwrap().item() - expect).abs() < 0.05,
            "θ={} vs θ*={}",
            theta.get("x").unwrap().item(),
            expect
        );
    }

    #[test]
    fn pretrain_zero_iterations_returns_init() {
        let ds = tiny_dataset(0.0, 7);
        let model = tiny_classifier();
        let init = model.cnn.init(11);
        let cfg = TrainConfig {
            iterations: 0,
            shots: 2,
            ways: 2,
            ..TrainConfig::default()
        };
        let (ckpt, report) = pretrain(&model, &init, &ds, &cfg).unwrap();
        assert!(report.loss_history.is_empty());
        let a: Vec<u64> = init.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = ckpt.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(ckpt.provenance, Provenance::Pretrained);
    }

    #[test]
    fn pretrain_learns_separable_classes() {
        let ds = tiny_dataset(0.0, 9);
        let model = tiny_classifier();
        let init = model.cnn.init(13);
        let cfg = TrainConfig {
            alpha: 0.05,
            shots: 2,
            ways: 2,
            iterations: 200,
            ..TrainConfig::default()
        };
        let (ckpt, report) = pretrain(&model, &init, &ds, &cfg).unwrap();
        assert!(report.loss_history.iter().all(|l| l.is_finite()));

        // Training accuracy over meta-train tiles, in region-sized batches.
        let mut correct = 0usize;
        let mut total = 0usize;
        let ways = [0u8, 1];
        for region in ds.regions_in(MetaSet::Train) {
            let tiles: Vec<usize> = (0..ds.tiles.len())
                .filter(|&i| ds.tiles[i].region_id == region)
                .collect();
            let preds = model.predictions(&ckpt.params, &ds, &tiles, &ways).unwrap();
            for (&i, p) in tiles.iter().zip(preds) {
                correct += usize::from(usize::from(ds.tiles[i].tile_label) == p);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "training accuracy {acc}");
    }

    #[test]
    fn maml_zero_beta_keeps_theta_bit_exact() {
        let ds = tiny_dataset(1.0, 15);
        let model = tiny_classifier();
        let init = model.cnn.init(17);
        let cfg = TrainConfig {
            alpha: 0.2,
            beta: 0.0,
            inner_steps: 1,
            meta_batch: 2,
            shots: 2,
            ways: 2,
            iterations: 3,
            ..TrainConfig::default()
        };
        let (ckpt, _) = maml_train(&model, &init, &ds, &cfg).unwrap();
        for (a, b) in init.flatten().iter().zip(ckpt.params.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grid_search_single_pair_and_tie_break() {
        let ds = tiny_dataset(1.0, 19);
        let model = tiny_classifier();
        let params = model.cnn.init(21);
        let pair =
            finetune_grid_search(&model, &params, &ds, 1, 2, &[0.3], &[2], 4, 2, 1).unwrap();
        assert_eq!(pair, (0.3, 2));

        // alpha = 0 pairs leave the params untouched, so every grid point
        // scores identically and the tie-break picks the smallest entry.
        let pair =
            finetune_grid_search(&model, &params, &ds, 1, 2, &[0.0, 0.0], &[5, 1], 4, 2, 1)
                .unwrap();
        assert_eq!(pair, (0.0, 1));
    }

    #[test]
    fn grid_search_returns_the_argmax() {
        let ds = tiny_dataset(1.5, 23);
        let model = tiny_classifier();
        let params = model.cnn.init(25);
        let alphas = [0.05, 0.5];
        let steps = [1, 3];
        let (ba, bs) =
            finetune_grid_search(&model, &params, &ds, 2, 2, &alphas, &steps, 4, 2, 9).unwrap();

        // Recompute every grid point on the same task sample.
        let mut sampler = TaskSampler::new(derive_seed(9, "grid-search"));
        let tasks: Vec<Task> = (0..4)
            .map(|_| sampler.sample(&ds, MetaSet::Val, 2, 2, 2).unwrap())
            .collect();
        let score = |alpha: f64, steps: usize| {
            let mut acc = 0.0;
            for task in &tasks {
                let adapted = adapt(
                    &model,
                    &params,
                    &ds,
                    &task.support,
                    &task.support_labels,
                    &task.ways,
                    alpha,
                    steps,
                )
                .unwrap();
                let preds = model
                    .predictions(&adapted, &ds, &task.query, &task.ways)
                    .unwrap();
                let truth = model
                    .targets(&ds, &task.query, &task.query_labels, &task.ways)
                    .unwrap();
                let c = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
                acc += c as f64 / truth.len() as f64;
            }
            acc / tasks.len() as f64
        };
        let best = score(ba, bs);
        for &a in &alphas {
            for &s in &steps {
                assert!(best >= score(a, s) - 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let model = tiny_classifier();
        let cp = Checkpoint {
            provenance: Provenance::Maml,
            iteration: 42,
            params: model.cnn.init(1),
        };
        let dir = std::env::temp_dir().join(format!("regionmeta-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&cp, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.provenance, Provenance::Maml);
        assert_eq!(loaded.iteration, 42);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let names_a: Vec<&str> = cp.params.names().collect();
        let names_b: Vec<&str> = loaded.params.names().collect();
        assert_eq!(names_a, names_b);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_version_and_truncation_are_distinct_errors() {
        let model = tiny_classifier();
        let cp = Checkpoint {
            provenance: Provenance::Random,
            iteration: 0,
            params: model.cnn.init(2),
        };
        let mut bytes = encode_checkpoint(&cp);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_checkpoint(&bytes, Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, TrainError::UnsupportedVersion { version: 7, .. }));

        let bytes = encode_checkpoint(&cp);
        let err = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, TrainError::Truncated { .. }));

        let err = decode_checkpoint(b"NOTMAGIC!!!", Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, TrainError::BadMagic { .. }));
    }

    #[test]
    fn segmenter_runs_one_meta_iteration() {
        let mut gen = SyntheticConfig::new(4, 3, 24, 1.0, 8, 2, 31);
        gen.with_pixel_labels = true;
        gen.min_class_fraction = 0.2;
        let ds = generate_synthetic_regions(&gen).unwrap();
        let model = Segmenter {
            unet: Unet::new(crate::models::UnetConfig {
                in_channels: 2,
                num_classes: 3,
                levels: 2,
                base_width: 4,
            })
            .unwrap(),
        };
        let init = model.unet.init(33);
        let cfg = TrainConfig {
            alpha: 0.1,
            beta: 0.05,
            inner_steps: 1,
            meta_batch: 1,
            shots: 1,
            ways: 3,
            iterations: 2,
            ..TrainConfig::default()
        };
        let (ckpt, report) = maml_train(&model, &init, &ds, &cfg).unwrap();
        assert_eq!(report.loss_history.len(), 2);
        assert!(report.loss_history.iter().all(|l| l.is_finite()));
        let moved = init
            .flatten()
            .iter()
            .zip(ckpt.params.flatten())
            .any(|(a, b)| a != &b);
        assert!(moved);
    }
}
