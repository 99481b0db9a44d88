//! Subcommand implementations and exit-code mapping.

use crate::config::{Arch, ExperimentConfig, SplitMode, Source};
use regionmeta::analysis::{
    alpha_grid, embedding_csv, loss_slice_csv, loss_surface_1d, weight_adaptation_map,
};
use regionmeta::data::{
    extract_features, generate_synthetic_regions, load_tiles, sample_task, split_meta_clustered,
    split_meta_random, write_tiles, MetaSet, RegionDataset, SyntheticConfig,
};
use regionmeta::error::{DataError, MetricError, ModelError, TrainError};
use regionmeta::metrics::{metrics_csv, pooled_metrics_csv, shot_curve, ShotCurveConfig};
use regionmeta::models::{Cnn, CnnConfig, Unet, UnetConfig};
use regionmeta::rng::derive_seed;
use regionmeta::train::{
    finetune_grid_search, load_checkpoint, maml_train, pretrain, save_checkpoint, Checkpoint,
    Classifier, EpisodeModel, Provenance, Segmenter, TrainConfig, TrainReport,
};
use regionmeta::ParamSet;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Failure classes mapped to process exit codes: 2 usage/config, 3
/// numerical failure, 4 missing or unusable input.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Numeric(String),
    Missing(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Missing(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Numeric(m) | CliError::Missing(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        match e {
            DataError::Io { .. }
            | DataError::BadMagic { .. }
            | DataError::UnsupportedVersion { .. }
            | DataError::Truncated { .. }
            | DataError::LabelOutOfRange { .. }
            | DataError::BadIndexLine { .. } => CliError::Missing(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io { .. }
            | TrainError::BadMagic { .. }
            | TrainError::UnsupportedVersion { .. }
            | TrainError::Truncated { .. }
            | TrainError::BadProvenance { .. } => CliError::Missing(e.to_string()),
            TrainError::Data(d) => CliError::from(d),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> CliError {
        match e {
            MetricError::Train(t) => CliError::from(t),
            MetricError::Data(d) => CliError::from(d),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<regionmeta::AnalysisError> for CliError {
    fn from(e: regionmeta::AnalysisError) -> CliError {
        match e {
            regionmeta::AnalysisError::Train(t) => CliError::from(t),
            regionmeta::AnalysisError::Data(d) => CliError::from(d),
            regionmeta::AnalysisError::Metric(m) => CliError::from(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub const USAGE: &str = "\
regionmeta — episodic meta-learning experiments on region-shifted tiles

Usage:
  regionmeta generate [--config PATH] [--seed N] [--out DIR]
  regionmeta train --mode {maml|pretrain} [--config PATH] [--seed N] [--out DIR]
  regionmeta evaluate [--config PATH] [--seed N] [--out DIR] CHECKPOINT...
  regionmeta analyze {weight-pca|loss-slice} [--config PATH] [--seed N] [--out DIR] CHECKPOINT

Flags:
  --config PATH   experiment config file (defaults apply when omitted)
  --seed N        override the config's global seed
  --out DIR       output directory (default: out)
";

struct ParsedArgs {
    command: String,
    mode: Option<String>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    positionals: Vec<String>,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs, CliError> {
    let mut iter = args.iter().peekable();
    let command = iter
        .next()
        .ok_or_else(|| CliError::Usage("missing subcommand".into()))?
        .clone();
    let mut parsed = ParsedArgs {
        command,
        mode: None,
        config: None,
        seed: None,
        out: PathBuf::from("out"),
        positionals: Vec::new(),
    };
    while let Some(arg) = iter.next() {
        match arg.as_str() {
            "--config" => {
                let v = iter
                    .next()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
                parsed.config = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = iter
                    .next()
                    .ok_or_else(|| CliError::Usage("--seed needs a number".into()))?;
                parsed.seed = Some(
                    v.parse()
                        .map_err(|_| CliError::Usage(format!("--seed: bad number {v:?}")))?,
                );
            }
            "--out" => {
                let v = iter
                    .next()
                    .ok_or_else(|| CliError::Usage("--out needs a directory".into()))?;
                parsed.out = PathBuf::from(v);
            }
            "--mode" => {
                let v = iter
                    .next()
                    .ok_or_else(|| CliError::Usage("--mode needs maml|pretrain".into()))?;
                parsed.mode = Some(v.clone());
            }
            other if other.starts_with("--") => {
                return Err(CliError::Usage(format!("unknown flag {other}")));
            }
            other => parsed.positionals.push(other.to_string()),
        }
    }
    Ok(parsed)
}

pub fn run(args: &[String]) -> Result<(), CliError> {
    let parsed = parse_args(args)?;
    let mut cfg = match &parsed.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(CliError::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = parsed.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&parsed.out)
        .map_err(|e| CliError::Missing(format!("cannot create {}: {e}", parsed.out.display())))?;

    match parsed.command.as_str() {
        "generate" => cmd_generate(&cfg, &parsed.out),
        "train" => {
            let mode = parsed
                .mode
                .as_deref()
                .ok_or_else(|| CliError::Usage("train requires --mode maml|pretrain".into()))?;
            cmd_train(&cfg, &parsed.out, mode)
        }
        "evaluate" => {
            if parsed.positionals.is_empty() {
                return Err(CliError::Usage(
                    "evaluate requires at least one checkpoint path".into(),
                ));
            }
            cmd_evaluate(&cfg, &parsed.out, &parsed.positionals)
        }
        "analyze" => {
            let sub = parsed
                .positionals
                .first()
                .ok_or_else(|| CliError::Usage("analyze requires weight-pca|loss-slice".into()))?;
            let ckpt = parsed
                .positionals
                .get(1)
                .ok_or_else(|| CliError::Usage("analyze requires a checkpoint path".into()))?;
            cmd_analyze(&cfg, &parsed.out, sub, Path::new(ckpt))
        }
        other => Err(CliError::Usage(format!(
            "unknown subcommand {other:?}\n\n{USAGE}"
        ))),
    }
}

fn synthetic_config(cfg: &ExperimentConfig) -> SyntheticConfig {
    let mut gen = SyntheticConfig::new(
        cfg.regions,
        cfg.classes,
        cfg.tiles_per_region,
        cfg.sigma,
        cfg.image_size,
        cfg.channels,
        cfg.seed,
    );
    gen.with_pixel_labels = cfg.pixel_labels;
    gen.support_fraction = cfg.support_fraction;
    gen.min_class_fraction = cfg.min_class_fraction;
    gen.noise_std = cfg.noise_std;
    gen.tile_jitter = cfg.tile_jitter;
    gen.shift_common_scale = cfg.shift_common_scale;
    gen.shift_class_scale = cfg.shift_class_scale;
    gen.nuisance_dims = cfg.nuisance_dims;
    gen.nuisance_std = cfg.nuisance_std;
    gen.split_fractions = cfg.fractions;
    gen
}

/// Builds the dataset and applies the configured meta-split. Splitting is
/// re-derived from the config seed, so every command sees the same split.
fn build_dataset(cfg: &ExperimentConfig) -> Result<RegionDataset, CliError> {
    let ds = match cfg.source {
        Source::Synthetic => generate_synthetic_regions(&synthetic_config(cfg))?,
        Source::Files => load_tiles(Path::new(&cfg.index))?,
    };
    apply_split(ds, cfg)
}

fn apply_split(ds: RegionDataset, cfg: &ExperimentConfig) -> Result<RegionDataset, CliError> {
    let regions: Vec<String> = ds.split.keys().cloned().collect();
    let seed = derive_seed(cfg.seed, "region-split");
    let parts = match cfg.split {
        SplitMode::Random => split_meta_random(&regions, cfg.fractions, seed)?,
        SplitMode::Clustered => {
            let features: Vec<Vec<f64>> = regions
                .iter()
                .map(|region| {
                    let mut acc: Option<Vec<f64>> = None;
                    let mut count = 0usize;
                    for tile in ds.tiles.iter().filter(|t| &t.region_id == region) {
                        let f = extract_features(tile);
                        match &mut acc {
                            Some(sum) => {
                                for (s, v) in sum.iter_mut().zip(&f) {
                                    *s += v;
                                }
                            }
                            None => acc = Some(f),
                        }
                        count += 1;
                    }
                    acc.expect("regions are nonempty")
                        .into_iter()
                        .map(|v| v / count as f64)
                        .collect()
                })
                .collect();
            split_meta_clustered(&regions, &features, cfg.clusters.min(regions.len()), seed)?
        }
    };
    let mut split = BTreeMap::new();
    for (set, ids) in [MetaSet::Train, MetaSet::Val, MetaSet::Test].iter().zip(&parts) {
        for id in ids {
            split.insert(id.clone(), *set);
        }
    }
    Ok(ds.with_split(split)?)
}

/// Architecture bundle: the episode model plus a seeded initialization.
fn build_model(cfg: &ExperimentConfig) -> Result<(Box<dyn EpisodeModel>, ParamSet), CliError> {
    match cfg.arch {
        Arch::Cnn => {
            let cnn = Cnn::new(CnnConfig {
                in_channels: cfg.channels,
                num_classes: cfg.classes,
                input_size: cfg.image_size,
                width: cfg.width,
                depth: cfg.depth,
            })?;
            let init = cnn.init(derive_seed(cfg.seed, "init"));
            Ok((Box::new(Classifier { cnn }), init))
        }
        Arch::Unet => {
            let unet = Unet::new(UnetConfig {
                in_channels: cfg.channels,
                num_classes: cfg.classes,
                levels: cfg.levels,
                base_width: cfg.base_width,
            })?;
            let init = unet.init(derive_seed(cfg.seed, "init"));
            Ok((Box::new(Segmenter { unet }), init))
        }
    }
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        inner_steps: cfg.inner_steps,
        meta_batch: cfg.meta_batch,
        shots: cfg.shots,
        ways: cfg.ways,
        query_per_class: cfg.train_query_per_class,
        iterations: cfg.iterations,
        second_order: cfg.second_order,
        average_outer: cfg.average_outer,
        seed: cfg.seed,
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content)
        .map_err(|e| CliError::Missing(format!("cannot write {}: {e}", path.display())))
}

fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    if cfg.source != Source::Synthetic {
        return Err(CliError::Config(
            "generate only applies to dataset.source = synthetic".into(),
        ));
    }
    let ds = build_dataset(cfg)?;
    let dir = out.join("dataset");
    let index = write_tiles(&ds, &dir)?;

    let gen = synthetic_config(cfg);
    let mut manifest = String::new();
    let _ = writeln!(manifest, "generator.channels = {}", gen.channels);
    let _ = writeln!(manifest, "generator.classes = {}", gen.classes);
    let _ = writeln!(manifest, "generator.image_size = {}", gen.image_size);
    let _ = writeln!(manifest, "generator.min_class_fraction = {}", gen.min_class_fraction);
    let _ = writeln!(manifest, "generator.noise_std = {}", gen.noise_std);
    let _ = writeln!(manifest, "generator.pixel_labels = {}", gen.with_pixel_labels);
    let _ = writeln!(manifest, "generator.regions = {}", gen.num_regions);
    let _ = writeln!(manifest, "generator.seed = {}", gen.seed);
    let _ = writeln!(manifest, "generator.sigma = {}", gen.shift);
    let _ = writeln!(manifest, "generator.support_fraction = {}", gen.support_fraction);
    let _ = writeln!(manifest, "generator.tile_jitter = {}", gen.tile_jitter);
    let _ = writeln!(manifest, "generator.tiles_per_region = {}", gen.tiles_per_region);
    write_file(&dir.join("manifest.txt"), &manifest)?;
    println!("wrote {} and {} tiles", index.display(), ds.tiles.len());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, mode: &str) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    let (model, init) = build_model(cfg)?;
    let tc = train_config(cfg);

    // The untouched initialization doubles as the from-scratch baseline.
    let random = Checkpoint {
        provenance: Provenance::Random,
        iteration: 0,
        params: init.clone(),
    };
    save_checkpoint(&random, &out.join("random.ckpt"))?;

    let (ckpt, report): (Checkpoint, TrainReport) = match mode {
        "pretrain" => pretrain(model.as_ref(), &init, &ds, &tc)?,
        "maml" => maml_train(model.as_ref(), &init, &ds, &tc)?,
        other => {
            return Err(CliError::Usage(format!(
                "--mode must be maml or pretrain, got {other:?}"
            )))
        }
    };
    let ckpt_path = out.join(format!("{mode}.ckpt"));
    save_checkpoint(&ckpt, &ckpt_path)?;

    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in report.loss_history.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.6}", i, loss);
    }
    write_file(&out.join(format!("loss_{mode}.csv")), &csv)?;
    println!(
        "wrote {} ({} iterations, final loss {:.4})",
        ckpt_path.display(),
        report.loss_history.len(),
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, ckpt_paths: &[String]) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    let (model, _) = build_model(cfg)?;
    for path in ckpt_paths {
        let path = Path::new(path);
        let ckpt = load_checkpoint(path)?;

        // Meta-trained checkpoints adapt with their training step size;
        // pretrained and random baselines tune (α, steps) per shot on
        // meta-val.
        let tuned: Vec<(f64, usize)> = match ckpt.provenance {
            Provenance::Maml => cfg
                .eval_shots
                .iter()
                .map(|_| (cfg.alpha, cfg.inner_steps))
                .collect(),
            Provenance::Pretrained | Provenance::Random => {
                let mut pairs = Vec::with_capacity(cfg.eval_shots.len());
                for &shot in &cfg.eval_shots {
                    if shot == 0 {
                        pairs.push((cfg.grid_alphas[0], cfg.grid_steps[0]));
                    } else {
                        pairs.push(finetune_grid_search(
                            model.as_ref(),
                            &ckpt.params,
                            &ds,
                            shot,
                            cfg.ways,
                            &cfg.grid_alphas,
                            &cfg.grid_steps,
                            cfg.grid_tasks,
                            cfg.eval_query_per_class,
                            derive_seed(cfg.seed, "grid"),
                        )?);
                    }
                }
                pairs
            }
        };

        let rows = shot_curve(
            model.as_ref(),
            &ckpt,
            &ds,
            &ShotCurveConfig {
                shots: cfg.eval_shots.clone(),
                tuned,
                tasks_per_point: cfg.eval_tasks,
                ways: cfg.ways,
                query_per_class: cfg.eval_query_per_class,
                ignore_classes: cfg.ignore_classes.clone(),
                seed: derive_seed(cfg.seed, "eval"),
            },
        )?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "checkpoint".into());
        write_file(&out.join(format!("metrics_{stem}.csv")), &metrics_csv(&rows))?;
        write_file(
            &out.join(format!("metrics_{stem}_pooled.csv")),
            &pooled_metrics_csv(&rows),
        )?;
        println!("evaluated {} over {} shots", path.display(), rows.len());
    }
    Ok(())
}

fn cmd_analyze(cfg: &ExperimentConfig, out: &Path, sub: &str, ckpt_path: &Path) -> Result<(), CliError> {
    if sub != "weight-pca" && sub != "loss-slice" {
        return Err(CliError::Usage(format!(
            "unknown analyze subcommand {sub:?}\n\n{USAGE}"
        )));
    }
    let ds = build_dataset(cfg)?;
    let (model, _) = build_model(cfg)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    match sub {
        "weight-pca" => {
            let rows = weight_adaptation_map(
                model.as_ref(),
                &ckpt,
                &ds,
                cfg.analysis_tasks,
                cfg.ways,
                cfg.analysis_alpha,
                derive_seed(cfg.seed, "analysis"),
            )?;
            write_file(&out.join("weight_pca.csv"), &embedding_csv(&rows))?;
            println!("wrote weight_pca.csv ({} rows)", rows.len());
        }
        "loss-slice" => {
            let seed = derive_seed(cfg.seed, "loss-slice");
            let support = sample_task(
                &ds,
                MetaSet::Test,
                cfg.shots,
                cfg.ways,
                cfg.eval_query_per_class,
                seed,
            )?;
            let queries = colocated_query_tasks(
                &ds,
                &support,
                cfg.slice_query_tasks,
                cfg.ways,
                cfg.eval_query_per_class,
                derive_seed(seed, "queries"),
            )?;
            let alpha_max = if cfg.slice_alpha_max > 0.0 {
                cfg.slice_alpha_max
            } else if ckpt.provenance == Provenance::Maml {
                1.0
            } else {
                0.15
            };
            let grid = alpha_grid(alpha_max, cfg.slice_points);
            let slice = loss_surface_1d(model.as_ref(), &ckpt, &ds, &support, &queries, &grid)?;
            write_file(&out.join("loss_slice.csv"), &loss_slice_csv(&slice))?;
            println!(
                "wrote loss_slice.csv ({} alphas x {} query tasks, |g| = {:.4})",
                slice.alphas.len(),
                slice.losses.len(),
                slice.grad_norm
            );
        }
        _ => unreachable!("subcommand validated above"),
    }
    Ok(())
}

/// Query tasks pinned to the support task's region and season, sampled
/// through a split narrowed to that region.
pub fn colocated_query_tasks(
    ds: &RegionDataset,
    support: &regionmeta::data::Task,
    count: usize,
    ways: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Vec<regionmeta::data::Task>, CliError> {
    let mut split = BTreeMap::new();
    for region in ds.split.keys() {
        let set = if region == &support.region_id {
            MetaSet::Test
        } else {
            MetaSet::Train
        };
        split.insert(region.clone(), set);
    }
    let narrowed = ds.clone().with_split(split)?;
    let mut sampler = regionmeta::data::TaskSampler::new(seed);
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        tasks.push(sampler.sample(&narrowed, MetaSet::Test, 1, ways, query_per_class)?);
    }
    Ok(tasks)
}
