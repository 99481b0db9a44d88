//! The experiment configuration file.
//!
//! Line-based format: `section.key = value`, one setting per line; lines
//! starting with '#' and blank lines are ignored. Every key has a default,
//! and unknown keys are rejected so typos cannot silently disappear.

use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitMode {
    Random,
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    Cnn,
    Unet,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Cnn => "cnn",
            Arch::Unet => "unet",
        })
    }
}

/// All experiment settings with their defaults.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,

    // dataset
    pub source: Source,
    pub index: String,
    pub regions: usize,
    pub classes: usize,
    pub tiles_per_region: usize,
    pub sigma: f64,
    pub image_size: usize,
    pub channels: usize,
    pub pixel_labels: bool,
    pub support_fraction: f64,
    pub min_class_fraction: f64,
    pub noise_std: f64,
    pub tile_jitter: f64,
    pub shift_common_scale: f64,
    pub shift_class_scale: f64,
    pub nuisance_dims: usize,
    pub nuisance_std: f64,
    pub split: SplitMode,
    pub fractions: [f64; 3],
    pub clusters: usize,

    // model
    pub arch: Arch,
    pub width: usize,
    pub depth: usize,
    pub levels: usize,
    pub base_width: usize,

    // train
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub shots: usize,
    pub ways: usize,
    pub train_query_per_class: usize,
    pub iterations: usize,
    pub second_order: bool,
    pub average_outer: bool,

    // eval
    pub eval_shots: Vec<usize>,
    pub eval_tasks: usize,
    pub eval_query_per_class: usize,
    pub grid_alphas: Vec<f64>,
    pub grid_steps: Vec<usize>,
    pub grid_tasks: usize,
    pub ignore_classes: Vec<usize>,

    // analysis
    pub analysis_tasks: usize,
    pub analysis_alpha: f64,
    pub slice_points: usize,
    /// 0 picks the grid by checkpoint provenance (1.0 for meta-trained,
    /// 0.15 for pretrained/random).
    pub slice_alpha_max: f64,
    pub slice_query_tasks: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            source: Source::Synthetic,
            index: String::new(),
            regions: 20,
            classes: 4,
            tiles_per_region: 120,
            sigma: 1.0,
            image_size: 32,
            channels: 3,
            pixel_labels: false,
            support_fraction: 0.5,
            min_class_fraction: 0.1,
            noise_std: 0.25,
            tile_jitter: 0.05,
            shift_common_scale: 2.0,
            shift_class_scale: 0.7,
            nuisance_dims: 0,
            nuisance_std: 0.0,
            split: SplitMode::Random,
            fractions: [0.57, 0.21, 0.22],
            clusters: 6,
            arch: Arch::Cnn,
            width: 16,
            depth: 5,
            levels: 2,
            base_width: 8,
            alpha: 0.5,
            beta: 0.05,
            inner_steps: 1,
            meta_batch: 4,
            shots: 2,
            ways: 4,
            train_query_per_class: 0,
            iterations: 300,
            second_order: true,
            average_outer: false,
            eval_shots: (0..=10).collect(),
            eval_tasks: 100,
            eval_query_per_class: 10,
            grid_alphas: vec![
                0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0,
            ],
            grid_steps: vec![1, 2, 5, 10, 50, 100],
            grid_tasks: 20,
            ignore_classes: Vec::new(),
            analysis_tasks: 200,
            analysis_alpha: 0.75,
            slice_points: 64,
            slice_alpha_max: 0.0,
            slice_query_tasks: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        ExperimentConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, String> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "dataset.source" => {
                self.source = match value {
                    "synthetic" => Source::Synthetic,
                    "files" => Source::Files,
                    _ => return Err(format!("dataset.source must be synthetic|files, got {value}")),
                }
            }
            "dataset.index" => self.index = value.to_string(),
            "dataset.regions" => self.regions = parse_num(key, value)?,
            "dataset.classes" => self.classes = parse_num(key, value)?,
            "dataset.tiles_per_region" => self.tiles_per_region = parse_num(key, value)?,
            "dataset.sigma" => self.sigma = parse_num(key, value)?,
            "dataset.image_size" => self.image_size = parse_num(key, value)?,
            "dataset.channels" => self.channels = parse_num(key, value)?,
            "dataset.pixel_labels" => self.pixel_labels = parse_bool(key, value)?,
            "dataset.support_fraction" => self.support_fraction = parse_num(key, value)?,
            "dataset.min_class_fraction" => self.min_class_fraction = parse_num(key, value)?,
            "dataset.noise_std" => self.noise_std = parse_num(key, value)?,
            "dataset.tile_jitter" => self.tile_jitter = parse_num(key, value)?,
            "dataset.shift_common_scale" => self.shift_common_scale = parse_num(key, value)?,
            "dataset.shift_class_scale" => self.shift_class_scale = parse_num(key, value)?,
            "dataset.nuisance_dims" => self.nuisance_dims = parse_num(key, value)?,
            "dataset.nuisance_std" => self.nuisance_std = parse_num(key, value)?,
            "dataset.split" => {
                self.split = match value {
                    "random" => SplitMode::Random,
                    "clustered" => SplitMode::Clustered,
                    _ => return Err(format!("dataset.split must be random|clustered, got {value}")),
                }
            }
            "dataset.fractions" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 3 {
                    return Err(format!("dataset.fractions needs 3 values, got {}", v.len()));
                }
                self.fractions = [v[0], v[1], v[2]];
            }
            "dataset.clusters" => self.clusters = parse_num(key, value)?,
            "model.arch" => {
                self.arch = match value {
                    "cnn" => Arch::Cnn,
                    "unet" => Arch::Unet,
                    _ => return Err(format!("model.arch must be cnn|unet, got {value}")),
                }
            }
            "model.width" => self.width = parse_num(key, value)?,
            "model.depth" => self.depth = parse_num(key, value)?,
            "model.levels" => self.levels = parse_num(key, value)?,
            "model.base_width" => self.base_width = parse_num(key, value)?,
            "train.alpha" => self.alpha = parse_num(key, value)?,
            "train.beta" => self.beta = parse_num(key, value)?,
            "train.inner_steps" => self.inner_steps = parse_num(key, value)?,
            "train.meta_batch" => self.meta_batch = parse_num(key, value)?,
            "train.k" => self.shots = parse_num(key, value)?,
            "train.n" => self.ways = parse_num(key, value)?,
            "train.query_per_class" => self.train_query_per_class = parse_num(key, value)?,
            "train.iterations" => self.iterations = parse_num(key, value)?,
            "train.second_order" => self.second_order = parse_bool(key, value)?,
            "train.average_outer" => self.average_outer = parse_bool(key, value)?,
            "eval.shots" => self.eval_shots = parse_list(key, value)?,
            "eval.tasks" => self.eval_tasks = parse_num(key, value)?,
            "eval.query_per_class" => self.eval_query_per_class = parse_num(key, value)?,
            "eval.grid_alphas" => self.grid_alphas = parse_list(key, value)?,
            "eval.grid_steps" => self.grid_steps = parse_list(key, value)?,
            "eval.grid_tasks" => self.grid_tasks = parse_num(key, value)?,
            "eval.ignore_classes" => self.ignore_classes = parse_list(key, value)?,
            "analysis.tasks" => self.analysis_tasks = parse_num(key, value)?,
            "analysis.alpha" => self.analysis_alpha = parse_num(key, value)?,
            "analysis.slice_points" => self.slice_points = parse_num(key, value)?,
            "analysis.slice_alpha_max" => self.slice_alpha_max = parse_num(key, value)?,
            "analysis.slice_query_tasks" => self.slice_query_tasks = parse_num(key, value)?,
            _ => return Err(format!("unknown config key: {key}")),
        }
        Ok(())
    }

    fn check(&self) -> Result<(), String> {
        if self.source == Source::Files && self.index.is_empty() {
            return Err("dataset.source = files requires dataset.index".into());
        }
        if self.slice_points < 2 {
            return Err("analysis.slice_points must be at least 2".into());
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true|false, got {value:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| format!("{key}: cannot parse list item {part:?}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_empty() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.eval_shots.len(), 11);
        assert_eq!(cfg.grid_alphas.len(), 11);
        assert_eq!(cfg.grid_steps, vec![1, 2, 5, 10, 50, 100]);
    }

    #[test]
    fn sets_values_and_ignores_comments() {
        let cfg = ExperimentConfig::parse(
            "# comment\nseed = 7\ndataset.sigma = 2.0\ntrain.k = 1\neval.shots = 0,1,10\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sigma, 2.0);
        assert_eq!(cfg.shots, 1);
        assert_eq!(cfg.eval_shots, vec![0, 1, 10]);
    }

    #[test]
    fn unknown_key_is_fatal() {
        let err = ExperimentConfig::parse("dataset.sgima = 2.0\n").unwrap_err();
        assert!(err.contains("unknown config key"), "{err}");
    }

    #[test]
    fn malformed_line_is_fatal() {
        assert!(ExperimentConfig::parse("seed 7\n").is_err());
    }

    #[test]
    fn files_source_requires_index() {
        assert!(ExperimentConfig::parse("dataset.source = files\n").is_err());
    }
}
