//! Region-tagged datasets, meta-splits, and episodic task sampling.

mod io;
mod kmeans;
mod sampler;
mod split;
mod synthetic;

pub use io::{load_tiles, write_tiles, MAX_CLASSES};
pub use kmeans::{kmeans, KmeansResult};
pub use sampler::{sample_task, TaskSampler};
pub use split::{split_meta_clustered, split_meta_random};
pub use synthetic::{generate_synthetic_regions, SyntheticConfig};

use crate::error::DataError;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt;

/// Which meta-set a region belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaSet {
    Train,
    Val,
    Test,
}

impl fmt::Display for MetaSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaSet::Train => "meta-train",
            MetaSet::Val => "meta-val",
            MetaSet::Test => "meta-test",
        })
    }
}

/// Which half of a region a tile landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Support,
    Query,
}

/// One labeled image tile.
#[derive(Debug, Clone)]
pub struct LabeledTile {
    /// Pixel values, [C,H,W]. Values are f32-representable so the binary
    /// tile format roundtrips losslessly.
    pub pixels: Tensor,
    /// Optional per-pixel class grid, row-major H*W.
    pub pixel_labels: Option<Vec<u8>>,
    pub tile_label: u8,
    pub region_id: String,
    pub season: String,
}

impl LabeledTile {
    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Modal class of a pixel-label grid; ties break toward the lowest index.
pub fn majority_label(pixel_labels: &[u8]) -> u8 {
    debug_assert!(!pixel_labels.is_empty());
    let mut counts = [0usize; 256];
    for &l in pixel_labels {
        counts[l as usize] += 1;
    }
    let mut best = 0usize;
    for c in 1..256 {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// Fixed, training-free tile descriptor: per channel the mean, standard
/// deviation, and a 4-bin value histogram, concatenated (6 values per
/// channel).
pub fn extract_features(tile: &LabeledTile) -> Vec<f64> {
    let (c, h, w) = (tile.channels(), tile.height(), tile.width());
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(6 * c);
    for ch in 0..c {
        let vals = &tile.pixels.data()[ch * h * w..(ch + 1) * h * w];
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let mut hist = [0.0f64; 4];
        if hi > lo {
            let scale = 4.0 / (hi - lo);
            for &v in vals {
                let bin = (((v - lo) * scale) as usize).min(3);
                hist[bin] += 1.0;
            }
        } else {
            hist[0] = n;
        }
        out.push(mean);
        out.push(var.sqrt());
        out.extend(hist.iter().map(|x| x / n));
    }
    out
}

/// A labeled tile collection with region meta-split and per-region
/// support/query partition.
#[derive(Debug, Clone)]
pub struct RegionDataset {
    pub tiles: Vec<LabeledTile>,
    /// Parallel to `tiles`.
    pub partition: Vec<Partition>,
    /// region_id -> meta-set; every region appears exactly once.
    pub split: BTreeMap<String, MetaSet>,
    pub num_classes: usize,
}

impl RegionDataset {
    pub fn new(
        tiles: Vec<LabeledTile>,
        partition: Vec<Partition>,
        split: BTreeMap<String, MetaSet>,
        num_classes: usize,
    ) -> Result<RegionDataset, DataError> {
        let ds = RegionDataset {
            tiles,
            partition,
            split,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.tiles.is_empty() {
            return Err(DataError::Invalid("dataset has no tiles".into()));
        }
        if self.partition.len() != self.tiles.len() {
            return Err(DataError::Invalid(format!(
                "partition length {} != tile count {}",
                self.partition.len(),
                self.tiles.len()
            )));
        }
        let shape = self.tiles[0].pixels.shape().to_vec();
        for tile in &self.tiles {
            if tile.pixels.shape() != shape.as_slice() {
                return Err(DataError::Invalid(format!(
                    "inconsistent tile shapes: {:?} vs {:?}",
                    tile.pixels.shape(),
                    shape
                )));
            }
            if usize::from(tile.tile_label) >= self.num_classes {
                return Err(DataError::Invalid(format!(
                    "tile label {} out of range for {} classes",
                    tile.tile_label, self.num_classes
                )));
            }
            if !self.split.contains_key(&tile.region_id) {
                return Err(DataError::Invalid(format!(
                    "region {} missing from the meta-split",
                    tile.region_id
                )));
            }
            if let Some(grid) = &tile.pixel_labels {
                if grid.len() != tile.height() * tile.width() {
                    return Err(DataError::Invalid(format!(
                        "pixel label grid of {} entries for a {}x{} tile",
                        grid.len(),
                        tile.height(),
                        tile.width()
                    )));
                }
                if let Some(&bad) = grid.iter().find(|&&l| usize::from(l) >= self.num_classes) {
                    return Err(DataError::Invalid(format!(
                        "pixel label {bad} out of range for {} classes",
                        self.num_classes
                    )));
                }
                let maj = majority_label(grid);
                if maj != tile.tile_label {
                    return Err(DataError::Invalid(format!(
                        "tile label {} disagrees with pixel majority {maj}",
                        tile.tile_label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.tiles[0].channels()
    }

    pub fn height(&self) -> usize {
        self.tiles[0].height()
    }

    pub fn width(&self) -> usize {
        self.tiles[0].width()
    }

    /// Replaces the meta-split, revalidating region coverage.
    pub fn with_split(mut self, split: BTreeMap<String, MetaSet>) -> Result<RegionDataset, DataError> {
        self.split = split;
        self.validate()?;
        Ok(self)
    }

    /// Region ids in a meta-set, in sorted order.
    pub fn regions_in(&self, set: MetaSet) -> Vec<&str> {
        self.split
            .iter()
            .filter(|(_, s)| **s == set)
            .map(|(r, _)| r.as_str())
            .collect()
    }

    /// Sorted distinct (region, season) pairs within a meta-set.
    pub fn region_seasons_in(&self, set: MetaSet) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for tile in &self.tiles {
            if self.split.get(&tile.region_id) == Some(&set) {
                let pair = (tile.region_id.clone(), tile.season.clone());
                if !pairs.contains(&pair) {
                    pairs.push(pair);
                }
            }
        }
        pairs.sort();
        pairs
    }

    /// Tile indices of one (region, season, partition), grouped by class.
    pub fn class_tiles(
        &self,
        region: &str,
        season: &str,
        partition: Partition,
    ) -> BTreeMap<u8, Vec<usize>> {
        let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, tile) in self.tiles.iter().enumerate() {
            if tile.region_id == region && tile.season == season && self.partition[i] == partition
            {
                groups.entry(tile.tile_label).or_default().push(i);
            }
        }
        groups
    }

    /// Stacks tiles into a [B,C,H,W] batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.tiles[i].pixels.data());
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("consistent tile shapes")
    }

    /// Flattened per-pixel labels for a batch, remapped through `ways`
    /// (original class index -> position). Errors if a pixel's class is
    /// not in `ways` or a tile lacks pixel labels.
    pub fn pixel_label_batch(&self, indices: &[usize], ways: &[u8]) -> Result<Vec<usize>, DataError> {
        let mut out = Vec::with_capacity(indices.len() * self.height() * self.width());
        for &i in indices {
            let grid = self.tiles[i].pixel_labels.as_ref().ok_or_else(|| {
                DataError::Invalid(format!("tile {i} has no pixel labels"))
            })?;
            for &l in grid {
                let pos = ways.iter().position(|&wy| wy == l).ok_or_else(|| {
                    DataError::Invalid(format!("pixel class {l} not among task ways {ways:?}"))
                })?;
                out.push(pos);
            }
        }
        Ok(out)
    }
}

/// A k-shot n-way episode: support and query tiles from one region and
/// season, with class indices relabeled to 0..n-1 in sorted original
/// order. Support and query entries are grouped class-major (all k tiles
/// of way 0 first, then way 1, ...).
#[derive(Debug, Clone)]
pub struct Task {
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Original class indices backing labels 0..n-1, sorted ascending.
    pub ways: Vec<u8>,
    pub region_id: String,
    pub season: String,
}

impl Task {
    pub fn shots(&self) -> usize {
        self.support.len() / self.ways.len()
    }

    /// First `s` support examples of every class (the s-shot subset).
    pub fn support_prefix(&self, s: usize) -> (Vec<usize>, Vec<usize>) {
        let k = self.shots();
        debug_assert!(s <= k);
        let mut tiles = Vec::with_capacity(s * self.ways.len());
        let mut labels = Vec::with_capacity(s * self.ways.len());
        for way in 0..self.ways.len() {
            for j in 0..s {
                tiles.push(self.support[way * k + j]);
                labels.push(self.support_labels[way * k + j]);
            }
        }
        (tiles, labels)
    }

    /// Checks the task invariants against its dataset.
    pub fn validate(&self, ds: &RegionDataset) -> Result<(), DataError> {
        let n = self.ways.len();
        let k = self.shots();
        if self.support.len() != k * n || self.support_labels.len() != k * n {
            return Err(DataError::Invalid("ragged support set".into()));
        }
        if self.query.len() != self.query_labels.len() {
            return Err(DataError::Invalid("ragged query set".into()));
        }
        if self.ways.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Invalid("ways not sorted/unique".into()));
        }
        for (&i, &lab) in self.support.iter().zip(&self.support_labels) {
            if ds.tiles[i].tile_label != self.ways[lab] {
                return Err(DataError::Invalid("support relabeling broken".into()));
            }
        }
        for (&i, &lab) in self.query.iter().zip(&self.query_labels) {
            if ds.tiles[i].tile_label != self.ways[lab] {
                return Err(DataError::Invalid("query relabeling broken".into()));
            }
        }
        for way in 0..n {
            let count = self.support_labels.iter().filter(|&&l| l == way).count();
            if count != k {
                return Err(DataError::Invalid(format!(
                    "way {way} has {count} support tiles, expected {k}"
                )));
            }
        }
        for &i in self.support.iter().chain(&self.query) {
            let t = &ds.tiles[i];
            if t.region_id != self.region_id || t.season != self.season {
                return Err(DataError::Invalid("task mixes regions or seasons".into()));
            }
        }
        for &q in &self.query {
            if self.support.contains(&q) {
                return Err(DataError::Invalid(format!(
                    "tile {q} appears in both support and query"
                )));
            }
        }
        Ok(())
    }
}
