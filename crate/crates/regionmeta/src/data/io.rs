//! Binary tile files and the plain-text index that ties them together.
//!
//! Tile file (little-endian): magic "GTIL", u32 version=1, u32 C, u32 H,
//! u32 W, u8 has_pixel_labels, f32 pixels C*H*W row-major, then (if
//! flagged) u8 pixel labels H*W, u8 tile_label.
//!
//! Index file: one record per line, `region_id<TAB>season<TAB>relative_
//! path<TAB>tile_label`; lines starting with '#' are ignored.

use super::{majority_label, LabeledTile, MetaSet, Partition, RegionDataset};
use crate::error::DataError;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"GTIL";
const VERSION: u32 = 1;

/// Hard cap on class indices accepted from tile files; higher values are
/// reported as out of range rather than silently widening the label space.
pub const MAX_CLASSES: u8 = 128;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes one tile to the binary format.
pub fn encode_tile(tile: &LabeledTile) -> Vec<u8> {
    let (c, h, w) = (tile.channels(), tile.height(), tile.width());
    let mut out = Vec::with_capacity(4 + 4 + 12 + 1 + 4 * c * h * w + h * w + 1);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(u8::from(tile.pixel_labels.is_some()));
    for &v in tile.pixels.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(grid) = &tile.pixel_labels {
        out.extend_from_slice(grid);
    }
    out.push(tile.tile_label);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.path.display().to_string(),
                offset: self.offset,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }
}

/// Parses one tile from bytes; `path` is used only for diagnostics.
pub fn decode_tile(
    bytes: &[u8],
    path: &Path,
    region_id: &str,
    season: &str,
) -> Result<LabeledTile, DataError> {
    let mut r = Reader {
        bytes,
        offset: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let has_labels = r.u8()?;
    if has_labels > 1 {
        return Err(DataError::Invalid(format!(
            "{}: pixel-label flag must be 0 or 1, got {has_labels}",
            path.display()
        )));
    }
    let mut pixels = Vec::with_capacity(c * h * w);
    for _ in 0..c * h * w {
        let raw = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        pixels.push(f64::from(raw));
    }
    let pixel_labels = if has_labels == 1 {
        let grid = r.take(h * w)?.to_vec();
        if let Some(&bad) = grid.iter().find(|&&l| l >= MAX_CLASSES) {
            return Err(DataError::LabelOutOfRange {
                path: path.display().to_string(),
                label: bad,
                max: MAX_CLASSES - 1,
            });
        }
        Some(grid)
    } else {
        None
    };
    let tile_label = r.u8()?;
    if tile_label >= MAX_CLASSES {
        return Err(DataError::LabelOutOfRange {
            path: path.display().to_string(),
            label: tile_label,
            max: MAX_CLASSES - 1,
        });
    }
    if let Some(grid) = &pixel_labels {
        let maj = majority_label(grid);
        if maj != tile_label {
            return Err(DataError::Invalid(format!(
                "{}: tile label {tile_label} disagrees with pixel majority {maj}",
                path.display()
            )));
        }
    }
    Ok(LabeledTile {
        pixels: Tensor::from_vec(&[c, h, w], pixels)?,
        pixel_labels,
        tile_label,
        region_id: region_id.to_string(),
        season: season.to_string(),
    })
}

/// Writes every tile plus `index.tsv` under `dir`; returns the index path.
/// Output is byte-deterministic in the dataset.
pub fn write_tiles(ds: &RegionDataset, dir: &Path) -> Result<PathBuf, DataError> {
    let tiles_dir = dir.join("tiles");
    fs::create_dir_all(&tiles_dir).map_err(|e| io_err(&tiles_dir, e))?;
    let index_path = dir.join("index.tsv");
    let mut index = String::from("# region_id\tseason\tpath\ttile_label\n");
    for (i, tile) in ds.tiles.iter().enumerate() {
        let rel = format!("tiles/{i:05}.gtil");
        let path = dir.join(&rel);
        fs::write(&path, encode_tile(tile)).map_err(|e| io_err(&path, e))?;
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            tile.region_id, tile.season, rel, tile.tile_label
        ));
    }
    let mut f = fs::File::create(&index_path).map_err(|e| io_err(&index_path, e))?;
    f.write_all(index.as_bytes())
        .map_err(|e| io_err(&index_path, e))?;
    Ok(index_path)
}

/// Loads a dataset from an index file. The support/query partition is
/// re-derived deterministically (stratified per region and class, with a
/// stream keyed to the region id), and all regions start in meta-train;
/// apply a split with [`RegionDataset::with_split`].
pub fn load_tiles(index_path: &Path) -> Result<RegionDataset, DataError> {
    let text = fs::read_to_string(index_path).map_err(|e| io_err(index_path, e))?;
    let base = index_path.parent().unwrap_or_else(|| Path::new("."));

    let mut tiles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::BadIndexLine {
                path: index_path.display().to_string(),
                line: lineno + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let (region_id, season, rel, label_text) =
            (fields[0], fields[1], fields[2], fields[3]);
        let declared: u8 = label_text.parse().map_err(|_| DataError::BadIndexLine {
            path: index_path.display().to_string(),
            line: lineno + 1,
            reason: format!("tile label {label_text:?} is not an integer in 0..=255"),
        })?;
        let tile_path = base.join(rel);
        let bytes = fs::read(&tile_path).map_err(|e| io_err(&tile_path, e))?;
        let tile = decode_tile(&bytes, &tile_path, region_id, season)?;
        if tile.tile_label != declared {
            return Err(DataError::BadIndexLine {
                path: index_path.display().to_string(),
                line: lineno + 1,
                reason: format!(
                    "index label {declared} disagrees with tile file label {}",
                    tile.tile_label
                ),
            });
        }
        tiles.push(tile);
    }
    if tiles.is_empty() {
        return Err(DataError::Invalid(format!(
            "{}: index lists no tiles",
            index_path.display()
        )));
    }

    let num_classes = tiles
        .iter()
        .map(|t| {
            let mut m = usize::from(t.tile_label);
            if let Some(g) = &t.pixel_labels {
                for &l in g {
                    m = m.max(usize::from(l));
                }
            }
            m
        })
        .max()
        .unwrap()
        + 1;

    let partition = derive_partition(&tiles);
    let mut split = BTreeMap::new();
    for t in &tiles {
        split.insert(t.region_id.clone(), MetaSet::Train);
    }
    RegionDataset::new(tiles, partition, split, num_classes)
}

/// Stratified 50/50 support/query assignment, deterministic in the region
/// id and the within-region tile order.
fn derive_partition(tiles: &[LabeledTile]) -> Vec<Partition> {
    let mut partition = vec![Partition::Query; tiles.len()];
    let mut groups: BTreeMap<(String, u8), Vec<usize>> = BTreeMap::new();
    for (i, t) in tiles.iter().enumerate() {
        groups
            .entry((t.region_id.clone(), t.tile_label))
            .or_default()
            .push(i);
    }
    for ((region, class), mut members) in groups {
        let mut rng = Rng::new(derive_seed(
            derive_seed(u64::from(class), &region),
            "tile-partition",
        ));
        rng.shuffle(&mut members);
        let support_count = members.len().div_ceil(2);
        for &m in members.iter().take(support_count) {
            partition[m] = Partition::Support;
        }
    }
    partition
}
