//! k-shot n-way task sampling.

use super::{MetaSet, Partition, RegionDataset, Task};
use crate::error::DataError;
use crate::rng::Rng;

/// Draws episodic tasks from a dataset. Owns its PRNG stream, so samplers
/// with distinct seeds can run concurrently and a given seed always yields
/// the same task sequence.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    rng: Rng,
}

impl TaskSampler {
    pub fn new(seed: u64) -> TaskSampler {
        TaskSampler {
            rng: Rng::for_purpose(seed, "task-sampler"),
        }
    }

    /// Samples one k-shot n-way task with `query_per_class` query tiles
    /// per class: uniformly over qualifying (region, season) pairs, then
    /// uniformly over qualifying classes, then tiles without replacement.
    pub fn sample(
        &mut self,
        ds: &RegionDataset,
        set: MetaSet,
        shots: usize,
        ways: usize,
        query_per_class: usize,
    ) -> Result<Task, DataError> {
        let queries = query_per_class.max(1);
        let mut qualifying: Vec<(String, String, Vec<u8>)> = Vec::new();
        for (region, season) in ds.region_seasons_in(set) {
            let support = ds.class_tiles(&region, &season, Partition::Support);
            let query = ds.class_tiles(&region, &season, Partition::Query);
            let classes: Vec<u8> = support
                .iter()
                .filter(|(class, tiles)| {
                    tiles.len() >= shots
                        && query.get(class).map(|q| q.len()).unwrap_or(0) >= queries
                })
                .map(|(class, _)| *class)
                .collect();
            if classes.len() >= ways {
                qualifying.push((region, season, classes));
            }
        }
        if qualifying.is_empty() {
            return Err(DataError::SamplingExhausted {
                meta_set: set.to_string(),
                ways,
                shots,
                queries,
            });
        }

        let (region, season, classes) = &qualifying[self.rng.below(qualifying.len())];
        let mut chosen: Vec<u8> = self
            .rng
            .sample_indices(classes.len(), ways)
            .into_iter()
            .map(|i| classes[i])
            .collect();
        chosen.sort_unstable();

        let support_pool = ds.class_tiles(region, season, Partition::Support);
        let query_pool = ds.class_tiles(region, season, Partition::Query);
        let mut support = Vec::with_capacity(shots * ways);
        let mut support_labels = Vec::with_capacity(shots * ways);
        let mut query = Vec::with_capacity(queries * ways);
        let mut query_labels = Vec::with_capacity(queries * ways);
        for (new_label, class) in chosen.iter().enumerate() {
            let pool = &support_pool[class];
            for i in self.rng.sample_indices(pool.len(), shots) {
                support.push(pool[i]);
                support_labels.push(new_label);
            }
            let pool = &query_pool[class];
            for i in self.rng.sample_indices(pool.len(), queries) {
                query.push(pool[i]);
                query_labels.push(new_label);
            }
        }

        Ok(Task {
            support,
            support_labels,
            query,
            query_labels,
            ways: chosen,
            region_id: region.clone(),
            season: season.clone(),
        })
    }
}

/// One-off sampling with a fresh stream.
pub fn sample_task(
    ds: &RegionDataset,
    set: MetaSet,
    shots: usize,
    ways: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Task, DataError> {
    TaskSampler::new(seed).sample(ds, set, shots, ways, query_per_class)
}
