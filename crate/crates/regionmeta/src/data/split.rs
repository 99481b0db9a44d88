//! Meta-train / meta-val / meta-test splitting.

use super::kmeans;
use crate::error::DataError;
use crate::rng::Rng;

/// Whole-cluster split targets, matching the clustered-protocol item
/// proportions.
const CLUSTER_SPLIT_FRACTIONS: [f64; 3] = [0.57, 0.21, 0.22];

/// Uniformly random disjoint exhaustive split with sizes within rounding
/// of the fractions (largest remainder).
pub fn split_meta_random<T: Clone>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<T>; 3], DataError> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let counts = apportion(items.len(), &fractions);
    let mut order: Vec<usize> = (0..items.len()).collect();
    Rng::for_purpose(seed, "meta-split-random").shuffle(&mut order);
    let mut out: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut cursor = 0;
    for (set, &count) in counts.iter().enumerate() {
        for &i in &order[cursor..cursor + count] {
            out[set].push(items[i].clone());
        }
        cursor += count;
    }
    Ok(out)
}

/// Clusters items by feature vectors, then assigns whole clusters to the
/// three meta-sets, approaching the target proportions greedily over a
/// seeded random cluster order. Clusters never straddle meta-sets.
pub fn split_meta_clustered<T: Clone>(
    items: &[T],
    features: &[Vec<f64>],
    num_clusters: usize,
    seed: u64,
) -> Result<[Vec<T>; 3], DataError> {
    if num_clusters < 3 {
        return Err(DataError::Config(format!(
            "clustered split needs at least 3 clusters, got {num_clusters}"
        )));
    }
    if features.len() != items.len() {
        return Err(DataError::Config(format!(
            "{} feature vectors for {} items",
            features.len(),
            items.len()
        )));
    }
    let clustering = kmeans(features, num_clusters, seed, 100)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for (i, &c) in clustering.assignments.iter().enumerate() {
        members[c].push(i);
    }
    let mut cluster_order: Vec<usize> = (0..num_clusters).collect();
    Rng::for_purpose(seed, "meta-split-assign").shuffle(&mut cluster_order);

    let targets: Vec<f64> = CLUSTER_SPLIT_FRACTIONS
        .iter()
        .map(|f| f * items.len() as f64)
        .collect();
    let mut assigned = [0usize; 3];
    let mut out: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for &cluster in &cluster_order {
        // The set with the largest remaining deficit takes the cluster.
        let set = (0..3)
            .max_by(|&a, &b| {
                let da = targets[a] - assigned[a] as f64;
                let db = targets[b] - assigned[b] as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        for &i in &members[cluster] {
            out[set].push(items[i].clone());
        }
        assigned[set] += members[cluster].len();
    }
    Ok(out)
}

/// Largest-remainder apportionment of `total` into parts ∝ fractions.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = fractions
        .iter()
        .map(|f| (f * total as f64).floor() as usize)
        .collect();
    let mut rem: Vec<(usize, f64)> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * total as f64 - counts[i] as f64))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = counts.iter().sum();
    for (i, _) in rem.iter().take(total - assigned) {
        counts[*i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepglobe_proportions_come_out_exact() {
        let items: Vec<usize> = (0..803).collect();
        let f = [500.0 / 803.0, 150.0 / 803.0, 153.0 / 803.0];
        let parts = split_meta_random(&items, f, 5).unwrap();
        assert_eq!(parts[0].len(), 500);
        assert_eq!(parts[1].len(), 150);
        assert_eq!(parts[2].len(), 153);
    }

    #[test]
    fn degenerate_fraction_takes_everything() {
        let items = vec!["a", "b", "c"];
        let parts = split_meta_random(&items, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(parts[0].len(), 3);
        assert!(parts[1].is_empty() && parts[2].is_empty());
    }

    #[test]
    fn random_split_is_a_partition() {
        let items: Vec<usize> = (0..97).collect();
        let parts = split_meta_random(&items, [0.5, 0.25, 0.25], 9).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        assert_eq!(all.len(), 97);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 97);
    }

    #[test]
    fn clusters_never_straddle_sets() {
        // Six tight blobs; every blob must land in exactly one meta-set.
        let mut items = Vec::new();
        let mut features = Vec::new();
        for blob in 0..6 {
            for j in 0..20 {
                items.push((blob, j));
                features.push(vec![blob as f64 * 10.0, (j % 3) as f64 * 0.01]);
            }
        }
        let parts = split_meta_clustered(&items, &features, 6, 3).unwrap();
        for blob in 0..6 {
            let in_sets = parts
                .iter()
                .filter(|set| set.iter().any(|(b, _)| *b == blob))
                .count();
            assert_eq!(in_sets, 1, "blob {blob} straddles meta-sets");
        }
    }

    #[test]
    fn clustered_sizes_approach_targets() {
        // 803 items in 6 uneven blobs, mirroring the clustered protocol's
        // 454/166/183 outcome granularity.
        let sizes = [150usize, 140, 139, 130, 124, 120];
        let mut items = Vec::new();
        let mut features = Vec::new();
        for (blob, &s) in sizes.iter().enumerate() {
            for j in 0..s {
                items.push(items.len());
                features.push(vec![blob as f64 * 100.0, (j % 5) as f64 * 0.1]);
            }
        }
        assert_eq!(items.len(), 803);
        let parts = split_meta_clustered(&items, &features, 6, 17).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 803);
        // whole-cluster granularity: within one cluster (~150) of targets
        assert!((sizes[0] as f64 - 457.7).abs() < 150.0, "{sizes:?}");
        assert!((sizes[1] as f64 - 168.6).abs() < 150.0, "{sizes:?}");
        assert!((sizes[2] as f64 - 176.7).abs() < 150.0, "{sizes:?}");
    }
}
