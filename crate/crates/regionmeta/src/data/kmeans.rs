//! Lloyd's k-means with k-means++ style seeding.

use crate::error::DataError;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids after convergence.
    pub inertia: f64,
    /// Inertia after each assignment pass; non-increasing.
    pub inertia_history: Vec<f64>,
}

pub fn kmeans(
    features: &[Vec<f64>],
    num_clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansResult, DataError> {
    if num_clusters == 0 {
        return Err(DataError::Config("k-means needs at least 1 cluster".into()));
    }
    if features.len() < num_clusters {
        return Err(DataError::TooFewItems {
            items: features.len(),
            clusters: num_clusters,
        });
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(DataError::Config("ragged feature vectors".into()));
    }
    let mut rng = Rng::for_purpose(seed, "kmeans");

    // k-means++ seeding: subsequent centroids proportional to squared
    // distance from the nearest existing centroid.
    let mut centroids: Vec<Vec<f64>> = vec![features[rng.below(features.len())].clone()];
    while centroids.len() < num_clusters {
        let d2: Vec<f64> = features
            .iter()
            .map(|f| nearest(f, &centroids).1)
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = features.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.below(features.len())
        };
        centroids.push(features[next].clone());
    }

    let mut assignments = vec![0usize; features.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut inertia = 0.0;
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let (c, d) = nearest(f, &centroids);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed && inertia_history.len() > 1 {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; num_clusters];
        let mut counts = vec![0usize; num_clusters];
        for (f, &c) in features.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..num_clusters {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            } else {
                // Re-seed an empty cluster to the point farthest from its
                // assigned centroid.
                let far = features
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (i, dist2(f, &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("nonempty features");
                centroids[c] = features[far].clone();
            }
        }
    }

    let inertia = *inertia_history.last().expect("at least one pass");
    Ok(KmeansResult {
        assignments,
        centroids,
        inertia,
        inertia_history,
    })
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(f, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
