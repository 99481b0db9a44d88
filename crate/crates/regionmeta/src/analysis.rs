//! Model-analysis tools: weight-space PCA of task adaptations and 1-D
//! loss slices along a support gradient.

use crate::data::{MetaSet, RegionDataset, Task, TaskSampler};
use crate::error::AnalysisError;
use crate::rng::{derive_seed, Rng};
use crate::train::{adapt, Checkpoint, EpisodeModel};
use crate::tensor::gradient;
use std::fmt::Write as _;

/// Principal components of a set of equal-length vectors.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal basis, one vector per retained component. The sign is
    /// fixed by making each component's largest-magnitude coordinate
    /// positive.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalue estimate per component.
    pub eigenvalues: Vec<f64>,
    /// Centered inputs projected onto the basis, one row per input.
    pub projections: Vec<Vec<f64>>,
}

/// Top principal components via power iteration with deflation. The
/// covariance is applied implicitly through the data matrix, so vectors of
/// 10^5 dimensions with few samples stay cheap.
pub fn pca(vectors: &[Vec<f64>], components: usize) -> Result<Pca, AnalysisError> {
    if vectors.len() < 2 {
        return Err(AnalysisError::TooFewVectors(vectors.len()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(AnalysisError::LengthMismatch {
            expected: dim,
            got: vectors.iter().map(|v| v.len()).find(|&l| l != dim).unwrap(),
        });
    }
    if components > dim {
        return Err(AnalysisError::TooManyComponents {
            components,
            length: dim,
        });
    }
    let n = vectors.len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let total_variance: f64 = centered
        .iter()
        .map(|row| row.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / (n as f64 - 1.0);
    if total_variance < 1e-24 {
        return Err(AnalysisError::DegenerateInput);
    }

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(components);
    let mut eigenvalues = Vec::with_capacity(components);
    for comp in 0..components {
        let mut rng = Rng::for_purpose(comp as u64, "pca-power-start");
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        orthogonalize(&mut v, &basis);
        normalize(&mut v);
        let mut eigenvalue = 0.0;
        for _ in 0..500 {
            // w = Xᵀ X v / (n-1), without materializing the covariance
            let mut w = vec![0.0; dim];
            for row in &centered {
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (wi, xi) in w.iter_mut().zip(row) {
                    *wi += dot * xi;
                }
            }
            for wi in &mut w {
                *wi /= n as f64 - 1.0;
            }
            orthogonalize(&mut w, &basis);
            let norm = normalize(&mut w);
            let drift: f64 = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            eigenvalue = norm;
            if drift < 1e-13 {
                break;
            }
        }
        fix_sign(&mut v);
        basis.push(v);
        eigenvalues.push(eigenvalue);
    }

    let projections: Vec<Vec<f64>> = centered
        .iter()
        .map(|row| {
            basis
                .iter()
                .map(|b| row.iter().zip(b).map(|(a, c)| a * c).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components: basis,
        eigenvalues,
        projections,
    })
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= dot * bi;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn fix_sign(v: &mut [f64]) {
    let mut arg = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[arg].abs() {
            arg = i;
        }
    }
    if v[arg] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// One point of the weight-adaptation embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    /// "theta" for the initialization, "adapted" for task weights.
    pub kind: &'static str,
    pub region_id: String,
    pub task_id: Option<usize>,
    pub pc1: f64,
    pub pc2: f64,
}

/// Samples 1-shot tasks from the meta-test regions, adapts the checkpoint
/// one gradient step per task, and embeds the flattened weights (plus the
/// initialization) into the first two principal components.
///
/// With α=0 every adapted vector coincides with θ; the embedding then
/// collapses to the θ point rather than failing the PCA variance check.
#[allow(clippy::too_many_arguments)]
pub fn weight_adaptation_map(
    model: &dyn EpisodeModel,
    ckpt: &Checkpoint,
    ds: &RegionDataset,
    num_tasks: usize,
    ways: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<EmbeddingRow>, AnalysisError> {
    let mut sampler = TaskSampler::new(derive_seed(seed, "weight-map"));
    let mut vectors = vec![ckpt.params.flatten()];
    let mut regions = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let task = sampler.sample(ds, MetaSet::Test, 1, ways, 1)?;
        let phi = adapt(
            model,
            &ckpt.params,
            ds,
            &task.support,
            &task.support_labels,
            &task.ways,
            alpha,
            1,
        )?;
        vectors.push(phi.flatten());
        regions.push(task.region_id);
    }

    let projections = match pca(&vectors, 2) {
        Ok(p) => p.projections,
        Err(AnalysisError::DegenerateInput) => vec![vec![0.0, 0.0]; vectors.len()],
        Err(e) => return Err(e),
    };

    let mut rows = Vec::with_capacity(vectors.len());
    rows.push(EmbeddingRow {
        kind: "theta",
        region_id: String::new(),
        task_id: None,
        pc1: projections[0][0],
        pc2: projections[0][1],
    });
    for (i, region) in regions.into_iter().enumerate() {
        rows.push(EmbeddingRow {
            kind: "adapted",
            region_id: region,
            task_id: Some(i),
            pc1: projections[i + 1][0],
            pc2: projections[i + 1][1],
        });
    }
    Ok(rows)
}

pub fn embedding_csv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::from("kind,region_id,task_id,pc1,pc2\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.kind,
            r.region_id,
            r.task_id.map(|t| t.to_string()).unwrap_or_default(),
            r.pc1,
            r.pc2
        )
        .expect("string write");
    }
    out
}

/// Query losses along the support-gradient descent direction.
#[derive(Debug, Clone)]
pub struct LossSlice {
    pub alphas: Vec<f64>,
    /// losses[task][alpha_index]
    pub losses: Vec<Vec<f64>>,
    pub grad_norm: f64,
}

/// Evaluates each query task's loss at φ_α = θ - α·g, where g is the
/// support task's gradient at θ. The α grid always includes 0, whose
/// column reproduces the unadapted losses. Checkpoint parameters are
/// never mutated.
pub fn loss_surface_1d(
    model: &dyn EpisodeModel,
    ckpt: &Checkpoint,
    ds: &RegionDataset,
    support_task: &Task,
    query_tasks: &[Task],
    alphas: &[f64],
) -> Result<LossSlice, AnalysisError> {
    for task in query_tasks {
        if task.region_id != support_task.region_id || task.season != support_task.season {
            return Err(AnalysisError::Train(crate::error::TrainError::Config(
                format!(
                    "query task from {}/{} does not match support task {}/{}",
                    task.region_id, task.season, support_task.region_id, support_task.season
                ),
            )));
        }
    }
    let mut grid = alphas.to_vec();
    if !grid.iter().any(|a| *a == 0.0) {
        grid.insert(0, 0.0);
    }

    let theta = ckpt.params.leaves();
    let support_loss = model.loss(
        &theta,
        ds,
        &support_task.support,
        &support_task.support_labels,
        &support_task.ways,
    )?;
    let g = gradient(&support_loss, &theta, false)?;
    let grad_norm = g
        .flatten()
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();

    let mut losses = vec![Vec::with_capacity(grid.len()); query_tasks.len()];
    for &alpha in &grid {
        let phi = theta.descend(&g, alpha)?.detached();
        for (row, task) in losses.iter_mut().zip(query_tasks) {
            let l = model.loss(&phi, ds, &task.query, &task.query_labels, &task.ways)?;
            row.push(l.item());
        }
    }

    // The α=0 column must equal the unadapted query losses.
    let zero_col = grid.iter().position(|a| *a == 0.0).expect("grid has 0");
    for (row, task) in losses.iter().zip(query_tasks) {
        let base = model
            .loss(&ckpt.params, ds, &task.query, &task.query_labels, &task.ways)?
            .item();
        debug_assert!(
            (row[zero_col] - base).abs() < 1e-12,
            "α=0 column drifted: {} vs {}",
            row[zero_col],
            base
        );
    }

    Ok(LossSlice {
        alphas: grid,
        losses,
        grad_norm,
    })
}

pub fn loss_slice_csv(slice: &LossSlice) -> String {
    let mut out = String::from("alpha,query_task_id,loss\n");
    for (a_idx, alpha) in slice.alphas.iter().enumerate() {
        for (task_id, row) in slice.losses.iter().enumerate() {
            writeln!(out, "{:.6},{},{:.6}", alpha, task_id, row[a_idx]).expect("string write");
        }
    }
    out
}

/// Evenly spaced α grid from 0 to `max` inclusive.
pub fn alpha_grid(max: f64, points: usize) -> Vec<f64> {
    debug_assert!(points >= 2);
    (0..points)
        .map(|i| max * i as f64 / (points - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_give_the_line_direction() {
        let dir = [0.6f64, 0.64, 0.48];
        let vectors: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64 - 5.5;
                dir.iter().map(|d| d * t).collect()
            })
            .collect();
        let p = pca(&vectors, 2).unwrap();
        let cos: f64 = p.components[0].iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 0.999, "cosine {cos}");
        assert!(p.eigenvalues[1] < 1e-8, "residual { }", p.eigenvalues[1]);
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = Rng::new(3);
        let vectors: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect();
        let p = pca(&vectors, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = p.components[i]
                    .iter()
                    .zip(&p.components[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "({i},{j}) dot {dot}");
            }
        }
    }

    #[test]
    fn two_d_pca_matches_closed_form_eigensolver() {
        let vectors = vec![
            vec![2.5, 2.4],
            vec![0.5, 0.7],
            vec![2.2, 2.9],
            vec![1.9, 2.2],
            vec![3.1, 3.0],
            vec![2.3, 2.7],
            vec![2.0, 1.6],
            vec![1.0, 1.1],
            vec![1.5, 1.6],
            vec![1.1, 0.9],
        ];
        let p = pca(&vectors, 2).unwrap();

        // closed-form 2x2 covariance eigensolver
        let n = vectors.len() as f64;
        let mx = vectors.iter().map(|v| v[0]).sum::<f64>() / n;
        let my = vectors.iter().map(|v| v[1]).sum::<f64>() / n;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for v in &vectors {
            sxx += (v[0] - mx) * (v[0] - mx);
            sxy += (v[0] - mx) * (v[1] - my);
            syy += (v[1] - my) * (v[1] - my);
        }
        sxx /= n - 1.0;
        sxy /= n - 1.0;
        syy /= n - 1.0;
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        let l1 = tr / 2.0 + (tr * tr / 4.0 - det).sqrt();
        let l2 = tr / 2.0 - (tr * tr / 4.0 - det).sqrt();
        // eigenvector for l1: (sxy, l1 - sxx) normalized
        let mut e1 = vec![sxy, l1 - sxx];
        let norm = (e1[0] * e1[0] + e1[1] * e1[1]).sqrt();
        e1[0] /= norm;
        e1[1] /= norm;

        assert!((p.eigenvalues[0] - l1).abs() < 1e-9);
        assert!((p.eigenvalues[1] - l2).abs() < 1e-9);
        let cos: f64 = p.components[0].iter().zip(&e1).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 1.0 - 1e-9);
    }

    #[test]
    fn low_rank_data_reconstructs_within_residual_variance() {
        let mut rng = Rng::new(9);
        let b1: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let b2: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let vectors: Vec<Vec<f64>> = (0..25)
            .map(|_| {
                let (a, b) = (rng.normal(), rng.normal());
                b1.iter().zip(&b2).map(|(x, y)| a * x + b * y).collect()
            })
            .collect();
        let p = pca(&vectors, 2).unwrap();
        for (v, proj) in vectors.iter().zip(&p.projections) {
            let mut recon = p.mean.clone();
            for (c, comp) in p.components.iter().enumerate() {
                for (r, ci) in recon.iter_mut().zip(comp) {
                    *r += proj[c] * ci;
                }
            }
            let err: f64 = v
                .iter()
                .zip(&recon)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(err < 1e-16, "rank-2 data must reconstruct exactly, err {err}");
        }
    }

    #[test]
    fn constant_vectors_are_degenerate() {
        let vectors = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(matches!(
            pca(&vectors, 1),
            Err(AnalysisError::DegenerateInput)
        ));
    }

    #[test]
    fn alpha_grid_includes_endpoints() {
        let g = alpha_grid(1.0, 5);
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
