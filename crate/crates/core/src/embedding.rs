//! Export and analysis of the pooled keypoint representations.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::nn::{extract_representations, Backbone};

/// One line of the embeddings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub image_id: String,
    pub keypoint_index: usize,
    pub z: Vec<f64>,
}

/// Pools `z_i` under the predicted heatmaps for every image and keypoint.
pub fn export_embeddings<B: Backbone>(backbone: &B, ds: &Dataset) -> Result<Vec<EmbeddingRow>> {
    backbone.check_meta(&ds.meta)?;
    let mut rows = Vec::with_capacity(ds.len() * ds.meta.num_keypoints());
    for s in &ds.samples {
        let out = backbone.forward(&s.pixels)?;
        let reps = extract_representations(&out.features, &out.heatmaps)?;
        for (i, z) in reps.z.rows().into_iter().enumerate() {
            rows.push(EmbeddingRow {
                image_id: s.id.clone(),
                keypoint_index: i,
                z: z.to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Mean over pairs of distinct rows sharing a keypoint index.
    pub intra: f64,
    /// Mean over pairs with different indices.
    pub inter: f64,
    pub gap: f64,
}

/// Mean pairwise cosine similarity within and across keypoint indices.
pub fn similarity_gap(rows: &[EmbeddingRow]) -> Result<SimilarityStats> {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                vec![0.0; r.z.len()]
            } else {
                r.z.iter().map(|v| v / n).collect()
            }
        })
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if unit[i].len() != unit[j].len() {
                return Err(Error::Shape {
                    expected: format!("{} dims", unit[i].len()),
                    actual: format!("{} dims", unit[j].len()),
                });
            }
            let s: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if rows[i].keypoint_index == rows[j].keypoint_index {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Empty(
            "need at least two rows per keypoint and two distinct keypoints".into(),
        ));
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    Ok(SimilarityStats {
        intra,
        inter,
        gap: intra - inter,
    })
}

/// Projects rows onto their two leading principal axes. This is a linear,
/// deterministic stand-in for t-SNE. Axis signs are fixed so that the
/// largest-magnitude loading is positive.
pub fn pca_2d(rows: &[EmbeddingRow]) -> Result<Vec<[f64; 2]>> {
    let Some(first) = rows.first() else {
        return Err(Error::Empty("no embeddings to project".into()));
    };
    let d = first.z.len();
    if rows.iter().any(|r| r.z.len() != d) {
        return Err(Error::Shape {
            expected: format!("{d} dims everywhere"),
            actual: "ragged rows".into(),
        });
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(&r.z) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].z[j] - mean[j]);
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| v * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (slot, axis) in p.iter_mut().zip(&axes) {
                *slot = (0..d).map(|j| x[(i, j)] * axis[j]).sum();
            }
            p
        })
        .collect())
}
