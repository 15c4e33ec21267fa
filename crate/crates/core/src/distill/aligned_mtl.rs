//! Gradient alignment across tasks.
//!
//! Task gradients are stacked as columns of `G`. With `G^T G = V Λ V^T` and
//! singular values `σ_i = sqrt(λ_i)`, the aligned system is
//! `Ĝ = σ_min · G V Σ⁺ V^T`, whose nonzero singular values all equal
//! `σ_min`. The update is `Ĝ · 1 = G · α` with `α = σ_min · V Σ⁺ V^T 1`.

use crate::error::{Error, Result};
use crate::numerics::{symmetric_eigen, Tensor};

#[derive(Debug, Clone)]
pub struct Aggregated {
    pub gradient: Tensor,
    /// Per-task weights `α`, so that `gradient = Σ_k α_k g_k`.
    pub weights: Vec<f64>,
    /// Smallest retained singular value (0 when every direction was floored).
    pub sigma_min: f64,
    /// Number of retained directions.
    pub rank: usize,
}

/// Mixing matrix `B = σ_min · V Σ⁺ V^T` from the `K x K` Gram matrix, so that
/// the aligned columns are `Ĝ = G B`. Returns `(B, σ_min, rank)`.
pub fn alignment_matrix(gram: &Tensor, eigen_floor: f64) -> Result<(Tensor, f64, usize)> {
    let k = gram.rows();
    let eig = symmetric_eigen(gram)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let mut b = Tensor::zeros(&[k, k]);
    if !(top > 0.0) {
        return Ok((b, 0.0, 0));
    }
    let kept: Vec<usize> = (0..k).filter(|&i| eig.values[i] > eigen_floor * top).collect();
    let sigma: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sigma_min = kept.iter().map(|&i| sigma[i]).fold(f64::INFINITY, f64::min);
    for &i in &kept {
        let coef = sigma_min / sigma[i];
        for r in 0..k {
            for c in 0..k {
                let v = b.at(r, c) + coef * eig.vectors.at(r, i) * eig.vectors.at(c, i);
                b.set(r, c, v);
            }
        }
    }
    Ok((b, sigma_min, kept.len()))
}

/// Task weights `α = B 1` from the Gram matrix alone.
pub fn aligned_weights(gram: &Tensor, eigen_floor: f64) -> Result<(Vec<f64>, f64, usize)> {
    let (b, sigma_min, rank) = alignment_matrix(gram, eigen_floor)?;
    let alpha = (0..b.rows()).map(|r| b.row(r).iter().sum()).collect();
    Ok((alpha, sigma_min, rank))
}

fn gram_matrix(task_gradients: &[Tensor]) -> Result<Tensor> {
    let first = task_gradients.first().ok_or(Error::Empty("aligned_mtl_aggregate"))?;
    for g in task_gradients {
        if g.shape() != first.shape() {
            return Err(Error::shape(
                "aligned_mtl_aggregate",
                format!("{:?}", first.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    let k = task_gradients.len();
    let mut gram = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in i..k {
            let v = task_gradients[i].dot(&task_gradients[j]);
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    Ok(gram)
}

/// The aligned task gradients `Ĝ = G B`, one per input gradient.
pub fn aligned_columns(task_gradients: &[Tensor], eigen_floor: f64) -> Result<Vec<Tensor>> {
    let gram = gram_matrix(task_gradients)?;
    let (b, _, _) = alignment_matrix(&gram, eigen_floor)?;
    (0..task_gradients.len())
        .map(|j| {
            let mut col = Tensor::zeros(task_gradients[0].shape());
            for (i, g) in task_gradients.iter().enumerate() {
                col.axpy(b.at(i, j), g)?;
            }
            Ok(col)
        })
        .collect()
}

pub fn aligned_mtl_aggregate(task_gradients: &[Tensor], eigen_floor: f64) -> Result<Aggregated> {
    let gram = gram_matrix(task_gradients)?;
    let first = &task_gradients[0];
    let k = task_gradients.len();
    let (weights, sigma_min, rank) = if k == 1 {
        // σ_min = |g| and the single direction is scaled by σ_min / |g|
        let n = gram.at(0, 0).sqrt();
        if n > 0.0 {
            (vec![1.0], n, 1)
        } else {
            (vec![0.0], 0.0, 0)
        }
    } else {
        aligned_weights(&gram, eigen_floor)?
    };

    let mut gradient = Tensor::zeros(first.shape());
    for (g, &a) in task_gradients.iter().zip(&weights) {
        if a != 0.0 {
            gradient.axpy(a, g)?;
        }
    }
    Ok(Aggregated {
        gradient,
        weights,
        sigma_min,
        rank,
    })
}
