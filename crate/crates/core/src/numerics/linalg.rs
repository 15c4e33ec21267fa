use nalgebra::DMatrix;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Eigendecomposition `M = V diag(values) V^T` of a small symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, ordered like `values`.
    pub vectors: Tensor,
}

pub fn symmetric_eigen(m: &Tensor) -> Result<SymmetricEigen> {
    let k = m.rows();
    if m.cols() != k {
        return Err(Error::shape("symmetric_eigen", "square matrix", format!("{:?}", m.shape())));
    }
    let mat = DMatrix::from_row_slice(k, k, m.data());
    let eig = mat.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Tensor::zeros(&[k, k]);
    for (j, &src) in order.iter().enumerate() {
        for i in 0..k {
            vectors.set(i, j, eig.eigenvectors[(i, src)]);
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

impl SymmetricEigen {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.values.len();
        let mut scaled = self.vectors.clone();
        for i in 0..k {
            for j in 0..k {
                scaled.set(i, j, self.vectors.at(i, j) * self.values[j]);
            }
        }
        scaled.matmul_nt(&self.vectors).expect("square factors")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..200 {
            let k = 1 + trial % 8;
            let g = Tensor::randn(&[k + 3, k], 1.0, &mut rng);
            let m = g.matmul_tn(&g).unwrap();
            let eig = symmetric_eigen(&m).unwrap();
            let err = eig.reconstruct().sub(&m).unwrap().norm() / m.norm();
            assert!(err < 1e-10, "k={k} err={err}");
            assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn diagonal_case() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let eig = symmetric_eigen(&m).unwrap();
        assert_eq!(eig.values, vec![4.0, 1.0]);
        assert_eq!(eig.vectors.at(1, 0).abs(), 1.0);
    }
}
