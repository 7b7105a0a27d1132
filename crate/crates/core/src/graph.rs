//! Fully connected Gaussian similarity graph and its Laplacian.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rayon::prelude::*;

use crate::error::{FairError, Result};

/// `exp(-‖xi - xj‖² / σ²)`.
pub fn gaussian_similarity(xi: &[f64], xj: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(FairError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if xi.len() != xj.len() {
        return Err(FairError::Dimension(format!(
            "vectors of length {} and {}",
            xi.len(),
            xj.len()
        )));
    }
    Ok(similarity_unchecked(xi, xj, sigma))
}

fn similarity_unchecked(xi: &[f64], xj: &[f64], sigma: f64) -> f64 {
    let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (sigma * sigma)).exp()
}

/// Adjacency, degree and Laplacian of the similarity graph over labeled-first
/// rows. Blocks are split after row/column `n_labeled`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLaplacian {
    adjacency: DMatrix<f64>,
    degree: DVector<f64>,
    laplacian: DMatrix<f64>,
    n_labeled: usize,
    sigma: f64,
}

impl GraphLaplacian {
    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Diagonal of the degree matrix.
    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn n_labeled(&self) -> usize {
        self.n_labeled
    }

    pub fn n_unlabeled(&self) -> usize {
        self.laplacian.nrows() - self.n_labeled
    }

    pub fn n_nodes(&self) -> usize {
        self.laplacian.nrows()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn u_ll(&self) -> DMatrixView<'_, f64> {
        let l = self.n_labeled;
        self.laplacian.view((0, 0), (l, l))
    }

    pub fn u_lu(&self) -> DMatrixView<'_, f64> {
        let l = self.n_labeled;
        self.laplacian.view((0, l), (l, self.n_unlabeled()))
    }

    pub fn u_ul(&self) -> DMatrixView<'_, f64> {
        let l = self.n_labeled;
        self.laplacian.view((l, 0), (self.n_unlabeled(), l))
    }

    pub fn u_uu(&self) -> DMatrixView<'_, f64> {
        let (l, u) = (self.n_labeled, self.n_unlabeled());
        self.laplacian.view((l, l), (u, u))
    }

    /// `yᵀ U y`.
    pub fn quadratic_form(&self, y: &DVector<f64>) -> f64 {
        y.dot(&(&self.laplacian * y))
    }
}

/// Builds the dense graph over the rows of `x` (labeled rows first).
pub fn build_laplacian(x: &DMatrix<f64>, n_labeled: usize, sigma: f64) -> Result<GraphLaplacian> {
    let k = x.nrows();
    if n_labeled == 0 || n_labeled >= k {
        return Err(FairError::InvalidArgument(format!(
            "need at least one labeled and one unlabeled row (K={k}, K_l={n_labeled})"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(FairError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FairError::NonFinite("graph features".into()));
    }
    let rows: Vec<Vec<f64>> = (0..k).map(|i| x.row(i).iter().copied().collect()).collect();
    let upper: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            (i..k)
                .map(|j| similarity_unchecked(&rows[i], &rows[j], sigma))
                .collect()
        })
        .collect();
    let mut adjacency = DMatrix::zeros(k, k);
    for (i, row) in upper.iter().enumerate() {
        for (off, &w) in row.iter().enumerate() {
            let j = i + off;
            adjacency[(i, j)] = w;
            adjacency[(j, i)] = w;
        }
    }
    let degree = DVector::from_iterator(k, adjacency.row_iter().map(|r| r.iter().sum::<f64>()));
    let laplacian = DMatrix::from_diagonal(&degree) - &adjacency;
    Ok(GraphLaplacian {
        adjacency,
        degree,
        laplacian,
        n_labeled,
        sigma,
    })
}
