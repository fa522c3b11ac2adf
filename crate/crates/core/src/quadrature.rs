//! Gauss–Hermite quadrature against one-dimensional Gaussian mixtures.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::reference::GaussianMixture;

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`, exact for polynomials of degree `< 2n`.
///
/// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite polynomials.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let e = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n).map(|i| (e.eigenvalues[i], e.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

/// Quadrature rule for a 1D mixture: per-component Gauss–Hermite, weights scaled by `π_i`.
#[derive(Debug, Clone)]
pub struct MixtureQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MixtureQuadrature {
    pub fn new(g: &GaussianMixture, order: usize) -> Result<Self> {
        if g.dim() != 1 {
            return Err(Error::Unsupported("quadrature is one-dimensional".into()));
        }
        if order == 0 {
            return Err(Error::Config("quadrature order must be positive".into()));
        }
        let (z, w) = gauss_hermite(order);
        let mut nodes = Vec::with_capacity(order * g.n_components());
        let mut weights = Vec::with_capacity(order * g.n_components());
        for ((pi, m), c) in g.weights().iter().zip(g.means()).zip(g.covs()) {
            let sd = c[(0, 0)].max(0.0).sqrt();
            for (zj, wj) in z.iter().zip(&w) {
                nodes.push(m[0] + sd * zj);
                weights.push(pi * wj);
            }
        }
        Ok(Self { nodes, weights })
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}
