//! Gauss–Hermite rules for expectations over a standard Gaussian.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODES: usize = 61;

/// Nodes and weights with `E f(Z) ≈ Σ_k w_k f(z_k)`, `Z ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// `count`-point rule for the weight `e^{-z²/2}/√(2π)`.
    ///
    /// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix with
    /// off-diagonal `√k`, weights the squared first eigenvector components.
    /// The result is symmetrized about zero and weights sum to one.
    pub fn gauss_hermite(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Domain("quadrature needs at least one node".into()));
        }
        let n = count;
        let jacobi = DMatrix::from_fn(n, n, |r, c| {
            if r + 1 == c || c + 1 == r {
                (r.max(c) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for k in 0..n {
            let mirror = n - 1 - k;
            nodes[k] = 0.5 * (pairs[k].0 - pairs[mirror].0);
            weights[k] = 0.5 * (pairs[k].1 + pairs[mirror].1);
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && (total - 1.0).abs() < 1e-8) {
            return Err(Error::NonConvergence {
                what: "Gauss-Hermite weights",
                iterations: 0,
                defect: (total - 1.0).abs(),
            });
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(QuadratureRule { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E f(Z)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}
