//! Gauss–Hermite rules for expectations under the standard normal law.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights with `E f(Z) ~= sum_k w_k f(x_k)`, `Z ~ N(0, 1)`.
/// Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `order`-point rule. Nodes start from the eigenvalues of the
    /// Jacobi matrix of the orthonormal probabilists' Hermite polynomials and
    /// are polished by Newton steps on the three-term recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let jacobi = DMatrix::from_fn(order, order, |a, b| {
            if a + 1 == b || b + 1 == a {
                libm::sqrt(a.max(b) as f64)
            } else {
                0.0
            }
        });
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

        for x in nodes.iter_mut() {
            for _ in 0..8 {
                let (pn, pn1, _) = orthonormal_hermite(order, *x);
                let deriv = libm::sqrt(order as f64) * pn1;
                if deriv == 0.0 {
                    break;
                }
                let step = pn / deriv;
                *x -= step;
                if step.abs() <= 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
        }
        // Symmetrize: the rule is exactly symmetric about zero.
        for a in 0..order / 2 {
            let b = order - 1 - a;
            let m = 0.5 * (nodes[b] - nodes[a]);
            nodes[a] = -m;
            nodes[b] = m;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }

        let mut weights: Vec<f64> = nodes
            .iter()
            .map(|&x| 1.0 / orthonormal_hermite(order, x).2)
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E f(Z)` for standard normal `Z`.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Returns `(p_n(x), p_{n-1}(x), sum_{k<n} p_k(x)^2)` for the orthonormal
/// probabilists' Hermite polynomials.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut christoffel = 0.0;
    for k in 0..n {
        christoffel += cur * cur;
        let next = (x * cur - libm::sqrt(k as f64) * prev) / libm::sqrt((k + 1) as f64);
        prev = cur;
        cur = next;
    }
    (cur, prev, christoffel)
}
