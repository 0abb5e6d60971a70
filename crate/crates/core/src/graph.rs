//! Per-frame social graph over agents and random-walk positional encodings.
//!
//! Edges connect every pair of agents with weight `1 / max(distance, eps)`.
//! The walk matrix is the row-normalized weight matrix `D⁻¹W`, and the
//! encoding of node `i` is its return probability after 1..=k steps.
//! All reductions across agents use [`canonical_sum`], so relabelling the
//! agents permutes the outputs bit-for-bit.

use thiserror::Error;

use crate::tensor::canonical_sum;

pub const DEFAULT_EPS_DIST: f64 = 0.01;
pub const DEFAULT_RWPE_STEPS: usize = 8;
pub const MAX_RWPE_STEPS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("need at least one agent")]
    Empty,
    #[error("agent {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("eps_dist must be positive, got {0}")]
    BadEps(f64),
    #[error("random-walk steps must be in 1..={MAX_RWPE_STEPS}, got {0}")]
    BadSteps(usize),
}

/// Weighted complete graph; `weights` is row-major `n × n`, symmetric with a
/// zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialGraph {
    n: usize,
    weights: Vec<f64>,
}

impl SocialGraph {
    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Builds a graph directly from a symmetric weight matrix.
    pub fn from_weights(n: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), n * n);
        Self { n, weights }
    }
}

pub fn build_social_graph(positions: &[[f64; 2]], eps_dist: f64) -> Result<SocialGraph, GraphError> {
    if positions.is_empty() {
        return Err(GraphError::Empty);
    }
    if !(eps_dist > 0.0) || !eps_dist.is_finite() {
        return Err(GraphError::BadEps(eps_dist));
    }
    if let Some(i) = positions.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(GraphError::NonFinite(i));
    }
    let n = positions.len();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (positions[i][0] - positions[j][0]).hypot(positions[i][1] - positions[j][1]);
            let w = 1.0 / d.max(eps_dist);
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(SocialGraph { n, weights })
}

/// Row-stochastic transition matrix `D⁻¹W`; zero-degree rows stay zero.
pub fn random_walk_matrix(g: &SocialGraph) -> Vec<f64> {
    let n = g.n;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let row = &g.weights[i * n..(i + 1) * n];
        let degree = canonical_sum(&mut row.to_vec());
        if degree > 0.0 {
            for j in 0..n {
                m[i * n + j] = row[j] / degree;
            }
        }
    }
    m
}

/// `n × k` matrix (row-major) with entry `(i, s)` = `(M^(s+1))_ii`.
#[derive(Debug, Clone, PartialEq)]
pub struct RwpeMatrix {
    pub n: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl RwpeMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }
}

pub fn rwpe(g: &SocialGraph, k: usize) -> Result<RwpeMatrix, GraphError> {
    if k == 0 || k > MAX_RWPE_STEPS {
        return Err(GraphError::BadSteps(k));
    }
    let n = g.n;
    let m = random_walk_matrix(g);
    let mut power = m.clone();
    let mut values = vec![0.0; n * k];
    let mut terms = vec![0.0; n];
    for s in 0..k {
        for i in 0..n {
            values[i * k + s] = power[i * n + i];
        }
        if s + 1 == k {
            break;
        }
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for p in 0..n {
                    terms[p] = power[i * n + p] * m[p * n + j];
                }
                next[i * n + j] = canonical_sum(&mut terms);
            }
        }
        power = next;
    }
    Ok(RwpeMatrix { n, k, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_weights() {
        let g = build_social_graph(&[[0.0, 0.0], [0.0, 2.0]], DEFAULT_EPS_DIST).unwrap();
        assert_eq!(g.weight(0, 1), 0.5);
        assert_eq!(g.weight(0, 0), 0.0);

        let g = build_social_graph(&[[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]], DEFAULT_EPS_DIST).unwrap();
        assert_eq!(g.weight(0, 1), 1.0 / 3.0);
        assert_eq!(g.weight(0, 2), 0.25);
        assert_eq!(g.weight(1, 2), 0.2);
        assert_eq!(g.weight(2, 1), 0.2);

        let g = build_social_graph(&[[1.0, 1.0], [1.0, 1.0]], 0.01).unwrap();
        assert_eq!(g.weight(0, 1), 100.0);

        let g = build_social_graph(&[[4.0, 2.0]], 0.01).unwrap();
        assert_eq!(g.weights(), &[0.0]);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(build_social_graph(&[], 0.01), Err(GraphError::Empty));
        assert_eq!(
            build_social_graph(&[[0.0, 0.0], [f64::NAN, 1.0]], 0.01),
            Err(GraphError::NonFinite(1))
        );
        assert!(build_social_graph(&[[0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn walk_matrix_examples() {
        let g = build_social_graph(&[[0.0, 0.0], [0.0, 7.0]], 0.01).unwrap();
        assert_eq!(random_walk_matrix(&g), vec![0.0, 1.0, 1.0, 0.0]);

        let g3 = SocialGraph::from_weights(3, vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
        let m = random_walk_matrix(&g3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i * 3 + j], if i == j { 0.0 } else { 0.5 });
            }
        }

        let single = build_social_graph(&[[0.0, 0.0]], 0.01).unwrap();
        assert_eq!(random_walk_matrix(&single), vec![0.0]);
    }

    #[test]
    fn rwpe_examples() {
        let g = build_social_graph(&[[0.0, 0.0], [1.0, 1.0]], 0.01).unwrap();
        let r = rwpe(&g, 4).unwrap();
        assert_eq!(r.row(0), &[0.0, 1.0, 0.0, 1.0]);

        // p_t = (1 - p_{t-1}) / 2 from p_0 = 1
        let g3 = SocialGraph::from_weights(3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let r3 = rwpe(&g3, 3).unwrap();
        for i in 0..3 {
            assert_eq!(r3.row(i), &[0.0, 0.5, 0.25]);
        }

        let single = build_social_graph(&[[3.0, 3.0]], 0.01).unwrap();
        assert_eq!(rwpe(&single, 5).unwrap().row(0), &[0.0; 5]);

        assert!(rwpe(&g, 0).is_err());
        assert!(rwpe(&g, 33).is_err());
    }

    #[test]
    fn isolated_node_row_is_zero() {
        // node 2 has no edges
        let g = SocialGraph::from_weights(3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let r = rwpe(&g, 4).unwrap();
        assert_eq!(r.row(2), &[0.0; 4]);
        assert!(r.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
