//! Weighted directed communication graphs, their Laplacians, and the
//! spectral constants consumed by protocol synthesis.
//!
//! Convention: `adjacency[(i, j)] > 0` iff agent `i` receives information
//! from agent `j` (edge `j -> i`).

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("adjacency matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("graph must have at least one node")]
    Empty,
    #[error("negative weight {value} at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("non-zero self-loop weight {value} at node {node}")]
    SelfLoop { node: usize, value: f64 },
    #[error("non-finite weight at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("ensemble needs at least one graph")]
    EmptyEnsemble,
    #[error("graph {index} has {got} nodes, expected {expected}")]
    NodeCountMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("symmetric eigensolve did not produce finite eigenvalues")]
    EigenFailure,
}

/// A weighted digraph given by its adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Digraph {
    adjacency: DMatrix<f64>,
}

impl Digraph {
    pub fn new(adjacency: DMatrix<f64>) -> Result<Self, GraphError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(GraphError::Empty);
        }
        for i in 0..rows {
            for j in 0..cols {
                let w = adjacency[(i, j)];
                if !w.is_finite() {
                    return Err(GraphError::NonFinite { row: i, col: j });
                }
                if w < 0.0 {
                    return Err(GraphError::NegativeWeight {
                        row: i,
                        col: j,
                        value: w,
                    });
                }
                if i == j && w != 0.0 {
                    return Err(GraphError::SelfLoop { node: i, value: w });
                }
            }
        }
        Ok(Self { adjacency })
    }

    /// Builds a graph from directed `(from, to)` edges with unit weight.
    /// Node indices are zero-based.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut adjacency = DMatrix::zeros(n_nodes, n_nodes);
        for &(from, to) in edges {
            adjacency[(to, from)] = 1.0;
        }
        Self::new(adjacency)
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian(self)
    }

    pub fn is_balanced(&self) -> bool {
        is_balanced(self)
    }
}

/// `l_ij = -a_ij` off the diagonal, `l_ii = sum_j a_ij`.
pub fn laplacian(g: &Digraph) -> DMatrix<f64> {
    let a = &g.adjacency;
    let n = a.nrows();
    let mut l = -a.clone();
    for i in 0..n {
        // Row sum of the off-diagonal part, accumulated in the same order
        // so that the diagonal cancels it exactly.
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += a[(i, j)];
            }
        }
        l[(i, i)] = s;
    }
    l
}

/// Weighted in-degree equals weighted out-degree at every node, up to
/// `1e-12` times the largest weight.
pub fn is_balanced(g: &Digraph) -> bool {
    let a = &g.adjacency;
    let n = a.nrows();
    let scale = a.amax();
    let tol = 1e-12 * scale;
    (0..n).all(|i| {
        let row: f64 = a.row(i).sum();
        let col: f64 = a.column(i).sum();
        (row - col).abs() <= tol
    })
}

/// An ordered list of topologies over a common node set, indexed by the
/// Markov switching state.
#[derive(Debug, Clone)]
pub struct TopologyEnsemble {
    graphs: Vec<Digraph>,
    laplacians: Vec<DMatrix<f64>>,
    union_laplacian: DMatrix<f64>,
}

impl TopologyEnsemble {
    pub fn new(graphs: Vec<Digraph>) -> Result<Self, GraphError> {
        let first = graphs.first().ok_or(GraphError::EmptyEnsemble)?;
        let n = first.n_nodes();
        for (index, g) in graphs.iter().enumerate() {
            if g.n_nodes() != n {
                return Err(GraphError::NodeCountMismatch {
                    index,
                    got: g.n_nodes(),
                    expected: n,
                });
            }
        }
        let laplacians: Vec<_> = graphs.iter().map(laplacian).collect();
        let mut union_laplacian = DMatrix::zeros(n, n);
        for l in &laplacians {
            union_laplacian += l;
        }
        Ok(Self {
            graphs,
            laplacians,
            union_laplacian,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.union_laplacian.nrows()
    }

    pub fn graphs(&self) -> &[Digraph] {
        &self.graphs
    }

    pub fn laplacians(&self) -> &[DMatrix<f64>] {
        &self.laplacians
    }

    pub fn union_laplacian(&self) -> &DMatrix<f64> {
        &self.union_laplacian
    }

    /// Adjacency of the union graph (sum of the member adjacencies).
    pub fn union_adjacency(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        self.graphs
            .iter()
            .fold(DMatrix::zeros(n, n), |acc, g| acc + g.adjacency())
    }

    pub fn all_balanced(&self) -> bool {
        self.graphs.iter().all(is_balanced)
    }

    pub fn union_has_spanning_tree(&self) -> bool {
        union_has_spanning_tree(self)
    }

    pub fn spectral_constants(&self) -> Result<SpectralConstants, GraphError> {
        spectral_constants(self)
    }
}

/// True iff some node reaches every other node along directed edges of
/// the union graph.
pub fn union_has_spanning_tree(e: &TopologyEnsemble) -> bool {
    let adj = e.union_adjacency();
    let n = adj.nrows();
    (0..n).any(|root| reachable_count(&adj, root) == n)
}

fn reachable_count(adj: &DMatrix<f64>, root: usize) -> usize {
    let n = adj.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        // Information flows u -> v when v listens to u, i.e. adj[(v, u)] > 0.
        for v in 0..n {
            if !seen[v] && adj[(v, u)] > 0.0 {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConstants {
    /// Largest eigenvalue of `L_un^T L_un`.
    pub lambda_max: f64,
    /// Second smallest eigenvalue of `L_un + L_un^T`.
    pub lambda_min2: f64,
    /// Largest eigenvalue of `M^2`, `M = I - 11^T/N`.
    pub kappa: f64,
}

pub fn spectral_constants(e: &TopologyEnsemble) -> Result<SpectralConstants, GraphError> {
    let l = e.union_laplacian();
    let n = l.nrows();
    let gram = l.transpose() * l;
    let lambda_max = sorted_sym_eigenvalues(&gram)?
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0);

    let sym = l + l.transpose();
    let eig = sorted_sym_eigenvalues(&sym)?;
    let lambda_min2 = if n >= 2 { eig[1] } else { 0.0 };

    let m = centering_matrix(n);
    let kappa = sorted_sym_eigenvalues(&(&m * &m))?
        .last()
        .copied()
        .unwrap_or(0.0);

    Ok(SpectralConstants {
        lambda_max,
        lambda_min2,
        kappa,
    })
}

/// `I_N - (1/N) 1 1^T`.
pub fn centering_matrix(n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - 1.0 / nf } else { -1.0 / nf })
}

fn sorted_sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>, GraphError> {
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::EigenFailure);
    }
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}
