//! Node-classification graphs: topology, features, labels and splits.

mod io;
mod sbm;
mod split;

use std::sync::Arc;

pub use io::{load_graph, write_graph, GraphPaths};
pub use sbm::{generate_sbm, SbmSpec};
pub use split::split_nodes;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SparseCsr};
use crate::scalar::Scalar;

/// Which evaluation split a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-node split assignment; `None` means the node is in no split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    assignment: Vec<Option<Split>>,
}

impl Masks {
    pub fn unassigned(n: usize) -> Self {
        Masks {
            assignment: vec![None; n],
        }
    }

    pub fn from_assignment(assignment: Vec<Option<Split>>) -> Self {
        Masks { assignment }
    }

    pub fn assignment(&self) -> &[Option<Split>] {
        &self.assignment
    }

    pub fn get(&self, node: usize) -> Option<Split> {
        self.assignment[node]
    }

    pub fn contains(&self, split: Split, node: usize) -> bool {
        self.assignment[node] == Some(split)
    }

    pub fn mask(&self, split: Split) -> Vec<bool> {
        self.assignment.iter().map(|a| *a == Some(split)).collect()
    }

    pub fn nodes(&self, split: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.iter().filter(|a| **a == Some(split)).count()
    }
}

/// Immutable attributed graph with normalized propagation operators.
///
/// Edges are stored undirected as `(min, max)` pairs without self-loops. The
/// GCN operator `D̃^{-1/2}(A+I)D̃^{-1/2}` and the mean operator `D̃^{-1}(A+I)`
/// are built once at construction.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    edges: Vec<(usize, usize)>,
    adj: Arc<SparseCsr<T>>,
    mean_adj: Arc<SparseCsr<T>>,
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
    masks: Masks,
}

impl<T: Scalar> Graph<T> {
    /// Validates inputs and precomputes the normalized operators. The class
    /// count is `max(label) + 1` unless `num_classes` is given.
    pub fn new(
        edges: &[(usize, usize)],
        features: Matrix<T>,
        labels: Vec<usize>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        if features.rows() != n {
            return Err(Error::Graph(format!(
                "{} feature rows for {n} labels",
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("node features".into()));
        }
        let observed = labels.iter().copied().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(observed);
        if observed > num_classes {
            return Err(Error::Graph(format!(
                "label {} outside {num_classes} classes",
                observed - 1
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) references a node >= {n}")));
            }
            if a != b {
                canon.push((a.min(b), a.max(b)));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        let adj = Arc::new(SparseCsr::gcn_normalized(n, &canon)?);
        let mean_adj = Arc::new(SparseCsr::mean_normalized(n, &canon)?);
        Ok(Graph {
            edges: canon,
            adj,
            mean_adj,
            features,
            labels,
            num_classes,
            masks: Masks::unassigned(n),
        })
    }

    pub fn with_masks(mut self, masks: Masks) -> Result<Self> {
        if masks.assignment.len() != self.num_nodes() {
            return Err(Error::Graph(format!(
                "{} mask entries for {} nodes",
                masks.assignment.len(),
                self.num_nodes()
            )));
        }
        self.masks = masks;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Undirected edges as sorted `(min, max)` pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Symmetric-normalized adjacency with self-loops.
    pub fn adjacency(&self) -> &Arc<SparseCsr<T>> {
        &self.adj
    }

    /// Row-stochastic closed-neighborhood mean operator.
    pub fn mean_adjacency(&self) -> &Arc<SparseCsr<T>> {
        &self.mean_adj
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    /// Re-expresses the graph in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            edges: self.edges.clone(),
            adj: Arc::new(self.adj.cast()),
            mean_adj: Arc::new(self.mean_adj.cast()),
            features: self.features.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            masks: self.masks.clone(),
        }
    }
}

/// Fraction of undirected edges joining two nodes of the same class.
pub fn edge_homophily<T: Scalar>(g: &Graph<T>) -> Result<f64> {
    if g.edges.is_empty() {
        return Err(Error::Graph("edge homophily is undefined without edges".into()));
    }
    let same = g
        .edges
        .iter()
        .filter(|&&(a, b)| g.labels[a] == g.labels[b])
        .count();
    Ok(same as f64 / g.edges.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(edges: &[(usize, usize)], labels: Vec<usize>) -> Graph<f32> {
        let n = labels.len();
        Graph::new(edges, Matrix::zeros(n, 2), labels, None).unwrap()
    }

    #[test]
    fn homophily_extremes() {
        let cliques = tiny(&[(0, 1), (2, 3)], vec![0, 0, 1, 1]);
        assert_eq!(edge_homophily(&cliques).unwrap(), 1.0);
        let bipartite = tiny(&[(0, 2), (0, 3), (1, 2), (1, 3)], vec![0, 0, 1, 1]);
        assert_eq!(edge_homophily(&bipartite).unwrap(), 0.0);
        assert!(edge_homophily(&tiny(&[], vec![0, 1])).is_err());
    }

    #[test]
    fn edges_are_symmetrized_and_deduplicated() {
        let g = tiny(&[(1, 0), (0, 1), (2, 2), (2, 1)], vec![0, 0, 1]);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.adjacency().to_dense(), g.adjacency().to_dense().transpose());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(Graph::<f32>::new(&[], Matrix::zeros(0, 1), vec![], None).is_err());
        assert!(Graph::<f32>::new(&[(0, 5)], Matrix::zeros(2, 1), vec![0, 1], None).is_err());
        assert!(Graph::<f32>::new(&[], Matrix::zeros(3, 1), vec![0, 1], None).is_err());
        assert!(Graph::<f32>::new(&[], Matrix::zeros(2, 1), vec![0, 3], Some(2)).is_err());
    }

    #[test]
    fn every_node_has_a_finite_self_loop() {
        let g = tiny(&[(0, 1)], vec![0, 1, 1, 0]);
        for r in 0..4 {
            let row: Vec<_> = g.adjacency().row(r).collect();
            assert!(row.iter().any(|&(c, _)| c == r));
            assert!(row.iter().all(|(_, v)| v.is_finite()));
        }
    }
}
