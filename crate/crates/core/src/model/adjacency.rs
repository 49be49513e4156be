use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};

use crate::graph::MetGraph;

/// Symmetric-normalized adjacency with self-loops, `D^-1/2 (A + I) D^-1/2`,
/// stored row-compressed.
///
/// Entries within a row are ordered by node location and kind rather than by
/// id, so aggregation sums run in the same order under any relabelling of the
/// nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyOp {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl AdjacencyOp {
    pub fn new(g: &MetGraph) -> Self {
        let n = g.len();
        let degree: Vec<f64> = (0..n).map(|i| (g.neighbors(i).len() + 1) as f64).collect();
        let key = |a: usize, b: usize| -> Ordering {
            let (na, nb) = (&g.nodes()[a], &g.nodes()[b]);
            na.location
                .lat()
                .total_cmp(&nb.location.lat())
                .then(na.location.lon().total_cmp(&nb.location.lon()))
                .then(na.kind.cmp(&nb.kind))
                .then(na.id.cmp(&nb.id))
        };

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n + 2 * g.edges().len());
        let mut weights = Vec::with_capacity(cols.capacity());
        row_ptr.push(0);
        for i in 0..n {
            let mut row: Vec<usize> = g.neighbors(i).to_vec();
            row.push(i);
            row.sort_by(|&a, &b| key(a, b));
            for j in row {
                cols.push(j);
                weights.push(1.0 / (degree[i] * degree[j]).sqrt());
            }
            row_ptr.push(cols.len());
        }
        AdjacencyOp { row_ptr, cols, weights }
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(column, weight)` entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// `Â · h`.
    pub fn apply(&self, h: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n(), h.ncols()));
        for (i, mut out_row) in out.outer_iter_mut().enumerate() {
            for (j, w) in self.row(i) {
                out_row.scaled_add(w, &h.row(j));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n(), self.n()));
        for i in 0..self.n() {
            for (j, w) in self.row(i) {
                a[[i, j]] = w;
            }
        }
        a
    }
}
