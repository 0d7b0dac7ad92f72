use ndarray::{concatenate, s, Array2, Axis};

use crate::dataset::InteractionDataset;

/// Symmetrically normalized bipartite adjacency `D^-1/2 A D^-1/2`.
///
/// Nodes are users `0..n_users` followed by items. Stored as CSR; the matrix
/// is symmetric so it is also its own transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Builds the graph from train interactions only.
    pub fn from_train(train: &InteractionDataset) -> Self {
        let (n_users, n_items) = (train.n_users(), train.n_items());
        let n = n_users + n_items;
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for it in train.interactions() {
            neighbors[it.user].push(n_users + it.item);
            neighbors[n_users + it.item].push(it.user);
        }
        let degree: Vec<f64> = neighbors.iter().map(|v| v.len() as f64).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(2 * train.len());
        let mut weights = Vec::with_capacity(2 * train.len());
        indptr.push(0);
        for (r, nb) in neighbors.iter_mut().enumerate() {
            nb.sort_unstable();
            for &c in nb.iter() {
                indices.push(c);
                weights.push(1.0 / (degree[r] * degree[c]).sqrt());
            }
            indptr.push(indices.len());
        }
        NormalizedAdjacency {
            n_users,
            n_items,
            indptr,
            indices,
            weights,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.indices.len() / 2
    }

    /// Dense copy, for tests and diagnostics.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n_users + self.n_items;
        let mut m = Array2::zeros((n, n));
        for r in 0..n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[[r, self.indices[k]]] = self.weights[k];
            }
        }
        m
    }

    /// `A_hat * x` for a stacked `(n_users + n_items) x d` matrix.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            for k in self.indptr[r]..self.indptr[r + 1] {
                row.scaled_add(self.weights[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    /// Mean of `A_hat^l [users; items]` for `l = 0..=layers`, split back.
    pub fn layer_mean(&self, users: &Array2<f64>, items: &Array2<f64>, layers: usize) -> (Array2<f64>, Array2<f64>) {
        let stacked = concatenate(Axis(0), &[users.view(), items.view()]).expect("same width");
        let mut acc = stacked.clone();
        let mut cur = stacked;
        for _ in 0..layers {
            cur = self.apply(&cur);
            acc += &cur;
        }
        acc /= (layers + 1) as f64;
        let u = acc.slice(s![..self.n_users, ..]).to_owned();
        let i = acc.slice(s![self.n_users.., ..]).to_owned();
        (u, i)
    }
}
