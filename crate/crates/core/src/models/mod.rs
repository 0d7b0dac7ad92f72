//! Embedding recommenders scored by inner product.
//!
//! The teacher is an ID-only model: plain matrix factorization when it has
//! no propagation layers, otherwise LightGCN-style averaging over the
//! normalized user–item graph. The student adds projected text and vision
//! features to its item ID embeddings.

mod checkpoint;
mod graph;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ModalFeatures;
use crate::rng::{stage_rng, Stage};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use graph::NormalizedAdjacency;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;

/// Xavier-uniform matrix: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..=a))
}

/// `n x d` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn xavier(n: usize, d: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTable {
            matrix: xavier_uniform(n, d, n, d, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

/// Effective user and item vectors; scores are their inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl Representations {
    pub fn zeros_like(&self) -> Self {
        Representations {
            users: Array2::zeros(self.users.raw_dim()),
            items: Array2::zeros(self.items.raw_dim()),
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.nrows()
    }

    #[inline]
    pub fn score(&self, u: usize, i: usize) -> f64 {
        self.users.row(u).dot(&self.items.row(i))
    }

    pub fn checked_score(&self, u: usize, i: usize) -> Result<f64> {
        if u >= self.n_users() || i >= self.n_items() {
            return Err(Error::OutOfRange(format!(
                "score({u}, {i}) with {} users and {} items",
                self.n_users(),
                self.n_items()
            )));
        }
        Ok(self.score(u, i))
    }

    /// Scores of user `u` against every item.
    pub fn user_scores(&self, u: usize) -> Array1<f64> {
        self.items.dot(&self.users.row(u))
    }

    /// Accumulates `coef * d(s_ui)` into a gradient buffer of the same shape.
    #[inline]
    pub fn accumulate_score_grad(&self, grad: &mut Representations, u: usize, i: usize, coef: f64) {
        if coef == 0.0 {
            return;
        }
        grad.users.row_mut(u).scaled_add(coef, &self.items.row(i));
        grad.items.row_mut(i).scaled_add(coef, &self.users.row(u));
    }
}

/// Common surface of the teacher and the student.
///
/// Parameter blocks are exposed in a fixed declared order; gradients from
/// [`Recommender::backprop`] follow the same order.
pub trait Recommender {
    fn kind(&self) -> ModelKind;
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    fn dim(&self) -> usize;
    fn representations(&self, features: Option<&ModalFeatures>) -> Result<Representations>;
    /// Maps a gradient on the representations to gradients on the parameters.
    fn backprop(&self, grad: &Representations, features: Option<&ModalFeatures>) -> Result<Vec<Array2<f64>>>;
    fn param_names(&self) -> Vec<&'static str>;
    fn params(&self) -> Vec<&Array2<f64>>;
    fn params_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Inner product of the effective representations of `u` and `i`.
pub fn score(model: &dyn Recommender, features: Option<&ModalFeatures>, u: usize, i: usize) -> Result<f64> {
    if u >= model.n_users() || i >= model.n_items() {
        return Err(Error::OutOfRange(format!(
            "score({u}, {i}) with {} users and {} items",
            model.n_users(),
            model.n_items()
        )));
    }
    model.representations(features)?.checked_score(u, i)
}

/// ID-only teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub user_emb: EmbeddingTable,
    pub item_emb: EmbeddingTable,
    pub n_layers: usize,
    adjacency: Option<NormalizedAdjacency>,
}

impl TeacherModel {
    pub fn init(
        n_users: usize,
        n_items: usize,
        d: usize,
        n_layers: usize,
        adjacency: Option<NormalizedAdjacency>,
        seed: u64,
    ) -> Result<Self> {
        if n_users == 0 || n_items == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "teacher dimensions must be positive: {n_users} users, {n_items} items, d = {d}"
            )));
        }
        let mut rng = stage_rng(seed, Stage::TeacherInit);
        let user_emb = EmbeddingTable::xavier(n_users, d, &mut rng);
        let item_emb = EmbeddingTable::xavier(n_items, d, &mut rng);
        let mut t = TeacherModel {
            user_emb,
            item_emb,
            n_layers,
            adjacency: None,
        };
        if let Some(adj) = adjacency {
            t.attach_adjacency(adj)?;
        } else if n_layers > 0 {
            return Err(Error::InvalidArgument(format!(
                "{n_layers} propagation layers need an adjacency"
            )));
        }
        Ok(t)
    }

    pub fn attach_adjacency(&mut self, adj: NormalizedAdjacency) -> Result<()> {
        if adj.n_users() != self.user_emb.len() || adj.n_items() != self.item_emb.len() {
            return Err(Error::Shape(format!(
                "adjacency is {}x{}, teacher is {}x{}",
                adj.n_users(),
                adj.n_items(),
                self.user_emb.len(),
                self.item_emb.len()
            )));
        }
        self.adjacency = Some(adj);
        Ok(())
    }

    pub fn adjacency(&self) -> Option<&NormalizedAdjacency> {
        self.adjacency.as_ref()
    }

    fn graph(&self) -> Result<Option<&NormalizedAdjacency>> {
        if self.n_layers == 0 {
            return Ok(None);
        }
        self.adjacency
            .as_ref()
            .map(Some)
            .ok_or_else(|| Error::InvalidArgument("teacher has layers but no adjacency".into()))
    }

    /// Effective embeddings: mean of layers `0..=n_layers` of graph propagation.
    pub fn propagate(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        match self.graph()? {
            None => Ok((self.user_emb.matrix.clone(), self.item_emb.matrix.clone())),
            Some(adj) => Ok(adj.layer_mean(&self.user_emb.matrix, &self.item_emb.matrix, self.n_layers)),
        }
    }
}

impl Recommender for TeacherModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Teacher
    }

    fn n_users(&self) -> usize {
        self.user_emb.len()
    }

    fn n_items(&self) -> usize {
        self.item_emb.len()
    }

    fn dim(&self) -> usize {
        self.user_emb.dim()
    }

    fn representations(&self, _features: Option<&ModalFeatures>) -> Result<Representations> {
        let (users, items) = self.propagate()?;
        Ok(Representations { users, items })
    }

    fn backprop(&self, grad: &Representations, _features: Option<&ModalFeatures>) -> Result<Vec<Array2<f64>>> {
        // The propagation operator is symmetric, so its adjoint is itself.
        match self.graph()? {
            None => Ok(vec![grad.users.clone(), grad.items.clone()]),
            Some(adj) => {
                let (gu, gi) = adj.layer_mean(&grad.users, &grad.items, self.n_layers);
                Ok(vec![gu, gi])
            }
        }
    }

    fn param_names(&self) -> Vec<&'static str> {
        vec!["user_emb", "item_emb"]
    }

    fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.user_emb.matrix, &self.item_emb.matrix]
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.user_emb.matrix, &mut self.item_emb.matrix]
    }
}

/// Multi-modal student: `h_i = e_i + P_text T_i + P_vision V_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub user_emb: EmbeddingTable,
    pub item_id_emb: EmbeddingTable,
    /// `d x dim_text`
    pub proj_text: Array2<f64>,
    /// `d x dim_vision`
    pub proj_vision: Array2<f64>,
}

impl StudentModel {
    pub fn init(
        n_users: usize,
        n_items: usize,
        d: usize,
        dim_text: usize,
        dim_vision: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_users == 0 || n_items == 0 || d == 0 || dim_text == 0 || dim_vision == 0 {
            return Err(Error::InvalidArgument(format!(
                "student dimensions must be positive: {n_users} users, {n_items} items, d = {d}, text {dim_text}, vision {dim_vision}"
            )));
        }
        let mut rng = stage_rng(seed, Stage::StudentInit);
        Ok(StudentModel {
            user_emb: EmbeddingTable::xavier(n_users, d, &mut rng),
            item_id_emb: EmbeddingTable::xavier(n_items, d, &mut rng),
            proj_text: xavier_uniform(d, dim_text, dim_text, d, &mut rng),
            proj_vision: xavier_uniform(d, dim_vision, dim_vision, d, &mut rng),
        })
    }

    pub fn dim_text(&self) -> usize {
        self.proj_text.ncols()
    }

    pub fn dim_vision(&self) -> usize {
        self.proj_vision.ncols()
    }

    fn check_features<'a>(&self, features: Option<&'a ModalFeatures>) -> Result<&'a ModalFeatures> {
        let f = features.ok_or_else(|| Error::MissingFeatures("student needs text and vision features".into()))?;
        if f.text.dim() != self.dim_text() || f.vision.dim() != self.dim_vision() {
            return Err(Error::Shape(format!(
                "features are {}/{} wide, projections expect {}/{}",
                f.text.dim(),
                f.vision.dim(),
                self.dim_text(),
                self.dim_vision()
            )));
        }
        if f.n_items() < self.item_id_emb.len() {
            return Err(Error::MissingFeatures(format!(
                "{} feature rows for {} items",
                f.n_items(),
                self.item_id_emb.len()
            )));
        }
        Ok(f)
    }

    /// Fused representation of a single item.
    pub fn item_repr(&self, i: usize, features: &ModalFeatures) -> Result<Array1<f64>> {
        if i >= self.item_id_emb.len() {
            return Err(Error::OutOfRange(format!("item {i}")));
        }
        let f = self.check_features(Some(features))?;
        let t = f.text.row(i)?;
        let v = f.vision.row(i)?;
        Ok(&self.item_id_emb.row(i) + &self.proj_text.dot(&t) + &self.proj_vision.dot(&v))
    }
}

impl Recommender for StudentModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Student
    }

    fn n_users(&self) -> usize {
        self.user_emb.len()
    }

    fn n_items(&self) -> usize {
        self.item_id_emb.len()
    }

    fn dim(&self) -> usize {
        self.user_emb.dim()
    }

    fn representations(&self, features: Option<&ModalFeatures>) -> Result<Representations> {
        let f = self.check_features(features)?;
        let n = self.n_items();
        let text = f.text.matrix().slice(ndarray::s![..n, ..]);
        let vision = f.vision.matrix().slice(ndarray::s![..n, ..]);
        let items = &self.item_id_emb.matrix + &text.dot(&self.proj_text.t()) + vision.dot(&self.proj_vision.t());
        Ok(Representations {
            users: self.user_emb.matrix.clone(),
            items,
        })
    }

    fn backprop(&self, grad: &Representations, features: Option<&ModalFeatures>) -> Result<Vec<Array2<f64>>> {
        let f = self.check_features(features)?;
        let n = self.n_items();
        let text = f.text.matrix().slice(ndarray::s![..n, ..]);
        let vision = f.vision.matrix().slice(ndarray::s![..n, ..]);
        Ok(vec![
            grad.users.clone(),
            grad.items.clone(),
            grad.items.t().dot(&text),
            grad.items.t().dot(&vision),
        ])
    }

    fn param_names(&self) -> Vec<&'static str> {
        vec!["user_emb", "item_id_emb", "proj_text", "proj_vision"]
    }

    fn params(&self) -> Vec<&Array2<f64>> {
        vec![
            &self.user_emb.matrix,
            &self.item_id_emb.matrix,
            &self.proj_text,
            &self.proj_vision,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.user_emb.matrix,
            &mut self.item_id_emb.matrix,
            &mut self.proj_text,
            &mut self.proj_vision,
        ]
    }
}

/// Either model, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Teacher(TeacherModel),
    Student(StudentModel),
}

impl Model {
    pub fn as_recommender(&self) -> &dyn Recommender {
        match self {
            Model::Teacher(t) => t,
            Model::Student(s) => s,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.as_recommender().kind()
    }
}
