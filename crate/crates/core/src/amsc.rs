//! Adaptive modality similarity calibration.
//!
//! Each user's train interactions are split at the mean per-interaction loss
//! into reliable (low loss) and spurious (high loss) items. A spurious item is
//! moved back to the clean set when its modal similarity to some reliable
//! item, scaled by its own cross-modal hash agreement, exceeds a threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{InteractionDataset, ModalFeatureTable, ModalFeatures};
use crate::losses::{compensated_sum, per_interaction_losses, InteractionLosses};
use crate::models::Recommender;
use crate::rng::{stage_rng, Stage};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_HASH_BITS: usize = 64;

/// AMSC output for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserPartition {
    pub user: usize,
    pub reliable: BTreeSet<usize>,
    pub spurious: BTreeSet<usize>,
    #[serde(rename = "true")]
    pub true_set: BTreeSet<usize>,
    #[serde(rename = "false")]
    pub false_set: BTreeSet<usize>,
}

impl UserPartition {
    /// Checks the set relations against the user's train items.
    pub fn check(&self, train_items: &BTreeSet<usize>) -> std::result::Result<(), String> {
        let u = self.user;
        if !self.reliable.is_disjoint(&self.spurious) {
            return Err(format!("user {u}: reliable and spurious overlap"));
        }
        let union: BTreeSet<usize> = self.reliable.union(&self.spurious).copied().collect();
        if &union != train_items {
            return Err(format!("user {u}: reliable + spurious != train items"));
        }
        if !self.reliable.is_subset(&self.true_set) {
            return Err(format!("user {u}: reliable not inside true"));
        }
        if !self.true_set.is_disjoint(&self.false_set) {
            return Err(format!("user {u}: true and false overlap"));
        }
        let tf: BTreeSet<usize> = self.true_set.union(&self.false_set).copied().collect();
        if tf != union {
            return Err(format!("user {u}: true + false != reliable + spurious"));
        }
        if !self.false_set.is_subset(&self.spurious) {
            return Err(format!("user {u}: false not inside spurious"));
        }
        Ok(())
    }

    /// Has both clean and noisy items, so it can form denoising triples.
    pub fn is_contrastive(&self) -> bool {
        !self.true_set.is_empty() && !self.false_set.is_empty()
    }
}

/// Partitions keyed by user.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partitions {
    by_user: BTreeMap<usize, UserPartition>,
}

impl Partitions {
    pub fn from_vec(parts: Vec<UserPartition>) -> Self {
        Partitions {
            by_user: parts.into_iter().map(|p| (p.user, p)).collect(),
        }
    }

    pub fn get(&self, u: usize) -> Option<&UserPartition> {
        self.by_user.get(&u)
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserPartition> {
        self.by_user.values()
    }

    pub fn len(&self) -> usize {
        self.by_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn n_false(&self) -> usize {
        self.iter().map(|p| p.false_set.len()).sum()
    }

    pub fn n_contrastive(&self) -> usize {
        self.iter().filter(|p| p.is_contrastive()).count()
    }

    /// Checks every user against `train`.
    pub fn check(&self, train: &InteractionDataset) -> std::result::Result<(), String> {
        for p in self.iter() {
            let items: BTreeSet<usize> = train.user_items(p.user).collect();
            p.check(&items)?;
        }
        Ok(())
    }

    /// One JSON object per line: `{user, reliable, spurious, true, false}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for p in self.iter() {
            serde_json::to_writer(&mut w, p)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Splits a user's items at the mean loss: `<= mean` is reliable.
pub fn partition_by_loss(losses: &[(usize, f64)]) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    if losses.is_empty() {
        return Err(Error::Empty("loss map for partitioning".into()));
    }
    let mean = compensated_sum(losses.iter().map(|&(_, l)| l)) / losses.len() as f64;
    // Rounding in the mean must never push the minimum above the threshold.
    let min = losses.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
    let threshold = mean.max(min);
    let mut reliable = BTreeSet::new();
    let mut spurious = BTreeSet::new();
    for &(i, l) in losses {
        if l <= threshold {
            reliable.insert(i);
        } else {
            spurious.insert(i);
        }
    }
    Ok((reliable, spurious))
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// `max(cos(T_i, T_j), cos(V_i, V_j))`.
pub fn modal_similarity(i: usize, j: usize, text: &ModalFeatureTable, vision: &ModalFeatureTable) -> Result<f64> {
    let st = cosine(text.row(i)?, text.row(j)?)?;
    let sv = cosine(vision.row(i)?, vision.row(j)?)?;
    Ok(st.max(sv))
}

/// Fixed random sign projections into a shared `k`-bit space.
///
/// When both modalities have the same width they share one projection, so
/// agreeing codes mean the two feature vectors point the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct HashProjector {
    pub k: usize,
    pub w_text: Array2<f64>,
    pub w_vision: Array2<f64>,
    pub b_text: Array1<f64>,
    pub b_vision: Array1<f64>,
    pub seed: u64,
}

impl HashProjector {
    pub fn new(k: usize, dim_text: usize, dim_vision: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim_text == 0 || dim_vision == 0 {
            return Err(Error::InvalidArgument("hash bits and dims must be positive".into()));
        }
        let mut rng = stage_rng(seed, Stage::Hash);
        let mut gaussian = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
        };
        let w_text = gaussian(k, dim_text);
        let b_text = gaussian(k, 1).column(0).to_owned();
        let (w_vision, b_vision) = if dim_text == dim_vision {
            (w_text.clone(), b_text.clone())
        } else {
            (gaussian(k, dim_vision), gaussian(k, 1).column(0).to_owned())
        };
        Ok(HashProjector {
            k,
            w_text,
            w_vision,
            b_text,
            b_vision,
            seed,
        })
    }

    pub fn for_features(k: usize, features: &ModalFeatures, seed: u64) -> Result<Self> {
        Self::new(k, features.text.dim(), features.vision.dim(), seed)
    }

    fn hash(w: &Array2<f64>, b: &Array1<f64>, x: ArrayView1<f64>) -> Result<Vec<bool>> {
        if w.ncols() != x.len() {
            return Err(Error::Shape(format!(
                "hash projection expects {} dims, got {}",
                w.ncols(),
                x.len()
            )));
        }
        // sign(0) = +1
        Ok((w.dot(&x) + b).iter().map(|&v| v >= 0.0).collect())
    }

    pub fn hash_text(&self, x: ArrayView1<f64>) -> Result<Vec<bool>> {
        Self::hash(&self.w_text, &self.b_text, x)
    }

    pub fn hash_vision(&self, x: ArrayView1<f64>) -> Result<Vec<bool>> {
        Self::hash(&self.w_vision, &self.b_vision, x)
    }
}

/// Cosine of two ±1 codes: `(agreements - disagreements) / k`.
pub fn code_cosine(a: &[bool], b: &[bool]) -> f64 {
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    (2.0 * agree - a.len() as f64) / a.len() as f64
}

/// Cross-modal hash agreement of item `i`.
pub fn confidence(i: usize, proj: &HashProjector, text: &ModalFeatureTable, vision: &ModalFeatureTable) -> Result<f64> {
    let ht = proj.hash_text(text.row(i)?)?;
    let hv = proj.hash_vision(vision.row(i)?)?;
    Ok(code_cosine(&ht, &hv))
}

/// `S(i, j) = S_modal(i, j) * S_conf(i)`; confidence is taken on `i` only.
pub fn combined_similarity(
    i: usize,
    j: usize,
    proj: &HashProjector,
    text: &ModalFeatureTable,
    vision: &ModalFeatureTable,
) -> Result<f64> {
    Ok(modal_similarity(i, j, text, vision)? * confidence(i, proj, text, vision)?)
}

/// Precomputed unit rows and per-item confidence for fast calibration.
#[derive(Debug, Clone)]
pub struct ModalIndex {
    text_unit: Array2<f64>,
    vision_unit: Array2<f64>,
    confidence: Vec<f64>,
}

impl ModalIndex {
    pub fn new(features: &ModalFeatures, proj: &HashProjector) -> Result<Self> {
        let unit = |m: &Array2<f64>| {
            let mut out = m.clone();
            for mut row in out.outer_iter_mut() {
                let n = row.dot(&row).sqrt();
                row /= n;
            }
            out
        };
        let confidence = (0..features.n_items())
            .map(|i| confidence(i, proj, &features.text, &features.vision))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ModalIndex {
            text_unit: unit(features.text.matrix()),
            vision_unit: unit(features.vision.matrix()),
            confidence,
        })
    }

    pub fn n_items(&self) -> usize {
        self.confidence.len()
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.confidence[i]
    }

    pub fn modal_similarity(&self, i: usize, j: usize) -> f64 {
        let st = self.text_unit.row(i).dot(&self.text_unit.row(j));
        let sv = self.vision_unit.row(i).dot(&self.vision_unit.row(j));
        st.max(sv)
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.modal_similarity(i, j) * self.confidence[i]
    }
}

/// Moves a spurious item to the clean set when some reliable item is more
/// similar than `threshold`.
///
/// Returns `(true_set, false_set)`.
pub fn calibrate(
    reliable: &BTreeSet<usize>,
    spurious: &BTreeSet<usize>,
    similarity: impl Fn(usize, usize) -> f64,
    threshold: f64,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut true_set = reliable.clone();
    let mut false_set = BTreeSet::new();
    for &i in spurious {
        if reliable.iter().any(|&j| similarity(i, j) > threshold) {
            true_set.insert(i);
        } else {
            false_set.insert(i);
        }
    }
    (true_set, false_set)
}

/// Partitions and calibrates one user from precomputed losses.
pub fn partition_user(u: usize, losses: &[(usize, f64)], index: &ModalIndex, threshold: f64) -> Result<UserPartition> {
    let (reliable, spurious) = partition_by_loss(losses)?;
    let (true_set, false_set) = calibrate(&reliable, &spurious, |i, j| index.similarity(i, j), threshold);
    Ok(UserPartition {
        user: u,
        reliable,
        spurious,
        true_set,
        false_set,
    })
}

/// Partitions from already computed per-interaction losses.
pub fn partitions_from_losses(losses: &InteractionLosses, index: &ModalIndex, threshold: f64) -> Result<Partitions> {
    let parts = losses
        .per_user
        .par_iter()
        .enumerate()
        .filter(|(_, row)| !row.is_empty())
        .map(|(u, row)| partition_user(u, row, index, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partitions::from_vec(parts))
}

/// Losses from `teacher` on `train`, then partition and calibrate every user
/// with at least one train interaction.
pub fn run_amsc(
    teacher: &dyn Recommender,
    train: &InteractionDataset,
    features: Option<&ModalFeatures>,
    index: &ModalIndex,
    threshold: f64,
) -> Result<Partitions> {
    if index.n_items() < train.n_items() {
        return Err(Error::MissingFeatures(format!(
            "modal index covers {} of {} items",
            index.n_items(),
            train.n_items()
        )));
    }
    let reps = teacher.representations(features)?;
    let losses = per_interaction_losses(&reps, train);
    partitions_from_losses(&losses, index, threshold)
}
