//! Planted-cluster corpora for desk-scale experiments.
//!
//! Items belong to evenly sized clusters. Each user prefers one or two
//! clusters and only interacts inside them. Both modalities of an item are
//! its cluster's latent centroid plus Gaussian perturbation, so modal
//! similarity carries the preference structure.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InteractionDataset, ModalFeatureTable, ModalFeatures, Modality};
use crate::rng::{stage_rng, Stage};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub interactions_per_user: usize,
    pub dim_text: usize,
    pub dim_vision: usize,
    /// Std of the per-coordinate perturbation around the unit-variance centroid.
    pub modal_noise: f64,
    /// Fraction of items whose vision features come from a different cluster.
    pub mismatch_ratio: f64,
    /// Probability that a user prefers two clusters instead of one.
    pub two_cluster_prob: f64,
    /// Log-normal spread of within-cluster item popularity; 0 is uniform.
    pub popularity_skew: f64,
    /// Expected cosine between the centroids of sibling clusters 2k and 2k+1.
    pub sibling_similarity: f64,
    /// Probability that a two-cluster user's second cluster is the sibling
    /// of the first.
    pub sibling_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items: 200,
            n_clusters: 10,
            interactions_per_user: 10,
            dim_text: 32,
            dim_vision: 32,
            modal_noise: 0.05,
            mismatch_ratio: 0.0,
            two_cluster_prob: 0.5,
            popularity_skew: 0.0,
            sibling_similarity: 0.0,
            sibling_prob: 0.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_clusters == 0 {
            return bad("users, items and clusters must be positive".into());
        }
        if self.n_clusters > self.n_items {
            return bad(format!(
                "{} clusters for {} items",
                self.n_clusters, self.n_items
            ));
        }
        if self.interactions_per_user > self.n_items {
            return bad(format!(
                "{} interactions per user exceed {} items",
                self.interactions_per_user, self.n_items
            ));
        }
        let smallest = self.n_items / self.n_clusters;
        if self.interactions_per_user > smallest {
            return bad(format!(
                "{} interactions per user exceed the smallest cluster ({smallest} items)",
                self.interactions_per_user
            ));
        }
        if self.dim_text == 0 || self.dim_vision == 0 {
            return bad("feature dimensions must be positive".into());
        }
        for (name, p) in [
            ("mismatch_ratio", self.mismatch_ratio),
            ("two_cluster_prob", self.two_cluster_prob),
            ("sibling_similarity", self.sibling_similarity),
            ("sibling_prob", self.sibling_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.modal_noise < 0.0 || self.popularity_skew < 0.0 {
            return bad("noise and skew must be non-negative".into());
        }
        if self.n_clusters < 2 && (self.two_cluster_prob > 0.0 || self.mismatch_ratio > 0.0) {
            return bad("two-cluster users and mismatches need at least two clusters".into());
        }
        Ok(())
    }
}

/// Generated corpus plus the planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: InteractionDataset,
    pub features: ModalFeatures,
    pub item_clusters: Vec<usize>,
    pub user_clusters: Vec<Vec<usize>>,
    /// Items whose vision row was drawn from another cluster's centroid.
    pub mismatched: Vec<bool>,
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = stage_rng(seed, Stage::Synth);

    let mut item_clusters: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_clusters).collect();
    item_clusters.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        members[c].push(i);
    }
    let popularity: Vec<f64> = (0..cfg.n_items)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (cfg.popularity_skew * z).exp()
        })
        .collect();

    let clusters: Vec<usize> = (0..cfg.n_clusters).collect();
    let mut user_clusters = Vec::with_capacity(cfg.n_users);
    let mut pairs = Vec::with_capacity(cfg.n_users * cfg.interactions_per_user);
    for u in 0..cfg.n_users {
        let n_pref = if rng.random_bool(cfg.two_cluster_prob) { 2 } else { 1 };
        let mut pref: Vec<usize> = clusters.choose_multiple(&mut rng, n_pref).copied().collect();
        if n_pref == 2 && cfg.sibling_prob > 0.0 && rng.random_bool(cfg.sibling_prob) {
            let sibling = pref[0] ^ 1;
            if sibling < cfg.n_clusters {
                pref[1] = sibling;
            }
        }
        pref.sort_unstable();
        let pool: Vec<usize> = pref.iter().flat_map(|&c| members[c].iter().copied()).collect();
        let picked: Vec<usize> = pool
            .choose_multiple_weighted(&mut rng, cfg.interactions_per_user, |&i| popularity[i])
            .map_err(|e| Error::InvalidArgument(format!("popularity weights: {e}")))?
            .copied()
            .collect();
        pairs.extend(picked.into_iter().map(|i| (u, i)));
        user_clusters.push(pref);
    }

    let latent_dim = cfg.dim_text.max(cfg.dim_vision);
    let mut centroids = Array2::from_shape_simple_fn((cfg.n_clusters, latent_dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    if cfg.sibling_similarity > 0.0 {
        let (shared, own) = (cfg.sibling_similarity.sqrt(), (1.0 - cfg.sibling_similarity).sqrt());
        for pair in 0..cfg.n_clusters / 2 {
            for d in 0..latent_dim {
                let f: f64 = rng.sample(StandardNormal);
                for c in [2 * pair, 2 * pair + 1] {
                    centroids[[c, d]] = shared * f + own * centroids[[c, d]];
                }
            }
        }
    }
    let mut text = Array2::zeros((cfg.n_items, cfg.dim_text));
    let mut vision = Array2::zeros((cfg.n_items, cfg.dim_vision));
    let mut mismatched = vec![false; cfg.n_items];
    for i in 0..cfg.n_items {
        let own = item_clusters[i];
        let vis_cluster = if cfg.mismatch_ratio > 0.0 && rng.random_bool(cfg.mismatch_ratio) {
            mismatched[i] = true;
            let other = rng.random_range(0..cfg.n_clusters - 1);
            if other >= own {
                other + 1
            } else {
                other
            }
        } else {
            own
        };
        for d in 0..cfg.dim_text {
            let eps: f64 = rng.sample(StandardNormal);
            text[[i, d]] = centroids[[own, d]] + cfg.modal_noise * eps;
        }
        for d in 0..cfg.dim_vision {
            let eps: f64 = rng.sample(StandardNormal);
            vision[[i, d]] = centroids[[vis_cluster, d]] + cfg.modal_noise * eps;
        }
    }

    Ok(SyntheticCorpus {
        dataset: InteractionDataset::from_pairs(cfg.n_users, cfg.n_items, pairs)?,
        features: ModalFeatures::new(
            ModalFeatureTable::new(Modality::Text, text)?,
            ModalFeatureTable::new(Modality::Vision, vision)?,
        )?,
        item_clusters,
        user_clusters,
        mismatched,
    })
}
