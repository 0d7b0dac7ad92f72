//! Interaction data, splits, oracle noise and synthetic corpora.

mod features;
mod io;
mod synthetic;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stage_rng, Stage};
use crate::{Error, Result};

pub use features::{load_modal_features, write_gmf1, ModalFeatureTable, ModalFeatures, Modality};
pub use io::{
    load_interactions, read_split_dir, write_interactions, write_split_dir, InteractionFormat,
    LoadedInteractions, SplitDir, Vocabulary,
};
pub use synthetic::{generate_synthetic, SynthConfig, SyntheticCorpus};

/// One observed user–item pair. Stored interactions are always positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub label: u8,
    /// True iff the pair was added by [`inject_noise`].
    pub injected: bool,
}

impl Interaction {
    pub fn positive(user: usize, item: usize) -> Self {
        Interaction {
            user,
            item,
            label: 1,
            injected: false,
        }
    }
}

/// Implicit-feedback interactions over a fixed user and item universe.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    interactions: Vec<Interaction>,
    /// Sorted item ids per user, with the injected flag alongside.
    per_user: Vec<Vec<(usize, bool)>>,
}

impl InteractionDataset {
    /// Builds a dataset, rejecting out-of-range ids and duplicate pairs.
    pub fn new(n_users: usize, n_items: usize, interactions: Vec<Interaction>) -> Result<Self> {
        let mut per_user: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n_users];
        for it in &interactions {
            if it.user >= n_users || it.item >= n_items {
                return Err(Error::OutOfRange(format!(
                    "interaction ({}, {}) outside {}x{}",
                    it.user, it.item, n_users, n_items
                )));
            }
            if it.label != 1 {
                return Err(Error::InvalidArgument(format!(
                    "stored interaction ({}, {}) has label {}",
                    it.user, it.item, it.label
                )));
            }
            per_user[it.user].push((it.item, it.injected));
        }
        for (u, items) in per_user.iter_mut().enumerate() {
            items.sort_unstable();
            if items.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate interaction for user {u}"
                )));
            }
        }
        Ok(InteractionDataset {
            n_users,
            n_items,
            interactions,
            per_user,
        })
    }

    /// Convenience constructor from clean (user, item) pairs.
    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let interactions = pairs
            .into_iter()
            .map(|(u, i)| Interaction::positive(u, i))
            .collect();
        Self::new(n_users, n_items, interactions)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Sorted items of user `u`.
    pub fn user_items(&self, u: usize) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.per_user[u].iter().map(|&(i, _)| i)
    }

    pub fn user_len(&self, u: usize) -> usize {
        self.per_user[u].len()
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        u < self.n_users
            && self.per_user[u]
                .binary_search_by_key(&i, |&(item, _)| item)
                .is_ok()
    }

    pub fn is_injected(&self, u: usize, i: usize) -> bool {
        match self.per_user[u].binary_search_by_key(&i, |&(item, _)| item) {
            Ok(pos) => self.per_user[u][pos].1,
            Err(_) => false,
        }
    }

    pub fn n_injected(&self) -> usize {
        self.interactions.iter().filter(|it| it.injected).count()
    }

    fn with_interactions(&self, interactions: Vec<Interaction>) -> Result<Self> {
        Self::new(self.n_users, self.n_items, interactions)
    }
}

/// Per-user ratio for [`split_per_user`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8,
            valid: 1,
            test: 1,
        }
    }
}

impl SplitRatios {
    /// (train, valid, test) sizes for a user with `n` items.
    ///
    /// Users with fewer than three items keep everything in train. Otherwise
    /// valid and test get the floor of their share, at least one each when
    /// their ratio is nonzero, and the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        if n < 3 {
            return (n, 0, 0);
        }
        let total = (self.train + self.valid + self.test) as usize;
        let part = |r: u32| {
            if r == 0 {
                0
            } else {
                (n * r as usize / total).max(1)
            }
        };
        let valid = part(self.valid);
        let test = part(self.test);
        (n - valid - test, valid, test)
    }
}

/// Train / validation / test views over a common universe.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: InteractionDataset,
    pub valid: InteractionDataset,
    pub test: InteractionDataset,
}

/// Summary written next to split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub injected: usize,
}

impl DataSplit {
    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    /// True if the pair occurs in any of the three parts.
    pub fn contains_any(&self, u: usize, i: usize) -> bool {
        self.train.contains(u, i) || self.valid.contains(u, i) || self.test.contains(u, i)
    }

    pub fn manifest(&self, seed: u64) -> SplitManifest {
        SplitManifest {
            seed,
            n_users: self.n_users(),
            n_items: self.n_items(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            injected: self.train.n_injected(),
        }
    }
}

/// Shuffles each user's items and slices them into train / valid / test.
pub fn split_per_user(ds: &InteractionDataset, ratios: SplitRatios, seed: u64) -> DataSplit {
    let mut rng = stage_rng(seed, Stage::Split);
    let mut train = Vec::with_capacity(ds.len());
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for u in 0..ds.n_users() {
        let mut items: Vec<(usize, bool)> = ds.per_user[u].clone();
        items.shuffle(&mut rng);
        let (n_train, n_valid, _) = ratios.sizes(items.len());
        for (pos, &(i, injected)) in items.iter().enumerate() {
            let it = Interaction {
                user: u,
                item: i,
                label: 1,
                injected,
            };
            if pos < n_train {
                train.push(it);
            } else if pos < n_train + n_valid {
                valid.push(it);
            } else {
                test.push(it);
            }
        }
    }
    let build = |v| {
        ds.with_interactions(v)
            .expect("split parts are subsets of a valid dataset")
    };
    DataSplit {
        train: build(train),
        valid: build(valid),
        test: build(test),
    }
}

/// Record of injected oracle noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub ratio: f64,
    pub injected_pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Number of pairs injected at `ratio` into `n_train` interactions.
pub fn noise_count(ratio: f64, n_train: usize) -> usize {
    (ratio * n_train as f64).round() as usize
}

/// Adds `round(ratio * |train|)` uniformly sampled unseen pairs to train.
///
/// Candidates are pairs absent from train, valid and test. Valid and test are
/// left untouched.
pub fn inject_noise(split: &DataSplit, ratio: f64, seed: u64) -> Result<(DataSplit, NoiseReport)> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "noise ratio {ratio} outside [0, 0.5]"
        )));
    }
    let needed = noise_count(ratio, split.train.len());
    let universe = split.n_users() * split.n_items();
    let occupied = split.train.len() + split.valid.len() + split.test.len();
    let available = universe - occupied;
    if needed > available {
        return Err(Error::ItemUniverseExhausted { needed, available });
    }
    let mut rng = stage_rng(seed, Stage::Noise);
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(needed);
    if needed > 0 {
        if available >= 4 * needed {
            let mut seen = HashSet::with_capacity(needed);
            while chosen.len() < needed {
                let u = rng.random_range(0..split.n_users());
                let i = rng.random_range(0..split.n_items());
                if !split.contains_any(u, i) && seen.insert((u, i)) {
                    chosen.push((u, i));
                }
            }
        } else {
            // Dense universe: enumerate the complement and sample without replacement.
            let mut free: Vec<(usize, usize)> = (0..split.n_users())
                .flat_map(|u| (0..split.n_items()).map(move |i| (u, i)))
                .filter(|&(u, i)| !split.contains_any(u, i))
                .collect();
            let (head, _) = free.partial_shuffle(&mut rng, needed);
            chosen.extend_from_slice(head);
        }
    }
    let mut train = split.train.interactions().to_vec();
    train.extend(chosen.iter().map(|&(user, item)| Interaction {
        user,
        item,
        label: 1,
        injected: true,
    }));
    let noisy = DataSplit {
        train: split.train.with_interactions(train)?,
        valid: split.valid.clone(),
        test: split.test.clone(),
    };
    Ok((
        noisy,
        NoiseReport {
            ratio,
            injected_pairs: chosen,
            seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n_users: usize, n_items: usize, per_user: usize) -> InteractionDataset {
        let pairs = (0..n_users).flat_map(|u| (0..per_user).map(move |k| (u, (u + k * 7) % n_items)));
        InteractionDataset::from_pairs(n_users, n_items, pairs).unwrap()
    }

    #[test]
    fn split_sizes_follow_ratio() {
        let r = SplitRatios::default();
        assert_eq!(r.sizes(10), (8, 1, 1));
        assert_eq!(r.sizes(2), (2, 0, 0));
        assert_eq!(r.sizes(3), (1, 1, 1));
        assert_eq!(r.sizes(25), (21, 2, 2));
        assert_eq!(r.sizes(0), (0, 0, 0));
    }

    #[test]
    fn ten_item_user_splits_eight_one_one() {
        let ds = toy(1, 50, 10);
        let split = split_per_user(&ds, SplitRatios::default(), 3);
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.valid.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn two_item_user_stays_in_train() {
        let ds = toy(1, 50, 2);
        let split = split_per_user(&ds, SplitRatios::default(), 3);
        assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (2, 0, 0));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(30, 40, 12);
        let a = split_per_user(&ds, SplitRatios::default(), 9);
        let b = split_per_user(&ds, SplitRatios::default(), 9);
        assert_eq!(a, b);
        let c = split_per_user(&ds, SplitRatios::default(), 10);
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let err = InteractionDataset::from_pairs(2, 2, [(0, 1), (0, 1)]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(InteractionDataset::from_pairs(2, 2, [(0, 2)]).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let ds = toy(20, 30, 10);
        let split = split_per_user(&ds, SplitRatios::default(), 1);
        let (noisy, report) = inject_noise(&split, 0.0, 5).unwrap();
        assert_eq!(noisy, split);
        assert!(report.injected_pairs.is_empty());
    }

    #[test]
    fn noise_count_rounds() {
        assert_eq!(noise_count(0.10, 160_792), 16_079);
        assert_eq!(noise_count(0.05, 10), 1);
        assert_eq!(noise_count(0.0, 1000), 0);
    }

    #[test]
    fn injected_pairs_are_new_and_flagged() {
        let ds = toy(40, 60, 10);
        let split = split_per_user(&ds, SplitRatios::default(), 1);
        let (noisy, report) = inject_noise(&split, 0.2, 5).unwrap();
        assert_eq!(report.injected_pairs.len(), noise_count(0.2, split.train.len()));
        for &(u, i) in &report.injected_pairs {
            assert!(!split.contains_any(u, i));
            assert!(noisy.train.is_injected(u, i));
        }
        let flagged = noisy.train.interactions().iter().filter(|it| it.injected).count();
        assert_eq!(flagged, report.injected_pairs.len());
        assert_eq!(noisy.valid, split.valid);
        assert_eq!(noisy.test, split.test);
    }

    #[test]
    fn noise_ratio_out_of_range() {
        let ds = toy(5, 30, 10);
        let split = split_per_user(&ds, SplitRatios::default(), 1);
        assert!(inject_noise(&split, 0.6, 1).is_err());
        assert!(inject_noise(&split, -0.1, 1).is_err());
    }

    #[test]
    fn exhausted_universe() {
        // 2 users x 6 items with 5 each leaves 2 free pairs; 0.5 * 6 train = 3 needed.
        let ds = toy(2, 6, 5);
        let split = split_per_user(&ds, SplitRatios::default(), 1);
        let err = inject_noise(&split, 0.5, 1).unwrap_err();
        assert!(matches!(err, Error::ItemUniverseExhausted { .. }));
    }

    #[test]
    fn dense_universe_path_samples_exactly() {
        let ds = toy(4, 12, 10);
        let split = split_per_user(&ds, SplitRatios::default(), 1);
        let (noisy, report) = inject_noise(&split, 0.125, 2).unwrap();
        assert_eq!(report.injected_pairs.len(), 4);
        assert_eq!(noisy.train.len(), split.train.len() + 4);
    }

    proptest! {
        #[test]
        fn split_partitions_every_user(n_users in 1usize..15, per_user in 0usize..20, seed in 0u64..1000) {
            let ds = toy(n_users, 25, per_user.min(25));
            let split = split_per_user(&ds, SplitRatios::default(), seed);
            for u in 0..n_users {
                let tr: HashSet<usize> = split.train.user_items(u).collect();
                let va: HashSet<usize> = split.valid.user_items(u).collect();
                let te: HashSet<usize> = split.test.user_items(u).collect();
                prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                let all: HashSet<usize> = tr.union(&va).chain(te.iter()).copied().collect();
                let orig: HashSet<usize> = ds.user_items(u).collect();
                prop_assert_eq!(all, orig);
            }
        }

        #[test]
        fn noise_never_collides(seed in 0u64..500, ratio in 0.0f64..0.5) {
            let ds = toy(12, 40, 10);
            let split = split_per_user(&ds, SplitRatios::default(), seed);
            let (noisy, report) = inject_noise(&split, ratio, seed).unwrap();
            let uniq: HashSet<_> = report.injected_pairs.iter().collect();
            prop_assert_eq!(uniq.len(), report.injected_pairs.len());
            for it in noisy.train.interactions() {
                prop_assert_eq!(it.injected, !split.train.contains(it.user, it.item));
            }
        }
    }
}
