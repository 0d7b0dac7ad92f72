//! Full-catalog ranking metrics and noise diagnostics.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amsc::Partitions;
use crate::dataset::{DataSplit, InteractionDataset, ModalFeatures};
use crate::losses::compensated_sum;
use crate::models::{Recommender, Representations};
use crate::rng::{stage_rng, Stage};
use crate::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [5, 20];
pub const HISTOGRAM_BINS: usize = 40;

/// Item ids by descending score, ties by ascending id, excluded ids dropped.
pub fn rank_items(scores: &[f64], excluded: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// The first `k` entries of [`rank_items`] without sorting the whole catalog.
pub fn top_k(scores: &[f64], k: usize, excluded: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

pub fn recall_at_k(ranking: &[usize], test: &BTreeSet<usize>, k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|i| test.contains(i)).count();
    hits as f64 / test.len() as f64
}

/// Binary-relevance NDCG with the `1 / log2(p + 1)` discount.
pub fn ndcg_at_k(ranking: &[usize], test: &BTreeSet<usize>, k: usize) -> f64 {
    let discount = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(p, _)| discount(p + 1))
        .sum();
    let idcg: f64 = (1..=k.min(test.len())).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    /// One entry per cutoff, in the order given.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// Per-user metrics on `target`, skipping users with no target items.
pub fn per_user_metrics(
    reps: &Representations,
    target: &InteractionDataset,
    excluded: &[&InteractionDataset],
    ks: &[usize],
) -> Result<Vec<UserMetrics>> {
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("cutoffs must be at least 1".into()));
    }
    if reps.n_users() < target.n_users() || reps.n_items() < target.n_items() {
        return Err(Error::Shape("model smaller than the evaluation universe".into()));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let n_items = target.n_items();
    Ok((0..target.n_users())
        .into_par_iter()
        .filter(|&u| target.user_len(u) > 0)
        .map(|u| {
            let scores = reps.user_scores(u);
            let scores = &scores.as_slice().expect("contiguous scores")[..n_items];
            let ranking = top_k(scores, kmax, |i| excluded.iter().any(|d| d.contains(u, i)));
            let test: BTreeSet<usize> = target.user_items(u).collect();
            UserMetrics {
                user: u,
                recall: ks.iter().map(|&k| recall_at_k(&ranking, &test, k)).collect(),
                ndcg: ks.iter().map(|&k| ndcg_at_k(&ranking, &test, k)).collect(),
            }
        })
        .collect())
}

pub fn aggregate(tag: &str, ks: &[usize], users: &[UserMetrics]) -> Vec<MetricsRow> {
    let n = users.len();
    ks.iter()
        .enumerate()
        .map(|(c, &k)| {
            let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    compensated_sum(users.iter().map(f)) / n as f64
                }
            };
            MetricsRow {
                model: tag.to_string(),
                k,
                recall: mean(&|m| m.recall[c]),
                ndcg: mean(&|m| m.ndcg[c]),
                n_users: n,
            }
        })
        .collect()
}

/// Which held-out part to score, and what to exclude when ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    /// Valid items, excluding train.
    Valid,
    /// Test items, excluding train and valid.
    Test,
}

pub fn evaluate_representations(
    reps: &Representations,
    split: &DataSplit,
    target: EvalTarget,
    ks: &[usize],
    tag: &str,
) -> Result<Vec<MetricsRow>> {
    let users = match target {
        EvalTarget::Valid => per_user_metrics(reps, &split.valid, &[&split.train], ks)?,
        EvalTarget::Test => per_user_metrics(reps, &split.test, &[&split.train, &split.valid], ks)?,
    };
    Ok(aggregate(tag, ks, &users))
}

pub fn evaluate(
    model: &dyn Recommender,
    features: Option<&ModalFeatures>,
    split: &DataSplit,
    target: EvalTarget,
    ks: &[usize],
    tag: &str,
) -> Result<Vec<MetricsRow>> {
    let reps = model.representations(features)?;
    evaluate_representations(&reps, split, target, ks, tag)
}

pub fn find_metric(rows: &[MetricsRow], k: usize) -> Option<&MetricsRow> {
    rows.iter().find(|r| r.k == k)
}

/// Appends metric rows as JSON lines.
pub fn append_metrics_jsonl(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Probability that a random clean score beats a random noisy one, ties
/// counted half.
pub fn auc(clean: &[f64], noisy: &[f64]) -> f64 {
    if clean.is_empty() || noisy.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = clean
        .iter()
        .map(|&s| (s, true))
        .chain(noisy.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney with mid-ranks for tied groups.
    let mut rank_sum_clean = 0.0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        rank_sum_clean += mid * all[start..end].iter().filter(|x| x.1).count() as f64;
        start = end;
    }
    let nc = clean.len() as f64;
    let nn = noisy.len() as f64;
    (rank_sum_clean - nc * (nc + 1.0) / 2.0) / (nc * nn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub clean_density: f64,
    pub noisy_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub bins: Vec<HistogramBin>,
    pub auc: f64,
    pub n_clean: usize,
    pub n_noisy: usize,
    pub clean_mean: f64,
    pub noisy_mean: f64,
}

impl ScoreDistribution {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin_lo,bin_hi,clean_density,noisy_density\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{}\n", b.bin_lo, b.bin_hi, b.clean_density, b.noisy_density));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Density histograms over a shared range plus AUC.
pub fn score_histograms(clean: &[f64], noisy: &[f64], n_bins: usize) -> Result<ScoreDistribution> {
    if noisy.is_empty() {
        return Err(Error::Empty("no noisy interactions for the score distribution".into()));
    }
    if clean.is_empty() {
        return Err(Error::Empty("no clean interactions for the score distribution".into()));
    }
    let all = clean.iter().chain(noisy);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let density = |xs: &[f64]| {
        let mut counts = vec![0usize; n_bins];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / (xs.len() as f64 * width))
            .collect::<Vec<f64>>()
    };
    let (dc, dn) = (density(clean), density(noisy));
    let bins = (0..n_bins)
        .map(|b| HistogramBin {
            bin_lo: lo + b as f64 * width,
            bin_hi: lo + (b + 1) as f64 * width,
            clean_density: dc[b],
            noisy_density: dn[b],
        })
        .collect();
    let mean = |xs: &[f64]| compensated_sum(xs.iter().copied()) / xs.len() as f64;
    Ok(ScoreDistribution {
        bins,
        auc: auc(clean, noisy),
        n_clean: clean.len(),
        n_noisy: noisy.len(),
        clean_mean: mean(clean),
        noisy_mean: mean(noisy),
    })
}

/// Scores of a random `sample_frac` of clean train pairs against all injected
/// pairs.
pub fn score_distribution_report(
    model: &dyn Recommender,
    features: Option<&ModalFeatures>,
    train: &InteractionDataset,
    sample_frac: f64,
    seed: u64,
) -> Result<ScoreDistribution> {
    if !(sample_frac > 0.0 && sample_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("sample fraction {sample_frac} not in (0, 1]")));
    }
    let reps = model.representations(features)?;
    let mut clean: Vec<(usize, usize)> = Vec::new();
    let mut noisy = Vec::new();
    for it in train.interactions() {
        let s = reps.score(it.user, it.item);
        if it.injected {
            noisy.push(s);
        } else {
            clean.push((it.user, it.item));
        }
    }
    if noisy.is_empty() {
        return Err(Error::Empty("train set has no injected interactions".into()));
    }
    let mut rng = stage_rng(seed, Stage::Diagnose);
    clean.sort_unstable();
    let n = ((clean.len() as f64 * sample_frac).round() as usize).clamp(1, clean.len().max(1));
    let (sample, _) = clean.partial_shuffle(&mut rng, n);
    let clean_scores: Vec<f64> = sample.iter().map(|&(u, i)| reps.score(u, i)).collect();
    score_histograms(&clean_scores, &noisy, HISTOGRAM_BINS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDetection {
    pub precision: f64,
    pub recall: f64,
    /// Precision over the share of injected pairs in train.
    pub lift: f64,
    pub n_flagged: usize,
    pub n_injected: usize,
    pub n_train: usize,
    pub base_rate: f64,
    /// Set when no pair was flagged.
    pub empty: bool,
}

/// How well the pooled false sets recover the injected pairs.
pub fn noise_detection_report(partitions: &Partitions, train: &InteractionDataset) -> NoiseDetection {
    let n_injected = train.n_injected();
    let n_train = train.len();
    let base_rate = if n_train == 0 { 0.0 } else { n_injected as f64 / n_train as f64 };
    let mut flagged = 0;
    let mut hits = 0;
    for p in partitions.iter() {
        for &i in &p.false_set {
            flagged += 1;
            if train.is_injected(p.user, i) {
                hits += 1;
            }
        }
    }
    if flagged == 0 {
        return NoiseDetection {
            precision: 0.0,
            recall: 0.0,
            lift: 0.0,
            n_flagged: 0,
            n_injected,
            n_train,
            base_rate,
            empty: true,
        };
    }
    let precision = hits as f64 / flagged as f64;
    let recall = if n_injected == 0 { 0.0 } else { hits as f64 / n_injected as f64 };
    NoiseDetection {
        precision,
        recall,
        lift: if base_rate > 0.0 { precision / base_rate } else { 0.0 },
        n_flagged: flagged,
        n_injected,
        n_train,
        base_rate,
        empty: false,
    }
}
