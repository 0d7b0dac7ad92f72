//! Recommendation losses with analytic gradients.
//!
//! Losses are functions of inner-product scores. Each batch routine adds
//! `dL/ds` terms into a [`Representations`]-shaped buffer; one call to
//! [`Recommender::backprop`] then turns that into parameter gradients.

use ndarray::Array2;
use rayon::prelude::*;

use crate::amsc::Partitions;
use crate::dataset::{InteractionDataset, ModalFeatures};
use crate::models::{Recommender, Representations};
use crate::{Error, Result};

/// `(user, positive item, negative item)`
pub type Triple = (usize, usize, usize);

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigma(x)`, accurate for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Value and derivative of a loss with respect to one score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub grad: f64,
}

/// Value and derivatives of a pairwise loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Pointwise BCE on `sigma(s)` with label `r` in {0, 1}.
///
/// `l = -r ln sigma(s) - (1 - r) ln(1 - sigma(s))`, `dl/ds = sigma(s) - r`.
#[inline]
pub fn bce_loss(s: f64, r: f64) -> ScoreLoss {
    ScoreLoss {
        value: r * softplus(-s) + (1.0 - r) * softplus(s),
        grad: sigmoid(s) - r,
    }
}

/// `-ln sigma(s_pos - s_neg)`.
#[inline]
pub fn bpr_loss(s_pos: f64, s_neg: f64) -> PairLoss {
    let delta = s_pos - s_neg;
    let g = sigmoid(-delta);
    PairLoss {
        value: softplus(-delta),
        d_pos: -g,
        d_neg: g,
    }
}

/// Loss value plus gradients for each parameter block in declared order.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Adds `scale * BPR` terms for `triples`, returning the unscaled sum.
pub fn accumulate_bpr(reps: &Representations, triples: &[Triple], scale: f64, grad: &mut Representations) -> f64 {
    let mut values = Vec::with_capacity(triples.len());
    for &(u, i, j) in triples {
        let l = bpr_loss(reps.score(u, i), reps.score(u, j));
        reps.accumulate_score_grad(grad, u, i, scale * l.d_pos);
        reps.accumulate_score_grad(grad, u, j, scale * l.d_neg);
        values.push(l.value);
    }
    compensated_sum(values)
}

/// Adds `scale * BCE` terms for `(user, item, label)` samples, returning the unscaled sum.
pub fn accumulate_bce(
    reps: &Representations,
    samples: &[(usize, usize, f64)],
    scale: f64,
    grad: &mut Representations,
) -> f64 {
    let mut values = Vec::with_capacity(samples.len());
    for &(u, i, r) in samples {
        let l = bce_loss(reps.score(u, i), r);
        reps.accumulate_score_grad(grad, u, i, scale * l.grad);
        values.push(l.value);
    }
    compensated_sum(values)
}

fn finish(model: &dyn Recommender, features: Option<&ModalFeatures>, value: f64, grad: &Representations) -> Result<LossValue> {
    Ok(LossValue {
        value,
        grads: model.backprop(grad, features)?,
    })
}

/// Summed BPR over a batch of triples.
pub fn bpr_batch_loss(model: &dyn Recommender, features: Option<&ModalFeatures>, triples: &[Triple]) -> Result<LossValue> {
    let reps = model.representations(features)?;
    let mut grad = reps.zeros_like();
    let value = accumulate_bpr(&reps, triples, 1.0, &mut grad);
    finish(model, features, value, &grad)
}

/// Mean BCE over `(user, item, label)` samples.
pub fn bce_batch_loss(
    model: &dyn Recommender,
    features: Option<&ModalFeatures>,
    samples: &[(usize, usize, f64)],
) -> Result<LossValue> {
    if samples.is_empty() {
        return Err(Error::Empty("BCE batch".into()));
    }
    let reps = model.representations(features)?;
    let mut grad = reps.zeros_like();
    let scale = 1.0 / samples.len() as f64;
    let value = accumulate_bce(&reps, samples, scale, &mut grad) * scale;
    finish(model, features, value, &grad)
}

/// Keeps triples whose user has nonempty clean and noisy sets and whose
/// items fall in them.
pub fn dbpr_eligible(partitions: &Partitions, batch: &[Triple]) -> Vec<Triple> {
    batch
        .iter()
        .copied()
        .filter(|&(u, i, j)| {
            partitions.get(u).is_some_and(|p| {
                !p.true_set.is_empty()
                    && !p.false_set.is_empty()
                    && p.true_set.contains(&i)
                    && p.false_set.contains(&j)
            })
        })
        .collect()
}

/// Denoising BPR: `-sum ln sigma(s_ui - s_uj)` with `i` clean and `j` noisy.
///
/// Triples that do not match the partitions are skipped; an empty remainder
/// is an error.
pub fn dbpr_loss(
    model: &dyn Recommender,
    features: Option<&ModalFeatures>,
    partitions: &Partitions,
    batch: &[Triple],
) -> Result<LossValue> {
    let kept = dbpr_eligible(partitions, batch);
    if kept.is_empty() {
        return Err(Error::DegeneratePartitions);
    }
    bpr_batch_loss(model, features, &kept)
}

/// Per-user positive-term BCE losses `softplus(-s_ui)` over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLosses {
    /// Per user, `(item, loss)` sorted by item.
    pub per_user: Vec<Vec<(usize, f64)>>,
}

impl InteractionLosses {
    pub fn get(&self, u: usize, i: usize) -> Option<f64> {
        let row = self.per_user.get(u)?;
        row.binary_search_by_key(&i, |&(item, _)| item)
            .ok()
            .map(|pos| row[pos].1)
    }

    pub fn len(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss of every stored interaction as a positive (`r = 1`) under `reps`.
pub fn per_interaction_losses(reps: &Representations, ds: &InteractionDataset) -> InteractionLosses {
    let per_user = (0..ds.n_users())
        .into_par_iter()
        .map(|u| {
            ds.user_items(u)
                .map(|i| (i, bce_loss(reps.score(u, i), 1.0).value))
                .collect()
        })
        .collect();
    InteractionLosses { per_user }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amsc::UserPartition;
    use crate::dataset::{ModalFeatureTable, Modality};
    use crate::models::{NormalizedAdjacency, StudentModel, TeacherModel};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_at_zero() {
        let l = bce_loss(0.0, 1.0);
        assert_abs_diff_eq!(l.value, LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(l.grad, -0.5, epsilon = 1e-15);
        let l = bce_loss(0.0, 0.0);
        assert_abs_diff_eq!(l.value, LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(l.grad, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn bce_reference_value() {
        // -ln sigma(3.7) = ln(1 + e^-3.7), evaluated with 30-digit arithmetic.
        assert_abs_diff_eq!(bce_loss(3.7, 1.0).value, 0.024422845933779155, epsilon = 1e-15);
    }

    #[test]
    fn bce_is_stable_for_large_scores() {
        for s in [-500.0, -50.0, 50.0, 500.0] {
            for r in [0.0, 1.0] {
                let l = bce_loss(s, r);
                assert!(l.value.is_finite() && l.grad.is_finite());
            }
        }
        assert_abs_diff_eq!(bce_loss(500.0, 0.0).value, 500.0, epsilon = 1e-9);
        assert_abs_diff_eq!(bce_loss(-500.0, 1.0).value, 500.0, epsilon = 1e-9);
    }

    #[test]
    fn bce_pair_convexity() {
        for s in [-2.0, 0.0, 2.0] {
            let both = bce_loss(s, 1.0).value + bce_loss(s, 0.0).value;
            if s == 0.0 {
                assert_abs_diff_eq!(both, 2.0 * LN2, epsilon = 1e-15);
            } else {
                assert!(both > 2.0 * LN2);
            }
        }
    }

    #[test]
    fn bpr_values() {
        assert_abs_diff_eq!(bpr_loss(1.3, 1.3).value, LN2, epsilon = 1e-15);
        let vals: Vec<f64> = [1.0, 5.0, 10.0].iter().map(|&d| bpr_loss(d, 0.0).value).collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2] && vals[2] > 0.0);
        // -ln sigma(-2) = ln(1 + e^2)
        assert_abs_diff_eq!(bpr_loss(0.0, 2.0).value, 2.1269280110429727, epsilon = 1e-14);
        let l = bpr_loss(0.7, -0.4);
        assert_abs_diff_eq!(l.d_pos, -(1.0 - sigmoid(1.1)), epsilon = 1e-15);
        assert_abs_diff_eq!(l.d_neg, 1.0 - sigmoid(1.1), epsilon = 1e-15);
    }

    #[test]
    fn log_sigmoid_tail() {
        // ln sigma(10) = -ln(1 + e^-10)
        assert_abs_diff_eq!(log_sigmoid(10.0), -4.539889921686465e-5, epsilon = 1e-18);
        assert!(log_sigmoid(-800.0).is_finite());
    }

    fn partition(user: usize, t: &[usize], f: &[usize]) -> UserPartition {
        let true_set: BTreeSet<usize> = t.iter().copied().collect();
        let false_set: BTreeSet<usize> = f.iter().copied().collect();
        UserPartition {
            user,
            reliable: true_set.clone(),
            spurious: false_set.clone(),
            true_set,
            false_set,
        }
    }

    #[test]
    fn dbpr_single_triple() {
        let mut t = TeacherModel::init(1, 2, 2, 0, None, 1).unwrap();
        t.user_emb.matrix = ndarray::array![[1.0, 0.0]];
        t.item_emb.matrix = ndarray::array![[1.0, 5.0], [0.0, 3.0]];
        let parts = Partitions::from_vec(vec![partition(0, &[0], &[1])]);
        let l = dbpr_loss(&t, None, &parts, &[(0, 0, 1)]).unwrap();
        // -ln sigma(1)
        assert_abs_diff_eq!(l.value, 0.31326168751822286, epsilon = 1e-15);
    }

    #[test]
    fn dbpr_equal_scores() {
        let mut t = TeacherModel::init(2, 4, 3, 0, None, 1).unwrap();
        t.item_emb.matrix.fill(0.25);
        let parts = Partitions::from_vec(vec![partition(0, &[0, 1], &[2]), partition(1, &[3], &[0])]);
        let batch = [(0, 0, 2), (0, 1, 2), (1, 3, 0)];
        let l = dbpr_loss(&t, None, &parts, &batch).unwrap();
        assert_abs_diff_eq!(l.value, 3.0 * LN2, epsilon = 1e-14);
    }

    #[test]
    fn dbpr_skips_degenerate_users() {
        let t = TeacherModel::init(2, 4, 3, 0, None, 1).unwrap();
        let parts = Partitions::from_vec(vec![partition(0, &[0, 1], &[]), partition(1, &[3], &[0])]);
        assert!(matches!(
            dbpr_loss(&t, None, &parts, &[(0, 0, 1)]),
            Err(Error::DegeneratePartitions)
        ));
        let l = dbpr_loss(&t, None, &parts, &[(0, 0, 1), (1, 3, 0)]).unwrap();
        let r = t.representations(None).unwrap();
        assert_abs_diff_eq!(l.value, bpr_loss(r.score(1, 3), r.score(1, 0)).value, epsilon = 1e-15);
    }

    #[test]
    fn dbpr_permutation_invariant() {
        let t = TeacherModel::init(3, 8, 4, 0, None, 5).unwrap();
        let parts = Partitions::from_vec(vec![
            partition(0, &[0, 1, 2], &[3, 4]),
            partition(1, &[5, 6], &[7]),
            partition(2, &[1, 3], &[0, 2]),
        ]);
        let batch: Vec<Triple> = vec![(0, 0, 3), (0, 1, 4), (0, 2, 3), (1, 5, 7), (1, 6, 7), (2, 1, 0), (2, 3, 2)];
        let mut rev = batch.clone();
        rev.reverse();
        rev.swap(1, 4);
        let a = dbpr_loss(&t, None, &parts, &batch).unwrap();
        let b = dbpr_loss(&t, None, &parts, &rev).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12);
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn fd_check(model: &mut dyn Recommender, loss: &dyn Fn(&dyn Recommender) -> LossValue) {
        let analytic = loss(model);
        let eps = 1e-5;
        let n_blocks = analytic.grads.len();
        for b in 0..n_blocks {
            let (rows, cols) = analytic.grads[b].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = model.params()[b][[r, c]];
                    model.params_mut()[b][[r, c]] = orig + eps;
                    let up = loss(model).value;
                    model.params_mut()[b][[r, c]] = orig - eps;
                    let down = loss(model).value;
                    model.params_mut()[b][[r, c]] = orig;
                    let fd = (up - down) / (2.0 * eps);
                    let g = analytic.grads[b][[r, c]];
                    if g.abs() > 1e-6 || fd.abs() > 1e-6 {
                        assert!(relative_error(g, fd) < 1e-5, "block {b} ({r},{c}): {g} vs {fd}");
                    }
                }
            }
        }
    }

    fn student_features(n: usize, dt: usize, dv: usize, rng: &mut ChaCha8Rng) -> ModalFeatures {
        let mut m = |c| Array2::from_shape_simple_fn((n, c), || rng.random_range(-1.0..1.0));
        let t = m(dt);
        let v = m(dv);
        ModalFeatures::new(
            ModalFeatureTable::new(Modality::Text, t).unwrap(),
            ModalFeatureTable::new(Modality::Vision, v).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ds = InteractionDataset::from_pairs(3, 5, [(0, 0), (0, 1), (1, 2), (2, 3), (2, 4), (1, 0)]).unwrap();
        let parts = Partitions::from_vec(vec![
            partition(0, &[0], &[1]),
            partition(1, &[2], &[0]),
            partition(2, &[3], &[4]),
        ]);
        let triples = vec![(0, 0, 1), (1, 2, 0), (2, 3, 4)];
        let samples = vec![(0, 0, 1.0), (0, 4, 0.0), (1, 2, 1.0), (2, 1, 0.0)];
        let mut teacher = TeacherModel::init(3, 5, 8, 2, Some(NormalizedAdjacency::from_train(&ds)), 3).unwrap();
        for p in teacher.params_mut() {
            p.mapv_inplace(|v| v * 6.0);
        }
        fd_check(&mut teacher, &|m| dbpr_loss(m, None, &parts, &triples).unwrap());
        fd_check(&mut teacher, &|m| bce_batch_loss(m, None, &samples).unwrap());

        let f = student_features(5, 3, 4, &mut rng);
        let mut student = StudentModel::init(3, 5, 8, 3, 4, 9).unwrap();
        fd_check(&mut student, &|m| dbpr_loss(m, Some(&f), &parts, &triples).unwrap());
        fd_check(&mut student, &|m| bce_batch_loss(m, Some(&f), &samples).unwrap());
    }

    #[test]
    fn per_interaction_losses_track_scores() {
        let ds = InteractionDataset::from_pairs(2, 4, [(0, 0), (0, 2), (1, 3)]).unwrap();
        let mut t = TeacherModel::init(2, 4, 2, 0, None, 1).unwrap();
        t.user_emb.matrix.fill(0.0);
        let reps = t.representations(None).unwrap();
        let l = per_interaction_losses(&reps, &ds);
        assert_eq!(l.len(), 3);
        for row in &l.per_user {
            for &(_, v) in row {
                assert_abs_diff_eq!(v, LN2, epsilon = 1e-15);
            }
        }
        assert_eq!(l.get(0, 1), None);

        // Monotone: higher score, lower loss.
        let mut prev = f64::INFINITY;
        for s in [-3.0, -1.0, 0.0, 0.5, 2.0, 8.0] {
            let v = bce_loss(s, 1.0).value;
            assert!(v < prev);
            prev = v;
        }
    }
}
