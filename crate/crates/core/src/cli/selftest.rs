//! Numerical self-checks run by `guider selftest`.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::amsc::{calibrate, partition_by_loss, UserPartition};
use crate::losses::{accumulate_bce, accumulate_bpr, log_sigmoid};
use crate::models::Representations;
use crate::otkd::{
    cost_matrix, kd_grad_student, kd_loss, kd_step, selftest_cases, sinkhorn, to_simplex, CostMode, KdMode,
    SelftestCase, SinkhornConfig,
};
use crate::rng::{stage_rng, Stage};
use crate::Result;

const MARGINAL_TOL: f64 = 1e-8;
const LP_REL_TOL: f64 = 0.01;
const SYMMETRY_TOL: f64 = 1e-8;
const FD_EPS: f64 = 1e-5;
const LOSS_GRAD_TOL: f64 = 1e-5;
const KD_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Solver settings for the marginal and LP checks; `lambda` is swept.
    pub sinkhorn: SinkhornConfig,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            seed: 0,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error for this check.
    pub residual: f64,
    pub tolerance: f64,
    pub n_cases: usize,
}

impl Check {
    fn new(name: &str, residual: f64, tolerance: f64, n_cases: usize) -> Self {
        Check {
            name: name.to_string(),
            passed: residual.is_finite() && residual <= tolerance,
            residual,
            tolerance,
            n_cases,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    pub checks: Vec<Check>,
    pub cases: Vec<SelftestCase>,
    pub lp_cases: Vec<SelftestCase>,
}

impl SelftestReport {
    pub fn failed(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> Result<SelftestReport> {
    let mut checks = Vec::new();

    let cases = selftest_cases(opts.seed, &[4, 16, 64], &[0.01, 0.1, 1.0], &opts.sinkhorn)?;
    let worst = cases.iter().map(|c| c.residual).fold(0.0, f64::max);
    checks.push(Check::new("sinkhorn_marginals", worst, MARGINAL_TOL, cases.len()));
    let over_budget = cases.iter().filter(|c| c.iterations > opts.sinkhorn.max_iter).count();
    checks.push(Check::new("sinkhorn_iteration_budget", over_budget as f64, 0.0, cases.len()));

    let lp_sizes = [3usize; 20];
    // Small regularization needs far more iterations than the default budget.
    let lp_cfg = SinkhornConfig {
        max_iter: opts.sinkhorn.max_iter.max(100_000),
        ..opts.sinkhorn
    };
    let lp_cases = selftest_cases(opts.seed.wrapping_add(1), &lp_sizes, &[1e-3], &lp_cfg)?;
    // Below the oracle counts as an error just like being too far above it.
    let lp_err = lp_cases
        .iter()
        .map(|c| {
            let rel = (c.cost - c.lp_oracle_cost) / c.lp_oracle_cost.max(1e-300);
            if c.cost < c.lp_oracle_cost - 1e-12 {
                f64::INFINITY
            } else {
                rel
            }
        })
        .fold(0.0, f64::max);
    checks.push(Check::new("lp_oracle", lp_err, LP_REL_TOL, lp_cases.len()));

    let mut rng = stage_rng(opts.seed, Stage::SelfTest);
    checks.push(symmetry_check(&mut rng, &opts.sinkhorn)?);
    checks.push(kd_gradient_check(&mut rng, &opts.sinkhorn)?);
    checks.push(bpr_gradient_check(&mut rng));
    checks.push(bce_gradient_check(&mut rng));
    checks.extend(amsc_checks(&mut rng)?);

    Ok(SelftestReport {
        seed: opts.seed,
        sinkhorn: opts.sinkhorn,
        checks,
        cases,
        lp_cases,
    })
}

fn random_logits(rng: &mut ChaCha8Rng, b: usize) -> Array1<f64> {
    (0..b).map(|_| log_sigmoid(rng.random_range(-3.0..3.0))).collect()
}

fn symmetry_check(rng: &mut ChaCha8Rng, base: &SinkhornConfig) -> Result<Check> {
    // Asymmetry of an unconverged plan is of the order of the stopping tolerance.
    let base = &SinkhornConfig {
        tol: 1e-12,
        max_iter: base.max_iter.max(100_000),
        ..*base
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = rng.random_range(2..=16);
        let (za, zb) = (random_logits(rng, b), random_logits(rng, b));
        let ab = kd_step(&za, &zb, KdMode::Ot, CostMode::Raw, base)?.loss;
        let ba = kd_step(&zb, &za, KdMode::Ot, CostMode::Raw, base)?.loss;
        worst = worst.max((ab - ba).abs());
    }
    Ok(Check::new("ot_symmetry", worst, SYMMETRY_TOL, 50))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn kd_gradient_check(rng: &mut ChaCha8Rng, base: &SinkhornConfig) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = rng.random_range(2..=8);
        let (zt, zs) = (random_logits(rng, b), random_logits(rng, b));
        let plan = sinkhorn(&to_simplex(&zt), &to_simplex(&zs), &cost_matrix(&zt, &zs)?, base)?;
        let g = kd_grad_student(&plan.p, &zt, &zs)?;
        for n in 0..b {
            let f = |delta: f64| -> Result<f64> {
                let mut z = zs.clone();
                z[n] += delta;
                kd_loss(&plan.p, &cost_matrix(&zt, &z)?)
            };
            let numeric = (f(FD_EPS)? - f(-FD_EPS)?) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g[n], numeric));
        }
    }
    Ok(Check::new("kd_gradient_fd", worst, KD_GRAD_TOL, 20))
}

fn random_reps(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize, d: usize) -> Representations {
    Representations {
        users: Array2::from_shape_fn((n_users, d), |_| rng.random_range(-1.0..1.0)),
        items: Array2::from_shape_fn((n_items, d), |_| rng.random_range(-1.0..1.0)),
    }
}

/// Largest relative error between `grad` and central differences of `loss`
/// over every coordinate of `reps`.
fn fd_against(reps: &Representations, grad: &Representations, loss: impl Fn(&Representations) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for users in [true, false] {
        let shape = if users { reps.users.dim() } else { reps.items.dim() };
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let eval = |delta: f64| {
                    let mut p = reps.clone();
                    let m = if users { &mut p.users } else { &mut p.items };
                    m[[r, c]] += delta;
                    loss(&p)
                };
                let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
                let analytic = if users { grad.users[[r, c]] } else { grad.items[[r, c]] };
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    worst
}

fn bpr_gradient_check(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let reps = random_reps(rng, 3, 6, 8);
        let triples: Vec<_> = (0..5)
            .map(|_| (rng.random_range(0..3), rng.random_range(0..3), rng.random_range(3..6)))
            .collect();
        let mut grad = reps.zeros_like();
        accumulate_bpr(&reps, &triples, 1.0, &mut grad);
        worst = worst.max(fd_against(&reps, &grad, |p| {
            let mut sink = p.zeros_like();
            accumulate_bpr(p, &triples, 1.0, &mut sink)
        }));
    }
    Check::new("dbpr_gradient_fd", worst, LOSS_GRAD_TOL, 20)
}

fn bce_gradient_check(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let reps = random_reps(rng, 3, 6, 8);
        let samples: Vec<_> = (0..6)
            .map(|_| (rng.random_range(0..3), rng.random_range(0..6), f64::from(rng.random_range(0..2u8))))
            .collect();
        let mut grad = reps.zeros_like();
        accumulate_bce(&reps, &samples, 1.0, &mut grad);
        worst = worst.max(fd_against(&reps, &grad, |p| {
            let mut sink = p.zeros_like();
            accumulate_bce(p, &samples, 1.0, &mut sink)
        }));
    }
    Check::new("bce_gradient_fd", worst, LOSS_GRAD_TOL, 20)
}

/// Partition invariants and calibration against an explicit double loop on
/// random users.
fn amsc_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let n_users = 100;
    let mut invariant_failures = 0usize;
    let mut calibration_mismatches = 0usize;
    for u in 0..n_users {
        let n_items = rng.random_range(1..=12);
        let mut items: Vec<usize> = (0..40).collect();
        items.shuffle(rng);
        items.truncate(n_items);
        let losses: Vec<(usize, f64)> = items.iter().map(|&i| (i, rng.random_range(0.0..3.0))).collect();
        let sim = Array2::from_shape_fn((40, 40), |_| rng.random_range(0.0..1.0));
        let threshold = rng.random_range(0.3..0.95);

        let (reliable, spurious) = partition_by_loss(&losses)?;
        let (true_set, false_set) = calibrate(&reliable, &spurious, |i, j| sim[[i, j]], threshold);
        let part = UserPartition {
            user: u,
            reliable: reliable.clone(),
            spurious: spurious.clone(),
            true_set: true_set.clone(),
            false_set: false_set.clone(),
        };
        let train: BTreeSet<usize> = items.iter().copied().collect();
        if part.check(&train).is_err() {
            invariant_failures += 1;
        }

        let mean = losses.iter().map(|&(_, l)| l).sum::<f64>() / losses.len() as f64;
        let mut want_true = BTreeSet::new();
        let mut want_false = BTreeSet::new();
        for &(i, l) in &losses {
            if l <= mean {
                want_true.insert(i);
                continue;
            }
            let mut rescued = false;
            for &(j, lj) in &losses {
                if lj <= mean && sim[[i, j]] > threshold {
                    rescued = true;
                }
            }
            if rescued {
                want_true.insert(i);
            } else {
                want_false.insert(i);
            }
        }
        if want_true != true_set || want_false != false_set {
            calibration_mismatches += 1;
        }
    }
    Ok(vec![
        Check::new("amsc_partition_invariants", invariant_failures as f64, 0.0, n_users),
        Check::new("amsc_calibration_oracle", calibration_mismatches as f64, 0.0, n_users),
    ])
}
