//! Optimal-transport distillation between teacher and student ranking logits.
//!
//! For a batch of `(u, i, j)` triples both models produce logits
//! `z = ln sigma(s_ui - s_uj)`. Their softmaxes are the marginals of an
//! entropy-regularized transport problem whose cost is the squared logit gap.
//! The loss is `<P, D>`; the student gradient holds `P` fixed.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::losses::{log_sigmoid, sigmoid, Triple};
use crate::models::Representations;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    pub values: Array1<f64>,
    pub triples: Vec<Triple>,
}

impl LogitsBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `ln sigma(s_ui - s_uj)` per triple.
pub fn pairwise_logits(reps: &Representations, triples: &[Triple]) -> Result<LogitsBatch> {
    if triples.is_empty() {
        return Err(Error::Empty("triple list for pairwise logits".into()));
    }
    let mut values = Array1::zeros(triples.len());
    for (b, &(u, i, j)) in triples.iter().enumerate() {
        let d = reps.checked_score(u, i)? - reps.checked_score(u, j)?;
        values[b] = log_sigmoid(d);
    }
    Ok(LogitsBatch {
        values,
        triples: triples.to_vec(),
    })
}

/// Softmax onto the probability simplex.
pub fn to_simplex(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = z.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// `D[m][n] = (z_t[m] - z_s[n])^2`.
pub fn cost_matrix(z_t: &Array1<f64>, z_s: &Array1<f64>) -> Result<Array2<f64>> {
    if z_t.len() != z_s.len() {
        return Err(Error::Shape(format!(
            "teacher batch has {} logits, student batch {}",
            z_t.len(),
            z_s.len()
        )));
    }
    let b = z_t.len();
    Ok(Array2::from_shape_fn((b, b), |(m, n)| (z_t[m] - z_s[n]).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            lambda: 0.1,
            max_iter: 1000,
            tol: 1e-9,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub p: Array2<f64>,
    pub iterations: usize,
    /// Residual of the returned plan, after rounding onto the marginals.
    pub marginal_residual: f64,
    /// Residual the iterations themselves reached.
    pub sinkhorn_residual: f64,
    pub converged: bool,
    /// Whether the log-domain solver produced this plan.
    pub log_domain: bool,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.p.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.p.sum_axis(Axis(0))
    }
}

fn marginal_residual(p: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let r = (&p.sum_axis(Axis(1)) - a).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    let c = (&p.sum_axis(Axis(0)) - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    r.max(c)
}

/// Scales rows and columns down to their marginals, then spreads the missing
/// mass as a rank-one correction, so the plan is exactly feasible.
fn round_to_marginals(mut p: Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let rows = p.sum_axis(Axis(1));
    for (m, mut row) in p.outer_iter_mut().enumerate() {
        if rows[m] > a[m] {
            row *= a[m] / rows[m];
        }
    }
    let cols = p.sum_axis(Axis(0));
    for (n, mut col) in p.axis_iter_mut(Axis(1)).enumerate() {
        if cols[n] > b[n] {
            col *= b[n] / cols[n];
        }
    }
    let err_r = (a - &p.sum_axis(Axis(1))).mapv(|v| v.max(0.0));
    let err_c = (b - &p.sum_axis(Axis(0))).mapv(|v| v.max(0.0));
    let total = err_r.sum();
    if total > 0.0 {
        for m in 0..p.nrows() {
            for n in 0..p.ncols() {
                p[[m, n]] += err_r[m] * err_c[n] / total;
            }
        }
    }
    p
}

fn finish(
    p: Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    cfg: &SinkhornConfig,
    iterations: usize,
    converged: bool,
    log_domain: bool,
) -> TransportPlan {
    let sinkhorn_residual = marginal_residual(&p, a, b);
    let p = round_to_marginals(p, a, b);
    TransportPlan {
        marginal_residual: marginal_residual(&p, a, b),
        converged: converged || sinkhorn_residual <= cfg.tol,
        sinkhorn_residual,
        p,
        iterations,
        log_domain,
    }
}

fn check_inputs(a: &Array1<f64>, b: &Array1<f64>, d: &Array2<f64>) -> Result<()> {
    if a.is_empty() || d.dim() != (a.len(), b.len()) {
        return Err(Error::Shape(format!(
            "marginals of length {} and {} against a {:?} cost",
            a.len(),
            b.len(),
            d.dim()
        )));
    }
    if a.iter().chain(b.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("marginals must be strictly positive".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Over-relaxation weight for the scaling updates.
///
/// Starts at 1 (plain alternating scaling). Every window the unrelaxed rate
/// `eta` is inferred from the observed decay and the weight raised towards
/// `2 / (1 + sqrt(1 - eta))`. A residual blow-up drops back to 1 for good.
#[derive(Debug, Clone)]
struct Relaxation {
    omega: f64,
    history: Vec<f64>,
    best: f64,
    frozen: bool,
}

const RELAX_WINDOW: usize = 10;
const RELAX_MAX: f64 = 1.9;

impl Relaxation {
    fn new() -> Self {
        Relaxation {
            omega: 1.0,
            history: Vec::new(),
            best: f64::INFINITY,
            frozen: false,
        }
    }

    fn observe(&mut self, res: f64) -> f64 {
        self.history.push(res);
        if !res.is_finite() || res > 1e3 * self.best {
            self.omega = 1.0;
            self.frozen = true;
        }
        self.best = self.best.min(res);
        let t = self.history.len();
        if !self.frozen && t >= 2 * RELAX_WINDOW && t % RELAX_WINDOW == 0 {
            let mu = (self.history[t - 1] / self.history[t - 1 - RELAX_WINDOW]).powf(1.0 / RELAX_WINDOW as f64);
            let w = self.omega;
            // Young's relation between the relaxed rate mu and the plain rate eta.
            if mu.is_finite() && mu > w - 1.0 && mu < 1.0 {
                let eta = ((mu + w - 1.0).powi(2) / (mu * w * w)).min(1.0);
                let next = (2.0 / (1.0 + (1.0 - eta).sqrt())).min(RELAX_MAX);
                self.omega = self.omega.max(next);
            }
        }
        self.omega
    }
}

fn max_abs_diff(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Linear-space iterations on the scalings `u = exp(alpha / lambda)`,
/// `v = exp(beta / lambda)`. `None` when the kernel or the scalings leave the
/// representable range.
#[allow(clippy::too_many_arguments)]
fn linear_stage(
    a: &Array1<f64>,
    b: &Array1<f64>,
    d: &Array2<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    alpha: &mut Array1<f64>,
    beta: &mut Array1<f64>,
) -> Option<(usize, bool)> {
    let k = d.mapv(|v| (-v / lambda).exp());
    let positive = |s: &Array1<f64>| s.iter().all(|&v| v > f64::MIN_POSITIVE);
    if !positive(&k.sum_axis(Axis(0))) || !positive(&k.sum_axis(Axis(1))) {
        return None;
    }
    let sane = |s: &Array1<f64>| s.iter().all(|&x| x.is_finite() && x > 0.0);
    let mut u = alpha.mapv(|x| (x / lambda).exp());
    let mut v = beta.mapv(|x| (x / lambda).exp());
    if !sane(&u) || !sane(&v) {
        return None;
    }
    let mut relax = Relaxation::new();
    let mut omega = 1.0;
    let mut col_res = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let kv = k.dot(&v);
        if iterations > 0 {
            // Row sums are u * Kv; column sums were checked after the v update.
            let res = max_abs_diff(&(&u * &kv), a).max(col_res);
            if res <= tol {
                converged = true;
                break;
            }
            omega = relax.observe(res);
        }
        let target = a / &kv;
        u = if omega == 1.0 {
            target
        } else {
            Array1::from_shape_fn(u.len(), |m| u[m].powf(1.0 - omega) * target[m].powf(omega))
        };
        let ktu = k.t().dot(&u);
        let target = b / &ktu;
        v = if omega == 1.0 {
            target
        } else {
            Array1::from_shape_fn(v.len(), |n| v[n].powf(1.0 - omega) * target[n].powf(omega))
        };
        col_res = max_abs_diff(&(&v * &ktu), b);
        iterations += 1;
        if !sane(&u) || !sane(&v) {
            return None;
        }
    }
    *alpha = u.mapv(|x| lambda * x.ln());
    *beta = v.mapv(|x| lambda * x.ln());
    Some((iterations, converged))
}

const ANNEAL_FACTOR: f64 = 4.0;
const ANNEAL_TOL: f64 = 1e-6;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-sum-exp iterations on dual potentials kept in cost units
/// (`alpha = lambda ln u`, `beta = lambda ln v`). Returns the iteration count
/// and whether the residual reached `tol`.
#[allow(clippy::too_many_arguments)]
fn log_stage(
    a: &Array1<f64>,
    b: &Array1<f64>,
    d: &Array2<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    alpha: &mut Array1<f64>,
    beta: &mut Array1<f64>,
) -> (usize, bool) {
    let (rows, cols) = d.dim();
    let la = a.mapv(f64::ln);
    let lb = b.mapv(f64::ln);
    let mut relax = Relaxation::new();
    let mut omega = 1.0;
    let mut col_res = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let lse_rows: Array1<f64> = (0..rows)
            .map(|m| log_sum_exp((0..cols).map(|n| (beta[n] - d[[m, n]]) / lambda)))
            .collect();
        if iterations > 0 {
            let row_res = (0..rows)
                .map(|m| ((alpha[m] / lambda + lse_rows[m]).exp() - a[m]).abs())
                .fold(0.0f64, f64::max);
            let res = row_res.max(col_res);
            if res <= tol {
                return (iterations, true);
            }
            omega = relax.observe(res);
        }
        for m in 0..rows {
            alpha[m] = (1.0 - omega) * alpha[m] + omega * lambda * (la[m] - lse_rows[m]);
        }
        col_res = 0.0;
        for n in 0..cols {
            let lse = log_sum_exp((0..rows).map(|m| (alpha[m] - d[[m, n]]) / lambda));
            beta[n] = (1.0 - omega) * beta[n] + omega * lambda * (lb[n] - lse);
            col_res = col_res.max(((beta[n] / lambda + lse).exp() - b[n]).abs());
        }
        iterations += 1;
    }
    (iterations, false)
}

type Stage = fn(
    &Array1<f64>,
    &Array1<f64>,
    &Array2<f64>,
    f64,
    f64,
    usize,
    &mut Array1<f64>,
    &mut Array1<f64>,
) -> Option<(usize, bool)>;

/// Scaling iterations on the kernel `exp((alpha + beta - D) / lambda)`; once a
/// scaling grows past `ABSORB_LIMIT` it is folded into the potentials and the
/// kernel rebuilt. Falls back to pure log-sum-exp updates if anything
/// underflows.
#[allow(clippy::too_many_arguments)]
fn stabilized_stage(
    a: &Array1<f64>,
    b: &Array1<f64>,
    d: &Array2<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    alpha: &mut Array1<f64>,
    beta: &mut Array1<f64>,
) -> Option<(usize, bool)> {
    let (alpha0, beta0) = (alpha.clone(), beta.clone());
    let kernel = |alpha: &Array1<f64>, beta: &Array1<f64>| {
        Array2::from_shape_fn(d.dim(), |(m, n)| ((alpha[m] + beta[n] - d[[m, n]]) / lambda).exp())
    };
    let sane = |s: &Array1<f64>| s.iter().all(|&x| x.is_finite() && x > 0.0);
    let mut k = kernel(alpha, beta);
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut relax = Relaxation::new();
    let mut omega = 1.0;
    let mut col_res = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut ok = true;
    while iterations < max_iter {
        let kv = k.dot(&v);
        if iterations > 0 {
            let res = max_abs_diff(&(&u * &kv), a).max(col_res);
            if res <= tol {
                converged = true;
                break;
            }
            omega = relax.observe(res);
        }
        let target = a / &kv;
        u = if omega == 1.0 {
            target
        } else {
            Array1::from_shape_fn(u.len(), |m| u[m].powf(1.0 - omega) * target[m].powf(omega))
        };
        let ktu = k.t().dot(&u);
        let target = b / &ktu;
        v = if omega == 1.0 {
            target
        } else {
            Array1::from_shape_fn(v.len(), |n| v[n].powf(1.0 - omega) * target[n].powf(omega))
        };
        col_res = max_abs_diff(&(&v * &ktu), b);
        iterations += 1;
        if !sane(&u) || !sane(&v) {
            ok = false;
            break;
        }
        let big = |s: &Array1<f64>| s.iter().any(|&x| x > ABSORB_LIMIT || x < 1.0 / ABSORB_LIMIT);
        if big(&u) || big(&v) {
            *alpha += &u.mapv(|x| lambda * x.ln());
            *beta += &v.mapv(|x| lambda * x.ln());
            k = kernel(alpha, beta);
            u.fill(1.0);
            v.fill(1.0);
        }
    }
    if ok {
        *alpha += &u.mapv(|x| lambda * x.ln());
        *beta += &v.mapv(|x| lambda * x.ln());
        return Some((iterations, converged));
    }
    *alpha = alpha0;
    *beta = beta0;
    Some(log_stage(a, b, d, lambda, tol, max_iter, alpha, beta))
}

const ABSORB_LIMIT: f64 = 1e30;

/// Runs `stage` with the regularization annealed down from the cost scale,
/// each stage warm-starting the next through the dual potentials.
fn annealed(a: &Array1<f64>, b: &Array1<f64>, d: &Array2<f64>, cfg: &SinkhornConfig, stage: Stage, log_domain: bool) -> Option<TransportPlan> {
    let (rows, cols) = d.dim();
    let mut alpha = Array1::<f64>::zeros(rows);
    let mut beta = Array1::<f64>::zeros(cols);
    let scale = d.fold(0.0f64, |m, &v| m.max(v));
    let mut lambdas = vec![cfg.lambda];
    while lambdas.last().unwrap() * ANNEAL_FACTOR < scale {
        let next = lambdas.last().unwrap() * ANNEAL_FACTOR;
        lambdas.push(next);
    }
    lambdas.reverse();
    let mut iterations = 0;
    let mut converged = false;
    for (s, &lambda) in lambdas.iter().enumerate() {
        let last = s + 1 == lambdas.len();
        let (tol, budget) = if last {
            (cfg.tol, cfg.max_iter - iterations)
        } else {
            (cfg.tol.max(ANNEAL_TOL), cfg.max_iter / (2 * lambdas.len()))
        };
        if budget == 0 {
            continue;
        }
        let (it, ok) = stage(a, b, d, lambda, tol, budget, &mut alpha, &mut beta)?;
        iterations += it;
        converged = ok && last;
    }
    let lambda = cfg.lambda;
    let p = Array2::from_shape_fn((rows, cols), |(m, n)| ((alpha[m] + beta[n] - d[[m, n]]) / lambda).exp());
    if p.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(finish(p, a, b, cfg, iterations, converged, log_domain))
}

/// Entropy-regularized transport plan between `a` and `b` under cost `d`.
///
/// With `log_domain` off, linear iterations are tried first and the solver
/// falls back to log-sum-exp updates if the kernel underflows.
pub fn sinkhorn(a: &Array1<f64>, b: &Array1<f64>, d: &Array2<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    check_inputs(a, b, d)?;
    let log = |a, b, d, cfg| annealed(a, b, d, cfg, stabilized_stage, true).expect("log-domain plan is finite");
    let plan = if cfg.log_domain {
        log(a, b, d, cfg)
    } else {
        match annealed(a, b, d, cfg, linear_stage, false) {
            Some(plan) => plan,
            None => {
                log::debug!("sinkhorn kernel underflow at lambda {}; switching to log domain", cfg.lambda);
                log(a, b, d, cfg)
            }
        }
    };
    if !plan.converged {
        log::warn!(
            "sinkhorn stopped at {} iterations with residual {:.3e}",
            plan.iterations,
            plan.sinkhorn_residual
        );
    }
    Ok(plan)
}

/// `<P, D>`.
pub fn kd_loss(p: &Array2<f64>, d: &Array2<f64>) -> Result<f64> {
    if p.dim() != d.dim() {
        return Err(Error::Shape(format!("plan {:?} against cost {:?}", p.dim(), d.dim())));
    }
    Ok((p * d).sum())
}

/// `dL/dz_s[n] = sum_m P[m][n] * 2 (z_s[n] - z_t[m])` with `P` held fixed.
pub fn kd_grad_student(p: &Array2<f64>, z_t: &Array1<f64>, z_s: &Array1<f64>) -> Result<Array1<f64>> {
    if p.dim() != (z_t.len(), z_s.len()) {
        return Err(Error::Shape(format!(
            "plan {:?} against logits of length {} and {}",
            p.dim(),
            z_t.len(),
            z_s.len()
        )));
    }
    let col_mass = p.sum_axis(Axis(0));
    let pulled = p.t().dot(z_t);
    Ok(2.0 * (&col_mass * z_s - &pulled))
}

/// `sum a ln(a / b)` on the softmaxed marginals and its gradient in `z_s`.
pub fn kl_divergence(z_t: &Array1<f64>, z_s: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    if z_t.len() != z_s.len() {
        return Err(Error::Shape("KL on logit batches of different length".into()));
    }
    let a = to_simplex(z_t);
    let b = to_simplex(z_s);
    let value = a
        .iter()
        .zip(b.iter())
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x * (x / y).ln())
        .sum();
    Ok((value, &b - &a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KdMode {
    #[default]
    Ot,
    Kl,
    None,
}

impl std::str::FromStr for KdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ot" => Ok(KdMode::Ot),
            "kl" => Ok(KdMode::Kl),
            "none" => Ok(KdMode::None),
            _ => Err(Error::InvalidArgument(format!("unknown kd mode {s:?} (ot, kl, none)"))),
        }
    }
}

/// What the transport cost compares: raw logits or their softmax values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    #[default]
    Raw,
    Normalized,
}

impl std::str::FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(CostMode::Raw),
            "normalized" => Ok(CostMode::Normalized),
            _ => Err(Error::InvalidArgument(format!("unknown cost mode {s:?} (raw, normalized)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdStep {
    pub loss: f64,
    /// `dL/dz_s`.
    pub grad: Array1<f64>,
    pub plan: Option<TransportPlan>,
}

/// Distillation loss and student-logit gradient for one batch.
pub fn kd_step(
    z_t: &Array1<f64>,
    z_s: &Array1<f64>,
    mode: KdMode,
    cost: CostMode,
    cfg: &SinkhornConfig,
) -> Result<KdStep> {
    match mode {
        KdMode::None => Ok(KdStep {
            loss: 0.0,
            grad: Array1::zeros(z_s.len()),
            plan: None,
        }),
        KdMode::Kl => {
            let (loss, grad) = kl_divergence(z_t, z_s)?;
            Ok(KdStep { loss, grad, plan: None })
        }
        KdMode::Ot => {
            let a = to_simplex(z_t);
            let b = to_simplex(z_s);
            let (xt, xs) = match cost {
                CostMode::Raw => (z_t.clone(), z_s.clone()),
                CostMode::Normalized => (a.clone(), b.clone()),
            };
            let d = cost_matrix(&xt, &xs)?;
            let plan = sinkhorn(&a, &b, &d, cfg)?;
            let loss = kd_loss(&plan.p, &d)?;
            let mut grad = kd_grad_student(&plan.p, &xt, &xs)?;
            if cost == CostMode::Normalized {
                // Chain through the softmax Jacobian.
                let dot = grad.dot(&b);
                grad = &b * &(grad - dot);
            }
            Ok(KdStep {
                loss,
                grad,
                plan: Some(plan),
            })
        }
    }
}

/// Chains `dL/dz` through `z = ln sigma(s_ui - s_uj)` into score gradients.
pub fn backprop_logits(reps: &Representations, triples: &[Triple], dz: &Array1<f64>, scale: f64, grad: &mut Representations) {
    for (b, &(u, i, j)) in triples.iter().enumerate() {
        let delta = reps.score(u, i) - reps.score(u, j);
        let coef = scale * dz[b] * sigmoid(-delta);
        reps.accumulate_score_grad(grad, u, i, coef);
        reps.accumulate_score_grad(grad, u, j, -coef);
    }
}

/// Exact transport cost between point masses on the line under squared
/// distance, via the monotone coupling.
pub fn exact_ot_1d(a: &Array1<f64>, xa: &Array1<f64>, b: &Array1<f64>, xb: &Array1<f64>) -> f64 {
    let order = |x: &Array1<f64>| {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&p, &q| x[p].total_cmp(&x[q]));
        idx
    };
    let (oa, ob) = (order(xa), order(xb));
    let (mut p, mut q) = (0, 0);
    let (mut ra, mut rb) = (a[oa[0]], b[ob[0]]);
    let mut cost = 0.0;
    loop {
        let m = ra.min(rb);
        cost += m * (xa[oa[p]] - xb[ob[q]]).powi(2);
        ra -= m;
        rb -= m;
        if ra <= rb {
            p += 1;
            if p == oa.len() {
                break;
            }
            ra = a[oa[p]];
        } else {
            q += 1;
            if q == ob.len() {
                break;
            }
            rb = b[ob[q]];
        }
    }
    cost
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestCase {
    pub lambda: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub iterations: usize,
    pub residual: f64,
    pub cost: f64,
    pub lp_oracle_cost: f64,
}

/// Sinkhorn on random logit batches against the exact 1-D transport cost.
/// `base` supplies everything but the regularization.
pub fn selftest_cases(seed: u64, sizes: &[usize], lambdas: &[f64], base: &SinkhornConfig) -> Result<Vec<SelftestCase>> {
    use rand::Rng;
    let mut rng = crate::rng::stage_rng(seed, crate::rng::Stage::SelfTest);
    let mut out = Vec::new();
    for &b in sizes {
        let z_t: Array1<f64> = (0..b).map(|_| log_sigmoid(rng.random_range(-3.0..3.0))).collect();
        let z_s: Array1<f64> = (0..b).map(|_| log_sigmoid(rng.random_range(-3.0..3.0))).collect();
        let a = to_simplex(&z_t);
        let bb = to_simplex(&z_s);
        let d = cost_matrix(&z_t, &z_s)?;
        let exact = exact_ot_1d(&a, &z_t, &bb, &z_s);
        for &lambda in lambdas {
            let cfg = SinkhornConfig { lambda, ..*base };
            let plan = sinkhorn(&a, &bb, &d, &cfg)?;
            out.push(SelftestCase {
                lambda,
                b,
                iterations: plan.iterations,
                residual: plan.sinkhorn_residual,
                cost: kd_loss(&plan.p, &d)?,
                lp_oracle_cost: exact,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(b: usize) -> Array1<f64> {
        Array1::from_elem(b, 1.0 / b as f64)
    }

    fn cfg(lambda: f64, log_domain: bool) -> SinkhornConfig {
        SinkhornConfig {
            lambda,
            max_iter: 200_000,
            tol: 1e-12,
            log_domain,
        }
    }

    /// Exact OT cost by enumerating permutation matrices, valid for uniform
    /// marginals (the Birkhoff polytope's vertices).
    fn lp_uniform(d: &Array2<f64>) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..n {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = d.nrows();
        perms(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(m, &k)| d[[m, k]]).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn logits_of_equal_scores() {
        let reps = Representations {
            users: array![[1.0, 0.0]],
            items: array![[0.5, 3.0], [0.5, -1.0]],
        };
        let z = pairwise_logits(&reps, &[(0, 0, 1), (0, 1, 0)]).unwrap();
        assert_abs_diff_eq!(z.values[0], -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(z.len(), 2);
        assert!(pairwise_logits(&reps, &[]).is_err());
        let reps = Representations {
            users: array![[1.0]],
            items: array![[10.0], [0.0]],
        };
        let z = pairwise_logits(&reps, &[(0, 0, 1)]).unwrap();
        assert!((z.values[0] - -4.5398899216864646769e-5).abs() < 1e-18);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(to_simplex(&array![-0.4, -0.4, -0.4, -0.4]), uniform(4));
        let s = to_simplex(&array![0.0, -1e9]);
        assert_eq!(s[0], 1.0);
        assert!(s[1] < 1e-300);
        let s = to_simplex(&array![-0.3, -2.2, -0.01, -5.5, -1.1]);
        let oracle = [
            0.34003871131017197146,
            0.050859120532906638817,
            0.45443708078767181788,
            0.0018758454564950383545,
            0.15278924191275453349,
        ];
        for (x, y) in s.iter().zip(oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_matrix_cases() {
        let z = array![0.0, 1.0];
        assert_eq!(cost_matrix(&z, &z).unwrap(), array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(cost_matrix(&z, &array![1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 4, -3.0, 0.0);
        let b = rand_vec(&mut rng, 4, -3.0, 0.0);
        assert_eq!(cost_matrix(&a, &b).unwrap(), cost_matrix(&b, &a).unwrap().t().to_owned());
        assert!(cost_matrix(&a, &b).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_point_plan() {
        for log_domain in [false, true] {
            let plan = sinkhorn(&array![1.0], &array![1.0], &array![[3.0]], &cfg(0.1, log_domain)).unwrap();
            assert_abs_diff_eq!(plan.p[[0, 0]], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_point_closed_form() {
        // Symmetric problem: u = v, so P = c [[1, e^-10], [e^-10, 1]].
        let e = (-10.0f64).exp();
        let diag = 0.5 / (1.0 + e);
        let off = 0.5 * e / (1.0 + e);
        let d = array![[0.0, 1.0], [1.0, 0.0]];
        for log_domain in [false, true] {
            let plan = sinkhorn(&uniform(2), &uniform(2), &d, &cfg(0.1, log_domain)).unwrap();
            assert!(plan.converged);
            assert_abs_diff_eq!(plan.p, array![[diag, off], [off, diag]], epsilon = 1e-10);
        }
    }

    #[test]
    fn non_uniform_reference() {
        let z_t = array![-0.2, -1.3, -0.05];
        let z_s = array![-0.7, -0.1, -2.0];
        let a = to_simplex(&z_t);
        let b = to_simplex(&z_s);
        let d = cost_matrix(&z_t, &z_s).unwrap();
        let oracle = array![
            [0.14709351189282209361, 0.25275253933842181306, 0.001002894496742634247],
            [0.041677849004837891138, 0.0051105762839281349109, 0.086642597674941530204],
            [0.1343668964955296176, 0.33093317829920820807, 0.00041995651356807716785]
        ];
        for log_domain in [false, true] {
            let plan = sinkhorn(&a, &b, &d, &cfg(0.5, log_domain)).unwrap();
            assert_abs_diff_eq!(plan.p, oracle, epsilon = 1e-10);
            assert_abs_diff_eq!(kd_loss(&plan.p, &d).unwrap(), 0.16656264124530727876, epsilon = 1e-10);
        }
    }

    #[test]
    fn marginals_and_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in [2, 5, 17] {
            let z_t = rand_vec(&mut rng, b, -4.0, 0.0);
            let z_s = rand_vec(&mut rng, b, -4.0, 0.0);
            let (a, bb) = (to_simplex(&z_t), to_simplex(&z_s));
            let d = cost_matrix(&z_t, &z_s).unwrap();
            let c = SinkhornConfig::default();
            let plan = sinkhorn(&a, &bb, &d, &c).unwrap();
            assert!(plan.converged);
            assert!(plan.sinkhorn_residual <= c.tol);
            assert!(plan.marginal_residual <= c.tol);
            assert!((plan.row_sums() - &a).iter().all(|v| v.abs() <= c.tol));
            assert!((plan.col_sums() - &bb).iter().all(|v| v.abs() <= c.tol));
            assert!(plan.p.iter().all(|&v| v >= 0.0));
            assert!(kd_loss(&plan.p, &d).unwrap() >= 0.0);
        }
    }

    #[test]
    fn linear_and_log_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in [3, 8] {
            let z_t = rand_vec(&mut rng, b, -2.0, 0.0);
            let z_s = rand_vec(&mut rng, b, -2.0, 0.0);
            let (a, bb) = (to_simplex(&z_t), to_simplex(&z_s));
            let d = cost_matrix(&z_t, &z_s).unwrap();
            let lin = sinkhorn(&a, &bb, &d, &cfg(0.1, false)).unwrap();
            let log = sinkhorn(&a, &bb, &d, &cfg(0.1, true)).unwrap();
            assert!(!lin.log_domain);
            assert_abs_diff_eq!(lin.p, log.p, epsilon = 1e-8);
        }
    }

    #[test]
    fn plain_log_sum_exp_stage_agrees() {
        fn plain(
            a: &Array1<f64>,
            b: &Array1<f64>,
            d: &Array2<f64>,
            lambda: f64,
            tol: f64,
            max_iter: usize,
            alpha: &mut Array1<f64>,
            beta: &mut Array1<f64>,
        ) -> Option<(usize, bool)> {
            Some(log_stage(a, b, d, lambda, tol, max_iter, alpha, beta))
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (b, lambda) in [(4, 0.01), (16, 0.1), (7, 1e-3)] {
            let z_t = rand_vec(&mut rng, b, -4.0, 0.0);
            let z_s = rand_vec(&mut rng, b, -4.0, 0.0);
            let (a, bb) = (to_simplex(&z_t), to_simplex(&z_s));
            let d = cost_matrix(&z_t, &z_s).unwrap();
            let c = cfg(lambda, true);
            let reference = annealed(&a, &bb, &d, &c, plain, true).unwrap();
            let fast = sinkhorn(&a, &bb, &d, &c).unwrap();
            assert!(reference.converged && fast.converged);
            assert_abs_diff_eq!(reference.p, fast.p, epsilon = 1e-8);
        }
    }

    #[test]
    fn underflow_switches_to_log_domain() {
        let d = array![[0.0, 100.0], [100.0, 0.0], [100.0, 100.0]];
        let a = array![0.25, 0.25, 0.5];
        let b = array![0.5, 0.5];
        let plan = sinkhorn(&a, &b, &d, &cfg(1e-3, false)).unwrap();
        assert!(plan.log_domain);
        assert!(plan.marginal_residual < 1e-9);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z_t = rand_vec(&mut rng, 6, -3.0, 0.0);
        let z_s = rand_vec(&mut rng, 6, -3.0, 0.0);
        let (a, bb) = (to_simplex(&z_t), to_simplex(&z_s));
        let d = cost_matrix(&z_t, &z_s).unwrap();
        let c = SinkhornConfig {
            lambda: 0.01,
            max_iter: 2,
            tol: 1e-14,
            log_domain: true,
        };
        let plan = sinkhorn(&a, &bb, &d, &c).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations, 2);
        assert!(plan.sinkhorn_residual > 1e-14);
        assert!(plan.marginal_residual < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let d = array![[0.0]];
        let one = array![1.0];
        assert!(sinkhorn(&one, &one, &d, &cfg(0.0, true)).is_err());
        assert!(sinkhorn(&one, &one, &d, &SinkhornConfig { tol: 0.0, ..Default::default() }).is_err());
        assert!(sinkhorn(&one, &array![1.0, 0.0], &d, &cfg(0.1, true)).is_err());
    }

    #[test]
    fn entropic_cost_approaches_lp_from_above() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z_t = rand_vec(&mut rng, 3, -3.0, 0.0);
        let z_s = rand_vec(&mut rng, 3, -3.0, 0.0);
        let d = cost_matrix(&z_t, &z_s).unwrap();
        let exact = lp_uniform(&d);
        assert_abs_diff_eq!(exact, exact_ot_1d(&uniform(3), &z_t, &uniform(3), &z_s), epsilon = 1e-12);
        let mut last = f64::INFINITY;
        for lambda in [1.0, 0.1, 0.01, 0.001] {
            let plan = sinkhorn(&uniform(3), &uniform(3), &d, &cfg(lambda, true)).unwrap();
            let c = kd_loss(&plan.p, &d).unwrap();
            assert!(c >= exact - 1e-12, "lambda {lambda}: {c} < {exact}");
            assert!(c <= last + 1e-12);
            last = c;
        }
        assert!((last - exact).abs() <= 0.01 * exact);
    }

    #[test]
    fn monotone_coupling_matches_lp_for_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 4, -5.0, 0.0);
            let y = rand_vec(&mut rng, 4, -5.0, 0.0);
            let d = cost_matrix(&x, &y).unwrap();
            assert_abs_diff_eq!(lp_uniform(&d), exact_ot_1d(&uniform(4), &x, &uniform(4), &y), epsilon = 1e-12);
        }
    }

    #[test]
    fn self_distance_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for b in 2..=5 {
            let z = rand_vec(&mut rng, b, -3.0, 0.0);
            let a = to_simplex(&z);
            let d = cost_matrix(&z, &z).unwrap();
            assert!(d.diag().iter().all(|&v| v == 0.0));
            let plan = sinkhorn(&a, &a, &d, &cfg(1e-3, true)).unwrap();
            assert!(kd_loss(&plan.p, &d).unwrap() <= 1e-3);
            assert_eq!(kd_loss(&plan.p, &Array2::zeros((b, b))).unwrap(), 0.0);
        }
    }

    #[test]
    fn kd_loss_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_vec(&mut rng, 6, -3.0, 0.0);
        let y = rand_vec(&mut rng, 6, -3.0, 0.0);
        let c = SinkhornConfig::default();
        let xy = kd_step(&x, &y, KdMode::Ot, CostMode::Raw, &c).unwrap().loss;
        let yx = kd_step(&y, &x, KdMode::Ot, CostMode::Raw, &c).unwrap().loss;
        assert!((xy - yx).abs() < 1e-8);
    }

    #[test]
    fn kd_loss_shape_and_inner_product() {
        let p = array![[0.4, 0.1], [0.1, 0.4]];
        let d = array![[0.0, 2.0], [3.0, 0.5]];
        assert_abs_diff_eq!(kd_loss(&p, &d).unwrap(), 0.2 + 0.3 + 0.2, epsilon = 1e-15);
        assert!(kd_loss(&p, &array![[1.0]]).is_err());
    }

    #[test]
    fn frozen_plan_gradient_matches_finite_differences() {
        let p = array![[0.3, 0.15], [0.05, 0.5]];
        let z_t = array![-0.4, -1.7];
        let z_s = array![-0.9, -0.2];
        let g = kd_grad_student(&p, &z_t, &z_s).unwrap();
        let eps = 1e-6;
        for n in 0..2 {
            let mut hi = z_s.clone();
            hi[n] += eps;
            let mut lo = z_s.clone();
            lo[n] -= eps;
            let f = |z: &Array1<f64>| kd_loss(&p, &cost_matrix(&z_t, z).unwrap()).unwrap();
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - g[n]).abs() <= 1e-6 * fd.abs().max(1e-12), "{fd} vs {}", g[n]);
        }
    }

    #[test]
    fn gradient_is_translation_covariant() {
        let p = array![[0.3, 0.15], [0.05, 0.5]];
        let z_t = array![-0.4, -1.7];
        let z_s = array![-0.9, -0.2];
        let g = kd_grad_student(&p, &z_t, &z_s).unwrap();
        let g2 = kd_grad_student(&p, &(&z_t - 3.0), &(&z_s - 3.0)).unwrap();
        assert_abs_diff_eq!(g, g2, epsilon = 1e-12);
        let z = array![-0.4, -1.7];
        let diag = array![[0.5, 0.0], [0.0, 0.5]];
        assert_eq!(kd_grad_student(&diag, &z, &z).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let z_t = array![-0.4, -1.7, -0.2];
        let z_s = array![-0.9, -0.2, -2.5];
        let (v, g) = kl_divergence(&z_t, &z_s).unwrap();
        assert!(v > 0.0);
        let eps = 1e-6;
        for n in 0..3 {
            let mut hi = z_s.clone();
            hi[n] += eps;
            let mut lo = z_s.clone();
            lo[n] -= eps;
            let fd = (kl_divergence(&z_t, &hi).unwrap().0 - kl_divergence(&z_t, &lo).unwrap().0) / (2.0 * eps);
            assert!((fd - g[n]).abs() < 1e-7);
        }
        assert_abs_diff_eq!(kl_divergence(&z_t, &z_t).unwrap().0, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn normalized_cost_gradient_with_frozen_plan() {
        let z_t = array![-0.4, -1.7, -0.2];
        let z_s = array![-0.9, -0.2, -2.5];
        let c = cfg(0.1, true);
        let step = kd_step(&z_t, &z_s, KdMode::Ot, CostMode::Normalized, &c).unwrap();
        let p = step.plan.unwrap().p;
        let a = to_simplex(&z_t);
        let f = |z: &Array1<f64>| kd_loss(&p, &cost_matrix(&a, &to_simplex(z)).unwrap()).unwrap();
        let eps = 1e-6;
        for n in 0..3 {
            let mut hi = z_s.clone();
            hi[n] += eps;
            let mut lo = z_s.clone();
            lo[n] -= eps;
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - step.grad[n]).abs() < 1e-8, "{fd} vs {}", step.grad[n]);
        }
    }

    #[test]
    fn logit_backprop_matches_finite_differences() {
        let reps = Representations {
            users: array![[0.3, -0.2], [1.1, 0.4]],
            items: array![[0.5, 0.1], [-0.3, 0.9], [0.2, -0.7]],
        };
        let triples = [(0, 0, 1), (1, 2, 0), (1, 1, 2)];
        let w = array![0.7, -1.3, 0.4];
        let obj = |r: &Representations| pairwise_logits(r, &triples).unwrap().values.dot(&w);
        let mut grad = reps.zeros_like();
        backprop_logits(&reps, &triples, &w, 1.0, &mut grad);
        let eps = 1e-6;
        for (which, shape) in [(0, reps.users.dim()), (1, reps.items.dim())] {
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut hi = reps.clone();
                    let mut lo = reps.clone();
                    let (h, l, g) = if which == 0 {
                        (&mut hi.users, &mut lo.users, grad.users[[r, c]])
                    } else {
                        (&mut hi.items, &mut lo.items, grad.items[[r, c]])
                    };
                    h[[r, c]] += eps;
                    l[[r, c]] -= eps;
                    let fd = (obj(&hi) - obj(&lo)) / (2.0 * eps);
                    assert!((fd - g).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn selftest_close_to_oracle() {
        let cases = selftest_cases(1, &[3, 5], &[0.1, 0.001], &cfg(1.0, false)).unwrap();
        assert_eq!(cases.len(), 4);
        for c in &cases {
            assert!(c.cost >= c.lp_oracle_cost - 1e-9);
            if c.lambda == 0.001 {
                assert!((c.cost - c.lp_oracle_cost).abs() <= 0.01 * c.lp_oracle_cost.max(1e-9) + 1e-6);
            }
        }
    }
}
