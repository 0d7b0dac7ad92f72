//! Training: BPR warm-up, then denoised teacher training over AMSC partitions,
//! then distillation into the multi-modal student.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amsc::{run_amsc, HashProjector, ModalIndex, Partitions, DEFAULT_HASH_BITS, DEFAULT_THRESHOLD};
use crate::dataset::{DataSplit, InteractionDataset, ModalFeatures};
use crate::eval::{evaluate, find_metric, noise_detection_report, EvalTarget, MetricsRow, NoiseDetection, DEFAULT_KS};
use crate::losses::{accumulate_bce, accumulate_bpr, compensated_sum, Triple};
use crate::models::{NormalizedAdjacency, Recommender, Representations, StudentModel, TeacherModel, DEFAULT_DIM, DEFAULT_LAYERS};
use crate::otkd::{backprop_logits, kd_step, pairwise_logits, CostMode, KdMode, SinkhornConfig};
use crate::rng::{substage_rng, Stage};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub s_thres: f64,
    pub hash_bits: usize,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
    pub kd: KdMode,
    pub cost: CostMode,
    pub kd_weight: f64,
    pub dim: usize,
    pub n_layers: usize,
    pub interleaved: bool,
    /// Keep sampled unobserved negatives next to the noisy ones after warm-up.
    pub dbpr_unobserved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-3,
            batch_size: 256,
            warmup_epochs: 5,
            patience: 10,
            max_epochs: 100,
            s_thres: DEFAULT_THRESHOLD,
            hash_bits: DEFAULT_HASH_BITS,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
            kd: KdMode::Ot,
            cost: CostMode::Raw,
            kd_weight: 1.0,
            dim: DEFAULT_DIM,
            n_layers: DEFAULT_LAYERS,
            interleaved: false,
            dbpr_unobserved: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.dim == 0 || self.hash_bits == 0 {
            return bad("batch_size, max_epochs, dim and hash_bits must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !self.s_thres.is_finite() {
            return bad("s_thres must be finite".into());
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return bad(format!("kd_weight must be non-negative, got {}", self.kd_weight));
        }
        self.sinkhorn.validate()
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &[&Array2<f64>], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn for_model(model: &dyn Recommender, lr: f64, weight_decay: f64) -> Self {
        Self::new(&model.params(), lr, weight_decay)
    }

    /// One update. Non-finite gradients abort before anything changes.
    pub fn update(&mut self, names: &[&str], params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameter blocks, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(k).copied().unwrap_or("?");
            if p.dim() != g.dim() || p.dim() != self.m[k].dim() {
                return Err(Error::Shape(format!("gradient for {name} is {:?}, block is {:?}", g.dim(), p.dim())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * decay - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Uniform item the user has not interacted with in `train`, or `None` if the
/// user has every item.
pub fn sample_negative(rng: &mut ChaCha8Rng, train: &InteractionDataset, u: usize) -> Option<usize> {
    let n = train.n_items();
    let seen = train.user_len(u);
    if seen >= n {
        return None;
    }
    if seen * 2 <= n {
        loop {
            let j = rng.random_range(0..n);
            if !train.contains(u, j) {
                return Some(j);
            }
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| !train.contains(u, j)).collect();
    free.choose(rng).copied()
}

/// Every train positive once, shuffled, each with a uniform negative.
pub fn bpr_triples(train: &InteractionDataset, rng: &mut ChaCha8Rng) -> Vec<Triple> {
    let mut pos: Vec<(usize, usize)> = train.interactions().iter().map(|it| (it.user, it.item)).collect();
    pos.sort_unstable();
    pos.shuffle(rng);
    pos.into_iter()
        .filter_map(|(u, i)| sample_negative(rng, train, u).map(|j| (u, i, j)))
        .collect()
}

/// Every clean item of every contrastive user once, paired with a random item
/// from the same user's noisy set.
pub fn dbpr_triples(partitions: &Partitions, rng: &mut ChaCha8Rng) -> Vec<Triple> {
    let mut out = Vec::new();
    for p in partitions.iter().filter(|p| p.is_contrastive()) {
        let noisy: Vec<usize> = p.false_set.iter().copied().collect();
        for &i in &p.true_set {
            out.push((p.user, i, *noisy.choose(rng).expect("nonempty false set")));
        }
    }
    out.shuffle(rng);
    out
}

/// The DBPR triples plus one uniform unobserved negative for every clean
/// item of every user. Noisy items never act as positives.
pub fn denoised_triples(partitions: &Partitions, train: &InteractionDataset, rng: &mut ChaCha8Rng) -> Vec<Triple> {
    let mut out = dbpr_triples(partitions, rng);
    for p in partitions.iter() {
        for &i in &p.true_set {
            if let Some(j) = sample_negative(rng, train, p.user) {
                out.push((p.user, i, j));
            }
        }
    }
    out.shuffle(rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Dbpr,
    BprFallback,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean batch objective.
    pub loss: f64,
    pub rec_loss: f64,
    pub kd_loss: f64,
    pub recall20: f64,
    pub ndcg20: f64,
    pub n_flagged: usize,
    pub n_contrastive_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_recall20: f64,
    pub stopped_early: bool,
    pub sinkhorn_warnings: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    fn new(model: &str) -> Self {
        TrainReport {
            model: model.to_string(),
            epochs: Vec::new(),
            best_epoch: 0,
            best_recall20: f64::NEG_INFINITY,
            stopped_early: false,
            sinkhorn_warnings: 0,
            wall_clock_secs: 0.0,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    /// `epoch,loss,recall20,ndcg20`
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "epoch,loss,recall20,ndcg20").map_err(io)?;
        for r in &self.epochs {
            writeln!(w, "{},{},{},{}", r.epoch, r.loss, r.recall20, r.ndcg20).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Progress notifications for callers that want to inspect training.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Partitions {
        epoch: usize,
        partitions: &'a Partitions,
        train: &'a InteractionDataset,
    },
    Epoch(&'a EpochRecord),
}

pub type Observer<'o> = &'o mut dyn FnMut(TrainEvent<'_>);

/// An observer that does nothing.
pub fn ignore(_: TrainEvent<'_>) {}

fn notify(observer: &mut Observer<'_>, event: TrainEvent<'_>) {
    observer(event);
}

/// Best-validation tracking with patience.
struct EarlyStopping<P> {
    patience: usize,
    best: f64,
    best_epoch: usize,
    best_params: Option<P>,
    since: usize,
}

impl<P> EarlyStopping<P> {
    fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            best_params: None,
            since: 0,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, value: f64, params: impl FnOnce() -> P) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.best_params = Some(params());
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        compensated_sum(values.iter().copied()) / values.len() as f64
    }
}

fn valid20(rows: &[MetricsRow]) -> (f64, f64) {
    find_metric(rows, 20).map(|r| (r.recall, r.ndcg)).unwrap_or((0.0, 0.0))
}

/// Teacher plus its optimizer and partition state.
pub struct TeacherTrainer<'a> {
    pub teacher: TeacherModel,
    opt: AdamW,
    split: &'a DataSplit,
    features: &'a ModalFeatures,
    index: ModalIndex,
    cfg: &'a TrainConfig,
    pub partitions: Option<Partitions>,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(split: &'a DataSplit, features: &'a ModalFeatures, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adj = NormalizedAdjacency::from_train(&split.train);
        let teacher = TeacherModel::init(split.n_users(), split.n_items(), cfg.dim, cfg.n_layers, Some(adj), cfg.seed)?;
        Self::with_teacher(teacher, split, features, cfg)
    }

    pub fn with_teacher(teacher: TeacherModel, split: &'a DataSplit, features: &'a ModalFeatures, cfg: &'a TrainConfig) -> Result<Self> {
        if features.n_items() < split.n_items() {
            return Err(Error::MissingFeatures(format!(
                "features cover {} of {} items",
                features.n_items(),
                split.n_items()
            )));
        }
        let proj = HashProjector::for_features(cfg.hash_bits, features, cfg.seed)?;
        let index = ModalIndex::new(features, &proj)?;
        let opt = AdamW::for_model(&teacher, cfg.lr, cfg.weight_decay);
        Ok(TeacherTrainer {
            teacher,
            opt,
            split,
            features,
            index,
            cfg,
            partitions: None,
        })
    }

    pub fn amsc(&self) -> Result<Partitions> {
        run_amsc(&self.teacher, &self.split.train, None, &self.index, self.cfg.s_thres)
    }

    fn step(&mut self, triples: &[Triple]) -> Result<f64> {
        let reps = self.teacher.representations(None)?;
        let mut grad = reps.zeros_like();
        let scale = 1.0 / triples.len() as f64;
        let loss = accumulate_bpr(&reps, triples, scale, &mut grad) * scale;
        let grads = self.teacher.backprop(&grad, None)?;
        let names = self.teacher.param_names();
        self.opt.update(&names, self.teacher.params_mut(), &grads)?;
        Ok(loss)
    }

    /// One epoch; `epoch` counts from 1.
    pub fn run_epoch(&mut self, epoch: usize, mut observer: Observer<'_>) -> Result<EpochRecord> {
        let mut rng = substage_rng(self.cfg.seed, Stage::TeacherTrain, epoch as u64);
        let (phase, triples) = if epoch <= self.cfg.warmup_epochs {
            (Phase::Warmup, bpr_triples(&self.split.train, &mut rng))
        } else {
            let parts = self.amsc()?;
            notify(
                &mut observer,
                TrainEvent::Partitions {
                    epoch,
                    partitions: &parts,
                    train: &self.split.train,
                },
            );
            let triples = if self.cfg.dbpr_unobserved && parts.n_contrastive() > 0 {
                denoised_triples(&parts, &self.split.train, &mut rng)
            } else {
                dbpr_triples(&parts, &mut rng)
            };
            self.partitions = Some(parts);
            if triples.is_empty() {
                log::warn!("epoch {epoch}: no user has both clean and noisy items; using BPR");
                (Phase::BprFallback, bpr_triples(&self.split.train, &mut rng))
            } else {
                (Phase::Dbpr, triples)
            }
        };
        let mut losses = Vec::new();
        for batch in triples.chunks(self.cfg.batch_size) {
            losses.push(self.step(batch)?);
        }
        let rows = evaluate(&self.teacher, None, self.split, EvalTarget::Valid, &[20], "teacher")?;
        let (recall20, ndcg20) = valid20(&rows);
        let (n_flagged, n_contrastive_users) = match (&self.partitions, phase) {
            (Some(p), Phase::Dbpr | Phase::BprFallback) => (p.n_false(), p.n_contrastive()),
            _ => (0, 0),
        };
        let loss = mean(&losses);
        Ok(EpochRecord {
            epoch,
            phase,
            loss,
            rec_loss: loss,
            kd_loss: 0.0,
            recall20,
            ndcg20,
            n_flagged,
            n_contrastive_users,
        })
    }

    pub fn features(&self) -> &ModalFeatures {
        self.features
    }
}

/// Trains the teacher with early stopping and returns it at its best
/// validation epoch, with partitions computed from that state.
pub fn train_teacher(
    split: &DataSplit,
    features: &ModalFeatures,
    cfg: &TrainConfig,
    mut observer: Observer<'_>,
) -> Result<(TeacherModel, Partitions, TrainReport)> {
    let start = Instant::now();
    let mut tr = TeacherTrainer::new(split, features, cfg)?;
    let mut report = TrainReport::new("teacher");
    let mut stop = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.max_epochs {
        let rec = tr.run_epoch(epoch, &mut *observer)?;
        log::info!("teacher epoch {epoch} {:?} loss {:.5} recall@20 {:.4}", rec.phase, rec.loss, rec.recall20);
        notify(&mut observer, TrainEvent::Epoch(&rec));
        let done = stop.observe(epoch, rec.recall20, || tr.teacher.clone());
        report.epochs.push(rec);
        if done && epoch < cfg.max_epochs {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(best) = stop.best_params.take() {
        tr.teacher = best;
    }
    report.best_epoch = stop.best_epoch;
    report.best_recall20 = stop.best;
    let partitions = tr.amsc()?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((tr.teacher, partitions, report))
}

/// What the student distills from.
pub struct Guidance<'g> {
    pub teacher_reps: &'g Representations,
    pub partitions: Option<&'g Partitions>,
}

pub struct StudentTrainer<'a> {
    pub student: StudentModel,
    opt: AdamW,
    split: &'a DataSplit,
    features: &'a ModalFeatures,
    cfg: &'a TrainConfig,
    pub sinkhorn_warnings: usize,
}

/// Batch objective pieces, kept for the decomposition check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub rec: f64,
    pub kd: f64,
}

impl<'a> StudentTrainer<'a> {
    pub fn new(split: &'a DataSplit, features: &'a ModalFeatures, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = StudentModel::init(
            split.n_users(),
            split.n_items(),
            cfg.dim,
            features.text.dim(),
            features.vision.dim(),
            cfg.seed,
        )?;
        let opt = AdamW::for_model(&student, cfg.lr, cfg.weight_decay);
        Ok(StudentTrainer {
            student,
            opt,
            split,
            features,
            cfg,
            sinkhorn_warnings: 0,
        })
    }

    /// One optimizer step on a batch of `(user, positive, negative)`.
    pub fn step(&mut self, batch: &[Triple], kd_triples: &[Triple], guidance: Option<&Guidance<'_>>) -> Result<BatchLoss> {
        let reps = self.student.representations(Some(self.features))?;
        let mut grad = reps.zeros_like();
        let samples: Vec<(usize, usize, f64)> = batch.iter().flat_map(|&(u, i, j)| [(u, i, 1.0), (u, j, 0.0)]).collect();
        let scale = 1.0 / samples.len() as f64;
        let rec = accumulate_bce(&reps, &samples, scale, &mut grad) * scale;
        let mut kd = 0.0;
        if let (Some(g), false) = (guidance, kd_triples.is_empty() || self.cfg.kd == KdMode::None) {
            let z_t = pairwise_logits(g.teacher_reps, kd_triples)?;
            let z_s = pairwise_logits(&reps, kd_triples)?;
            let out = kd_step(&z_t.values, &z_s.values, self.cfg.kd, self.cfg.cost, &self.cfg.sinkhorn)?;
            if out.plan.as_ref().is_some_and(|p| !p.converged) {
                self.sinkhorn_warnings += 1;
            }
            backprop_logits(&reps, kd_triples, &out.grad, self.cfg.kd_weight, &mut grad);
            kd = out.loss;
        }
        let grads = self.student.backprop(&grad, Some(self.features))?;
        let names = self.student.param_names();
        self.opt.update(&names, self.student.params_mut(), &grads)?;
        Ok(BatchLoss {
            total: rec + self.cfg.kd_weight * kd,
            rec,
            kd,
        })
    }

    /// Distillation triples for a batch: a clean positive against one of the
    /// user's noisy items, or against the sampled negative when the user has
    /// none. Positives marked noisy are left out.
    pub fn kd_triples(batch: &[Triple], partitions: Option<&Partitions>, rng: &mut ChaCha8Rng) -> Vec<Triple> {
        let mut out = Vec::with_capacity(batch.len());
        for &(u, i, j) in batch {
            match partitions.and_then(|p| p.get(u)) {
                Some(p) if p.false_set.contains(&i) => {}
                Some(p) if !p.false_set.is_empty() => {
                    let noisy: Vec<usize> = p.false_set.iter().copied().collect();
                    out.push((u, i, *noisy.choose(rng).expect("nonempty false set")));
                }
                _ => out.push((u, i, j)),
            }
        }
        out
    }

    pub fn run_epoch(&mut self, epoch: usize, guidance: Option<&Guidance<'_>>) -> Result<(EpochRecord, Vec<BatchLoss>)> {
        let mut rng = substage_rng(self.cfg.seed, Stage::StudentTrain, epoch as u64);
        let triples = bpr_triples(&self.split.train, &mut rng);
        let mut batches = Vec::new();
        for batch in triples.chunks(self.cfg.batch_size) {
            let kd_triples = match guidance {
                Some(g) => Self::kd_triples(batch, g.partitions, &mut rng),
                None => Vec::new(),
            };
            batches.push(self.step(batch, &kd_triples, guidance)?);
        }
        let rows = evaluate(&self.student, Some(self.features), self.split, EvalTarget::Valid, &[20], "student")?;
        let (recall20, ndcg20) = valid20(&rows);
        let pick = |f: fn(&BatchLoss) -> f64| mean(&batches.iter().map(f).collect::<Vec<_>>());
        let (n_flagged, n_contrastive_users) = guidance
            .and_then(|g| g.partitions)
            .map(|p| (p.n_false(), p.n_contrastive()))
            .unwrap_or((0, 0));
        let rec = EpochRecord {
            epoch,
            phase: Phase::Student,
            loss: pick(|b| b.total),
            rec_loss: pick(|b| b.rec),
            kd_loss: pick(|b| b.kd),
            recall20,
            ndcg20,
            n_flagged,
            n_contrastive_users,
        };
        Ok((rec, batches))
    }
}

/// Trains the student against a frozen teacher (or alone when `guidance` is
/// `None`) and returns it at its best validation epoch.
pub fn train_student(
    split: &DataSplit,
    features: &ModalFeatures,
    cfg: &TrainConfig,
    guidance: Option<&Guidance<'_>>,
    mut observer: Observer<'_>,
) -> Result<(StudentModel, TrainReport)> {
    let start = Instant::now();
    let mut tr = StudentTrainer::new(split, features, cfg)?;
    let tag = if guidance.is_some() { "student" } else { "plain" };
    let mut report = TrainReport::new(tag);
    let mut stop = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.max_epochs {
        let (rec, _) = tr.run_epoch(epoch, guidance)?;
        log::info!(
            "{tag} epoch {epoch} loss {:.5} (rec {:.5}, kd {:.5}) recall@20 {:.4}",
            rec.loss,
            rec.rec_loss,
            rec.kd_loss,
            rec.recall20
        );
        notify(&mut observer, TrainEvent::Epoch(&rec));
        let done = stop.observe(epoch, rec.recall20, || tr.student.clone());
        report.epochs.push(rec);
        if done && epoch < cfg.max_epochs {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(best) = stop.best_params.take() {
        tr.student = best;
    }
    report.best_epoch = stop.best_epoch;
    report.best_recall20 = stop.best;
    report.sinkhorn_warnings = tr.sinkhorn_warnings;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((tr.student, report))
}

/// Teacher and student advance one epoch each in turn; the student learns
/// from the teacher's current state. Early stopping follows the student.
pub fn train_interleaved(
    split: &DataSplit,
    features: &ModalFeatures,
    cfg: &TrainConfig,
    mut observer: Observer<'_>,
) -> Result<(TeacherModel, StudentModel, Partitions, TrainReport, TrainReport)> {
    let start = Instant::now();
    let mut teacher = TeacherTrainer::new(split, features, cfg)?;
    let mut student = StudentTrainer::new(split, features, cfg)?;
    let mut t_report = TrainReport::new("teacher");
    let mut s_report = TrainReport::new("student");
    let mut stop = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.max_epochs {
        let t_rec = teacher.run_epoch(epoch, &mut *observer)?;
        notify(&mut observer, TrainEvent::Epoch(&t_rec));
        t_report.epochs.push(t_rec);
        let reps = teacher.teacher.representations(None)?;
        let guidance = Guidance {
            teacher_reps: &reps,
            partitions: teacher.partitions.as_ref(),
        };
        let (s_rec, _) = student.run_epoch(epoch, Some(&guidance))?;
        notify(&mut observer, TrainEvent::Epoch(&s_rec));
        let done = stop.observe(epoch, s_rec.recall20, || (teacher.teacher.clone(), student.student.clone()));
        s_report.epochs.push(s_rec);
        if done && epoch < cfg.max_epochs {
            s_report.stopped_early = true;
            t_report.stopped_early = true;
            break;
        }
    }
    if let Some((t, s)) = stop.best_params.take() {
        teacher.teacher = t;
        student.student = s;
    }
    for r in [&mut t_report, &mut s_report] {
        r.best_epoch = stop.best_epoch;
    }
    t_report.best_recall20 = t_report
        .epochs
        .get(stop.best_epoch.saturating_sub(1))
        .map(|e| e.recall20)
        .unwrap_or(0.0);
    s_report.best_recall20 = stop.best;
    s_report.sinkhorn_warnings = student.sinkhorn_warnings;
    let partitions = teacher.amsc()?;
    let secs = start.elapsed().as_secs_f64();
    t_report.wall_clock_secs = secs;
    s_report.wall_clock_secs = secs;
    Ok((teacher.teacher, student.student, partitions, t_report, s_report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Denoised teacher, then a distilled student.
    #[default]
    Guider,
    /// Student trained on the recommendation loss alone.
    Plain,
    /// Denoised teacher only.
    TeacherOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guider" => Ok(Mode::Guider),
            "plain" => Ok(Mode::Plain),
            "teacher-only" => Ok(Mode::TeacherOnly),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?} (guider, plain, teacher-only)"))),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Guider => "guider",
            Mode::Plain => "plain",
            Mode::TeacherOnly => "teacher-only",
        }
    }
}

pub struct PipelineOutput {
    pub teacher: Option<TeacherModel>,
    pub student: Option<StudentModel>,
    pub partitions: Option<Partitions>,
    pub teacher_report: Option<TrainReport>,
    pub student_report: Option<TrainReport>,
    /// Test-set metrics of the final model.
    pub metrics: Vec<MetricsRow>,
    /// Present when the train split carries injected pairs.
    pub noise_detection: Option<NoiseDetection>,
}

/// Training and test evaluation for one mode on a prepared split.
pub fn run_pipeline(
    split: &DataSplit,
    features: &ModalFeatures,
    cfg: &TrainConfig,
    mode: Mode,
    observer: Observer<'_>,
) -> Result<PipelineOutput> {
    let stage = |name: &'static str| {
        move |e: Error| Error::Stage {
            stage: name,
            source: Box::new(e),
        }
    };
    let noisy = split.train.n_injected() > 0;
    let mut out = PipelineOutput {
        teacher: None,
        student: None,
        partitions: None,
        teacher_report: None,
        student_report: None,
        metrics: Vec::new(),
        noise_detection: None,
    };
    let tag = mode.name();
    match mode {
        Mode::Plain => {
            let (s, r) = train_student(split, features, cfg, None, observer).map_err(stage("student"))?;
            out.metrics = evaluate(&s, Some(features), split, EvalTarget::Test, &DEFAULT_KS, tag)?;
            out.student = Some(s);
            out.student_report = Some(r);
        }
        Mode::TeacherOnly => {
            let (t, p, r) = train_teacher(split, features, cfg, observer).map_err(stage("teacher"))?;
            out.metrics = evaluate(&t, None, split, EvalTarget::Test, &DEFAULT_KS, tag)?;
            out.noise_detection = noisy.then(|| noise_detection_report(&p, &split.train));
            out.teacher = Some(t);
            out.partitions = Some(p);
            out.teacher_report = Some(r);
        }
        Mode::Guider if cfg.interleaved => {
            let (t, s, p, tr, sr) = train_interleaved(split, features, cfg, observer).map_err(stage("interleaved"))?;
            out.metrics = evaluate(&s, Some(features), split, EvalTarget::Test, &DEFAULT_KS, tag)?;
            out.noise_detection = noisy.then(|| noise_detection_report(&p, &split.train));
            out.teacher = Some(t);
            out.student = Some(s);
            out.partitions = Some(p);
            out.teacher_report = Some(tr);
            out.student_report = Some(sr);
        }
        Mode::Guider => {
            let (t, p, tr) = train_teacher(split, features, cfg, &mut *observer).map_err(stage("teacher"))?;
            let reps = t.representations(None)?;
            let guidance = Guidance {
                teacher_reps: &reps,
                partitions: Some(&p),
            };
            let (s, sr) = train_student(split, features, cfg, Some(&guidance), observer).map_err(stage("student"))?;
            out.metrics = evaluate(&s, Some(features), split, EvalTarget::Test, &DEFAULT_KS, tag)?;
            out.noise_detection = noisy.then(|| noise_detection_report(&p, &split.train));
            out.teacher = Some(t);
            out.student = Some(s);
            out.partitions = Some(p);
            out.teacher_report = Some(tr);
            out.student_report = Some(sr);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
