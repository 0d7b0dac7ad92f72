use super::*;
use crate::dataset::{generate_synthetic, inject_noise, split_per_user, SplitRatios, SynthConfig};
use ndarray::array;

fn fixture(seed: u64) -> (DataSplit, ModalFeatures) {
    let cfg = SynthConfig {
        n_users: 80,
        n_items: 48,
        n_clusters: 4,
        interactions_per_user: 8,
        dim_text: 8,
        dim_vision: 8,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic(&cfg, seed).unwrap();
    let split = split_per_user(&corpus.dataset, SplitRatios::default(), seed);
    let (noisy, _) = inject_noise(&split, 0.1, seed).unwrap();
    (noisy, corpus.features)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 64,
        warmup_epochs: 2,
        patience: 3,
        max_epochs: 6,
        dim: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn adamw_zero_gradient() {
    let mut p = array![[1.0, -2.0], [0.5, 3.0]];
    let orig = p.clone();
    let g = Array2::zeros((2, 2));
    let mut opt = AdamW::new(&[&p], 1e-3, 0.0);
    opt.update(&["w"], vec![&mut p], &[g.clone()]).unwrap();
    assert_eq!(p, orig);
    let mut opt = AdamW::new(&[&p], 1e-3, 0.01);
    opt.update(&["w"], vec![&mut p], &[g]).unwrap();
    assert_eq!(p, &orig * (1.0 - 1e-3 * 0.01));
}

#[test]
fn adamw_scalar_reference() {
    // Hand-rolled recurrence for g = 1 twice.
    let (lr, wd, b1, b2, eps) = (0.1f64, 0.01f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut expect = Vec::new();
    for t in 1..=2 {
        m = b1 * m + (1.0 - b1);
        v = b2 * v + (1.0 - b2);
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x = x * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        expect.push(x);
    }
    let mut p = array![[1.0]];
    let mut opt = AdamW::new(&[&p], lr, wd);
    for e in expect {
        opt.update(&["x"], vec![&mut p], &[array![[1.0]]]).unwrap();
        assert!((p[[0, 0]] - e).abs() < 1e-15);
    }
    assert!((p[[0, 0]] - (0.999 * (0.999 - 0.1 / (1.0 + 1e-8)) - 0.1 / (1.0 + 1e-8))).abs() < 1e-9);
}

#[test]
fn adamw_rejects_non_finite() {
    let mut p = array![[1.0]];
    let mut opt = AdamW::new(&[&p], 1e-3, 0.0);
    let err = opt.update(&["item_emb"], vec![&mut p], &[array![[f64::NAN]]]).unwrap_err();
    assert!(err.to_string().contains("item_emb"));
    assert_eq!(p, array![[1.0]]);
    assert_eq!(opt.step, 0);
}

#[test]
fn negatives_avoid_train_items() {
    let (split, _) = fixture(1);
    let mut rng = substage_rng(1, Stage::TeacherTrain, 0);
    for (u, i, j) in bpr_triples(&split.train, &mut rng) {
        assert!(split.train.contains(u, i));
        assert!(!split.train.contains(u, j));
    }
    let full = InteractionDataset::from_pairs(1, 2, [(0, 0), (0, 1)]).unwrap();
    assert_eq!(sample_negative(&mut rng, &full, 0), None);
}

#[test]
fn warmup_only_is_pure_bpr() {
    let (split, features) = fixture(2);
    let cfg = TrainConfig {
        warmup_epochs: 4,
        max_epochs: 4,
        patience: 10,
        ..small_cfg()
    };
    let mut calls = 0;
    let mut obs = |e: TrainEvent<'_>| {
        if let TrainEvent::Partitions { .. } = e {
            calls += 1;
        }
    };
    let (_, _, report) = train_teacher(&split, &features, &cfg, &mut obs).unwrap();
    assert_eq!(calls, 0);
    assert!(report.epochs.iter().all(|e| e.phase == Phase::Warmup));
}

#[test]
fn teacher_is_reproducible_and_restores_best() {
    let (split, features) = fixture(3);
    let cfg = small_cfg();
    let (t1, p1, r1) = train_teacher(&split, &features, &cfg, &mut ignore).unwrap();
    let (t2, p2, r2) = train_teacher(&split, &features, &cfg, &mut ignore).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(p1, p2);
    let losses = |r: &TrainReport| r.epochs.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&r1), losses(&r2));
    assert!(r1.epochs.iter().any(|e| e.phase == Phase::Dbpr));
    let best = r1.epochs.iter().map(|e| e.recall20).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r1.best_recall20, best);
    let rows = evaluate(&t1, None, &split, EvalTarget::Valid, &[20], "t").unwrap();
    assert_eq!(rows[0].recall, best);
    p1.check(&split.train).unwrap();
}

#[test]
fn student_objective_decomposes_and_teacher_stays_frozen() {
    let (split, features) = fixture(4);
    let cfg = small_cfg();
    let (teacher, parts, _) = train_teacher(&split, &features, &cfg, &mut ignore).unwrap();
    let before = teacher.clone();
    let reps = teacher.representations(None).unwrap();
    let guidance = Guidance {
        teacher_reps: &reps,
        partitions: Some(&parts),
    };
    let mut tr = StudentTrainer::new(&split, &features, &cfg).unwrap();
    let (rec, batches) = tr.run_epoch(1, Some(&guidance)).unwrap();
    for b in &batches {
        assert!((b.total - (b.rec + cfg.kd_weight * b.kd)).abs() <= 1e-10);
        assert!(b.kd >= 0.0 && b.kd.is_finite());
    }
    assert!(rec.kd_loss > 0.0);
    assert_eq!(teacher, before);
}

#[test]
fn kd_none_matches_plain_student() {
    let (split, features) = fixture(5);
    let cfg = TrainConfig {
        kd: KdMode::None,
        max_epochs: 3,
        ..small_cfg()
    };
    let teacher = TeacherModel::init(split.n_users(), split.n_items(), cfg.dim, 0, None, 1).unwrap();
    let reps = teacher.representations(None).unwrap();
    let guidance = Guidance {
        teacher_reps: &reps,
        partitions: None,
    };
    let (a, _) = train_student(&split, &features, &cfg, Some(&guidance), &mut ignore).unwrap();
    let (b, _) = train_student(&split, &features, &cfg, None, &mut ignore).unwrap();
    assert_eq!(a, b);
}

#[test]
fn self_distillation_has_tiny_kd_loss() {
    let (split, features) = fixture(6);
    let batch: Vec<Triple> = bpr_triples(&split.train, &mut substage_rng(1, Stage::StudentTrain, 1))
        .into_iter()
        .take(32)
        .collect();
    // The entropic blur alone costs on the order of lambda.
    for lambda in [0.1, 1e-3] {
        let mut cfg = small_cfg();
        cfg.sinkhorn.lambda = lambda;
        let mut tr = StudentTrainer::new(&split, &features, &cfg).unwrap();
        let reps = tr.student.representations(Some(&features)).unwrap();
        let guidance = Guidance {
            teacher_reps: &reps,
            partitions: None,
        };
        let loss = tr.step(&batch, &batch, Some(&guidance)).unwrap();
        assert!(loss.kd < lambda.max(1e-3), "lambda {lambda}: {}", loss.kd);
    }
}

#[test]
fn kd_triples_follow_partitions() {
    use crate::amsc::UserPartition;
    let set = |v: &[usize]| v.iter().copied().collect::<std::collections::BTreeSet<usize>>();
    let parts = Partitions::from_vec(vec![
        UserPartition {
            user: 0,
            reliable: set(&[1]),
            spurious: set(&[2, 3]),
            true_set: set(&[1, 2]),
            false_set: set(&[3]),
        },
        UserPartition {
            user: 1,
            reliable: set(&[4]),
            spurious: set(&[]),
            true_set: set(&[4]),
            false_set: set(&[]),
        },
    ]);
    let mut rng = substage_rng(0, Stage::StudentTrain, 0);
    let batch = [(0, 1, 9), (0, 3, 9), (1, 4, 8), (2, 5, 7)];
    let out = StudentTrainer::kd_triples(&batch, Some(&parts), &mut rng);
    assert_eq!(out, vec![(0, 1, 3), (1, 4, 8), (2, 5, 7)]);
}

#[test]
fn interleaved_runs() {
    let (split, features) = fixture(7);
    let cfg = TrainConfig {
        interleaved: true,
        max_epochs: 4,
        ..small_cfg()
    };
    let out = run_pipeline(&split, &features, &cfg, Mode::Guider, &mut ignore).unwrap();
    assert!(out.student.is_some() && out.teacher.is_some());
    assert_eq!(out.metrics.len(), 2);
    assert!(out.noise_detection.is_some());
}
