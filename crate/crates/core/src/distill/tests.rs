use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{build_dataset, DatasetConfig};
use crate::models::{Architecture, Role};
use crate::trace::{generate_synthetic, GeometryConfig, SyntheticKind};

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn rand_labels(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
}

fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, v.to_vec())
}

#[test]
fn bce_examples() {
    let y = m(1, 2, &[1.0, 0.0]);
    assert!((bce_loss(&y, &m(1, 2, &[0.5, 0.5])).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_loss(&y, &y).unwrap() < 1e-6);
    let p = m(1, 2, &[0.3, 0.9]);
    let flip_y = y.map(|v| 1.0 - v);
    let flip_p = p.map(|v| 1.0 - v);
    let a = bce_loss(&y, &p).unwrap();
    let b = bce_loss(&flip_y, &flip_p).unwrap();
    assert!((a - b).abs() < 1e-15);
    assert!(bce_loss(&y, &m(1, 3, &[0.1, 0.2, 0.3])).is_err());
}

#[test]
fn softmax_examples() {
    let p = softmax_t(&[1.0, 0.0], 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((p[0] - 0.7311).abs() < 1e-4);
    for t in [0.5, 1.0, 7.0] {
        assert!(softmax_t(&[3.0; 4], t).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
    let mut last = 1.0;
    for t in [1.0, 2.0, 4.0, 8.0, 100.0, 1e6] {
        let p0 = softmax_t(&[2.0, 0.0], t).unwrap()[0];
        assert!(p0 < last && p0 > 0.5);
        last = p0;
    }
    assert!((last - 0.5).abs() < 1e-5);
    assert!(softmax_t(&[], 1.0).is_err());
}

#[test]
fn single_label_kd_matches_direct_evaluation() {
    let (tl, sl) = ([2.0, 0.5, -1.0], [0.1, 0.3, 0.2]);
    let (t, alpha, beta) = (2.0, 0.7, 0.3);
    let sm = |z: &[f64], t: f64| -> Vec<f64> {
        let s: f64 = z.iter().map(|v| (v / t).exp()).sum();
        z.iter().map(|v| (v / t).exp() / s).collect()
    };
    let (pt, ps, ps1) = (sm(&tl, t), sm(&sl, t), sm(&sl, 1.0));
    let soft: f64 = -(0..3).map(|i| pt[i] * ps[i].ln()).sum::<f64>();
    let hard = -ps1[1].ln();
    let got = single_label_kd_loss(&tl, &sl, 1, t, alpha, beta).unwrap();
    assert!((got - (alpha * soft + beta * hard)).abs() < 1e-12);
    assert!(single_label_kd_loss(&tl, &sl, 3, t, alpha, beta).is_err());
    assert!(single_label_kd_loss(&tl, &sl[..2], 0, t, alpha, beta).is_err());
}

#[test]
fn soft_sigmoid_examples_and_properties() {
    for t in [0.1, 1.0, 4.0, 50.0] {
        assert_eq!(soft_sigmoid(0.0, t), 0.5);
    }
    assert_eq!(soft_sigmoid(1.3, 1.0), sigmoid(1.3));
    assert!((soft_sigmoid(2.0, 2.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let y: f64 = rng.gen_range(-20.0..20.0);
        let t: f64 = rng.gen_range(1.0..10.0);
        assert!((soft_sigmoid(-y, t) - (1.0 - soft_sigmoid(y, t))).abs() < 1e-15);
        assert!(soft_sigmoid(y + 0.01, t) > soft_sigmoid(y, t));
    }
}

#[test]
fn kd_examples() {
    // soft-sigmoid outputs 0.7311 (teacher) and 0.5 (student) at T = 1
    let zt: f64 = sigmoid(1.0);
    let oracle = zt * (zt / 0.5).ln() + (1.0 - zt) * ((1.0 - zt) / 0.5).ln();
    let got = multilabel_kd_loss(&m(1, 1, &[1.0]), &m(1, 1, &[0.0]), 1.0).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.1110).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a = rand_matrix(&mut rng, 3, 5, 6.0);
        let b = rand_matrix(&mut rng, 3, 5, 6.0);
        let t = rng.gen_range(0.5..5.0);
        assert_eq!(multilabel_kd_loss(&a, &a, t).unwrap(), 0.0);
        assert!(multilabel_kd_loss(&a, &b, t).unwrap() >= 0.0);
    }
    assert!(multilabel_kd_loss(&Matrix::zeros(1, 2), &Matrix::zeros(2, 2), 1.0).is_err());
}

#[test]
fn kd_invariant_to_joint_label_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_matrix(&mut rng, 2, 6, 4.0);
    let b = rand_matrix(&mut rng, 2, 6, 4.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |x: &Matrix| Matrix::from_fn(2, 6, |r, c| x.get(r, perm[c]));
    let l1 = multilabel_kd_loss(&a, &b, 2.0).unwrap();
    let l2 = multilabel_kd_loss(&permute(&a), &permute(&b), 2.0).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
}

#[test]
fn total_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let y = rand_labels(&mut rng, 4, 6);
        let t_logits = rand_matrix(&mut rng, 4, 6, 5.0);
        let s_logits = rand_matrix(&mut rng, 4, 6, 5.0);
        let temp = rng.gen_range(0.5..6.0);
        let bce = bce_loss(&y, &s_logits.map(sigmoid)).unwrap();
        assert_eq!(total_loss(&y, &t_logits, &s_logits, 0.0, temp).unwrap().to_bits(), bce.to_bits());
        let kd = multilabel_kd_loss(&t_logits, &s_logits, temp).unwrap();
        let half = total_loss(&y, &t_logits, &s_logits, 0.5, temp).unwrap();
        assert!((half - (kd + bce) / 2.0).abs() < 1e-12);
        let lam = rng.gen_range(0.0..1.0);
        let lin = total_loss(&y, &t_logits, &s_logits, lam, temp).unwrap();
        assert!((lin - (lam * kd + (1.0 - lam) * bce)).abs() < 1e-12);
        assert_eq!(total_loss(&y, &s_logits, &s_logits, 1.0, temp).unwrap(), 0.0);
        // gradient variant reports the same value
        let (v, _) = total_loss_grad(&y, &t_logits, &s_logits, lam, temp).unwrap();
        assert_eq!(v.to_bits(), lin.to_bits());
    }
}

fn fd_check(f: impl Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix) {
    let h = 1e-5;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-6);
        assert!(rel < 1e-4, "cell {i}: numeric {numeric} analytic {a}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let (b, q) = (rng.gen_range(1..4), rng.gen_range(1..6));
        let y = rand_labels(&mut rng, b, q);
        let tl = rand_matrix(&mut rng, b, q, 4.0);
        let sl = rand_matrix(&mut rng, b, q, 4.0);
        let temp = rng.gen_range(0.5..5.0);
        let lam = rng.gen_range(0.0..1.0);
        let (_, g) = bce_loss_grad(&y, &sl).unwrap();
        fd_check(|s| bce_loss(&y, &s.map(sigmoid)).unwrap(), &sl, &g);
        let (_, g) = multilabel_kd_loss_grad(&tl, &sl, temp).unwrap();
        fd_check(|s| multilabel_kd_loss(&tl, s, temp).unwrap(), &sl, &g);
        let (_, g) = total_loss_grad(&y, &tl, &sl, lam, temp).unwrap();
        fd_check(|s| total_loss(&y, &tl, s, lam, temp).unwrap(), &sl, &g);
    }
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad = LossConfig {
        temperature: 0.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossConfig {
        lambda_mode: LambdaMode::Fixed { lambda: 1.5 },
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn f1_weighted_lambdas() {
    let spec = ModelSpec::new(Architecture::Mixer, Role::Teacher, 2, 1, (2, 2), 4);
    let t = build_model(&spec, 0).unwrap();
    let e = TeacherEnsemble::new(vec![t.clone(), t.clone(), t], vec![0.4, 0.8, 0.0], &LambdaMode::F1Weighted { base: 0.5 }).unwrap();
    assert_eq!(e.lambdas, vec![0.25, 0.5, 0.0]);
    let t = build_model(&spec, 0).unwrap();
    let e = TeacherEnsemble::new(vec![t], vec![0.3], &LambdaMode::Fixed { lambda: 0.7 }).unwrap();
    assert_eq!(e.lambdas, vec![0.7]);
}

fn small_config() -> DatasetConfig {
    DatasetConfig {
        lookback: 4,
        future_window: 4,
        delta_bound: 8,
        segments: 4,
        segment_bits: 4,
        page_filter: true,
    }
}

fn stride_dataset(n: usize, stride: i64, cluster: u32) -> Dataset {
    let geometry = GeometryConfig::default();
    let records = generate_synthetic(&SyntheticKind::stride(stride), n, 0, &geometry).unwrap();
    build_dataset(&records, &vec![cluster; n], &small_config(), &geometry).unwrap()
}

fn tiny_spec(role: Role) -> ModelSpec {
    ModelSpec::new(Architecture::Mixer, role, 8, 1, (4, 4), 16)
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 1e-2,
        seed,
        ..Default::default()
    }
}

#[test]
fn teacher_learns_stride_one_cluster() {
    let train = stride_dataset(400, 1, 0);
    let eval = stride_dataset(200, 1, 0);
    let out = train_teacher(0, &tiny_spec(Role::Student), &train, &train.all_indices(), &eval, &eval.all_indices(), &quick_cfg(1)).unwrap();
    assert!(out.best.f1 >= 0.95, "{:?}", out.best);
    assert_eq!(out.curve.len(), 5);
    let again = train_teacher(0, &tiny_spec(Role::Student), &train, &train.all_indices(), &eval, &eval.all_indices(), &quick_cfg(1)).unwrap();
    assert_eq!(out.curve, again.curve);
    assert_eq!(out.model, again.model);
}

#[test]
fn teacher_errors() {
    let train = stride_dataset(100, 1, 0);
    let err = train_teacher(1, &tiny_spec(Role::Teacher), &train, &[], &train, &[], &quick_cfg(0)).unwrap_err();
    assert!(matches!(err, Error::EmptyCluster { cluster: 1, .. }));
    let zero = TrainConfig {
        epochs: 0,
        ..quick_cfg(0)
    };
    assert!(train_teacher(0, &tiny_spec(Role::Teacher), &train, &train.all_indices(), &train, &[], &zero).is_err());
}

fn two_cluster_data() -> (Dataset, Vec<Vec<usize>>, Dataset) {
    let geometry = GeometryConfig::default();
    let kind = SyntheticKind::two_phase(60, 4);
    let records = generate_synthetic(&kind, 480, 0, &geometry).unwrap();
    let clusters: Vec<u32> = records.iter().map(|r| u32::from(r.ip == 0x402000)).collect();
    let train = build_dataset(&records, &clusters, &small_config(), &geometry).unwrap();
    let parts = train.partitions(2).unwrap();
    (train.clone(), parts, train)
}

#[test]
fn zero_lambda_distillation_matches_plain_training() {
    let (train, parts, eval) = two_cluster_data();
    let teachers: Vec<Predictor> = (0..2).map(|k| build_model(&tiny_spec(Role::Teacher), 10 + k).unwrap()).collect();
    let ensemble = TeacherEnsemble::new(teachers, vec![1.0, 1.0], &LambdaMode::Fixed { lambda: 0.0 }).unwrap();
    let loss = LossConfig {
        lambda_mode: LambdaMode::Fixed { lambda: 0.0 },
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..quick_cfg(3)
    };
    let kd = distill_student(&ensemble, &train, &parts, &eval, &tiny_spec(Role::Student), &loss, &cfg).unwrap();
    let plain = train_supervised(&tiny_spec(Role::Student), &train, &parts, &eval, &eval.all_indices(), &cfg).unwrap();
    assert_eq!(kd.curve, plain.curve);
    assert_eq!(kd.model, plain.model);
}

#[test]
fn distillation_leaves_teachers_untouched() {
    let (train, parts, eval) = two_cluster_data();
    let teachers: Vec<Predictor> = (0..2).map(|k| build_model(&tiny_spec(Role::Teacher), k).unwrap()).collect();
    let before = teachers.clone();
    let ensemble = TeacherEnsemble::new(teachers, vec![0.9, 0.6], &LambdaMode::F1Weighted { base: 0.5 }).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..quick_cfg(0)
    };
    distill_student(&ensemble, &train, &parts, &eval, &tiny_spec(Role::Student), &LossConfig::default(), &cfg).unwrap();
    for (a, b) in ensemble.teachers.iter().zip(&before) {
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn single_teacher_distillation_is_standard_kd() {
    let (train, _, eval) = two_cluster_data();
    let teacher = build_model(&tiny_spec(Role::Teacher), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..quick_cfg(2)
    };
    let loss = LossConfig::default();
    let ensemble = TeacherEnsemble::new(vec![teacher.clone()], vec![0.5], &loss.lambda_mode).unwrap();
    let a = distill_student(&ensemble, &train, &[train.all_indices()], &eval, &tiny_spec(Role::Student), &loss, &cfg).unwrap();
    let b = standard_kd(&teacher, &train, &eval, &tiny_spec(Role::Student), &loss, &cfg).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn label_count_mismatch_is_rejected() {
    let (train, parts, eval) = two_cluster_data();
    let wide = ModelSpec::new(Architecture::Mixer, Role::Teacher, 2, 1, (4, 4), 32);
    let teachers = vec![build_model(&wide, 0).unwrap(), build_model(&wide, 1).unwrap()];
    let ensemble = TeacherEnsemble::new(teachers, vec![1.0, 1.0], &LambdaMode::default()).unwrap();
    let err = distill_student(&ensemble, &train, &parts, &eval, &tiny_spec(Role::Student), &LossConfig::default(), &quick_cfg(0));
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn baselines_produce_all_arms() {
    let (train, _, eval) = two_cluster_data();
    let cfg = TrainConfig {
        epochs: 1,
        ..quick_cfg(0)
    };
    let b = train_baselines(&train, &eval, &tiny_spec(Role::Teacher), &tiny_spec(Role::Student), &LossConfig::default(), &cfg, &cfg).unwrap();
    assert_eq!(b.student_only.curve.len(), 1);
    assert_eq!(b.teacher_only.curve.len(), 1);
    assert_eq!(b.standard_kd.curve.len(), 1);
}

#[test]
fn curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let rec = EpochRecord {
        epoch: 0,
        train_loss: 0.5,
        precision: 1.0,
        recall: 0.5,
        f1: 0.75,
    };
    write_curve(&path, &[rec], None).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,train_loss,precision,recall,f1\n0,0.5,1,0.5,0.75\n");
    write_curve(&path, &[rec], Some("stage=x")).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("# stage=x\nepoch,"));
}
