use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(arch: Architecture, dim: usize, layers: usize) -> ModelSpec {
    ModelSpec::new(arch, Role::Student, dim, layers, (3, 4), 8)
}

fn random_inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
}

#[test]
fn reference_parameter_counts_match_published_sizes() {
    for (arch, role, _, _, published) in REFERENCE_CONFIGS {
        let n = param_count(&ModelSpec::reference(arch, role)) as f64;
        let tol = match arch {
            Architecture::ResidualConv => 0.15,
            _ => 0.10,
        };
        let rel = (n - published as f64).abs() / published as f64;
        assert!(rel <= tol, "{arch} {role:?}: {n} vs {published}");
    }
}

#[test]
fn exact_reference_counts() {
    let count = |a, r| param_count(&ModelSpec::reference(a, r));
    assert_eq!(count(Architecture::Mixer, Role::Student), 10_206);
    assert_eq!(count(Architecture::ResidualConv, Role::Student), 9_324);
    assert_eq!(count(Architecture::ResidualConv, Role::Teacher), 5_422_786);
    assert_eq!(count(Architecture::Recurrent, Role::Student), 12_512);
    assert_eq!(count(Architecture::Recurrent, Role::Teacher), 5_301_344);
    assert_eq!(count(Architecture::Mixer, Role::Teacher), 5_440_560);
}

#[test]
fn built_count_equals_declared_count() {
    for arch in Architecture::ALL {
        let spec = ModelSpec::reference(arch, Role::Student);
        let m = build_model(&spec, 1).unwrap();
        assert_eq!(m.param_count(), param_count(&spec));
    }
}

#[test]
fn compression_ratios_of_reference_pairs() {
    for arch in Architecture::ALL {
        let t = param_count(&ModelSpec::reference(arch, Role::Teacher)) as f64;
        let s = param_count(&ModelSpec::reference(arch, Role::Student)) as f64;
        let ratio = t / s;
        assert!((400.0..=650.0).contains(&ratio), "{arch}: {ratio}");
    }
}

#[test]
fn recurrent_student_maps_reference_input_to_label_logits() {
    let spec = ModelSpec::reference(Architecture::Recurrent, Role::Student);
    let m = build_model(&spec, 3).unwrap();
    let out = m.forward(&random_inputs(1, 80, 0)).unwrap();
    assert_eq!(out.shape(), (1, 256));
    assert!(out.is_finite());
}

#[test]
fn zero_input_gives_finite_logits() {
    for arch in Architecture::ALL {
        let m = build_model(&ModelSpec::reference(arch, Role::Student), 0).unwrap();
        let out = m.forward(&Matrix::zeros(2, 80)).unwrap();
        assert_eq!(out.shape(), (2, 256));
        assert!(out.is_finite(), "{arch}");
    }
}

#[test]
fn seeded_initialization_is_deterministic() {
    for arch in Architecture::ALL {
        let spec = tiny(arch, 4, 2);
        assert_eq!(build_model(&spec, 9).unwrap(), build_model(&spec, 9).unwrap());
        assert_ne!(build_model(&spec, 9).unwrap().params(), build_model(&spec, 10).unwrap().params());
    }
}

#[test]
fn wrong_input_width_is_rejected() {
    let m = build_model(&tiny(Architecture::Mixer, 4, 1), 0).unwrap();
    assert!(matches!(m.forward(&Matrix::zeros(1, 5)), Err(Error::Shape(_))));
}

#[test]
fn zero_sized_spec_is_rejected() {
    assert!(build_model(&tiny(Architecture::Mixer, 0, 1), 0).is_err());
    assert!(build_model(&tiny(Architecture::Recurrent, 2, 0), 0).is_err());
}

#[test]
fn samples_are_independent_within_a_batch() {
    for arch in Architecture::ALL {
        let m = build_model(&tiny(arch, 4, 2), 5).unwrap();
        let x = random_inputs(4, 12, 1);
        let batched = m.forward(&x).unwrap();
        for r in 0..4 {
            let single = m.forward(&x.select_rows(&[r])).unwrap();
            for (a, b) in single.row(0).iter().zip(batched.row(r)) {
                assert!((a - b).abs() < 1e-12, "{arch}");
            }
        }
        // permuting the batch permutes the outputs
        let perm = [2, 0, 3, 1];
        let permuted = m.forward(&x.select_rows(&perm)).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            for (a, b) in permuted.row(i).iter().zip(batched.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // duplicated rows give duplicated outputs
        let dup = m.forward(&x.select_rows(&[1, 1])).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
    }
}

#[test]
fn head_bias_alone_shifts_logits() {
    for arch in Architecture::ALL {
        let mut m = build_model(&tiny(arch, 4, 1), 2).unwrap();
        let x = random_inputs(2, 12, 3);
        let before = m.forward(&x).unwrap();
        let last = m.params().len() - 1;
        assert!(m.names()[last].ends_with("head.bias"));
        for v in m.params_mut()[last].data_mut() {
            *v += 0.5;
        }
        let after = m.forward(&x).unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a - b - 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn head_parameter_count_closed_form() {
    let h = 6;
    let q = 8;
    let spec = tiny(Architecture::Recurrent, h, 1);
    let defs = param_defs(&spec);
    let head: usize = defs.iter().filter(|d| d.name.starts_with("head.")).map(|d| d.rows * d.cols).sum();
    assert_eq!(head, h * q + q);
}

/// Central-difference check of parameter gradients for the objective
/// `sum(logits * w)` with fixed random `w`.
fn check_gradients(spec: ModelSpec, seed: u64) {
    let mut m = build_model(&spec, seed).unwrap();
    // perturb the constant-initialized norm affines so their gradients are generic
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = random_inputs(3, spec.input_len(), seed + 1);
    let w = random_inputs(3, spec.out_labels, seed + 2);
    let objective = |m: &Predictor| -> f64 {
        let out = m.forward(&x).unwrap();
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let (_, grads) = m.forward_backward(x.clone(), |_| Ok(((), w.clone()))).unwrap();
    let eps = 1e-6;
    for (i, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("every parameter receives a gradient");
        let len = m.params()[i].len();
        for j in (0..len).step_by((len / 7).max(1)) {
            let orig = m.params()[i].data()[j];
            m.params_mut()[i].data_mut()[j] = orig + eps;
            let up = objective(&m);
            m.params_mut()[i].data_mut()[j] = orig - eps;
            let down = objective(&m);
            m.params_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.data()[j];
            assert!(
                (numeric - analytic).abs() <= 1e-5 * (1.0 + numeric.abs()),
                "{:?} {}[{j}]: numeric {numeric} analytic {analytic}",
                spec.arch,
                m.names()[i]
            );
        }
    }
}

#[test]
fn recurrent_gradients() {
    check_gradients(tiny(Architecture::Recurrent, 3, 2), 10);
}

#[test]
fn mixer_gradients() {
    check_gradients(tiny(Architecture::Mixer, 4, 2), 11);
}

#[test]
fn residual_basic_gradients() {
    // two stages: exercises the strided projection shortcut
    check_gradients(tiny(Architecture::ResidualConv, 2, 8), 12);
}

#[test]
fn residual_bottleneck_gradients() {
    let spec = tiny(Architecture::ResidualConv, 1, 50);
    assert_eq!(ResidualLayout::for_depth(50).kind, BlockKind::Bottleneck);
    check_gradients(spec, 13);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let m = build_model(&tiny(arch, 4, 2), 21).unwrap();
        let path = dir.path().join(format!("{arch}.ckpt"));
        let meta = serde_json::json!({"config_hash": "abc", "cluster": 1});
        Checkpoint::new(m.clone(), meta.clone()).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model, m);
        assert_eq!(loaded.metadata, meta);
        assert_eq!(loaded.meta_str("config_hash"), Some("abc"));
        let x = random_inputs(2, 12, 4);
        let a = m.forward(&x).unwrap();
        let b = loaded.model.forward(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = build_model(&tiny(Architecture::Mixer, 4, 1), 0).unwrap();
    Checkpoint::new(m, serde_json::Value::Null).save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn architecture_names_round_trip() {
    for arch in Architecture::ALL {
        assert_eq!(arch.to_string().parse::<Architecture>().unwrap(), arch);
    }
    assert_eq!("lstm".parse::<Architecture>().unwrap(), Architecture::Recurrent);
    assert!("transformer".parse::<Architecture>().is_err());
}
