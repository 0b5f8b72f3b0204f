use mapkd_core::cluster::{kmeans_assign, kmeans_fit, FeatureMatrix, KMeansParams, Standardization};
use mapkd_core::dataset::{build_dataset, DatasetConfig, Dataset};
use mapkd_core::metrics::confusion_counts;
use mapkd_core::models::{build_model, Architecture, Checkpoint, ModelSpec, Role};
use mapkd_core::nn::Matrix;
use mapkd_core::trace::{
    deltas, generate_synthetic, parse_trace_str, split, write_trace, GeometryConfig, SyntheticKind, TraceRecord,
    TraceSplit,
};
use proptest::prelude::*;

fn records() -> impl Strategy<Value = Vec<TraceRecord>> {
    prop::collection::vec((any::<u64>(), any::<u64>()).prop_map(|(ip, addr)| TraceRecord::new(ip, addr)), 1..60)
}

fn batch() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..8, 1usize..12).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(prop::bool::ANY, r * c),
            prop::collection::vec(0.0f64..1.0, r * c),
        )
            .prop_map(move |(y, p)| {
                (
                    Matrix::from_vec(r, c, y.into_iter().map(|b| b as u8 as f64).collect()),
                    Matrix::from_vec(r, c, p),
                )
            })
    })
}

proptest! {
    #[test]
    fn emitted_traces_parse_back(recs in records()) {
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        let back = parse_trace_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn stride_traces_have_constant_deltas(s in -64i64..64, n in 2usize..300) {
        prop_assume!(s != 0);
        let g = GeometryConfig::default();
        let kind = SyntheticKind::Stride { stride: s, base_block: 1 << 20, ip: 0x400000 };
        let recs = generate_synthetic(&kind, n, 0, &g).unwrap();
        let d = deltas(&recs, &g).unwrap();
        prop_assert_eq!(d.len(), n - 1);
        prop_assert!(d.iter().all(|&x| x == s));
    }

    #[test]
    fn split_partitions_the_selected_range(n in 1usize..200, skip in 0usize..50, train in 0usize..100, eval in 0usize..100) {
        let recs: Vec<TraceRecord> = (0..n as u64).map(|i| TraceRecord::new(i, i * 64)).collect();
        let sp = TraceSplit { skip, train, eval };
        match split(&recs, &sp) {
            Ok((a, b)) => {
                prop_assert!(skip + train + eval <= n);
                let joined: Vec<TraceRecord> = a.iter().chain(b).copied().collect();
                prop_assert_eq!(&joined[..], &recs[skip..skip + train + eval]);
                prop_assert_eq!(a.len(), train);
            }
            Err(_) => prop_assert!(skip + train + eval > n),
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_positives((y, p) in batch(), lo in 0.01f64..0.99, hi in 0.01f64..0.99) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let a = confusion_counts(&y, &p, lo).unwrap();
        let b = confusion_counts(&y, &p, hi).unwrap();
        prop_assert!(b.tp <= a.tp);
        prop_assert!(b.tn >= a.tn);
        prop_assert_eq!(a.tp + a.fp + a.fn_ + a.tn, y.len() as u64);
    }

    #[test]
    fn counts_ignore_joint_row_permutation((y, p) in batch(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..y.rows()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = confusion_counts(&y, &p, 0.5).unwrap();
        let b = confusion_counts(&y.select_rows(&order), &p.select_rows(&order), 0.5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn standardization_inverts(values in prop::collection::vec(-1e6f64..1e6, 2..40)) {
        let st = Standardization::fit(&values, 1);
        let mut v = values.clone();
        st.apply(&mut v);
        st.invert(&mut v);
        for (a, b) in v.iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn assignment_reproduces_fit_labels(values in prop::collection::vec(-100f64..100.0, 8..80), k in 1usize..4, seed in any::<u64>()) {
        let fm = FeatureMatrix::from_rows(1, values).unwrap();
        let fit = kmeans_fit(&fm, &KMeansParams::new(k, seed)).unwrap();
        prop_assert_eq!(kmeans_assign(&fit.model, &fm).unwrap(), fit.labels);
    }
}

fn two_phase_dataset() -> (Dataset, Vec<u32>) {
    let g = GeometryConfig::default();
    let recs = generate_synthetic(&SyntheticKind::two_phase(50, 4), 400, 0, &g).unwrap();
    let labels: Vec<u32> = (0..recs.len()).map(|i| ((i / 50) % 2) as u32).collect();
    let cfg = DatasetConfig {
        lookback: 4,
        future_window: 8,
        delta_bound: 8,
        segments: 4,
        ..Default::default()
    };
    (build_dataset(&recs, &labels, &cfg, &g).unwrap(), labels)
}

#[test]
fn dataset_cache_round_trips() {
    let (ds, _) = two_phase_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cache");
    ds.write_cache(&path, "h1").unwrap();
    let (hash, back) = Dataset::read_cache_any(&path).unwrap();
    assert_eq!(hash, "h1");
    assert_eq!(back, ds);
    assert_eq!(Dataset::read_cache(&path, "h2").unwrap(), None);
}

#[test]
fn samples_carry_the_cluster_of_their_position() {
    let (ds, labels) = two_phase_dataset();
    for (i, &t) in ds.positions().iter().enumerate() {
        assert_eq!(ds.cluster_ids()[i], labels[t]);
    }
    let parts = ds.partitions(2).unwrap();
    assert_eq!(parts[0].len() + parts[1].len(), ds.len());
}

#[test]
fn reference_student_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let spec = ModelSpec::reference(arch, Role::Student);
        let model = build_model(&spec, 5).unwrap();
        let path = dir.path().join(format!("{arch}.ckpt"));
        Checkpoint::new(model.clone(), serde_json::json!({ "note": "x" })).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.meta_str("note"), Some("x"));
        let x = Matrix::from_fn(2, spec.input_len(), |r, c| ((r * 7 + c) % 5) as f64 / 5.0);
        let (a, b) = (model.forward(&x).unwrap(), back.model.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
