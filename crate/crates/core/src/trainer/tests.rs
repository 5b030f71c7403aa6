use super::*;
use crate::oracle::compute_shape_vector;
use crate::synth::{generate_bundle, DatasetConfig};
use crate::tract_io::SubjectEntry;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn manifest_of(n_subjects: usize) -> DatasetManifest {
    DatasetManifest::new(
        (0..n_subjects)
            .map(|s| SubjectEntry {
                subject_id: DatasetConfig::subject_id(s),
                score: None,
                clusters: vec![],
            })
            .collect(),
    )
}

#[test]
fn split_is_a_seeded_subject_partition() {
    let m = manifest_of(10);
    let split = split_dataset(&m, 0.8, 7).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (8, 2));
    assert_eq!(split, split_dataset(&m, 0.8, 7).unwrap());
    let mut all: Vec<String> = split.train.iter().chain(&split.test).cloned().collect();
    all.sort();
    assert_eq!(all, m.subject_ids());
    assert!(split.test.iter().all(|s| !split.train.contains(s)));
    let others: Vec<Split> = (0..20).map(|seed| split_dataset(&m, 0.8, seed).unwrap()).collect();
    assert!(others.iter().any(|s| s.test != split.test));

    assert!(matches!(split_dataset(&manifest_of(1), 0.8, 1), Err(TrainError::TooFewSubjects(1))));
    let two = split_dataset(&manifest_of(2), 0.8, 1).unwrap();
    assert_eq!((two.train.len(), two.test.len()), (1, 1));
}

#[test]
fn pairs_cover_every_item() {
    let pairs = make_pairs(4, 0, 3);
    assert_eq!(pairs.len(), 2);
    let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);

    let pairs = make_pairs(5, 0, 3);
    assert_eq!(pairs.len(), 3);
    let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    let (last, reused) = pairs[2];
    assert_eq!(reused, pairs[0].0);
    assert_ne!(last, reused);

    assert_ne!(make_pairs(20, 0, 3), make_pairs(20, 1, 3));
    assert_eq!(make_pairs(20, 1, 3), make_pairs(20, 1, 3));
    assert_eq!(make_pairs(1, 0, 3), vec![(0, 0)]);
}

#[test]
fn pearson_and_nmse_examples() {
    assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
    assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert!(matches!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ZeroVariance(_))));
    assert!(matches!(pearson_r(&[1.0], &[1.0]), Err(MetricsError::TooShort(1))));
    assert!(matches!(nmse(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1))));

    let gt = [1.0, 4.0, 2.0, 7.0];
    assert_eq!(nmse(&gt, &gt).unwrap(), 0.0);
    assert_eq!(nmse(&[3.5; 4], &gt).unwrap(), 1.0);
    assert!(matches!(nmse(&gt, &[2.0; 4]), Err(MetricsError::ZeroVariance(_))));
}

/// Textbook single-pass formulas, evaluated independently of the module.
fn textbook_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn textbook_nmse(p: &[f64], g: &[f64]) -> f64 {
    let n = g.len() as f64;
    let mse: f64 = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n;
    mse / var
}

#[test]
fn metrics_match_textbook_formulas() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [1.1, 1.9, 3.2, 3.8];
    assert!((pearson_r(&x, &y).unwrap() - textbook_r(&x, &y)).abs() < 1e-9);

    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let n = r.random_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        assert!((pearson_r(&x, &y).unwrap() - textbook_r(&x, &y)).abs() < 1e-9);
        assert!((nmse(&x, &y).unwrap() - textbook_nmse(&x, &y)).abs() < 1e-9 * (1.0 + textbook_nmse(&x, &y)));
    }
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
    })
}

proptest! {
    #[test]
    fn pearson_affine_invariance((x, y) in vec_pair(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
        let base = pearson_r(&x, &y);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson_r(&xs, &y).unwrap() - base).abs() < 1e-9);
        prop_assert!((pearson_r(&neg, &y).unwrap() + base).abs() < 1e-9);
        prop_assert!(base.abs() <= 1.0);
    }

    #[test]
    fn nmse_shift_and_scale_invariance((p, g) in vec_pair(), c in -50.0f64..50.0, s in 0.1f64..10.0) {
        let base = nmse(&p, &g);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let scale = |v: &[f64]| v.iter().map(|x| -s * x).collect::<Vec<_>>();
        prop_assert!((nmse(&shift(&p), &shift(&g)).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
        prop_assert!((nmse(&scale(&p), &scale(&g)).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
        prop_assert!(base >= 0.0);
    }
}

fn shape(v: [f64; 5]) -> ShapeVector {
    ShapeVector::from_array(v)
}

#[test]
fn identity_and_constant_predictors() {
    let gt: Vec<ShapeVector> = (0..6)
        .map(|i| {
            let i = i as f64;
            shape([20.0 + 7.0 * i, 15.0 + 3.0 * i * i, 300.0 + 40.0 * i, 500.0 - 11.0 * i, 1.1 + 0.05 * i])
        })
        .collect();
    let report = MetricsReport::from_predictions(&gt, &gt).unwrap();
    for m in &report.measures {
        assert_eq!((m.r, m.nmse), (1.0, 0.0), "{}", m.measure);
    }
    assert_eq!((report.r_mean, report.r_std, report.nmse_mean), (1.0, 0.0, 0.0));

    let st = TargetStandardizer::fit(&gt).unwrap();
    let round: Vec<ShapeVector> = gt.iter().map(|g| st.destandardize(&st.standardize(g))).collect();
    let report = MetricsReport::from_predictions(&round, &gt).unwrap();
    for m in &report.measures {
        assert!((m.r - 1.0).abs() < 1e-12 && m.nmse < 1e-20);
    }

    let mean: [f64; 5] = std::array::from_fn(|m| gt.iter().map(|g| g.to_array()[m]).sum::<f64>() / 6.0);
    let constant = vec![shape(mean); 6];
    assert!(matches!(
        MetricsReport::from_predictions(&constant, &gt),
        Err(MetricsError::ZeroVariance(_))
    ));
    let lengths: Vec<f64> = gt.iter().map(|g| g.length).collect();
    assert!((nmse(&[mean[0]; 6], &lengths).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn report_renders_all_rows() {
    let gt: Vec<ShapeVector> = (1..5).map(|i| shape([i as f64; 5])).collect();
    let pred: Vec<ShapeVector> = (1..5).map(|i| shape([i as f64 * 1.1 + 0.2; 5])).collect();
    let report = MetricsReport::from_predictions(&pred, &gt).unwrap();
    let csv = report.to_csv(&["config: {}".into()]);
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0], "measure,pearson_r,nmse");
    assert!(rows[6].starts_with("average,"));
    let table = report.to_table();
    for label in ShapeVector::LABELS {
        assert!(table.contains(label));
    }
    assert!(table.contains("Average"));
}

/// A small labeled corpus built in memory.
fn corpus(n_subjects: usize, per_subject: usize) -> Vec<LabeledCluster> {
    let cfg = DatasetConfig {
        n_subjects,
        clusters_per_subject: per_subject,
        seed: 5,
        ..DatasetConfig::default()
    };
    (0..n_subjects)
        .flat_map(|s| (0..per_subject).map(move |c| (s, c)))
        .map(|(s, c)| {
            let mut spec = cfg.cluster_spec(s, c);
            spec.n_streamlines = 20;
            let (mut cluster, _) = generate_bundle(&spec).unwrap();
            cluster.subject_id = DatasetConfig::subject_id(s);
            cluster.id = DatasetConfig::cluster_id(c);
            let target = compute_shape_vector(&cluster, 1.0).unwrap();
            LabeledCluster { cluster, target }
        })
        .collect()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 12,
        lr: 3e-3,
        n_points: 64,
        subnetwork: SubnetworkConfig {
            trunk: vec![3, 16, 32],
            head: vec![32, 16, 5],
            input_scale: 0.02,
            centered: false,
            principal_frame: false,
        },
        ..TrainConfig::desk()
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let data = corpus(3, 8);
    let cfg = tiny_train_config();
    let a = train(&cfg, &data).unwrap();
    assert_eq!(a.history.len(), cfg.epochs);
    assert!(a.history.last().unwrap().total < a.history[0].total);
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.history, b.history);

    let ablated = train(&TrainConfig { alpha: 0.0, ..cfg.clone() }, &data).unwrap();
    assert_ne!(ablated.checkpoint.model.params, a.checkpoint.model.params);
    assert!(ablated.history.iter().all(|h| (h.total - (h.l1 + h.l2)).abs() < 1e-6 * h.total));

    let csv = history_csv(&a.history, &["seed: 42".into()]);
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), cfg.epochs + 1);
    assert!(csv.contains(HISTORY_CSV_HEADER));
}

#[test]
fn evaluation_uses_physical_units() {
    let data = corpus(2, 8);
    let out = train(&tiny_train_config(), &data).unwrap();
    let eval = evaluate(&out.checkpoint, &data, 1).unwrap();
    assert_eq!(eval.predictions.len(), data.len());
    assert_eq!(eval.report.n_clusters, data.len());
    assert!(eval.predictions.iter().all(|p| p.predicted.to_array().iter().all(|v| v.is_finite())));
    let again = evaluate(&out.checkpoint, &data, 1).unwrap();
    assert_eq!(eval.predictions, again.predictions);
    assert!(matches!(evaluate(&out.checkpoint, &[], 1), Err(TrainError::EmptyDataset(_))));
}

#[test]
fn divergence_is_reported_with_its_location() {
    let data = corpus(2, 4);
    let cfg = TrainConfig { lr: 1e30, ..tiny_train_config() };
    match train(&cfg, &data) {
        Err(TrainError::NonFiniteLoss { epoch, batch, detail }) => {
            assert!(epoch < cfg.epochs && batch < 2, "{epoch} {batch}");
            assert!(!detail.is_empty());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at lr 1e30 should diverge"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let data = corpus(2, 2);
    for cfg in [
        TrainConfig { batch_size: 0, ..tiny_train_config() },
        TrainConfig { train_fraction: 1.0, ..tiny_train_config() },
        TrainConfig { alpha: -1.0, ..tiny_train_config() },
    ] {
        assert!(matches!(train(&cfg, &data), Err(TrainError::InvalidConfig(_))));
    }
    assert!(matches!(train(&tiny_train_config(), &[]), Err(TrainError::EmptyDataset(_))));
}

#[test]
fn full_config_uses_the_reference_hyperparameters() {
    let p = TrainConfig::full();
    assert_eq!((p.batch_size, p.epochs, p.step_size), (128, 200, 200));
    assert_eq!((p.lr, p.weight_decay, p.gamma, p.alpha, p.train_fraction), (0.0005, 0.005, 0.1, 3.0, 0.8));
    let json = serde_json::to_string(&p).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), p);
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.batch_size, TrainConfig::desk().batch_size);
}

#[test]
fn mean_std_matches_direct_formula() {
    let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    assert_eq!(mean_std(&xs), (5.0, 2.0));
    assert_eq!(mean_std(&[3.5]), (3.5, 0.0));
}

#[test]
fn bench_structure() {
    let data = corpus(1, 2);
    let out = train(&TrainConfig { epochs: 1, ..tiny_train_config() }, &data).unwrap();
    let clusters: Vec<FiberCluster> = data.iter().map(|d| d.cluster.clone()).collect();
    assert!(matches!(
        bench(&out.checkpoint, &clusters, 1.0, 0, 0, 1),
        Err(BenchError::ZeroRepetitions)
    ));
    let one = bench(&out.checkpoint, &clusters[..1], 1.0, 1, 1, 1).unwrap();
    assert_eq!(one.neural.std_ms, 0.0);
    assert_eq!(one.oracle.std_ms, 0.0);
    assert!(one.neural.mean_ms > 0.0 && one.oracle.mean_ms > 0.0);

    let report = bench(&out.checkpoint, &clusters, 1.0, 3, 2, 1).unwrap();
    assert_eq!(report.neural.samples_ms.len(), 6);
    assert_eq!(mean_std(&report.oracle.samples_ms), (report.oracle.mean_ms, report.oracle.std_ms));
    assert_eq!(report.clusters.len(), 2);
    assert_eq!(report.clusters_csv().lines().count(), 3);
    assert!(report.to_table().contains("±"));
}
