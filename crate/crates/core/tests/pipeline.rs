use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use multivisit::network::{BaselineConfig, FusionKind, FusionMethod, Network};
use multivisit::synthdata::{
    generate_cohort, load_sequences, split_by_patient, visit_histogram, CohortSpec, Manifest,
};
use multivisit::trainer::{predict, score, train_on_manifest, TrainConfig};

fn cohort(n_patients: usize, seed: u64, visits: &[(u32, f64)]) -> CohortSpec {
    CohortSpec {
        name: format!("c{seed}"),
        n_patients,
        positive_rate: 0.5,
        seed,
        visit_count_distribution: visits.iter().copied().collect(),
        ..CohortSpec::default()
    }
}

fn config(kind: FusionKind) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        effective_batch_size: 4,
        seed: 9,
        method: FusionMethod::new(kind),
        network: BaselineConfig::tiny(),
        ..TrainConfig::default()
    }
}

fn generate(dir: &Path, spec: &CohortSpec) -> Manifest {
    Manifest::read(&generate_cohort(spec, dir).unwrap()).unwrap()
}

#[test]
fn generate_split_train_predict() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), &cohort(12, 1, &[(1, 0.3), (2, 0.4), (3, 0.3)]));
    let (train, test) = split_by_patient(&m, 0.7, 2).unwrap();
    let train_ids: HashSet<String> = train.patients().into_iter().collect();
    assert!(test.patients().iter().all(|p| !train_ids.contains(p)));
    assert_eq!(train.patients().len() + test.patients().len(), 12);

    for kind in [FusionKind::ConvPooling, FusionKind::Lstm] {
        let outcome = train_on_manifest(&train, &config(kind)).unwrap();
        assert_eq!(outcome.log.len(), 2);
        assert!(outcome.log.iter().all(|e| e.mean_loss.is_finite()));
        let seqs = load_sequences(&test, 8).unwrap();
        let probs = predict(&outcome.network, &seqs).unwrap();
        assert_eq!(probs.len(), seqs.len());
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn saved_weights_reproduce_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), &cohort(6, 3, &[(2, 0.5), (3, 0.5)]));
    let cfg = config(FusionKind::Tsm);
    let net = train_on_manifest(&m, &cfg).unwrap().network;
    let path = dir.path().join("tsm.tflw");
    net.save(&path).unwrap();
    let loaded = Network::load(cfg.network.clone(), cfg.method, &path).unwrap();
    let seqs = load_sequences(&m, 8).unwrap();
    assert_eq!(predict(&net, &seqs).unwrap(), predict(&loaded, &seqs).unwrap());
    assert_eq!(net.card().weights_sha256, loaded.card().weights_sha256);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), &cohort(6, 4, &[(1, 0.5), (2, 0.5)]));
    let cfg = config(FusionKind::AvgPrediction);
    let a = train_on_manifest(&m, &cfg).unwrap();
    let b = train_on_manifest(&m, &cfg).unwrap();
    assert_eq!(a.network.card().weights_sha256, b.network.card().weights_sha256);
    let seqs = load_sequences(&m, 8).unwrap();
    assert_eq!(score(&a.network, &seqs).unwrap(), score(&b.network, &seqs).unwrap());
}

#[test]
fn regenerating_a_cohort_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = cohort(4, 5, &[(1, 0.5), (2, 0.5)]);
    let (ma, mb) = (generate(a.path(), &spec), generate(b.path(), &spec));
    assert_eq!(ma.records(), mb.records());
    for r in ma.records() {
        for p in [&r.sagittal_path, &r.transverse_path] {
            assert_eq!(std::fs::read(ma.resolve(p)).unwrap(), std::fs::read(mb.resolve(p)).unwrap());
        }
    }
}

#[test]
fn visit_histogram_matches_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = cohort(400, 6, &[(2, 0.5), (3, 0.5)]);
    spec.kidneys_per_patient = 1;
    spec.signal_strength = 0.0;
    let rows = visit_histogram(&generate(dir.path(), &spec));
    let counts: BTreeMap<usize, usize> = rows.iter().map(|r| (r.visit_count, r.n_negative + r.n_positive)).collect();
    assert_eq!(counts.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
    for n in counts.values() {
        assert!((*n as f64 / 400.0 - 0.5).abs() < 0.05, "{counts:?}");
    }
}
