use super::*;
use crate::network::{BaselineConfig, ViewPair};
use crate::synthdata::TrendAnchor;
use crate::autograd::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m(estimate: f64, lo: f64, hi: f64) -> MetricReport {
    MetricReport {
        metric: "AUROC".into(),
        estimate,
        ci_low: lo,
        ci_high: hi,
        n_bootstrap: 10_000,
        n_discarded: 0,
        seed: 7,
        z0: 0.0,
        acceleration: 0.0,
        grouped: false,
    }
}

#[test]
fn overlap_rule() {
    let base = m(0.80, 0.70, 0.88);
    assert_eq!(compare(&m(0.90, 0.85, 0.95), &base), Significance::Better);
    assert_eq!(compare(&m(0.65, 0.55, 0.75), &base), Significance::Worse);
    assert_eq!(compare(&m(0.84, 0.76, 0.90), &base), Significance::Indistinguishable);
    // inside the reference interval, but the reference lies outside its own
    assert_eq!(compare(&m(0.86, 0.83, 0.89), &base), Significance::Inconclusive);
    assert_eq!(compare(&m(0.88, 0.80, 0.95), &base), Significance::Indistinguishable);
}

fn table1_row() -> Report {
    let mut t = Table::new("t");
    t.rows.push(Row::new("Test", "Latest", Some(m(0.9269, 0.8441, 0.9673)), Some(m(0.7406, 0.4978, 0.8741))));
    Report { tables: vec![t] }
}

#[test]
fn percent_cells() {
    let r = table1_row();
    for f in [Format::Text, Format::Csv] {
        let s = render(&r, f).unwrap();
        assert!(s.contains("92.69 [84.41, 96.73]"), "{f:?}: {s}");
        assert!(s.contains("74.06 [49.78, 87.41]"), "{f:?}: {s}");
    }
}

#[test]
fn empty_report_is_header_only() {
    let empty = Report::default();
    assert_eq!(render(&empty, Format::Text).unwrap().lines().count(), 1);
    assert_eq!(
        render(&empty, Format::Csv).unwrap(),
        "table,dataset,model,auroc,auprc,top_auroc,top_auprc,auroc_vs_reference,auprc_vs_reference\n"
    );
    let back: Report = serde_json::from_str(&render(&empty, Format::Json).unwrap()).unwrap();
    assert_eq!(back, empty);
}

#[test]
fn csv_quotes_cells_with_commas() {
    let s = render(&table1_row(), Format::Csv).unwrap();
    assert!(s.lines().nth(1).unwrap().contains("\"92.69 [84.41, 96.73]\""));
}

#[test]
fn top_rows_per_dataset() {
    let mut t = Table::new("t");
    t.rows.push(Row::new("a", "x", Some(m(0.7, 0.6, 0.8)), Some(m(0.5, 0.4, 0.6))));
    t.rows.push(Row::new("a", "y", Some(m(0.9, 0.8, 1.0)), Some(m(0.5, 0.4, 0.6))));
    t.rows.push(Row::new("b", "x", Some(m(0.6, 0.5, 0.7)), None));
    t.mark_top();
    let flags: Vec<(bool, bool)> = t.rows.iter().map(|r| (r.top_auroc, r.top_auprc)).collect();
    assert_eq!(flags, [(false, true), (true, true), (true, false)]);
}

fn arb_metric() -> impl Strategy<Value = Option<MetricReport>> {
    proptest::option::of((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, any::<u64>(), -3.0..3.0f64).prop_map(
        |(a, b, c, seed, z0)| MetricReport {
            seed,
            z0,
            acceleration: z0 / 7.0,
            ..m(a, a.min(b).min(c), a.max(b).max(c))
        },
    ))
}

proptest! {
    #[test]
    fn json_round_trip(rows in proptest::collection::vec(("[a-z]{1,6}", "[A-Za-z .()]{1,12}", arb_metric(), arb_metric()), 0..6)) {
        let mut t = Table::new("results");
        let mut reference: Option<Row> = None;
        for (d, model, a, p) in rows {
            let mut row = Row::new(d, model, a, p);
            match &reference {
                Some(r) => row.compare_to(r),
                None => reference = Some(row.clone()),
            }
            t.rows.push(row);
        }
        t.mark_top();
        t.notes.push("a note".into());
        let report = Report { tables: vec![t] };
        let back: Report = serde_json::from_str(&render(&report, Format::Json).unwrap()).unwrap();
        prop_assert_eq!(back, report);
    }
}

fn random_sequences(rng: &mut ChaCha8Rng, n: usize, max_visits: usize, size: usize) -> Vec<LoadedSequence> {
    (0..n)
        .map(|i| {
            let visits = rng.gen_range(1..=max_visits);
            let mut img = || {
                let data = (0..size * size).map(|_| rng.gen::<f32>()).collect();
                Tensor::new(vec![1, size, size], data).unwrap()
            };
            LoadedSequence {
                key: format!("p{i}/left"),
                patient_id: format!("p{i}"),
                label: i % 3 == 0,
                visits: (0..visits)
                    .map(|_| ViewPair {
                        sagittal: img(),
                        transverse: img(),
                    })
                    .collect(),
            }
        })
        .collect()
}

fn quick_boot() -> BootstrapConfig {
    BootstrapConfig {
        replicates: 200,
        ..BootstrapConfig::default()
    }
}

fn compact_baseline() -> Network {
    Network::init(BaselineConfig::compact(), FusionKind::Baseline).unwrap()
}

#[test]
fn first_vs_latest_skips_single_visit_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = compact_baseline();
    let tests = vec![
        TestSet {
            name: "multi".into(),
            sequences: random_sequences(&mut rng, 12, 3, 32),
        },
        TestSet {
            name: "single".into(),
            sequences: random_sequences(&mut rng, 12, 1, 32),
        },
    ];
    let table = experiment_first_vs_latest(&base, &tests, &quick_boot()).unwrap();
    let models: Vec<(&str, &str)> = table.rows.iter().map(|r| (r.dataset.as_str(), r.model.as_str())).collect();
    assert_eq!(models, [("multi", "First"), ("multi", "Latest")]);
    assert!(table.notes[0].starts_with("single excluded"));
    assert_eq!(table.rows[1].reference.as_deref(), Some("First"));

    assert!(experiment_first_vs_latest(&base, &tests[1..], &quick_boot()).is_err());
    let lstm = Network::init(BaselineConfig::compact(), FusionKind::Lstm).unwrap();
    assert!(experiment_first_vs_latest(&lstm, &tests, &quick_boot()).is_err());
}

#[test]
fn fusion_compare_rows_and_single_visit_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = compact_baseline();
    let tests = vec![
        TestSet {
            name: "multi".into(),
            sequences: random_sequences(&mut rng, 12, 3, 32),
        },
        TestSet {
            name: "single".into(),
            sequences: random_sequences(&mut rng, 12, 1, 32),
        },
    ];
    let models: Vec<(MethodSpec, Network)> = default_methods()
        .into_iter()
        .map(|spec| {
            let net = if spec.is_adapted() {
                base.with_method(spec.method).unwrap()
            } else {
                Network::init(BaselineConfig::compact(), spec.method).unwrap()
            };
            (spec, net)
        })
        .collect();
    let table = experiment_fusion_compare(&base, &models, &tests, &quick_boot()).unwrap();
    let labels = |d: &str| table.rows.iter().filter(|r| r.dataset == d).map(|r| r.model.clone()).collect::<Vec<_>>();
    assert_eq!(
        labels("multi"),
        [
            "Baseline",
            "(Pretrained) Avg. Prediction",
            "(Pretrained) Conv. Pooling",
            "(Pretrained) TSM",
            "Avg. Prediction",
            "Conv. Pooling",
            "LSTM",
            "TSM"
        ]
    );
    assert_eq!(labels("single"), ["Baseline", "Avg. Prediction", "Conv. Pooling", "LSTM", "TSM"]);
    assert!(table.rows.iter().skip(1).filter(|r| r.model != "Baseline").all(|r| r.reference.as_deref() == Some("Baseline")));
    assert_eq!(table.notes.len(), 1);

    // on single visits an adapted model is the baseline, down to the bit
    let adapted = base.with_method(FusionKind::ConvPooling).unwrap();
    assert_eq!(
        evaluate(&adapted, &tests[1].sequences, &quick_boot()).unwrap(),
        evaluate(&base, &tests[1].sequences, &quick_boot()).unwrap()
    );
}

#[test]
fn method_labels_and_slugs() {
    let s = MethodSpec::new(FusionKind::ConvPooling, true);
    assert_eq!((s.label().as_str(), s.slug().as_str()), ("(Pretrained) Conv. Pooling", "pretrained-conv-pooling"));
    assert_eq!(MethodSpec::new(FusionKind::AvgPrediction, false).slug(), "avg-prediction");
}

fn tiny_spec(out: &Path) -> ExperimentSpec {
    let cohort = |name: &str, seed, visits: &[(u32, f64)]| CohortSpec {
        name: name.into(),
        n_patients: 8,
        positive_rate: 0.5,
        seed,
        visit_count_distribution: visits.iter().copied().collect(),
        temporal_signal: 0.1,
        trend_anchor: TrendAnchor::First,
        ..CohortSpec::default()
    };
    ExperimentSpec {
        train: CohortSource::Generate(cohort("tr", 1, &[(1, 0.5), (2, 0.5)])),
        test_sets: vec![
            TestSetSpec {
                name: "multi".into(),
                cohort: CohortSource::Generate(cohort("te", 2, &[(2, 0.5), (3, 0.5)])),
            },
            TestSetSpec {
                name: "single".into(),
                cohort: CohortSource::Generate(cohort("sv", 3, &[(1, 1.0)])),
            },
        ],
        methods: default_methods(),
        experiments: default_experiments(),
        training: TrainConfig {
            epochs: 1,
            effective_batch_size: 4,
            network: BaselineConfig::tiny(),
            ..TrainConfig::default()
        },
        baseline_weights: None,
        metrics: MetricSettings {
            replicates: 100,
            ..MetricSettings::default()
        },
        output_dir: out.to_path_buf(),
        seed: 5,
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run(&tiny_spec(&a)).unwrap();
    let rb = run(&tiny_spec(&b)).unwrap();
    assert_eq!(ra.report, rb.report);
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        if !name.starts_with("logs") {
            assert!(tb[name] == *bytes, "{name} differs");
        }
    }
    for f in ["report.txt", "report.csv", "report.json", "provenance.json", "histogram_train.csv", "weights/baseline.tflw"] {
        assert!(ta.contains_key(f), "{f} missing");
    }
    assert!(ta.keys().any(|k| k.starts_with("data/multi/images/")));
    assert_eq!(read_report(&a.join("report.json")).unwrap(), ra.report);
    // the adapted models reuse the baseline weights
    let baseline_sha = &ra.provenance.models[0].weights_sha256;
    let adapted: Vec<_> = ra.provenance.models.iter().filter(|m| m.weights.is_none()).collect();
    assert_eq!(adapted.len(), 3);
    assert!(adapted.iter().all(|m| &m.weights_sha256 == baseline_sha));
}

#[test]
fn overlapping_test_patients_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.test_sets[0].cohort = spec.train.clone();
    let err = run(&spec).unwrap_err();
    assert!(err.to_string().contains("shares"), "{err}");
}

#[test]
fn missing_baseline_weights_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.baseline_weights = Some(dir.path().join("absent.tflw"));
    assert!(matches!(run(&spec), Err(Error::Io { .. })));
}

#[test]
fn spec_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.test_sets[1].name = "multi".into();
    assert!(spec.validate().is_err());
    let mut spec = tiny_spec(dir.path());
    spec.methods.push(MethodSpec::new(FusionKind::Baseline, false));
    assert!(spec.validate().is_err());
    let text = serde_json::to_string(&tiny_spec(dir.path())).unwrap();
    let back: ExperimentSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, tiny_spec(dir.path()));
}
