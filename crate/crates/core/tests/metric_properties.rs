use multivisit::metrics::{auprc, auroc, bca_interval, BootstrapConfig, Metric, ScoredSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            proptest::collection::vec(prop_oneof![0.0..1.0f64, (0u8..5).prop_map(|k| k as f64 / 4.0)], n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auroc_ignores_increasing_transforms((scores, labels) in scored_set()) {
        let a = auroc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let b = auroc(&ScoredSet::new(warped, labels).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn auroc_symmetric_under_flip_and_negate((scores, labels) in scored_set()) {
        let a = auroc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let b = auroc(&ScoredSet::new(scores.iter().map(|s| -s).collect(), labels.iter().map(|l| !l).collect()).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_stay_in_unit_interval((scores, labels) in scored_set()) {
        let s = ScoredSet::new(scores, labels).unwrap();
        let (a, p) = (auroc(&s).unwrap(), auprc(&s).unwrap());
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&p));
    }

    #[test]
    fn interval_is_ordered((scores, labels) in scored_set(), seed in any::<u64>()) {
        let s = ScoredSet::new(scores, labels).unwrap();
        let cfg = BootstrapConfig { replicates: 300, seed, ..BootstrapConfig::default() };
        if let Ok(r) = bca_interval(&s, Metric::Auroc, &cfg) {
            prop_assert!(r.ci_low <= r.ci_high);
            prop_assert_eq!(r.n_bootstrap, 300);
        }
    }
}

#[test]
fn single_class_is_undefined() {
    let s = ScoredSet::new(vec![0.1, 0.2], vec![true, true]).unwrap();
    assert!(auroc(&s).is_err());
    assert_eq!(auprc(&s).unwrap(), 1.0);
    let none = ScoredSet::new(vec![0.1, 0.2], vec![false, false]).unwrap();
    assert!(auprc(&none).is_err());
}

#[test]
fn random_scores_give_prevalence_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for prevalence in [0.1, 0.3, 0.6] {
        let n = 2000;
        let labels: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < prevalence).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let observed = labels.iter().filter(|&&l| l).count() as f64 / n as f64;
        let ap = auprc(&ScoredSet::new(scores, labels).unwrap()).unwrap();
        assert!((ap - observed).abs() < 0.05, "prevalence {observed}, AP {ap}");
    }
}

#[test]
fn grouped_interval_is_wider_for_clustered_data() {
    // patients contribute two near-identical kidneys, so per-kidney resampling
    // overstates the sample size
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut scores, mut labels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..60 {
        let label = p % 2 == 0;
        let s = rng.gen::<f64>() + if label { 0.3 } else { 0.0 };
        for k in 0..2 {
            scores.push(s + 1e-3 * k as f64);
            labels.push(label);
            groups.push(format!("p{p}"));
        }
    }
    let set = ScoredSet::new(scores, labels).unwrap().with_groups(groups).unwrap();
    let cfg = BootstrapConfig {
        replicates: 2000,
        seed: 1,
        ..BootstrapConfig::default()
    };
    let plain = bca_interval(&set, Metric::Auroc, &cfg).unwrap();
    let grouped = bca_interval(&set, Metric::Auroc, &BootstrapConfig { grouped: true, ..cfg }).unwrap();
    assert_eq!(plain.estimate, grouped.estimate);
    assert!(grouped.ci_high - grouped.ci_low > plain.ci_high - plain.ci_low);
}
