use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_visit(size: usize, rng: &mut ChaCha8Rng) -> ViewPair {
    let mut img = || {
        let data = (0..size * size).map(|_| rng.gen::<f32>()).collect();
        Tensor::new(vec![1, size, size], data).unwrap()
    };
    ViewPair {
        sagittal: img(),
        transverse: img(),
    }
}

fn visits(n: usize, size: usize, seed: u64) -> Vec<ViewPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_visit(size, &mut rng)).collect()
}

fn compact(kind: FusionKind) -> Network {
    Network::init(BaselineConfig::compact(), kind).unwrap()
}

#[test]
fn default_shapes_give_1024_features() {
    let c = BaselineConfig::default();
    assert_eq!(c.final_side(), 2);
    assert_eq!(c.flat_features(), 1024);
    assert_eq!(2 * c.branch_out, 1024);
}

#[test]
fn parameter_count_matches_closed_form() {
    let c = BaselineConfig::default();
    let channels = [1, 16, 32, 64, 64, 128, 128, 256];
    let conv: usize = channels.windows(2).map(|w| w[1] * w[0] * 9 + w[1]).sum();
    let fc = (1024 * 512 + 512) + (1024 * 256 + 256) + (256 * 2 + 2);
    let base = Architecture::new(c.clone(), FusionKind::Baseline.into()).unwrap();
    assert_eq!(base.param_count(), conv + fc);
    assert_eq!(base.param_count(), 1_364_546);
    let lstm = Architecture::new(c, FusionKind::Lstm.into()).unwrap();
    let per_dir = 4 * 512 * 1024 + 4 * 512 * 512 + 4 * 512;
    assert_eq!(lstm.param_count(), conv + fc + 2 * per_dir);
}

#[test]
fn init_is_seeded() {
    let a = compact(FusionKind::Baseline);
    let b = compact(FusionKind::Baseline);
    assert_eq!(a.params, b.params);
    let other = Network::init(
        BaselineConfig {
            init_seed: 1,
            ..BaselineConfig::compact()
        },
        FusionKind::Baseline,
    )
    .unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn parameter_free_methods_share_the_baseline_layout() {
    let base = compact(FusionKind::Baseline);
    for kind in [FusionKind::AvgPrediction, FusionKind::ConvPooling, FusionKind::Tsm] {
        assert_eq!(compact(kind).params, base.params);
    }
    let lstm = compact(FusionKind::Lstm);
    assert_eq!(lstm.params.len(), base.params.len() + 6);
    for (name, t) in base.params.iter() {
        assert_eq!(lstm.params.by_name(name), Some(t));
    }
    let bias = lstm.params.by_name("lstm.fwd.bias").unwrap().data();
    let h = 32;
    assert!(bias[h..2 * h].iter().all(|&b| b == 1.0));
    assert!(bias[..h].iter().chain(&bias[2 * h..]).all(|&b| b == 0.0));
}

#[test]
fn view_order_matters() {
    let net = compact(FusionKind::Baseline);
    let v = visits(1, 32, 3);
    let swapped = ViewPair {
        sagittal: v[0].transverse.clone(),
        transverse: v[0].sagittal.clone(),
    };
    assert_ne!(net.logits_single(&v[0]).unwrap(), net.logits_single(&swapped).unwrap());
}

#[test]
fn zero_weights_give_even_odds() {
    let mut net = compact(FusionKind::Baseline);
    net.params.fill_zero();
    let logits = net.logits(&visits(1, 32, 1)).unwrap();
    assert_eq!(logits.data(), [0.0, 0.0]);
    assert_eq!(positive_probability(&logits), 0.5);
}

#[test]
fn shared_branch_on_identical_views() {
    let net = compact(FusionKind::Baseline);
    let mut v = visits(1, 32, 5);
    v[0].transverse = v[0].sagittal.clone();
    let mut tape = Tape::new();
    let f = net.arch.visit_features(&mut tape, &net.params, &v, None).unwrap();
    let d = tape.value(f[0]).data();
    let half = d.len() / 2;
    assert_eq!(d[..half], d[half..]);
}

#[test]
fn mean_of_logits() {
    let mut tape: Tape<f32> = Tape::new();
    let a = tape.input(Tensor::from_slice(&[2.0, 0.0]));
    let b = tape.input(Tensor::from_slice(&[0.0, 2.0]));
    let s = tape.stack(&[a, b]).unwrap();
    let m = tape.mean_rows(s).unwrap();
    assert_eq!(tape.value(m).data(), [1.0, 1.0]);
    assert_eq!(positive_probability(tape.value(m)), 0.5);
}

#[test]
fn single_visit_reduction_is_exact() {
    let base = compact(FusionKind::Baseline);
    for seed in 0..5 {
        let v = visits(1, 32, 100 + seed);
        let reference = base.logits_single(&v[0]).unwrap();
        for kind in [FusionKind::AvgPrediction, FusionKind::ConvPooling, FusionKind::Tsm] {
            let adapted = base.with_method(kind).unwrap();
            assert_eq!(adapted.logits(&v).unwrap(), reference, "{kind:?}");
        }
    }
}

#[test]
fn order_invariant_methods() {
    let v = visits(3, 32, 8);
    let permuted = vec![v[2].clone(), v[0].clone(), v[1].clone()];
    for kind in [FusionKind::AvgPrediction, FusionKind::ConvPooling] {
        let net = compact(kind);
        assert_eq!(net.logits(&v).unwrap(), net.logits(&permuted).unwrap(), "{kind:?}");
    }
}

#[test]
fn conv_pooling_ignores_duplicates() {
    let net = compact(FusionKind::ConvPooling);
    let v = visits(1, 32, 9);
    let doubled = vec![v[0].clone(), v[0].clone()];
    assert_eq!(net.logits(&v).unwrap(), net.logits(&doubled).unwrap());
}

#[test]
fn order_sensitive_methods() {
    let v = visits(3, 32, 10);
    let reversed: Vec<ViewPair> = v.iter().rev().cloned().collect();
    for kind in [FusionKind::Tsm, FusionKind::Lstm] {
        let net = compact(kind);
        assert_ne!(net.logits(&v).unwrap(), net.logits(&reversed).unwrap(), "{kind:?}");
    }
}

#[test]
fn tsm_without_shift_reads_the_latest_visit() {
    let net = Network::init(BaselineConfig::compact(), FusionMethod::new(FusionKind::Tsm).with_shift(0.0)).unwrap();
    let v = visits(3, 32, 11);
    assert_eq!(net.logits(&v).unwrap(), net.logits_single(&v[2]).unwrap());
}

#[test]
fn tsm_carries_earlier_visits_forward() {
    let net = compact(FusionKind::Tsm);
    let v = visits(2, 32, 12);
    let mut changed = v.clone();
    changed[0] = visits(1, 32, 13).remove(0);
    assert_ne!(net.logits(&v).unwrap(), net.logits(&changed).unwrap());
}

#[test]
fn zero_lstm_passes_a_zero_vector_to_the_head() {
    let mut net = compact(FusionKind::Lstm);
    for name in ["lstm.fwd.w_ih", "lstm.fwd.w_hh", "lstm.fwd.bias", "lstm.bwd.w_ih", "lstm.bwd.w_hh", "lstm.bwd.bias"] {
        let id = net.params.id(name).unwrap();
        net.params.get_mut(id).fill(0.0);
    }
    let mut tape = Tape::new();
    let zero = tape.input(Tensor::zeros(vec![64]));
    let expected = net.arch.head(&mut tape, &net.params, zero).unwrap();
    let expected = tape.value(expected).clone();
    for t in [1, 3] {
        assert_eq!(net.logits(&visits(t, 32, 14)).unwrap(), expected);
    }
}

#[test]
fn probability_from_logits() {
    assert_eq!(positive_probability(&Tensor::<f64>::from_slice(&[0.0, 0.0])), 0.5);
    let p = positive_probability(&Tensor::<f64>::from_slice(&[0.0, 3f64.ln()]));
    assert!((p - 0.75).abs() < 1e-15);
    assert!(positive_probability(&Tensor::<f64>::from_slice(&[0.0, 1.0])) < positive_probability(&Tensor::<f64>::from_slice(&[0.0, 1.5])));
}

#[test]
fn rejects_bad_inputs() {
    let net = compact(FusionKind::ConvPooling);
    assert!(net.logits(&[]).is_err());
    let wrong = visits(1, 16, 1);
    assert!(matches!(net.logits(&wrong), Err(Error::Shape { .. })));
    assert!(Architecture::new(
        BaselineConfig::compact(),
        FusionMethod {
            lstm_hidden: Some(7),
            ..FusionKind::Lstm.into()
        }
    )
    .is_err());
    assert!(compact(FusionKind::Baseline).with_method(FusionKind::Lstm).is_err());
}

#[test]
fn weights_round_trip_with_card() {
    let dir = tempfile::tempdir().unwrap();
    let net = compact(FusionKind::Lstm);
    let path = dir.path().join("w.tflw");
    net.save(&path).unwrap();
    let card = net.card();
    card.write(&dir.path().join("card.json")).unwrap();
    let card = ModelCard::read(&dir.path().join("card.json")).unwrap();
    let back = card.load_network(&path).unwrap();
    assert_eq!(back.params, net.params);
    assert_eq!(card.parameter_count, net.arch.param_count());
}

fn tiny_point(kind: FusionKind, seed: u64, steps: usize) -> (Architecture, Params<f64>, Vec<ViewPair<f64>>) {
    let config = BaselineConfig {
        init_seed: seed,
        ..BaselineConfig::tiny()
    };
    // with 2 channels, 1/8 would floor to no shift at all
    let arch = Architecture::new(config, FusionMethod::new(kind).with_shift(0.5)).unwrap();
    let mut params: Params<f64> = arch.init().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let v = visits(steps, 8, seed).iter().map(ViewPair::cast).collect();
    (arch, params, v)
}

#[test]
fn gradients_match_finite_differences() {
    use crate::autograd::{grad_check, GradCheckOptions};
    for kind in FusionKind::ALL {
        for seed in 0..2 {
            let (arch, params, v) = tiny_point(kind, seed, 3);
            let report = grad_check(&params, GradCheckOptions::default(), |tape, p| {
                let logits = arch.forward(tape, p, &v)?;
                tape.log_softmax_nll(logits, (seed % 2) as usize)
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-3, "{kind:?} seed {seed}: {report:?}");
        }
    }
}
