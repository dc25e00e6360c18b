//! Trains the compact baseline and a Conv. Pooling model on a synthetic
//! cohort and scores both on a held-out cohort.

use multivisit::metrics::{auprc, auroc};
use multivisit::network::{BaselineConfig, FusionKind};
use multivisit::synthdata::{generate_cohort, load_sequences, CohortSpec, Manifest};
use multivisit::trainer::{score, train_from_config, TrainConfig};

fn cohort(name: &str, seed: u64) -> multivisit::Result<Manifest> {
    let spec = CohortSpec {
        name: name.into(),
        n_patients: 60,
        positive_rate: 0.5,
        seed,
        ..CohortSpec::default()
    };
    let dir = std::env::temp_dir().join(format!("multivisit-train-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    Manifest::read(&generate_cohort(&spec, &dir)?)
}

fn main() -> multivisit::Result<()> {
    let net = BaselineConfig::compact();
    let train = load_sequences(&cohort("train", 1)?, net.input_size)?;
    let test = load_sequences(&cohort("test", 2)?, net.input_size)?;

    for kind in [FusionKind::Baseline, FusionKind::ConvPooling] {
        let cfg = TrainConfig {
            epochs: 4,
            effective_batch_size: 8,
            learning_rate: 0.01,
            method: kind.into(),
            network: net.clone(),
            ..TrainConfig::default()
        };
        let outcome = train_from_config(&train, &cfg)?;
        for e in &outcome.log {
            println!("{} epoch {} loss {:.4}", kind.label(), e.epoch, e.mean_loss);
        }
        // the baseline sees only the latest visit of each sequence
        let eval: Vec<_> = match kind {
            FusionKind::Baseline => test.iter().map(|s| s.latest()).collect(),
            _ => test.clone(),
        };
        let scores = score(&outcome.network, &eval)?;
        println!("{}: test AUROC {:.3}, AUPRC {:.3}\n", kind.label(), auroc(&scores)?, auprc(&scores)?);
    }
    Ok(())
}
