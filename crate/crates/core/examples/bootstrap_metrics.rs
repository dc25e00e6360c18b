//! AUROC and AUPRC with BCa intervals, resampling single kidneys and then
//! whole patients.

use multivisit::metrics::{bca_interval, BootstrapConfig, Metric, ScoredSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> multivisit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut scores, mut labels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for patient in 0..80 {
        let label = rng.gen_bool(0.3);
        let level: f64 = rng.gen::<f64>() + if label { 0.5 } else { 0.0 };
        for _kidney in 0..2 {
            scores.push(level + 0.2 * rng.gen::<f64>());
            labels.push(label);
            groups.push(format!("patient{patient}"));
        }
    }
    let set = ScoredSet::new(scores, labels)?.with_groups(groups)?;

    for grouped in [false, true] {
        let cfg = BootstrapConfig {
            replicates: 5000,
            seed: 1,
            grouped,
            ..BootstrapConfig::default()
        };
        for metric in [Metric::Auroc, Metric::Auprc] {
            let r = bca_interval(&set, metric, &cfg)?;
            println!("{:>9} {}: {}", if grouped { "patients" } else { "kidneys" }, metric.name(), r.formatted());
        }
    }
    Ok(())
}
