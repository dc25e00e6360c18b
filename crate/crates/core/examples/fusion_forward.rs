//! One set of baseline weights run through every fusion method on a
//! three-visit sequence of random images.

use multivisit::autograd::Tensor;
use multivisit::network::{BaselineConfig, FusionKind, Network, ViewPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> multivisit::Result<()> {
    let cfg = BaselineConfig::compact();
    let baseline = Network::init(cfg.clone(), FusionKind::Baseline)?;
    println!("baseline: {} parameters", baseline.card().parameter_count);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = cfg.input_size;
    let mut image = || Tensor::new([1, s, s], (0..s * s).map(|_| rng.gen::<f32>()).collect());
    let visits = (0..3)
        .map(|_| Ok(ViewPair { sagittal: image()?, transverse: image()? }))
        .collect::<multivisit::Result<Vec<_>>>()?;

    println!("latest visit alone: P(surgery) = {:.4}", baseline.predict_proba(&visits[2..])?);
    for kind in [FusionKind::AvgPrediction, FusionKind::ConvPooling, FusionKind::Tsm, FusionKind::Lstm] {
        // the LSTM keeps the baseline weights and adds fresh recurrent ones
        let net = if kind.has_extra_params() {
            Network::warm_start(cfg.clone(), kind, &baseline.params)?
        } else {
            baseline.with_method(kind)?
        };
        println!(
            "{:>16}: P(surgery) = {:.4}  ({} parameters)",
            kind.label(),
            net.predict_proba(&visits)?,
            net.card().parameter_count
        );
    }
    Ok(())
}
