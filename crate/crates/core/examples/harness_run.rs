//! A scaled-down experiment: baseline first vs latest visit, then every
//! fusion method against the baseline, on one multi-visit and one
//! single-visit test set. Writes the report and provenance to a temp dir.

use multivisit::harness::{self, CohortSource, ExperimentSpec, Format, MetricSettings, TestSetSpec};
use multivisit::network::BaselineConfig;
use multivisit::synthdata::Preset;
use multivisit::trainer::TrainConfig;

fn main() -> multivisit::Result<()> {
    let out = std::env::temp_dir().join("multivisit-harness");
    let _ = std::fs::remove_dir_all(&out);
    let mut spec: ExperimentSpec = serde_json::from_value(serde_json::json!({
        "train": {"generate": Preset::InternalTest.spec(60, 1)},
        "test_sets": [],
        "output_dir": out,
        "seed": 2024
    }))
    .expect("valid spec");
    spec.test_sets = vec![
        TestSetSpec {
            name: "silent-trial".into(),
            cohort: CohortSource::Generate(Preset::SilentTrial.spec(40, 2)),
        },
        TestSetSpec {
            name: "chop-like".into(),
            cohort: CohortSource::Generate(Preset::ChopLike.spec(40, 3)),
        },
    ];
    spec.training = TrainConfig {
        epochs: 3,
        effective_batch_size: 8,
        network: BaselineConfig::compact(),
        ..TrainConfig::default()
    };
    spec.metrics = MetricSettings {
        replicates: 1000,
        ..MetricSettings::default()
    };

    let output = harness::run(&spec)?;
    print!("{}", harness::render(&output.report, Format::Text)?);
    println!("\nartifacts in {}", out.display());
    Ok(())
}
