//! The two experiments: single-visit inference on first versus latest
//! visits, and the baseline against every temporal fusion method. A run
//! trains the models, evaluates every test set and writes the report,
//! visit histograms and a provenance record.

mod report;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{compare, read_report, render, render_table, Format, Report, Row, Significance, Table};

use crate::autograd::serialize;
use crate::error::{Error, Result};
use crate::metrics::{bca_interval, BootstrapConfig, Metric, MetricReport, ScoredSet};
use crate::network::card::sha256_hex;
use crate::network::{FusionKind, FusionMethod, Network};
use crate::rng::derive_seed;
use crate::synthdata::{
    generate_cohort, histogram_csv, load_sequences, visit_histogram, CohortSpec, LoadedSequence, Manifest,
};
use crate::trainer::{self, write_log, TrainConfig, TrainOutcome};

/// Where a cohort comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortSource {
    /// An existing manifest.
    Manifest(PathBuf),
    /// A synthetic cohort rendered into the run's output directory.
    Generate(CohortSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSetSpec {
    pub name: String,
    pub cohort: CohortSource,
}

/// One model to compare against the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: FusionMethod,
    /// Start from the trained baseline weights. Parameter-free methods then
    /// are evaluated without further training.
    #[serde(default)]
    pub pretrained: bool,
}

impl MethodSpec {
    pub fn new(kind: FusionKind, pretrained: bool) -> Self {
        Self {
            method: kind.into(),
            pretrained,
        }
    }

    /// Evaluated with the baseline weights as they are.
    pub fn is_adapted(&self) -> bool {
        self.pretrained && !self.method.kind.has_extra_params()
    }

    pub fn label(&self) -> String {
        if self.pretrained {
            format!("(Pretrained) {}", self.method.kind.label())
        } else {
            self.method.kind.label().to_string()
        }
    }

    /// File-name form of the label.
    pub fn slug(&self) -> String {
        let kind = self.method.kind.label().to_ascii_lowercase().replace(". ", "-").replace(' ', "-");
        if self.pretrained {
            format!("pretrained-{kind}")
        } else {
            kind
        }
    }
}

/// The comparison rows in table order: three adapted baselines, then the
/// four retrained methods.
pub fn default_methods() -> Vec<MethodSpec> {
    use FusionKind::*;
    let mut v: Vec<MethodSpec> = [AvgPrediction, ConvPooling, Tsm].map(|k| MethodSpec::new(k, true)).to_vec();
    v.extend([AvgPrediction, ConvPooling, Lstm, Tsm].map(|k| MethodSpec::new(k, false)));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FirstVsLatest,
    FusionCompare,
}

/// Bootstrap settings; the seed comes from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub replicates: usize,
    pub alpha: f64,
    /// Resample patients instead of kidneys.
    #[serde(default)]
    pub grouped: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        let d = BootstrapConfig::default();
        Self {
            replicates: d.replicates,
            alpha: d.alpha,
            grouped: d.grouped,
        }
    }
}

fn default_experiments() -> Vec<Experiment> {
    vec![Experiment::FirstVsLatest, Experiment::FusionCompare]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub train: CohortSource,
    pub test_sets: Vec<TestSetSpec>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_experiments")]
    pub experiments: Vec<Experiment>,
    /// Optimizer and network settings shared by every model. The method,
    /// seed and pretrained weights are set per model by the harness.
    #[serde(default)]
    pub training: TrainConfig,
    /// Use these baseline weights instead of training a baseline.
    #[serde(default)]
    pub baseline_weights: Option<PathBuf>,
    #[serde(default)]
    pub metrics: MetricSettings,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_sets.is_empty() {
            return Err(Error::invalid("experiment has no test sets"));
        }
        let mut names = HashSet::new();
        for t in &self.test_sets {
            if t.name == TRAIN_NAME || !names.insert(t.name.as_str()) {
                return Err(Error::invalid(format!("test set name {:?} is reserved or repeated", t.name)));
            }
            if t.name.is_empty() || t.name.contains(['/', '\\']) {
                return Err(Error::invalid(format!("test set name {:?} is not a plain name", t.name)));
            }
        }
        if self.methods.iter().any(|m| m.method.kind == FusionKind::Baseline) {
            return Err(Error::invalid("the baseline is always evaluated; do not list it under methods"));
        }
        self.training.validate()
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.metrics.replicates,
            alpha: self.metrics.alpha,
            seed: derive_seed(self.seed, &[STREAM_BOOTSTRAP]),
            grouped: self.metrics.grouped,
        }
    }

    /// Training settings of model `index` (0 is the baseline, then the
    /// methods in order).
    pub fn train_config(&self, method: FusionMethod, index: usize) -> TrainConfig {
        let seed = derive_seed(self.seed, &[STREAM_TRAIN, index as u64]);
        let mut cfg = self.training.clone();
        cfg.method = method;
        cfg.seed = seed;
        cfg.network.init_seed = seed;
        cfg.pretrained_weights = None;
        cfg
    }
}

const TRAIN_NAME: &str = "train";
const STREAM_TRAIN: u64 = 41;
const STREAM_BOOTSTRAP: u64 = 42;

/// A test set in memory.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub name: String,
    pub sequences: Vec<LoadedSequence>,
}

impl TestSet {
    pub fn is_single_visit(&self) -> bool {
        self.sequences.iter().all(|s| s.visits.len() == 1)
    }
}

fn metric_or_none(set: &ScoredSet, metric: Metric, cfg: &BootstrapConfig) -> Result<Option<MetricReport>> {
    match bca_interval(set, metric, cfg) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UndefinedMetric(reason)) => {
            log::warn!("{} undefined: {reason}", metric.name());
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// AUROC and AUPRC with intervals of `network` on `sequences`.
pub fn evaluate(
    network: &Network,
    sequences: &[LoadedSequence],
    cfg: &BootstrapConfig,
) -> Result<(Option<MetricReport>, Option<MetricReport>)> {
    let scored = trainer::score(network, sequences)?;
    Ok((metric_or_none(&scored, Metric::Auroc, cfg)?, metric_or_none(&scored, Metric::Auprc, cfg)?))
}

fn require_baseline(baseline: &Network) -> Result<()> {
    if baseline.method().kind != FusionKind::Baseline {
        return Err(Error::invalid(format!(
            "expected baseline weights, got a {} network",
            baseline.method().kind.label()
        )));
    }
    Ok(())
}

pub const FIRST_VS_LATEST_TITLE: &str = "Single-visit baseline on first vs latest visit";
pub const FUSION_TITLE: &str = "Single-visit vs multi-visit models";

/// Evaluates the baseline on each sequence's first and on its latest visit.
/// Test sets without any multi-visit sequence are left out with a note.
pub fn experiment_first_vs_latest(baseline: &Network, tests: &[TestSet], cfg: &BootstrapConfig) -> Result<Table> {
    require_baseline(baseline)?;
    let mut table = Table::new(FIRST_VS_LATEST_TITLE);
    let used: Vec<&TestSet> = tests.iter().filter(|t| !t.is_single_visit()).collect();
    for t in tests.iter().filter(|t| t.is_single_visit()) {
        log::info!("{}: only single-visit sequences, excluded from first vs latest", t.name);
        table.notes.push(format!("{} excluded: every sequence has a single visit", t.name));
    }
    if used.is_empty() {
        return Err(Error::invalid("first vs latest needs a test set with multi-visit sequences"));
    }
    let jobs: Vec<(usize, bool)> = (0..used.len()).flat_map(|t| [(t, false), (t, true)]).collect();
    let results = jobs
        .par_iter()
        .map(|&(t, latest)| {
            let seqs: Vec<LoadedSequence> = used[t]
                .sequences
                .iter()
                .map(|s| if latest { s.latest() } else { s.first() })
                .collect();
            evaluate(baseline, &seqs, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    for (t, pair) in results.chunks(2).enumerate() {
        let first = Row::new(&used[t].name, "First", pair[0].0.clone(), pair[0].1.clone());
        let mut latest = Row::new(&used[t].name, "Latest", pair[1].0.clone(), pair[1].1.clone());
        latest.compare_to(&first);
        table.rows.extend([first, latest]);
    }
    Ok(table)
}

/// Evaluates the baseline (on each latest visit) and every model in
/// `models` on whole sequences. Adapted pretrained models are left out on
/// single-visit test sets, where they coincide with the baseline.
pub fn experiment_fusion_compare(
    baseline: &Network,
    models: &[(MethodSpec, Network)],
    tests: &[TestSet],
    cfg: &BootstrapConfig,
) -> Result<Table> {
    require_baseline(baseline)?;
    let mut table = Table::new(FUSION_TITLE);
    // (test set, model index; None is the baseline)
    let mut jobs: Vec<(usize, Option<usize>)> = Vec::new();
    for (t, set) in tests.iter().enumerate() {
        jobs.push((t, None));
        let single = set.is_single_visit();
        if single && models.iter().any(|(m, _)| m.is_adapted()) {
            table.notes.push(format!(
                "{}: adapted pretrained models omitted, they equal the baseline on single visits",
                set.name
            ));
        }
        jobs.extend((0..models.len()).filter(|&m| !(single && models[m].0.is_adapted())).map(|m| (t, Some(m))));
    }
    let results = jobs
        .par_iter()
        .map(|&(t, m)| match m {
            None => {
                let latest: Vec<LoadedSequence> = tests[t].sequences.iter().map(LoadedSequence::latest).collect();
                evaluate(baseline, &latest, cfg)
            }
            Some(m) => evaluate(&models[m].1, &tests[t].sequences, cfg),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reference: Option<Row> = None;
    for (&(t, m), (auroc, auprc)) in jobs.iter().zip(results) {
        let label = m.map_or_else(|| "Baseline".to_string(), |m| models[m].0.label());
        let mut row = Row::new(&tests[t].name, label, auroc, auprc);
        match &reference {
            Some(r) if m.is_some() => row.compare_to(r),
            _ => reference = Some(row.clone()),
        }
        table.rows.push(row);
    }
    table.mark_top();
    Ok(table)
}

/// Hashes and seeds that identify a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub bootstrap_seed: u64,
    /// SHA-256 of the experiment spec as JSON, without its output directory.
    pub spec_sha256: String,
    pub training_sha256: String,
    /// Manifest SHA-256 per cohort.
    pub manifests: BTreeMap<String, String>,
    pub models: Vec<ModelProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub label: String,
    /// Weight file, relative to the output directory.
    pub weights: Option<String>,
    pub weights_sha256: String,
    /// `None` when the weights were not trained in this run.
    pub train_seed: Option<u64>,
}

fn json_sha256<T: Serialize>(value: &T, what: &str) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value).map_err(|e| Error::json(what.to_string(), e))?))
}

/// Everything a run produced, also written to its output directory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: Report,
    pub provenance: Provenance,
}

struct Cohort {
    name: String,
    manifest: Manifest,
    sha256: String,
}

fn materialize(name: &str, source: &CohortSource, out: &Path) -> Result<Cohort> {
    let path = match source {
        CohortSource::Manifest(p) => p.clone(),
        CohortSource::Generate(spec) => {
            let dir = out.join("data").join(name);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            generate_cohort(spec, &dir)?
        }
    };
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Cohort {
        name: name.to_string(),
        manifest: Manifest::read(&path)?,
        sha256: sha256_hex(&bytes),
    })
}

fn check_disjoint(train: &Cohort, test: &Cohort) -> Result<()> {
    let train_ids: HashSet<String> = train.manifest.patients().into_iter().collect();
    let shared: Vec<String> = test.manifest.patients().into_iter().filter(|p| train_ids.contains(p)).collect();
    if !shared.is_empty() {
        return Err(Error::invalid(format!(
            "test set {} shares {} patient(s) with the training set, e.g. {}",
            test.name,
            shared.len(),
            shared[0]
        )));
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_model(out: &Path, slug: &str, network: &Network, train_seed: Option<u64>) -> Result<(String, String)> {
    let rel = format!("weights/{slug}.tflw");
    let bytes = serialize::encode(&network.params);
    write_file(&out.join(&rel), &bytes)?;
    let mut card = network.card();
    card.train_seed = train_seed;
    card.write(&out.join(format!("weights/{slug}.card.json")))?;
    Ok((rel, sha256_hex(&bytes)))
}

/// Runs the experiment end to end. Outputs under `spec.output_dir`:
/// `report.{txt,csv,json}`, `provenance.json`, `histogram_<cohort>.csv`,
/// `weights/`, `logs/` and, for generated cohorts, `data/`.
///
/// Everything except the training logs, which hold wall-clock times, is a
/// function of the spec alone.
pub fn run(spec: &ExperimentSpec) -> Result<RunOutput> {
    spec.validate()?;
    let out = &spec.output_dir;
    for sub in ["weights", "logs"] {
        std::fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }

    let train = materialize(TRAIN_NAME, &spec.train, out)?;
    let tests: Vec<Cohort> = spec
        .test_sets
        .iter()
        .map(|t| materialize(&t.name, &t.cohort, out))
        .collect::<Result<_>>()?;
    for t in &tests {
        check_disjoint(&train, t)?;
    }
    for c in std::iter::once(&train).chain(&tests) {
        write_file(&out.join(format!("histogram_{}.csv", c.name)), histogram_csv(&visit_histogram(&c.manifest)))?;
    }

    let size = spec.training.network.input_size;
    let train_seqs = load_sequences(&train.manifest, size)?;
    let test_sets: Vec<TestSet> = tests
        .iter()
        .map(|c| {
            Ok(TestSet {
                name: c.name.clone(),
                sequences: load_sequences(&c.manifest, size)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut models_prov = Vec::new();
    let baseline_cfg = spec.train_config(FusionKind::Baseline.into(), 0);
    let baseline = match &spec.baseline_weights {
        Some(path) => {
            let params = serialize::load(path)?;
            let net = Network::from_params(spec.training.network.clone(), FusionKind::Baseline, params)?;
            let (rel, sha) = save_model(out, "baseline", &net, None)?;
            models_prov.push(ModelProvenance {
                label: "Baseline".into(),
                weights: Some(rel),
                weights_sha256: sha,
                train_seed: None,
            });
            net
        }
        None => {
            let outcome = trainer::train_from_config(&train_seqs, &baseline_cfg)?;
            write_log(&out.join("logs/baseline.jsonl"), &outcome.log)?;
            let (rel, sha) = save_model(out, "baseline", &outcome.network, Some(baseline_cfg.seed))?;
            models_prov.push(ModelProvenance {
                label: "Baseline".into(),
                weights: Some(rel),
                weights_sha256: sha,
                train_seed: Some(baseline_cfg.seed),
            });
            outcome.network
        }
    };

    let trained: Vec<(MethodSpec, TrainOutcome, TrainConfig)> = spec
        .methods
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let cfg = spec.train_config(m.method, i + 1);
            let outcome = if m.pretrained {
                trainer::train_from_pretrained(&train_seqs, &cfg, &baseline.params)?
            } else {
                trainer::train_from_config(&train_seqs, &cfg)?
            };
            Ok((m.clone(), outcome, cfg))
        })
        .collect::<Result<_>>()?;
    let mut models = Vec::new();
    for (m, outcome, cfg) in trained {
        if outcome.skipped {
            models_prov.push(ModelProvenance {
                label: m.label(),
                weights: None,
                weights_sha256: sha256_hex(&serialize::encode(&outcome.network.params)),
                train_seed: None,
            });
        } else {
            write_log(&out.join(format!("logs/{}.jsonl", m.slug())), &outcome.log)?;
            let (rel, sha) = save_model(out, &m.slug(), &outcome.network, Some(cfg.seed))?;
            models_prov.push(ModelProvenance {
                label: m.label(),
                weights: Some(rel),
                weights_sha256: sha,
                train_seed: Some(cfg.seed),
            });
        }
        models.push((m, outcome.network));
    }

    let boot = spec.bootstrap();
    let mut report = Report::default();
    for e in &spec.experiments {
        report.tables.push(match e {
            Experiment::FirstVsLatest => experiment_first_vs_latest(&baseline, &test_sets, &boot)?,
            Experiment::FusionCompare => experiment_fusion_compare(&baseline, &models, &test_sets, &boot)?,
        });
    }
    for format in Format::ALL {
        render_table(&report, format, &out.join(format!("report.{}", format.extension())))?;
    }

    let provenance = Provenance {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: spec.seed,
        bootstrap_seed: boot.seed,
        spec_sha256: json_sha256(
            &ExperimentSpec {
                output_dir: PathBuf::new(),
                ..spec.clone()
            },
            "experiment spec",
        )?,
        training_sha256: json_sha256(&spec.training, "training config")?,
        manifests: std::iter::once(&train)
            .chain(&tests)
            .map(|c| (c.name.clone(), c.sha256.clone()))
            .collect(),
        models: models_prov,
    };
    let mut text = serde_json::to_string_pretty(&provenance).map_err(|e| Error::json("provenance", e))?;
    text.push('\n');
    write_file(&out.join("provenance.json"), text)?;
    Ok(RunOutput { report, provenance })
}

#[cfg(test)]
mod tests;
