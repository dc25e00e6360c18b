use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use multivisit::harness::{self, ExperimentSpec};
use multivisit::metrics::{bca_interval, BootstrapConfig, Metric, ScoredSet};
use multivisit::synthdata::{
    generate_cohort, histogram_csv, kfold_by_patient, split_by_patient, visit_histogram, CohortSpec, Manifest, Preset,
};
use multivisit::trainer::{random_grid_search_cv, train_on_manifest, write_log, SearchSpace, TrainConfig};
use multivisit::{Error, Result};

#[derive(Parser)]
#[command(name = "multivisit", version, about = "Multi-visit kidney ultrasound classifiers on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic cohorts and patient-level splits.
    #[command(subcommand)]
    Synth(Synth),
    /// Train one model on a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Randomized grid search with patient-level k-fold cross-validation.
    Search {
        #[arg(long)]
        space: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        manifest: PathBuf,
        /// Settings not covered by the search space.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes the full result as JSON; the best config goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ranking metrics.
    #[command(subcommand)]
    Metrics(Metrics),
    /// Experiment runs.
    #[command(subcommand)]
    Harness(HarnessCmd),
}

#[derive(Subcommand)]
enum Synth {
    /// Render a cohort and write its manifest.
    Generate {
        /// Cohort spec as JSON.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        /// internal-test, silent-trial, stanford-like or chop-like.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 100)]
        n_patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split patients into train and test manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write k train/validation manifest pairs.
    Kfold {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequences per visit count and label, as CSV.
    Hist {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Metrics {
    /// AUROC and AUPRC with BCa intervals for a JSON Lines score file
    /// (`{"score": .., "label": .., "group": ..}` per line, group optional).
    Eval(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long = "B", default_value_t = 10_000)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Resample groups instead of single examples.
    #[arg(long)]
    grouped: bool,
}

#[derive(Subcommand)]
enum HarnessCmd {
    /// Train, evaluate and write the report for an experiment spec.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Deserialize)]
struct ScoreLine {
    score: f64,
    label: bool,
    #[serde(default)]
    group: Option<String>,
}

fn read_scores(path: &Path) -> Result<ScoredSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = Vec::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line: ScoreLine = serde_json::from_str(l).map_err(|e| Error::Json {
            context: format!("{} line {}", path.display(), i + 1),
            source: e,
        })?;
        lines.push(line);
    }
    let set = ScoredSet::new(lines.iter().map(|l| l.score).collect(), lines.iter().map(|l| l.label).collect())?;
    if lines.iter().all(|l| l.group.is_some()) && !lines.is_empty() {
        set.with_groups(lines.into_iter().map(|l| l.group.expect("checked")).collect())
    } else {
        Ok(set)
    }
}

fn synth(cmd: Synth) -> Result<()> {
    match cmd {
        Synth::Generate {
            spec,
            preset,
            n_patients,
            seed,
            out,
        } => {
            let spec: CohortSpec = match (spec, preset) {
                (Some(path), _) => read_json(&path)?,
                (None, Some(name)) => {
                    let p = Preset::ALL
                        .into_iter()
                        .find(|p| p.name() == name)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {name:?}")))?;
                    p.spec(n_patients, seed)
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let manifest = generate_cohort(&spec, &out)?;
            println!("{}", manifest.display());
        }
        Synth::Split {
            manifest,
            train_fraction,
            seed,
            out,
        } => {
            let m = Manifest::read(&manifest)?;
            let (train, test) = split_by_patient(&m, train_fraction, seed)?;
            create_dir(&out)?;
            train.write(&out.join("train.jsonl"))?;
            test.write(&out.join("test.jsonl"))?;
            println!("train {} patients, test {} patients", train.patients().len(), test.patients().len());
        }
        Synth::Kfold { manifest, k, seed, out } => {
            let m = Manifest::read(&manifest)?;
            create_dir(&out)?;
            for (i, (train, val)) in kfold_by_patient(&m, k, seed)?.iter().enumerate() {
                train.write(&out.join(format!("fold{i}_train.jsonl")))?;
                val.write(&out.join(format!("fold{i}_val.jsonl")))?;
            }
        }
        Synth::Hist { manifest, out } => {
            let csv = histogram_csv(&visit_histogram(&Manifest::read(&manifest)?));
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(cmd) => synth(cmd)?,
        Command::Train {
            config,
            manifest,
            out,
            log,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            let outcome = train_on_manifest(&Manifest::read(&manifest)?, &cfg)?;
            outcome.network.save(&out)?;
            let mut card = outcome.network.card();
            card.train_seed = (!outcome.skipped).then_some(cfg.seed);
            card.pretrained_from = cfg.pretrained_weights.as_ref().map(|p| p.display().to_string());
            card.write(&out.with_extension("card.json"))?;
            if let Some(path) = log {
                write_log(&path, &outcome.log)?;
            }
            if let Some(last) = outcome.log.last() {
                println!("epoch {} mean loss {:.5}", last.epoch, last.mean_loss);
            }
        }
        Command::Search {
            space,
            k,
            manifest,
            config,
            out,
        } => {
            let space: SearchSpace = read_json(&space)?;
            let base: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let result = random_grid_search_cv(&space, &base, &Manifest::read(&manifest)?, k)?;
            if let Some(path) = out {
                std::fs::write(&path, to_json(&result) + "\n").map_err(|e| Error::Io { path, source: e })?;
            }
            println!("{}", to_json(&result.best));
        }
        Command::Metrics(Metrics::Eval(args)) => {
            let set = read_scores(&args.scores)?;
            let cfg = BootstrapConfig {
                replicates: args.replicates,
                alpha: args.alpha,
                seed: args.seed,
                grouped: args.grouped,
            };
            for metric in [Metric::Auroc, Metric::Auprc] {
                let r = bca_interval(&set, metric, &cfg)?;
                println!("{}", serde_json::to_string(&r).expect("plain data serializes"));
                eprintln!("{} {}", r.metric, r.formatted());
            }
        }
        Command::Harness(HarnessCmd::Run { spec, seed, out }) => {
            let mut s = ExperimentSpec::read(&spec)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(out) = out {
                s.output_dir = out;
            }
            let output = harness::run(&s)?;
            print!("{}", harness::render(&output.report, harness::Format::Text)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
