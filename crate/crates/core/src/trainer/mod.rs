//! SGD with per-example gradient accumulation, and randomized grid search
//! with patient-level k-fold cross-validation.

mod search;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use search::{
    random_grid_search_cv, sample_candidates, search_with, select_best, CandidateResult, SearchResult, SearchSpace,
};

use crate::autograd::{serialize, Params, Scalar, Tape};
use crate::error::{Error, Result};
use crate::metrics::ScoredSet;
use crate::network::{BaselineConfig, FusionKind, FusionMethod, Network};
use crate::rng::keyed_rng;
use crate::synthdata::{load_sequences, LoadedSequence, Manifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Examples whose gradients are summed before each step.
    pub effective_batch_size: usize,
    pub epochs: usize,
    /// Drives the per-epoch shuffles.
    pub seed: u64,
    pub method: FusionMethod,
    /// Baseline weights to start from. Parameter-free methods then skip
    /// training; the LSTM keeps them and adds fresh LSTM tensors.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    #[serde(default)]
    pub network: BaselineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            effective_batch_size: 16,
            epochs: 30,
            seed: 0,
            method: FusionMethod::new(FusionKind::Baseline),
            pretrained_weights: None,
            network: BaselineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.effective_batch_size == 0 {
            return Err(Error::invalid("effective_batch_size must be at least 1"));
        }
        self.network.validate()
    }

    pub fn sgd<T: Scalar>(&self) -> Sgd<T> {
        Sgd {
            learning_rate: T::from_f64_lossy(self.learning_rate),
            momentum: T::from_f64_lossy(self.momentum),
            weight_decay: T::from_f64_lossy(self.weight_decay),
            velocity: None,
        }
    }
}

/// Classic momentum SGD with the L2 term added to the gradient:
/// `g' = g + λw`, `v = μv + g'`, `w = w − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Option<Params<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T, weight_decay: T) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&Params<T>> {
        self.velocity.as_ref()
    }

    /// `grads` must already be averaged over the batch.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::shape("sgd_step", "gradients", "gradient layout differs from the weights"));
        }
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        if !velocity.same_layout(params) {
            return Err(Error::shape("sgd_step", "velocity", "optimizer state belongs to other weights"));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let v = velocity.get_mut(id).data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] + self.weight_decay * w[i];
                v[i] = self.momentum * v[i] + gi;
                w[i] = w[i] - self.learning_rate * v[i];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for e in log {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::json("training log", err))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

const STREAM_SHUFFLE: u64 = 21;

/// The accumulation loop shared by every model.
///
/// Each epoch visits `examples` in a seeded shuffle. `example_loss` must add
/// the example's gradient into the buffer it is given and return the loss.
/// Every `batch` examples the summed gradient is divided by the number of
/// examples it holds and one optimizer step is taken; a trailing partial
/// batch is stepped the same way.
pub fn train_loop<E, F, I>(
    params: &mut Params<f32>,
    examples: &[E],
    sgd: &mut Sgd<f32>,
    batch: usize,
    epochs: usize,
    seed: u64,
    mut example_loss: F,
    example_id: I,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&Params<f32>, &E, &mut Params<f32>) -> Result<f64>,
    I: Fn(&E) -> String,
{
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut grads = params.zeros_like();
    let mut log = Vec::with_capacity(epochs);
    let start = Instant::now();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut keyed_rng(seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        let mut pending = 0usize;
        for &i in &order {
            let loss = example_loss(params, &examples[i], &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    example: example_id(&examples[i]),
                });
            }
            total += loss;
            pending += 1;
            if pending == batch {
                apply(sgd, params, &mut grads, pending)?;
                pending = 0;
            }
        }
        if pending > 0 {
            apply(sgd, params, &mut grads, pending)?;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total / examples.len() as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: mean loss {:.5}", entry.mean_loss);
        log.push(entry);
    }
    Ok(log)
}

fn apply(sgd: &mut Sgd<f32>, params: &mut Params<f32>, grads: &mut Params<f32>, count: usize) -> Result<()> {
    grads.scale(1.0 / count as f32);
    sgd.step(params, grads)?;
    grads.fill_zero();
    Ok(())
}

/// A trained network and how it got there.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Pretrained weights were reused as they are.
    pub skipped: bool,
}

/// The starting network for `config`: fresh weights, or pretrained baseline
/// weights (warm-started for the LSTM). The flag is true when no training
/// should follow.
pub fn starting_network(config: &TrainConfig) -> Result<(Network, bool)> {
    match &config.pretrained_weights {
        None => Ok((Network::init(config.network.clone(), config.method)?, false)),
        Some(path) => {
            let weights = serialize::load(path)?;
            starting_from(config, &weights)
        }
    }
}

fn starting_from(config: &TrainConfig, weights: &Params<f32>) -> Result<(Network, bool)> {
    let base = Network::from_params(config.network.clone(), FusionKind::Baseline, weights.clone())?;
    if config.method.kind.has_extra_params() {
        Ok((Network::warm_start(config.network.clone(), config.method, weights)?, false))
    } else {
        Ok((base.with_method(config.method)?, true))
    }
}

/// Trains `network` on in-memory sequences.
///
/// The baseline learns from single visits, each carrying its sequence's
/// label; every other method learns from whole sequences.
pub fn train(mut network: Network, sequences: &[LoadedSequence], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut sgd = config.sgd::<f32>();
    let arch = network.arch.clone();
    let log = if arch.method.kind == FusionKind::Baseline {
        let examples: Vec<(usize, usize)> = sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.visits.len()).map(move |v| (s, v)))
            .collect();
        train_loop(
            &mut network.params,
            &examples,
            &mut sgd,
            config.effective_batch_size,
            config.epochs,
            config.seed,
            |params, &(s, v), grads| {
                let seq = &sequences[s];
                let mut tape = Tape::new();
                let logits = arch.forward_single(&mut tape, params, &seq.visits[v])?;
                let loss = tape.log_softmax_nll(logits, usize::from(seq.label))?;
                tape.backward_into(loss, grads)?;
                Ok(tape.value(loss).item() as f64)
            },
            |&(s, v)| format!("{} visit {v}", sequences[s].key),
        )?
    } else {
        train_loop(
            &mut network.params,
            sequences,
            &mut sgd,
            config.effective_batch_size,
            config.epochs,
            config.seed,
            |params, seq, grads| {
                let mut tape = Tape::new();
                let logits = arch.forward(&mut tape, params, &seq.visits)?;
                let loss = tape.log_softmax_nll(logits, usize::from(seq.label))?;
                tape.backward_into(loss, grads)?;
                Ok(tape.value(loss).item() as f64)
            },
            |seq| seq.key.clone(),
        )?
    };
    Ok(TrainOutcome {
        network,
        log,
        skipped: false,
    })
}

/// Builds the starting network for `config` and trains it unless the
/// pretrained weights are used as they are.
pub fn train_from_config(sequences: &[LoadedSequence], config: &TrainConfig) -> Result<TrainOutcome> {
    let (network, skip) = starting_network(config)?;
    finish(network, skip, sequences, config)
}

/// Like [`train_from_config`] with pretrained weights already in memory.
pub fn train_from_pretrained(
    sequences: &[LoadedSequence],
    config: &TrainConfig,
    weights: &Params<f32>,
) -> Result<TrainOutcome> {
    let (network, skip) = starting_from(config, weights)?;
    finish(network, skip, sequences, config)
}

fn finish(network: Network, skip: bool, sequences: &[LoadedSequence], config: &TrainConfig) -> Result<TrainOutcome> {
    if skip {
        log::info!("{}: reusing pretrained weights, no training", config.method.kind.label());
        return Ok(TrainOutcome {
            network,
            log: Vec::new(),
            skipped: true,
        });
    }
    train(network, sequences, config)
}

/// Loads the manifest's images at the configured input size and trains.
pub fn train_on_manifest(manifest: &Manifest, config: &TrainConfig) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::invalid("training manifest is empty"));
    }
    let sequences = load_sequences(manifest, config.network.input_size)?;
    train_from_config(&sequences, config)
}

/// Positive-class probabilities, one per sequence, computed in parallel.
pub fn predict(network: &Network, sequences: &[LoadedSequence]) -> Result<Vec<f64>> {
    sequences.par_iter().map(|s| network.predict_proba(&s.visits)).collect()
}

/// Scores and labels of `network` on `sequences`, grouped by patient.
pub fn score(network: &Network, sequences: &[LoadedSequence]) -> Result<ScoredSet> {
    let scores = predict(network, sequences)?;
    let labels = sequences.iter().map(|s| s.label).collect();
    ScoredSet::new(scores, labels)?.with_groups(sequences.iter().map(|s| s.patient_id.clone()).collect())
}
