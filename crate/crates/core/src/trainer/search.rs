use std::collections::HashSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score, train_from_config, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc};
use crate::rng::{derive_seed, keyed_rng};
use crate::synthdata::{kfold_by_patient, load_sequences, LoadedSequence, Manifest};

/// Candidate values per hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: Vec<f64>,
    pub momentum: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub effective_batch_size: Vec<usize>,
    /// Grid points sampled without replacement.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: vec![0.01, 0.005, 0.001],
            momentum: vec![0.8, 0.9],
            weight_decay: vec![5e-4, 1e-4],
            effective_batch_size: vec![8, 16],
            n_samples: 6,
            seed: 0,
        }
    }
}

impl SearchSpace {
    pub fn grid_size(&self) -> usize {
        self.learning_rate.len() * self.momentum.len() * self.weight_decay.len() * self.effective_batch_size.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size() == 0 {
            return Err(Error::invalid("search space has an empty candidate list"));
        }
        if self.n_samples == 0 || self.n_samples > self.grid_size() {
            return Err(Error::invalid(format!(
                "n_samples must lie in 1..={}, got {}",
                self.grid_size(),
                self.n_samples
            )));
        }
        Ok(())
    }
}

const STREAM_SAMPLE: u64 = 31;
const STREAM_FOLD: u64 = 32;

/// `n_samples` distinct grid points applied on top of `base`, in sampling
/// order.
pub fn sample_candidates(space: &SearchSpace, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
    space.validate()?;
    let mut grid: Vec<usize> = (0..space.grid_size()).collect();
    grid.shuffle(&mut keyed_rng(space.seed, &[STREAM_SAMPLE]));
    let (nm, nw, nb) = (space.momentum.len(), space.weight_decay.len(), space.effective_batch_size.len());
    Ok(grid[..space.n_samples]
        .iter()
        .map(|&g| {
            let b = g % nb;
            let w = (g / nb) % nw;
            let m = (g / (nb * nw)) % nm;
            let l = g / (nb * nw * nm);
            TrainConfig {
                learning_rate: space.learning_rate[l],
                momentum: space.momentum[m],
                weight_decay: space.weight_decay[w],
                effective_batch_size: space.effective_batch_size[b],
                ..base.clone()
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub config: TrainConfig,
    /// Validation metrics per fold; `None` where the fold's validation set
    /// leaves the metric undefined.
    pub fold_auprc: Vec<Option<f64>>,
    pub fold_auroc: Vec<Option<f64>>,
    /// Means over the defined folds; NaN when none is defined.
    pub mean_auprc: f64,
    pub mean_auroc: f64,
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

impl CandidateResult {
    pub fn new(config: TrainConfig, fold_auprc: Vec<Option<f64>>, fold_auroc: Vec<Option<f64>>) -> Self {
        Self {
            mean_auprc: mean_defined(&fold_auprc),
            mean_auroc: mean_defined(&fold_auroc),
            config,
            fold_auprc,
            fold_auroc,
        }
    }
}

/// Index of the best candidate: highest mean AUPRC, then highest mean
/// AUROC, then earliest. Undefined means rank last.
pub fn select_best(results: &[CandidateResult]) -> Option<usize> {
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = (key(r.mean_auprc), key(r.mean_auroc));
                let top = (key(results[b].mean_auprc), key(results[b].mean_auroc));
                if cur > top {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_index: usize,
    pub candidates: Vec<CandidateResult>,
}

/// Grid search with a caller-supplied fold evaluation. `evaluate` gets a
/// candidate (with its private seed already set), the candidate index and
/// the fold index, and returns `(AUPRC, AUROC)` on that fold's validation
/// split. Candidate/fold pairs run in parallel.
pub fn search_with<F>(space: &SearchSpace, base: &TrainConfig, k: usize, evaluate: F) -> Result<SearchResult>
where
    F: Fn(&TrainConfig, usize, usize) -> Result<(Option<f64>, Option<f64>)> + Sync,
{
    let candidates = sample_candidates(space, base)?;
    let jobs: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let outcomes: Vec<(Option<f64>, Option<f64>)> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let private = derive_seed(space.seed, &[STREAM_FOLD, c as u64, f as u64]);
            let mut cfg = candidates[c].clone();
            cfg.seed = private;
            cfg.network.init_seed = private;
            evaluate(&cfg, c, f)
        })
        .collect::<Result<_>>()?;
    let results: Vec<CandidateResult> = candidates
        .into_iter()
        .enumerate()
        .map(|(c, cfg)| {
            let per = &outcomes[c * k..(c + 1) * k];
            CandidateResult::new(cfg, per.iter().map(|o| o.0).collect(), per.iter().map(|o| o.1).collect())
        })
        .collect();
    let best_index = select_best(&results).expect("at least one candidate");
    Ok(SearchResult {
        best: results[best_index].config.clone(),
        best_index,
        candidates: results,
    })
}

/// Randomized grid search with patient-level k-fold cross-validation on
/// `manifest`. Selection uses validation AUPRC averaged over folds.
pub fn random_grid_search_cv(space: &SearchSpace, base: &TrainConfig, manifest: &Manifest, k: usize) -> Result<SearchResult> {
    let folds = kfold_by_patient(manifest, k, space.seed)?;
    let sequences = load_sequences(manifest, base.network.input_size)?;
    let split: Vec<(Vec<LoadedSequence>, Vec<LoadedSequence>)> = folds
        .iter()
        .map(|(train, val)| {
            let train_ids: HashSet<String> = train.patients().into_iter().collect();
            let val_ids: HashSet<String> = val.patients().into_iter().collect();
            assert!(train_ids.is_disjoint(&val_ids), "fold leaks patients");
            let pick = |ids: &HashSet<String>| {
                sequences.iter().filter(|s| ids.contains(&s.patient_id)).cloned().collect::<Vec<_>>()
            };
            (pick(&train_ids), pick(&val_ids))
        })
        .collect();
    search_with(space, base, k, |cfg, c, f| {
        let (train, val) = &split[f];
        let outcome = train_from_config(train, cfg)?;
        let scored = score(&outcome.network, val)?;
        log::info!("candidate {c} fold {f} trained");
        Ok((auprc(&scored).ok(), auroc(&scored).ok()))
    })
}
