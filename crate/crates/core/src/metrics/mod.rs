//! Ranking metrics for binary classifiers and their bootstrap intervals.

mod bootstrap;
mod normal;

pub use bootstrap::{
    bca_endpoints, bca_interval, bootstrap_bca, jackknife_acceleration, percentile_interval, quantile, BcaResult,
    BootstrapConfig, MetricReport,
};
pub use normal::{inverse_normal_cdf, normal_cdf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores with binary labels, optionally grouped (e.g. by patient).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<String>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(
                "scored set",
                "length",
                format!("{} scores vs {} labels", scores.len(), labels.len()),
            ));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite score {s}")));
        }
        Ok(Self {
            scores,
            labels,
            groups: None,
        })
    }

    pub fn with_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.scores.len() {
            return Err(Error::shape(
                "scored set",
                "groups",
                format!("{} groups for {} scores", groups.len(), self.scores.len()),
            ));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// The examples at `indices` (repeats allowed), groups dropped.
    pub fn subset(&self, indices: &[usize]) -> ScoredSet {
        ScoredSet {
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: None,
        }
    }
}

/// Which ranking metric to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "AUROC",
            Metric::Auprc => "AUPRC",
        }
    }

    pub fn compute(self, set: &ScoredSet) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(set),
            Metric::Auprc => auprc(set),
        }
    }
}

/// Indices sorted by score, descending; ties keep input order.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve, equal to the Mann–Whitney probability that a
/// random positive outranks a random negative (ties count one half).
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_positive();
    let n_neg = set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // every quantity stays an exact integer
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && set.scores[idx[j + 1]] == set.scores[idx[i]] {
            j += 1;
        }
        let avg_rank2 = (i + 1 + j + 1) as u64;
        let pos_in_block = idx[i..=j].iter().filter(|&&k| set.labels[k]).count() as u64;
        rank_sum2 += avg_rank2 * pos_in_block;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / 2.0 / (np * nn) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1})·P_k` over distinct score
/// thresholds, with tied scores entering together.
pub fn auprc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_positive();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let idx = order_desc(&set.scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    // Σ ΔTP·P, divided by the positive count once at the end so a perfect
    // ranking scores exactly 1
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        while i < idx.len() && set.scores[idx[i]] == s {
            if set.labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (tp - prev_tp) as f64 * precision;
        prev_tp = tp;
    }
    Ok(ap / n_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn perfect_ranking_is_exactly_one() {
        for n in 1..40 {
            let scores: Vec<f64> = (0..2 * n).map(|i| i as f64).collect();
            let labels: Vec<u8> = (0..2 * n).map(|i| u8::from(i >= n)).collect();
            assert_eq!(auprc(&set(&scores, &labels)).unwrap(), 1.0);
            assert_eq!(auroc(&set(&scores, &labels)).unwrap(), 1.0);
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(auroc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.5, 0.5], &[0, 1])).unwrap(), 0.5);
        assert!(matches!(auroc(&set(&[0.5, 0.7], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&set(&[0.2, 0.9], &[0, 1])).unwrap(), 1.0);
        assert_eq!(auprc(&set(&[0.2, 0.9], &[1, 0])).unwrap(), 0.5);
        assert_eq!(auprc(&set(&[0.3, 0.1, 0.9], &[1, 1, 1])).unwrap(), 1.0);
        assert!(auprc(&set(&[0.2, 0.9], &[0, 0])).is_err());
    }

    #[test]
    fn auprc_tied_block_enters_together() {
        // one block of two at 0.5: recall jumps 0 -> 1 at precision 1/2
        assert_eq!(auprc(&set(&[0.5, 0.5], &[1, 0])).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_transform(
            pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
            let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
            prop_assume!(s.n_positive() > 0 && s.n_positive() < s.len());
            let t = ScoredSet::new(scores.iter().map(|v| (3.0 * v).exp() - 7.0).collect(), labels.clone()).unwrap();
            prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
            let flipped = ScoredSet::new(scores.iter().map(|v| -v).collect(), labels.iter().map(|l| !l).collect()).unwrap();
            prop_assert_eq!(auroc(&s).unwrap(), auroc(&flipped).unwrap());
        }
    }
}
