//! Bias-corrected and accelerated (BCa) bootstrap intervals.
//!
//! Replicate `r` draws from its own ChaCha stream `(seed, r)`, so results do
//! not depend on how replicates are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normal::{inverse_normal_cdf, normal_cdf};
use super::{Metric, ScoredSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of bootstrap replicates `B`.
    pub replicates: usize,
    /// Two-sided miscoverage; 0.05 gives a 95% interval.
    pub alpha: f64,
    pub seed: u64,
    /// Resample whole groups (patients) instead of single examples.
    #[serde(default)]
    pub grouped: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 10_000,
            alpha: 0.05,
            seed: 0,
            grouped: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcaResult {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z0: f64,
    pub acceleration: f64,
    /// The jackknife spread was zero, so the acceleration was set to 0.
    pub acceleration_degenerate: bool,
    pub alpha_low_adjusted: f64,
    pub alpha_high_adjusted: f64,
    pub n_valid: usize,
    /// Replicates where the statistic was undefined.
    pub n_discarded: usize,
}

/// One metric with its interval, as reported in result tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_bootstrap: usize,
    pub n_discarded: usize,
    pub seed: u64,
    pub z0: f64,
    pub acceleration: f64,
    pub grouped: bool,
}

impl MetricReport {
    /// `xx.xx [lo, hi]` in percent.
    pub fn formatted(&self) -> String {
        format_percent_ci(self.estimate, self.ci_low, self.ci_high)
    }
}

pub(crate) fn format_percent_ci(v: f64, lo: f64, hi: f64) -> String {
    format!("{:.2} [{:.2}, {:.2}]", 100.0 * v, 100.0 * lo, 100.0 * hi)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let p = p.clamp(0.0, 1.0);
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile interval `(q(α/2), q(1−α/2))` of sorted replicates.
pub fn percentile_interval(sorted: &[f64], alpha: f64) -> (f64, f64) {
    (quantile(sorted, alpha / 2.0), quantile(sorted, 1.0 - alpha / 2.0))
}

/// `Φ(z0 + (z0+z)/(1 − a(z0+z)))` for `z = Φ⁻¹(level)`; with `z0 = a = 0`
/// this is `level` itself.
fn adjusted_level(z0: f64, a: f64, level: f64) -> Result<f64> {
    if z0 == 0.0 && a == 0.0 {
        return Ok(level);
    }
    let z = inverse_normal_cdf(level)?;
    let s = z0 + z;
    let denom = 1.0 - a * s;
    let adj = normal_cdf(z0 + s / denom);
    Ok(if adj.is_finite() && denom > 0.0 {
        adj
    } else if level < 0.5 {
        0.0
    } else {
        1.0
    })
}

/// BCa endpoints from sorted replicates and the two correction constants.
/// Returns `(low, high, adjusted α_low, adjusted α_high)`.
pub fn bca_endpoints(sorted: &[f64], z0: f64, acceleration: f64, alpha: f64) -> Result<(f64, f64, f64, f64)> {
    let lo = adjusted_level(z0, acceleration, alpha / 2.0)?;
    let hi = adjusted_level(z0, acceleration, 1.0 - alpha / 2.0)?;
    Ok((quantile(sorted, lo), quantile(sorted, hi), lo, hi))
}

/// Acceleration from leave-one-out estimates:
/// `Σ(θ̄−θᵢ)³ / (6·[Σ(θ̄−θᵢ)²]^{3/2})`. The flag is set when the
/// denominator vanishes and 0 is returned.
pub fn jackknife_acceleration(leave_one_out: &[f64]) -> (f64, bool) {
    if leave_one_out.is_empty() {
        return (0.0, true);
    }
    if leave_one_out.iter().all(|&t| t == leave_one_out[0]) {
        return (0.0, true);
    }
    let mean = leave_one_out.iter().sum::<f64>() / leave_one_out.len() as f64;
    let (mut s2, mut s3) = (0.0, 0.0);
    for &t in leave_one_out {
        let d = mean - t;
        s2 += d * d;
        s3 += d * d * d;
    }
    let denom = 6.0 * s2.powf(1.5);
    if denom == 0.0 || !denom.is_finite() {
        (0.0, true)
    } else {
        (s3 / denom, false)
    }
}

/// Indices `0..n_units` drawn with replacement from stream `(seed, r)`.
fn resample(n_units: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    (0..n_units).map(|_| rng.gen_range(0..n_units)).collect()
}

/// BCa interval for a statistic of `n_units` resampling units.
///
/// `statistic` receives a multiset of unit indices and returns `None` when
/// it is undefined on that sample; such replicates are discarded and
/// counted.
pub fn bootstrap_bca<F>(n_units: usize, config: &BootstrapConfig, statistic: F) -> Result<BcaResult>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n_units == 0 {
        return Err(Error::invalid("bootstrap needs at least one unit"));
    }
    if config.replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {}", config.alpha)));
    }
    let all: Vec<usize> = (0..n_units).collect();
    let estimate = statistic(&all).ok_or_else(|| Error::UndefinedMetric("statistic undefined on the full sample".into()))?;

    let replicates: Vec<Option<f64>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| statistic(&resample(n_units, config.seed, r)))
        .collect();
    let mut valid: Vec<f64> = replicates.into_iter().flatten().collect();
    let n_discarded = config.replicates - valid.len();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "statistic undefined on all {} bootstrap replicates",
            config.replicates
        )));
    }
    valid.sort_by(f64::total_cmp);

    let below = valid.iter().filter(|&&v| v < estimate).count();
    let b = valid.len() as f64;
    // a proportion of exactly 0 or 1 is pulled in by half a replicate
    let prop = (below as f64 / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let z0 = if valid.len() == 1 { 0.0 } else { inverse_normal_cdf(prop)? };

    let jack: Vec<f64> = (0..n_units)
        .filter_map(|i| {
            let rest: Vec<usize> = (0..n_units).filter(|&k| k != i).collect();
            if rest.is_empty() {
                None
            } else {
                statistic(&rest)
            }
        })
        .collect();
    let (acceleration, acceleration_degenerate) = jackknife_acceleration(&jack);

    let (ci_low, ci_high, alpha_low_adjusted, alpha_high_adjusted) =
        bca_endpoints(&valid, z0, acceleration, config.alpha)?;
    Ok(BcaResult {
        estimate,
        ci_low,
        ci_high,
        z0,
        acceleration,
        acceleration_degenerate,
        alpha_low_adjusted,
        alpha_high_adjusted,
        n_valid: valid.len(),
        n_discarded,
    })
}

/// BCa interval of a ranking metric. Units are single examples, or whole
/// groups when `config.grouped` is set and the set carries group ids.
pub fn bca_interval(set: &ScoredSet, metric: Metric, config: &BootstrapConfig) -> Result<MetricReport> {
    let units: Vec<Vec<usize>> = match (&set.groups, config.grouped) {
        (Some(groups), true) => {
            let mut order: Vec<&str> = Vec::new();
            let mut members: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
            for (i, g) in groups.iter().enumerate() {
                members
                    .entry(g.as_str())
                    .or_insert_with(|| {
                        order.push(g.as_str());
                        Vec::new()
                    })
                    .push(i);
            }
            order.into_iter().map(|g| members.remove(g).expect("group recorded")).collect()
        }
        (None, true) => return Err(Error::invalid("grouped bootstrap requested but the set has no group ids")),
        _ => (0..set.len()).map(|i| vec![i]).collect(),
    };
    let result = bootstrap_bca(units.len(), config, |picked| {
        let idx: Vec<usize> = picked.iter().flat_map(|&u| units[u].iter().copied()).collect();
        metric.compute(&set.subset(&idx)).ok()
    })?;
    Ok(MetricReport {
        metric: metric.name().to_string(),
        estimate: result.estimate,
        ci_low: result.ci_low,
        ci_high: result.ci_high,
        n_bootstrap: config.replicates,
        n_discarded: result.n_discarded,
        seed: config.seed,
        z0: result.z0,
        acceleration: result.acceleration,
        grouped: config.grouped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(data: &[f64]) -> impl Fn(&[usize]) -> Option<f64> + Sync + '_ {
        move |idx: &[usize]| Some(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64)
    }

    #[test]
    fn zero_corrections_reduce_to_percentile_interval() {
        let mut reps: Vec<f64> = (0..997).map(|i| ((i * 7919) % 1000) as f64 / 37.0).collect();
        reps.sort_by(f64::total_cmp);
        let (lo, hi, _, _) = bca_endpoints(&reps, 0.0, 0.0, 0.05).unwrap();
        assert_eq!((lo, hi), percentile_interval(&reps, 0.05));
    }

    #[test]
    fn symmetric_jackknife_has_zero_acceleration() {
        let data = [1.0, 2.0, 3.0];
        let loo: Vec<f64> = (0..3)
            .map(|i| (0..3).filter(|&k| k != i).map(|k| data[k]).sum::<f64>() / 2.0)
            .collect();
        assert_eq!(loo, vec![2.5, 2.0, 1.5]);
        let (a, degenerate) = jackknife_acceleration(&loo);
        assert_eq!(a, 0.0);
        assert!(!degenerate);
    }

    #[test]
    fn constant_jackknife_is_flagged() {
        assert_eq!(jackknife_acceleration(&[0.7, 0.7, 0.7]), (0.0, true));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let data: Vec<f64> = (0..25).map(|i| ((i * 31) % 17) as f64).collect();
        let cfg = BootstrapConfig { replicates: 500, alpha: 0.05, seed: 42, grouped: false };
        let a = bootstrap_bca(data.len(), &cfg, mean_of(&data)).unwrap();
        let b = bootstrap_bca(data.len(), &cfg, mean_of(&data)).unwrap();
        assert_eq!(a, b);
        let serial: Vec<Vec<usize>> = (0..10).map(|r| resample(25, 42, r)).collect();
        let reversed: Vec<Vec<usize>> = (0..10).rev().map(|r| resample(25, 42, r)).rev().collect();
        assert_eq!(serial, reversed);
    }

    #[test]
    fn undefined_replicates_are_discarded_and_counted() {
        let scores = vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.4];
        let labels = vec![false, true, false, false, false, false];
        let set = ScoredSet::new(scores, labels).unwrap();
        let cfg = BootstrapConfig { replicates: 400, alpha: 0.05, seed: 3, grouped: false };
        let rep = bca_interval(&set, Metric::Auroc, &cfg).unwrap();
        assert!(rep.n_discarded > 0);
        assert!(rep.ci_low <= rep.ci_high);
    }

    #[test]
    fn grouped_resampling_needs_groups() {
        let set = ScoredSet::new(vec![0.1, 0.9], vec![false, true]).unwrap();
        let cfg = BootstrapConfig { replicates: 10, alpha: 0.05, seed: 3, grouped: true };
        assert!(bca_interval(&set, Metric::Auroc, &cfg).is_err());
        let grouped = set.with_groups(vec!["p1".into(), "p2".into()]).unwrap();
        assert!(bca_interval(&grouped, Metric::Auroc, &cfg).is_ok());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent_ci(0.9269, 0.8441, 0.9673), "92.69 [84.41, 96.73]");
    }
}
