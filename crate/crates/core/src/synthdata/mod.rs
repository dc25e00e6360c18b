//! Synthetic multi-visit kidney ultrasound cohorts.
//!
//! Each kidney gets a latent severity trajectory. Its level carries the
//! single-visit signal, and its slope (when `temporal_signal > 0`) carries
//! information only visible across visits. Every visit is rendered as a
//! sagittal and a transverse 300×300 grayscale image whose dark central
//! "pelvis" grows with severity.

mod load;
mod manifest;
mod render;
mod split;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use load::{load_sequences, LoadedSequence};
pub use manifest::{KidneySide, Manifest, ManifestHeader, VisitRecord, VisitSequence};
pub use render::{render_view, View, IMAGE_SIZE};
pub use split::{histogram_csv, kfold_by_patient, split_by_patient, visit_histogram, HistogramRow};

use crate::error::{Error, Result};
use crate::imageproc::{write_pgm, PreprocessConfig};
use crate::rng::keyed_rng;

/// How negative sequences evolve when `temporal_signal > 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeTrend {
    /// Negatives keep their level.
    #[default]
    Flat,
    /// Negatives drift down at the same rate positives drift up.
    Downward,
}

/// The visit at which a sequence sits at its base severity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendAnchor {
    /// Trends start from the base level, so later visits of positives look
    /// more severe.
    #[default]
    First,
    /// Trends end at the base level. The latest visit alone then carries no
    /// trend information and only the history reveals it.
    Latest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    /// Prefix of every patient id; keeps cohorts disjoint.
    pub name: String,
    pub n_patients: usize,
    /// P(number of visits = key).
    pub visit_count_distribution: BTreeMap<u32, f64>,
    pub positive_rate: f64,
    /// Coupling from severity to what the image shows. 0 renders every
    /// kidney identically.
    pub signal_strength: f64,
    /// Severity change per visit for positive sequences.
    pub temporal_signal: f64,
    pub seed: u64,
    /// Imaged kidneys per patient (1 or 2).
    #[serde(default = "defaults::kidneys")]
    pub kidneys_per_patient: u8,
    /// Gap between the mean severity of positives and negatives.
    #[serde(default = "defaults::level_separation")]
    pub level_separation: f64,
    /// Half-width of the uniform spread of each kidney's base severity.
    #[serde(default = "defaults::base_spread")]
    pub base_spread: f64,
    /// Standard deviation of independent per-visit severity noise.
    #[serde(default = "defaults::visit_noise")]
    pub visit_noise: f64,
    /// Standard deviation of additive pixel noise, in gray levels.
    #[serde(default = "defaults::pixel_noise")]
    pub pixel_noise: f64,
    #[serde(default)]
    pub negative_trend: NegativeTrend,
    #[serde(default)]
    pub trend_anchor: TrendAnchor,
}

mod defaults {
    pub fn kidneys() -> u8 {
        2
    }
    pub fn level_separation() -> f64 {
        0.5
    }
    pub fn base_spread() -> f64 {
        0.2
    }
    pub fn visit_noise() -> f64 {
        0.02
    }
    pub fn pixel_noise() -> f64 {
        12.0
    }
}

/// Visit counts 1..=5 with the mode at three visits.
pub fn default_visit_distribution() -> BTreeMap<u32, f64> {
    BTreeMap::from([(1, 0.15), (2, 0.25), (3, 0.35), (4, 0.15), (5, 0.10)])
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            name: "cohort".into(),
            n_patients: 100,
            visit_count_distribution: default_visit_distribution(),
            positive_rate: 0.25,
            signal_strength: 1.0,
            temporal_signal: 0.0,
            seed: 0,
            kidneys_per_patient: defaults::kidneys(),
            level_separation: defaults::level_separation(),
            base_spread: defaults::base_spread(),
            visit_noise: defaults::visit_noise(),
            pixel_noise: defaults::pixel_noise(),
            negative_trend: NegativeTrend::Flat,
            trend_anchor: TrendAnchor::First,
        }
    }
}

/// Named test-set profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Multi-visit, about a quarter positive.
    InternalTest,
    /// Later-collected internal data, 12% positive.
    SilentTrial,
    /// Mostly two or more visits, 5% positive.
    StanfordLike,
    /// One visit per patient and kidney, 67% positive.
    ChopLike,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::InternalTest, Preset::SilentTrial, Preset::StanfordLike, Preset::ChopLike];

    pub fn name(self) -> &'static str {
        match self {
            Preset::InternalTest => "internal-test",
            Preset::SilentTrial => "silent-trial",
            Preset::StanfordLike => "stanford-like",
            Preset::ChopLike => "chop-like",
        }
    }

    /// The profile as a spec; signal knobs are left at their defaults.
    pub fn spec(self, n_patients: usize, seed: u64) -> CohortSpec {
        let base = CohortSpec {
            name: self.name().into(),
            n_patients,
            seed,
            ..CohortSpec::default()
        };
        match self {
            Preset::InternalTest => base,
            Preset::SilentTrial => CohortSpec {
                positive_rate: 0.12,
                kidneys_per_patient: 1,
                visit_count_distribution: BTreeMap::from([(1, 0.3), (2, 0.3), (3, 0.25), (4, 0.15)]),
                ..base
            },
            Preset::StanfordLike => CohortSpec {
                positive_rate: 0.05,
                visit_count_distribution: BTreeMap::from([(1, 0.1), (2, 0.4), (3, 0.3), (4, 0.2)]),
                ..base
            },
            Preset::ChopLike => CohortSpec {
                positive_rate: 0.67,
                kidneys_per_patient: 1,
                visit_count_distribution: BTreeMap::from([(1, 1.0)]),
                ..base
            },
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.visit_count_distribution.is_empty() {
            return Err(Error::invalid("visit count distribution is empty"));
        }
        if self.visit_count_distribution.contains_key(&0) {
            return Err(Error::invalid("visit counts start at 1"));
        }
        if self.visit_count_distribution.values().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("visit count probabilities must lie in [0, 1]"));
        }
        let total: f64 = self.visit_count_distribution.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("visit count probabilities sum to {total}, not 1")));
        }
        for (name, v) in [
            ("positive_rate", self.positive_rate),
            ("signal_strength", self.signal_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("temporal_signal", self.temporal_signal),
            ("level_separation", self.level_separation),
            ("base_spread", self.base_spread),
            ("visit_noise", self.visit_noise),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !matches!(self.kidneys_per_patient, 1 | 2) {
            return Err(Error::invalid("kidneys_per_patient must be 1 or 2"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid(format!("unusable cohort name {:?}", self.name)));
        }
        Ok(())
    }

    pub fn patient_id(&self, index: usize) -> String {
        format!("{}-{index:05}", self.name)
    }

    fn draw_visit_count(&self, u: f64) -> u32 {
        let mut acc = 0.0;
        for (&k, &p) in &self.visit_count_distribution {
            acc += p;
            if u < acc {
                return k;
            }
        }
        *self.visit_count_distribution.keys().next_back().expect("validated non-empty")
    }
}

/// The latent part of one kidney sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePlan {
    pub patient_index: usize,
    pub side: KidneySide,
    pub label: bool,
    pub severities: Vec<f64>,
}

// key-path tags for the random streams
const STREAM_PATIENT: u64 = 1;
const STREAM_KIDNEY: u64 = 2;
const STREAM_IMAGE: u64 = 3;

/// Labels and severity trajectories for one patient. Depends only on
/// `(seed, patient_index)`.
pub fn plan_patient(spec: &CohortSpec, patient_index: usize) -> Vec<SequencePlan> {
    let mut prng = keyed_rng(spec.seed, &[STREAM_PATIENT, patient_index as u64]);
    let visits = spec.draw_visit_count(prng.gen::<f64>()) as usize;
    let sides: &[KidneySide] = if spec.kidneys_per_patient == 1 {
        if prng.gen::<bool>() {
            &[KidneySide::Left]
        } else {
            &[KidneySide::Right]
        }
    } else {
        &[KidneySide::Left, KidneySide::Right]
    };
    sides
        .iter()
        .map(|&side| {
            let mut rng = keyed_rng(spec.seed, &[STREAM_KIDNEY, patient_index as u64, side as u64]);
            let label = rng.gen::<f64>() < spec.positive_rate;
            let sign = if label { 1.0 } else { -1.0 };
            let base = 0.5 + sign * spec.level_separation / 2.0 + spec.base_spread * (2.0 * rng.gen::<f64>() - 1.0);
            let slope = match (label, spec.negative_trend) {
                (true, _) => spec.temporal_signal,
                (false, NegativeTrend::Flat) => 0.0,
                (false, NegativeTrend::Downward) => -spec.temporal_signal,
            };
            let origin = match spec.trend_anchor {
                TrendAnchor::First => 0.0,
                TrendAnchor::Latest => (visits - 1) as f64,
            };
            let severities = (0..visits)
                .map(|t| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (base + slope * (t as f64 - origin) + spec.visit_noise * noise).clamp(0.0, 1.0)
                })
                .collect();
            SequencePlan {
                patient_index,
                side,
                label,
                severities,
            }
        })
        .collect()
}

fn image_name(patient_id: &str, side: KidneySide, visit: usize, view: View) -> String {
    format!("{patient_id}_{}_v{visit}_{}.pgm", side.as_str(), view.tag())
}

/// Renders a cohort into `out_dir` and writes `out_dir/manifest.jsonl`.
/// Images go to `out_dir/images/`. Returns the manifest path.
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<PathBuf> {
    generate_cohort_with(spec, &PreprocessConfig::default(), out_dir)
}

/// Like [`generate_cohort`] but records a non-default preprocessing chain
/// in the manifest header.
pub fn generate_cohort_with(spec: &CohortSpec, preprocess: &PreprocessConfig, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    preprocess.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let per_patient: Vec<Vec<VisitRecord>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|p| -> Result<Vec<VisitRecord>> {
            let patient_id = spec.patient_id(p);
            let mut records = Vec::new();
            for plan in plan_patient(spec, p) {
                for (t, &severity) in plan.severities.iter().enumerate() {
                    let mut paths = [String::new(), String::new()];
                    for (slot, view) in [View::Sagittal, View::Transverse].into_iter().enumerate() {
                        let mut rng = keyed_rng(
                            spec.seed,
                            &[STREAM_IMAGE, p as u64, plan.side as u64, t as u64, view as u64],
                        );
                        let img = render_view(view, severity, spec.signal_strength, spec.pixel_noise, &mut rng);
                        let name = image_name(&patient_id, plan.side, t, view);
                        write_pgm(&image_dir.join(&name), &img)?;
                        paths[slot] = format!("images/{name}");
                    }
                    let [sagittal_path, transverse_path] = paths;
                    records.push(VisitRecord {
                        patient_id: patient_id.clone(),
                        kidney_side: plan.side,
                        visit_index: t,
                        sagittal_path,
                        transverse_path,
                        severity,
                        label: u8::from(plan.label),
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest::new(
        ManifestHeader {
            cohort: Some(spec.clone()),
            preprocess: preprocess.clone(),
            note: None,
        },
        per_patient.into_iter().flatten().collect(),
        out_dir.to_path_buf(),
    )?;
    let path = out_dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}

/// Draws from a standard normal. Shared by the renderer.
pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortSpec {
        CohortSpec {
            n_patients: n,
            seed: 7,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn zero_positive_rate_gives_all_negative() {
        let spec = CohortSpec {
            positive_rate: 0.0,
            ..small(200)
        };
        assert!((0..200).flat_map(|p| plan_patient(&spec, p)).all(|s| !s.label));
    }

    #[test]
    fn single_visit_distribution() {
        let spec = CohortSpec {
            visit_count_distribution: BTreeMap::from([(1, 1.0)]),
            ..small(50)
        };
        assert!((0..50).flat_map(|p| plan_patient(&spec, p)).all(|s| s.severities.len() == 1));
    }

    #[test]
    fn label_rate_converges() {
        let spec = CohortSpec {
            positive_rate: 0.3,
            kidneys_per_patient: 1,
            ..small(2000)
        };
        let pos = (0..2000).flat_map(|p| plan_patient(&spec, p)).filter(|s| s.label).count();
        assert!((pos as f64 / 2000.0 - 0.3).abs() <= 0.02, "{pos}");
    }

    #[test]
    fn adding_patients_keeps_earlier_ones() {
        let a = small(10);
        let b = small(30);
        for p in 0..10 {
            assert_eq!(plan_patient(&a, p), plan_patient(&b, p));
        }
    }

    #[test]
    fn trends_follow_label() {
        let spec = CohortSpec {
            temporal_signal: 0.1,
            visit_noise: 0.0,
            base_spread: 0.0,
            level_separation: 0.0,
            visit_count_distribution: BTreeMap::from([(3, 1.0)]),
            negative_trend: NegativeTrend::Downward,
            ..small(20)
        };
        for s in (0..20).flat_map(|p| plan_patient(&spec, p)) {
            let d = s.severities[2] - s.severities[0];
            assert!((d - if s.label { 0.2 } else { -0.2 }).abs() < 1e-12);
        }
    }

    #[test]
    fn latest_anchor_ends_every_trend_at_base() {
        let spec = CohortSpec {
            temporal_signal: 0.1,
            visit_noise: 0.0,
            base_spread: 0.0,
            level_separation: 0.0,
            visit_count_distribution: BTreeMap::from([(1, 0.2), (4, 0.8)]),
            trend_anchor: TrendAnchor::Latest,
            ..small(30)
        };
        for s in (0..30).flat_map(|p| plan_patient(&spec, p)) {
            assert!((s.severities.last().unwrap() - 0.5).abs() < 1e-12);
            if s.label && s.severities.len() == 4 {
                assert!((s.severities[0] - 0.2).abs() < 1e-12);
            } else {
                assert!(s.severities.iter().all(|&v| (v - 0.5).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn rejects_bad_distribution() {
        let spec = CohortSpec {
            visit_count_distribution: BTreeMap::from([(1, 0.5), (2, 0.4)]),
            ..small(1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn presets_are_valid() {
        for p in Preset::ALL {
            p.spec(10, 1).validate().unwrap();
        }
        let chop = Preset::ChopLike.spec(10, 1);
        assert_eq!(chop.visit_count_distribution, BTreeMap::from([(1, 1.0)]));
    }
}
