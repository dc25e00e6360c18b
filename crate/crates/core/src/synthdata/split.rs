use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

const STREAM_SPLIT: u64 = 11;
const STREAM_KFOLD: u64 = 12;

fn shuffled_patients(manifest: &Manifest, seed: u64, stream: u64) -> Vec<String> {
    let mut patients = manifest.patients();
    patients.shuffle(&mut keyed_rng(seed, &[stream]));
    patients
}

/// Splits at patient granularity. The training side gets
/// `round(n·train_fraction)` patients, kept within `1..n`.
pub fn split_by_patient(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    if manifest.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    let patients = shuffled_patients(manifest, seed, STREAM_SPLIT);
    let n = patients.len();
    if n < 2 {
        return Err(Error::invalid("need at least two patients to split"));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let train: HashSet<String> = patients[..n_train].iter().cloned().collect();
    let test: HashSet<String> = patients[n_train..].iter().cloned().collect();
    Ok((
        manifest.select_patients(&train, Some(format!("train split {train_fraction}, seed {seed}"))),
        manifest.select_patients(&test, Some(format!("test split {train_fraction}, seed {seed}"))),
    ))
}

/// `k` (train, validation) pairs; every patient validates exactly once.
/// Fold sizes differ by at most one patient.
pub fn kfold_by_patient(manifest: &Manifest, k: usize, seed: u64) -> Result<Vec<(Manifest, Manifest)>> {
    let patients = shuffled_patients(manifest, seed, STREAM_KFOLD);
    let n = patients.len();
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} patients available")));
    }
    let (q, r) = (n / k, n % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let size = q + usize::from(i < r);
        let val: HashSet<String> = patients[start..start + size].iter().cloned().collect();
        let train: HashSet<String> = patients.iter().filter(|p| !val.contains(*p)).cloned().collect();
        folds.push((
            manifest.select_patients(&train, Some(format!("fold {i}/{k} train, seed {seed}"))),
            manifest.select_patients(&val, Some(format!("fold {i}/{k} validation, seed {seed}"))),
        ));
        start += size;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub visit_count: usize,
    pub n_negative: usize,
    pub n_positive: usize,
}

/// Sequence counts by number of visits, split by label, ascending.
pub fn visit_histogram(manifest: &Manifest) -> Vec<HistogramRow> {
    let mut table: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for s in manifest.sequences() {
        let e = table.entry(s.len()).or_default();
        if s.label == 1 {
            e.1 += 1;
        } else {
            e.0 += 1;
        }
    }
    table
        .into_iter()
        .map(|(visit_count, (n_negative, n_positive))| HistogramRow {
            visit_count,
            n_negative,
            n_positive,
        })
        .collect()
}

pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut s = String::from("visit_count,n_negative,n_positive\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.visit_count, r.n_negative, r.n_positive));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::PreprocessConfig;
    use crate::synthdata::{KidneySide, ManifestHeader, VisitRecord};
    use std::path::PathBuf;

    fn manifest(n_patients: usize, visits: impl Fn(usize) -> usize) -> Manifest {
        let mut records = Vec::new();
        for p in 0..n_patients {
            for side in [KidneySide::Left, KidneySide::Right] {
                for t in 0..visits(p) {
                    records.push(VisitRecord {
                        patient_id: format!("p{p}"),
                        kidney_side: side,
                        visit_index: t,
                        sagittal_path: String::new(),
                        transverse_path: String::new(),
                        severity: 0.0,
                        label: u8::from(p % 3 == 0 && side == KidneySide::Left),
                    });
                }
            }
        }
        let header = ManifestHeader {
            cohort: None,
            preprocess: PreprocessConfig::default(),
            note: None,
        };
        Manifest::new(header, records, PathBuf::new()).unwrap()
    }

    fn ids(m: &Manifest) -> HashSet<String> {
        m.patients().into_iter().collect()
    }

    #[test]
    fn split_rounds_to_nearest_patient() {
        let m = manifest(401, |_| 1);
        let (train, test) = split_by_patient(&m, 0.7, 3).unwrap();
        assert_eq!((train.patients().len(), test.patients().len()), (281, 120));
        assert!(ids(&train).is_disjoint(&ids(&test)));
    }

    #[test]
    fn split_keeps_one_test_patient() {
        let m = manifest(5, |_| 2);
        let (train, test) = split_by_patient(&m, 0.99, 1).unwrap();
        assert_eq!((train.patients().len(), test.patients().len()), (4, 1));
        assert!(split_by_patient(&manifest(0, |_| 1), 0.5, 1).is_err());
        assert!(split_by_patient(&m, 1.0, 1).is_err());
    }

    #[test]
    fn kfold_partitions_patients() {
        let m = manifest(10, |p| 1 + p % 3);
        let folds = kfold_by_patient(&m, 5, 9).unwrap();
        assert_eq!(folds.len(), 5);
        let mut union = HashSet::new();
        for (train, val) in &folds {
            assert_eq!(val.patients().len(), 2);
            assert!(ids(train).is_disjoint(&ids(val)));
            for p in ids(val) {
                assert!(union.insert(p));
            }
        }
        assert_eq!(union, ids(&m));
        assert_eq!(folds, kfold_by_patient(&m, 5, 9).unwrap());
        assert!(kfold_by_patient(&m, 11, 9).is_err());
    }

    #[test]
    fn histogram_counts_sequences() {
        let m = manifest(6, |_| 1);
        assert_eq!(
            visit_histogram(&m),
            [HistogramRow {
                visit_count: 1,
                n_negative: 10,
                n_positive: 2
            }]
        );
        assert!(visit_histogram(&manifest(0, |_| 1)).is_empty());
        assert_eq!(histogram_csv(&visit_histogram(&m)), "visit_count,n_negative,n_positive\n1,10,2\n");
    }
}
