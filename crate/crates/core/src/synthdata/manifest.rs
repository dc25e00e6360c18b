//! JSON Lines manifests: one header line, then one line per visit.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CohortSpec;
use crate::error::{Error, Result};
use crate::imageproc::PreprocessConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KidneySide {
    Left = 0,
    Right = 1,
}

impl KidneySide {
    pub fn as_str(self) -> &'static str {
        match self {
            KidneySide::Left => "left",
            KidneySide::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub kidney_side: KidneySide,
    pub visit_index: usize,
    pub sagittal_path: String,
    pub transverse_path: String,
    /// Latent severity the images were rendered from; audit only.
    pub severity: f64,
    /// Outcome of the whole sequence, repeated on each visit.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub cohort: Option<CohortSpec>,
    pub preprocess: PreprocessConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

enum Line {
    Header(ManifestHeader),
    Visit(VisitRecord),
}

impl Line {
    fn to_json(&self) -> Result<String> {
        let (kind, value) = match self {
            Line::Header(h) => ("header", serde_json::to_value(h)),
            Line::Visit(r) => ("visit", serde_json::to_value(r)),
        };
        let mut value = value.map_err(|e| Error::json("manifest line", e))?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("kind".into(), kind.into());
        }
        serde_json::to_string(&value).map_err(|e| Error::json("manifest line", e))
    }

    fn parse(text: &str, context: &str) -> Result<Line> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
        let kind = value
            .as_object_mut()
            .and_then(|m| m.remove("kind"))
            .and_then(|k| k.as_str().map(str::to_string));
        match kind.as_deref() {
            Some("header") => Ok(Line::Header(serde_json::from_value(value).map_err(|e| Error::json(context, e))?)),
            Some("visit") => Ok(Line::Visit(serde_json::from_value(value).map_err(|e| Error::json(context, e))?)),
            _ => Err(Error::Format {
                kind: "manifest",
                detail: format!("{context}: missing or unknown \"kind\""),
            }),
        }
    }
}

/// One kidney's visits in order, with the sequence label.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitSequence {
    pub patient_id: String,
    pub kidney_side: KidneySide,
    pub label: u8,
    pub records: Vec<VisitRecord>,
}

impl VisitSequence {
    /// `patient/side`, unique within a manifest.
    pub fn key(&self) -> String {
        format!("{}/{}", self.patient_id, self.kidney_side.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    records: Vec<VisitRecord>,
    /// Directory that relative image paths are resolved against.
    base_dir: PathBuf,
}

impl Manifest {
    /// Checks that visit indices are dense per kidney and that each kidney
    /// has a single label.
    pub fn new(header: ManifestHeader, records: Vec<VisitRecord>, base_dir: PathBuf) -> Result<Self> {
        let mut seen: HashMap<(&str, KidneySide), (u8, Vec<usize>)> = HashMap::new();
        for r in &records {
            if r.label > 1 {
                return Err(Error::invalid(format!("{}: label must be 0 or 1, got {}", r.patient_id, r.label)));
            }
            let entry = seen
                .entry((r.patient_id.as_str(), r.kidney_side))
                .or_insert_with(|| (r.label, Vec::new()));
            if entry.0 != r.label {
                return Err(Error::invalid(format!(
                    "{} {}: visits disagree on the sequence label",
                    r.patient_id,
                    r.kidney_side.as_str()
                )));
            }
            entry.1.push(r.visit_index);
        }
        for ((pid, side), (_, mut idx)) in seen {
            idx.sort_unstable();
            if idx.iter().enumerate().any(|(i, &v)| i != v) {
                return Err(Error::invalid(format!(
                    "{pid} {}: visit indices {idx:?} are not 0..{}",
                    side.as_str(),
                    idx.len()
                )));
            }
        }
        Ok(Self {
            header,
            records,
            base_dir,
        })
    }

    pub fn records(&self) -> &[VisitRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Path of an image referenced by a record.
    pub fn resolve(&self, path: &str) -> PathBuf {
        self.base_dir.join(path)
    }

    /// Patient ids in order of first appearance.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.patient_id.as_str()))
            .map(|r| r.patient_id.clone())
            .collect()
    }

    /// Kidney sequences in order of first appearance, visits sorted.
    pub fn sequences(&self) -> Vec<VisitSequence> {
        let mut order: Vec<(String, KidneySide)> = Vec::new();
        let mut groups: HashMap<(String, KidneySide), Vec<VisitRecord>> = HashMap::new();
        for r in &self.records {
            let key = (r.patient_id.clone(), r.kidney_side);
            groups
                .entry(key.clone())
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(r.clone());
        }
        order
            .into_iter()
            .map(|key| {
                let mut records = groups.remove(&key).expect("grouped above");
                records.sort_by_key(|r| r.visit_index);
                VisitSequence {
                    patient_id: key.0,
                    kidney_side: key.1,
                    label: records[0].label,
                    records,
                }
            })
            .collect()
    }

    /// Records of the given patients, same header and base directory.
    pub fn select_patients(&self, patients: &HashSet<String>, note: Option<String>) -> Manifest {
        Manifest {
            header: ManifestHeader {
                note,
                ..self.header.clone()
            },
            records: self
                .records
                .iter()
                .filter(|r| patients.contains(&r.patient_id))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let ctx = |n: usize| format!("{} line {}", path.display(), n + 1);
        let header = match lines.next() {
            Some((n, l)) => match Line::parse(l, &ctx(n))? {
                Line::Header(h) => h,
                Line::Visit(_) => {
                    return Err(Error::Format {
                        kind: "manifest",
                        detail: format!("{}: first line must be the header", path.display()),
                    })
                }
            },
            None => {
                return Err(Error::Format {
                    kind: "manifest",
                    detail: format!("{} is empty", path.display()),
                })
            }
        };
        let mut records = Vec::new();
        for (n, l) in lines {
            match Line::parse(l, &ctx(n))? {
                Line::Visit(r) => records.push(r),
                Line::Header(_) => {
                    return Err(Error::Format {
                        kind: "manifest",
                        detail: format!("{}: second header", ctx(n)),
                    })
                }
            }
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(header, records, base_dir)
    }

    /// Writes the manifest. Image paths stay relative when the target sits
    /// in the manifest's own directory and become absolute otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let target_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let same_dir = same_directory(&target_dir, &self.base_dir);
        let base_abs = if same_dir {
            None
        } else {
            Some(std::path::absolute(&self.base_dir).map_err(|e| Error::io(&self.base_dir, e))?)
        };
        let fix = |p: &str| -> String {
            match &base_abs {
                None => p.to_string(),
                Some(b) => b.join(p).to_string_lossy().into_owned(),
            }
        };
        let mut out = Vec::new();
        let mut push = |line: &Line| -> Result<()> {
            out.extend_from_slice(line.to_json()?.as_bytes());
            out.push(b'\n');
            Ok(())
        };
        push(&Line::Header(self.header.clone()))?;
        for r in &self.records {
            push(&Line::Visit(VisitRecord {
                sagittal_path: fix(&r.sagittal_path),
                transverse_path: fix(&r.transverse_path),
                ..r.clone()
            }))?;
        }
        if !target_dir.as_os_str().is_empty() {
            std::fs::create_dir_all(&target_dir).map_err(|e| Error::io(&target_dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

fn same_directory(a: &Path, b: &Path) -> bool {
    let norm = |p: &Path| {
        let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
        p.canonicalize().ok()
    };
    match (norm(a), norm(b)) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}
