//! Result tables and their text, CSV and JSON renderings.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Outcome of holding one result against a reference result.
///
/// A point estimate above the reference interval is `Better`, below it
/// `Worse`. When each point estimate lies inside the other's interval the
/// two are `Indistinguishable`; the remaining case, where only one of the
/// two containments holds, is `Inconclusive`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Significance {
    Better,
    Worse,
    Indistinguishable,
    Inconclusive,
}

impl Significance {
    pub fn as_str(self) -> &'static str {
        match self {
            Significance::Better => "better",
            Significance::Worse => "worse",
            Significance::Indistinguishable => "indistinguishable",
            Significance::Inconclusive => "inconclusive",
        }
    }
}

fn inside(v: f64, r: &MetricReport) -> bool {
    r.ci_low <= v && v <= r.ci_high
}

/// Applies the interval-overlap rule to `candidate` against `reference`.
pub fn compare(candidate: &MetricReport, reference: &MetricReport) -> Significance {
    if candidate.estimate > reference.ci_high {
        Significance::Better
    } else if candidate.estimate < reference.ci_low {
        Significance::Worse
    } else if inside(reference.estimate, candidate) {
        Significance::Indistinguishable
    } else {
        Significance::Inconclusive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub dataset: String,
    pub model: String,
    /// `None` when the test set leaves the metric undefined.
    pub auroc: Option<MetricReport>,
    pub auprc: Option<MetricReport>,
    /// Highest estimate of the dataset's rows.
    pub top_auroc: bool,
    pub top_auprc: bool,
    /// Model label this row is compared against.
    pub reference: Option<String>,
    pub auroc_vs_reference: Option<Significance>,
    pub auprc_vs_reference: Option<Significance>,
}

impl Row {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>, auroc: Option<MetricReport>, auprc: Option<MetricReport>) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            auroc,
            auprc,
            top_auroc: false,
            top_auprc: false,
            reference: None,
            auroc_vs_reference: None,
            auprc_vs_reference: None,
        }
    }

    /// Records the comparison of this row against `reference`.
    pub fn compare_to(&mut self, reference: &Row) {
        self.reference = Some(reference.model.clone());
        self.auroc_vs_reference = both(&self.auroc, &reference.auroc).map(|(a, b)| compare(a, b));
        self.auprc_vs_reference = both(&self.auprc, &reference.auprc).map(|(a, b)| compare(a, b));
    }
}

fn both<'a>(a: &'a Option<MetricReport>, b: &'a Option<MetricReport>) -> Option<(&'a MetricReport, &'a MetricReport)> {
    Some((a.as_ref()?, b.as_ref()?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub rows: Vec<Row>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            ..Self::default()
        }
    }

    /// Sets the top flags: within each dataset, every row whose estimate
    /// equals the best one.
    pub fn mark_top(&mut self) {
        fn best(rows: &[Row], dataset: &str, pick: fn(&Row) -> Option<f64>) -> Option<f64> {
            rows.iter().filter(|r| r.dataset == dataset).filter_map(pick).reduce(f64::max)
        }
        let auroc = |r: &Row| r.auroc.as_ref().map(|m| m.estimate);
        let auprc = |r: &Row| r.auprc.as_ref().map(|m| m.estimate);
        let tops: Vec<(Option<f64>, Option<f64>)> = self
            .rows
            .iter()
            .map(|r| (best(&self.rows, &r.dataset, auroc), best(&self.rows, &r.dataset, auprc)))
            .collect();
        for (r, (a, p)) in self.rows.iter_mut().zip(tops) {
            r.top_auroc = a.is_some() && auroc(r) == a;
            r.top_auprc = p.is_some() && auprc(r) == p;
        }
    }
}

/// Everything one harness run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tables: Vec<Table>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Text, Format::Csv, Format::Json];

    pub fn extension(self) -> &'static str {
        match self {
            Format::Text => "txt",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

fn cell(m: &Option<MetricReport>) -> String {
    m.as_ref().map_or_else(|| "n/a".to_string(), MetricReport::formatted)
}

fn verdicts(r: &Row) -> String {
    match &r.reference {
        None => String::new(),
        Some(reference) => {
            let s = |v: Option<Significance>| v.map_or("n/a", Significance::as_str);
            format!(
                "vs {reference}: AUROC {}, AUPRC {}",
                s(r.auroc_vs_reference),
                s(r.auprc_vs_reference)
            )
        }
    }
}

const TEXT_HEADER: [&str; 5] = ["Dataset", "Model", "AUROC", "AUPRC", "Comparison"];
const CSV_HEADER: [&str; 9] = [
    "table",
    "dataset",
    "model",
    "auroc",
    "auprc",
    "top_auroc",
    "top_auprc",
    "auroc_vs_reference",
    "auprc_vs_reference",
];

fn text_fields(r: &Row) -> [String; 5] {
    let mark = |top: bool| if top { " *" } else { "" };
    [
        r.dataset.clone(),
        r.model.clone(),
        format!("{}{}", cell(&r.auroc), mark(r.top_auroc)),
        format!("{}{}", cell(&r.auprc), mark(r.top_auprc)),
        verdicts(r),
    ]
}

fn render_text(report: &Report) -> String {
    let header = TEXT_HEADER.map(String::from);
    let rows: Vec<[String; 5]> = report.tables.iter().flat_map(|t| &t.rows).map(text_fields).collect();
    let widths: Vec<usize> = (0..TEXT_HEADER.len())
        .map(|c| rows.iter().chain([&header]).map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |l: &[String; 5]| {
        let mut s = String::new();
        for (v, w) in l.iter().zip(&widths) {
            s.push_str(&format!("{v:<w$}  "));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    let mut rows = rows.iter();
    for table in &report.tables {
        out.push_str(&format!("\n## {}\n", table.title));
        if table.rows.is_empty() {
            out.push_str("(no rows)\n");
        }
        for _ in &table.rows {
            out.push_str(&line(rows.next().expect("one line per row")));
        }
        for n in &table.notes {
            out.push_str(&format!("note: {n}\n"));
        }
    }
    if report.tables.iter().any(|t| !t.rows.is_empty()) {
        out.push_str("\n* top estimate within the dataset\n");
    }
    out
}

fn render_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv rendering failed: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for table in &report.tables {
        for r in &table.rows {
            let v = |s: Option<Significance>| s.map_or("", Significance::as_str).to_string();
            w.write_record([
                table.title.clone(),
                r.dataset.clone(),
                r.model.clone(),
                cell(&r.auroc),
                cell(&r.auprc),
                r.top_auroc.to_string(),
                r.top_auprc.to_string(),
                v(r.auroc_vs_reference),
                v(r.auprc_vs_reference),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv rendering failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Renders `report`. Rows keep their order; an empty report renders as the
/// header alone.
pub fn render(report: &Report, format: Format) -> Result<String> {
    match format {
        Format::Text => Ok(render_text(report)),
        Format::Csv => render_csv(report),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// Writes one rendering of `report` to `path`.
pub fn render_table(report: &Report, format: Format, path: &Path) -> Result<()> {
    std::fs::write(path, render(report, format)?).map_err(|e| Error::io(path, e))
}

/// Reads a report back from its JSON rendering.
pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
