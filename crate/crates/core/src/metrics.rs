//! Presentation-attack detection metrics (ISO/IEC 30107-3 style).
//!
//! APCER is the share of attacks accepted as bona fide, BPCER the share of
//! bona fide samples rejected as attacks, HTER their mean. Reports keep the
//! confusion counts; rates are derived from them and only rounded to two
//! decimals when formatted.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// bona fide accepted
    pub true_bona_fide: usize,
    /// bona fide rejected as attack
    pub false_attack: usize,
    /// attack rejected
    pub true_attack: usize,
    /// attack accepted as bona fide
    pub false_bona_fide: usize,
}

impl ConfusionCounts {
    pub fn live(&self) -> usize {
        self.true_bona_fide + self.false_attack
    }

    pub fn attacks(&self) -> usize {
        self.true_attack + self.false_bona_fide
    }

    pub fn total(&self) -> usize {
        self.live() + self.attacks()
    }

    fn add(&mut self, decision: Label, truth: Label) {
        match (truth, decision) {
            (Label::BonaFide, Label::BonaFide) => self.true_bona_fide += 1,
            (Label::BonaFide, Label::Attack) => self.false_attack += 1,
            (Label::Attack, Label::Attack) => self.true_attack += 1,
            (Label::Attack, Label::BonaFide) => self.false_bona_fide += 1,
        }
    }
}

/// Rates in percent. `None` marks a rate whose class is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub partition: String,
    pub counts: Option<ConfusionCounts>,
    pub accuracy: Option<f64>,
    pub apcer: Option<f64>,
    pub bpcer: Option<f64>,
    pub hter: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(partition: impl Into<String>, counts: ConfusionCounts) -> Self {
        let pct = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
        let apcer = pct(counts.false_bona_fide, counts.attacks());
        let bpcer = pct(counts.false_attack, counts.live());
        Self {
            partition: partition.into(),
            counts: Some(counts),
            accuracy: pct(counts.true_bona_fide + counts.true_attack, counts.total()),
            apcer,
            bpcer,
            hter: half_total(apcer, bpcer),
        }
    }

    /// Report built from published rates (no counts available).
    pub fn from_rates(partition: impl Into<String>, apcer: f64, bpcer: f64) -> Self {
        Self {
            partition: partition.into(),
            counts: None,
            accuracy: None,
            apcer: Some(apcer),
            bpcer: Some(bpcer),
            hter: half_total(Some(apcer), Some(bpcer)),
        }
    }
}

fn half_total(apcer: Option<f64>, bpcer: Option<f64>) -> Option<f64> {
    Some((apcer? + bpcer?) / 2.0)
}

pub fn hter(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

pub fn evaluate(decisions: &[Label], labels: &[Label], partition: &str) -> Result<EvalReport> {
    if decisions.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&d, &t) in decisions.iter().zip(labels) {
        counts.add(d, t);
    }
    Ok(EvalReport::from_counts(partition, counts))
}

/// Relative HTER decrease in percent.
pub fn error_reduction(baseline: f64, new: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::Undefined(format!("error reduction against baseline {baseline}")));
    }
    Ok(100.0 * (baseline - new) / baseline)
}

/// Per-sample decisions of one partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartitionOutcome {
    pub ids: Vec<String>,
    pub decisions: Vec<Label>,
    pub labels: Vec<Label>,
}

impl PartitionOutcome {
    pub fn report(&self, partition: &str) -> Result<EvalReport> {
        if self.ids.len() != self.decisions.len() {
            return Err(Error::validation("ids and decisions differ in length"));
        }
        evaluate(&self.decisions, &self.labels, partition)
    }
}

/// Report over the pooled samples of both test partitions.
pub fn overall_report(known: &PartitionOutcome, unknown: &PartitionOutcome) -> Result<EvalReport> {
    let mut seen = HashSet::new();
    for id in known.ids.iter().chain(&unknown.ids) {
        if !seen.insert(id) {
            return Err(Error::validation(format!("sample {id:?} appears in both partitions")));
        }
    }
    let decisions: Vec<Label> = known.decisions.iter().chain(&unknown.decisions).copied().collect();
    let labels: Vec<Label> = known.labels.iter().chain(&unknown.labels).copied().collect();
    evaluate(&decisions, &labels, "overall")
}

pub fn format_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "n/a".to_string(),
    }
}

fn parse_pct(s: &str) -> Result<Option<f64>> {
    if s == "n/a" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::validation(format!("bad rate {s:?}")))
}

pub const REPORT_HEADER: [&str; 7] = ["dataset", "partition", "method", "accuracy", "apcer", "bpcer", "hter"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub report: EvalReport,
}

pub fn reports_to_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.dataset.as_str(),
            r.report.partition.as_str(),
            r.method.as_str(),
            &format_pct(r.report.accuracy),
            &format_pct(r.report.apcer),
            &format_pct(r.report.bpcer),
            &format_pct(r.report.hter),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

pub fn write_reports(rows: &[ReportRow], path: &Path) -> Result<()> {
    std::fs::write(path, reports_to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reports(&text)
}

pub fn parse_reports(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != REPORT_HEADER {
        return Err(Error::Parse { line: 1, message: format!("unexpected report header {header:?}") });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() })?;
        rows.push(ReportRow {
            dataset: rec[0].to_string(),
            method: rec[2].to_string(),
            report: EvalReport {
                partition: rec[1].to_string(),
                counts: None,
                accuracy: parse_pct(&rec[3])?,
                apcer: parse_pct(&rec[4])?,
                bpcer: parse_pct(&rec[5])?,
                hter: parse_pct(&rec[6])?,
            },
        });
    }
    Ok(rows)
}

/// Markdown table with one APCER/BPCER/HTER column group per method and one
/// row per (dataset, partition). Rows ordered by dataset then partition.
pub fn format_method_table(rows: &[ReportRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut grid: BTreeMap<(&str, u8, &str), BTreeMap<&str, &EvalReport>> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.as_str(), partition_rank(&r.report.partition), r.report.partition.as_str());
        grid.entry(key).or_default().insert(&r.method, &r.report);
    }
    let mut out = String::from("| Dataset | Partition |");
    for m in &methods {
        let _ = write!(out, " {m} APCER | {m} BPCER | {m} HTER |");
    }
    out.push_str("\n|---|---|");
    for _ in &methods {
        out.push_str("---:|---:|---:|");
    }
    out.push('\n');
    for ((dataset, _, partition), cells) in &grid {
        let _ = write!(out, "| {dataset} | {partition} |");
        for m in &methods {
            match cells.get(m) {
                Some(rep) => {
                    let _ = write!(out, " {} | {} | {} |", format_pct(rep.apcer), format_pct(rep.bpcer), format_pct(rep.hter));
                }
                None => out.push_str(" | | |"),
            }
        }
        out.push('\n');
    }
    out
}

fn partition_rank(p: &str) -> u8 {
    match p {
        "test_known" => 0,
        "test_unknown" => 1,
        "overall" => 2,
        _ => 3,
    }
}

/// HTER of `baseline` vs `method` on one partition, with error reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionRow {
    pub dataset: String,
    pub baseline_hter: f64,
    pub new_hter: f64,
    pub reduction: Option<f64>,
}

pub fn reduction_rows(rows: &[ReportRow], baseline: &str, method: &str, partition: &str) -> Vec<ReductionRow> {
    let find = |ds: &str, m: &str| {
        rows.iter()
            .find(|r| r.dataset == ds && r.method == m && r.report.partition == partition)
            .and_then(|r| r.report.hter)
    };
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort();
    datasets.dedup();
    datasets
        .into_iter()
        .filter_map(|ds| {
            let (b, n) = (find(ds, baseline)?, find(ds, method)?);
            Some(ReductionRow {
                dataset: ds.to_string(),
                baseline_hter: b,
                new_hter: n,
                reduction: error_reduction(b, n).ok(),
            })
        })
        .collect()
}

pub fn format_reduction_table(rows: &[ReductionRow], baseline: &str, method: &str) -> String {
    let mut out = format!("| Dataset | {baseline} HTER | {method} HTER | Error Reduction (%) |\n|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {} |",
            r.dataset,
            r.baseline_hter,
            r.new_hter,
            format_pct(r.reduction)
        );
    }
    out
}
